#!/usr/bin/env python3
"""End-to-end experiment driver: pool -> training repetitions -> report.

Generates (or loads) a problem pool for one experiment family, trains the
requested number of repetitions in both physics-informed and supervised
modes (or a subset), evaluates every repetition on its validation split,
and prints the aggregated mean +- std table (errors displayed x1e3).

Example, a small smoke-scale run on one core:

    python3 scripts/run_experiment.py --experiment exp1 --epochs 100 \
        --n-problems 22 --repetitions 2 --modes pi --outdir runs/exp1-smoke

Paper-scale settings (hours to days on one core):

    python3 scripts/run_experiment.py --experiment exp1 --epochs 500 \
        --n-problems 100 --repetitions 5 --modes pi,data --outdir runs/exp1
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from neuralfem import evaluate, fem, mgn, training  # noqa: E402

log = logging.getLogger("run_experiment")


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--experiment", default="exp1",
                    choices=("exp1", "exp2", "exp3"))
    ap.add_argument("--modes", default="pi,data",
                    help="comma-separated subset of {pi,data}")
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--n-problems", type=int, default=100)
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--pool-seed", type=int, default=2024)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--n-tb", type=int, default=20)
    ap.add_argument("--latent", type=int, default=128)
    ap.add_argument("--n-blocks", type=int, default=12)
    ap.add_argument("--outdir", default="runs/experiment")
    return ap.parse_args(argv)


def run_repetition(cfg, outdir: Path, mode: str, rep: int):
    """Train one repetition and return its per-problem validation errors."""
    cfg = replace(cfg, mode=mode, seed=rep)
    train_specs, val_specs = training.build_split(cfg)
    tag = f"{cfg.experiment}-{mode}-rep{rep}"
    ckpt = outdir / f"{tag}.ckpt"
    metrics = outdir / f"{tag}.metrics.csv"
    training.save_config(cfg, outdir / f"{tag}.config")

    t0 = time.perf_counter()
    model, history = training.train(train_specs, val_specs, cfg,
                                    checkpoint_path=ckpt,
                                    metrics_path=metrics)
    log.info("%s: %d steps in %.1f min", tag, len(history),
             (time.perf_counter() - t0) / 60)

    errors = []
    for spec in val_specs:
        truth = fem.solve_trajectory(spec)
        pred = mgn.rollout(spec, model)
        errors.append(evaluate.normalized_l2(pred, truth))
    return errors


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s: %(message)s")
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    base = training.TrainConfig(
        experiment=args.experiment, epochs=args.epochs,
        batch_size=args.batch_size, n_tb=args.n_tb,
        n_problems=args.n_problems, pool_seed=args.pool_seed,
        latent=args.latent, n_blocks=args.n_blocks,
        repetitions=args.repetitions)

    per_run = {}
    for mode in modes:
        for rep in range(args.repetitions):
            errors = run_repetition(base, outdir, mode, rep)
            per_run[(mode, args.experiment, rep)] = errors

    report = evaluate.compare(per_run, provenance={
        "experiment": args.experiment, "epochs": args.epochs,
        "n_problems": args.n_problems, "pool_seed": args.pool_seed})
    text = report.format()
    print(text)
    (outdir / "report.txt").write_text(text + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
