#!/usr/bin/env python3
"""Ablation sweep: train one repetition per architecture variant.

Starts from a baseline configuration and retrains with each requested
variant toggled (absolute positions, no input noise, no global stream,
MLP decoder, bundle size 10/50), then prints a table of validation
errors so the contribution of each component can be read off directly.

    python3 scripts/run_ablations.py --epochs 100 --n-problems 22 \
        --tags abs_pos,no_noise --outdir runs/ablations
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from neuralfem import evaluate, fem, mgn, training  # noqa: E402

log = logging.getLogger("run_ablations")


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--experiment", default="exp1",
                    choices=("exp1", "exp2", "exp3"))
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--n-problems", type=int, default=100)
    ap.add_argument("--pool-seed", type=int, default=2024)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tags", default=",".join(training.ABLATION_TAGS),
                    help="comma-separated subset of: "
                         + ", ".join(training.ABLATION_TAGS))
    ap.add_argument("--outdir", default="runs/ablations")
    return ap.parse_args(argv)


def train_variant(cfg, outdir: Path, label: str):
    train_specs, val_specs = training.build_split(cfg)
    t0 = time.perf_counter()
    model, history = training.train(
        train_specs, val_specs, cfg,
        checkpoint_path=outdir / f"{label}.ckpt",
        metrics_path=outdir / f"{label}.metrics.csv")
    errors = [evaluate.normalized_l2(mgn.rollout(s, model),
                                     fem.solve_trajectory(s))
              for s in val_specs]
    log.info("%s: val L2 x1e3 = %.2f (%.1f min)", label,
             1e3 * sum(errors) / len(errors),
             (time.perf_counter() - t0) / 60)
    return errors


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s: %(message)s")
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    tags = [t.strip() for t in args.tags.split(",") if t.strip()]
    base = training.TrainConfig(
        experiment=args.experiment, epochs=args.epochs,
        n_problems=args.n_problems, pool_seed=args.pool_seed,
        seed=args.seed)

    per_run = {("baseline", args.experiment, args.seed):
               train_variant(base, outdir, "baseline")}
    for tag in tags:
        cfg = training.run_ablation(replace(base), tag)
        per_run[(tag, args.experiment, args.seed)] = train_variant(
            cfg, outdir, tag)

    report = evaluate.compare(per_run, provenance={
        "experiment": args.experiment, "epochs": args.epochs,
        "ablations": ",".join(tags)})
    text = report.format()
    print(text)
    (outdir / "report.txt").write_text(text + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
