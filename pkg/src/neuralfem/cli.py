"""Command line interface: generate, solve, train, evaluate, bench, plot.

Every subcommand exits 0 on success; failures print exactly one line to
stderr of the form ``<category>: <message>`` (categories: config-error,
mesh-error, solver-error, training-error, io-error, input-error,
internal-error) and exit nonzero.  Bad command lines are reported by
argparse itself (exit code 2).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate, fem, mgn, problems, training
from .fem import FEMSolverError
from .mesh import MeshError, read_mesh
from .meshgen import MeshGenerationError
from .mgn import ConfigurationError
from .problems import PROBLEM_TAGS
from .training import TrainingError

log = logging.getLogger("nfem")


def _error_category(exc: BaseException) -> str:
    if isinstance(exc, TrainingError):
        return "training-error"
    if isinstance(exc, ConfigurationError):
        return "config-error"
    if isinstance(exc, (MeshError, MeshGenerationError)):
        return "mesh-error"
    if isinstance(exc, FEMSolverError):
        return "solver-error"
    if isinstance(exc, (FileNotFoundError, IsADirectoryError,
                        PermissionError, NotADirectoryError)):
        return "io-error"
    if isinstance(exc, (ValueError, KeyError, json.JSONDecodeError)):
        return "input-error"
    return "internal-error"


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = problems.build_problem_pool(args.experiment, args.count, args.seed)
    for spec in pool:
        problems.save_problem(spec, out / f"{spec.name}.problem.json")
    family = pool[0].experiment
    schema = mgn.ModelConfig(experiment=family,
                             dim=pool[0].mesh.dim).feature_schema()
    (out / f"schema-{family}.json").write_text(
        json.dumps(schema, indent=2) + "\n")
    sizes = [s.mesh.num_elements for s in pool]
    print(f"gen: wrote {len(pool)} {args.experiment} problems to {out} "
          f"(elements {min(sizes)}..{max(sizes)})")
    return 0


def cmd_fem(args) -> int:
    spec = problems.load_problem(args.problem)
    traj = fem.solve_trajectory(spec)
    fem.write_trajectory(traj, args.out)
    print(f"fem: solved {spec.name or args.problem}: "
          f"{traj.n_steps} steps x {spec.mesh.num_nodes} nodes -> {args.out}")
    return 0


def _load_problem_dir(path: Path) -> list:
    files = sorted(path.glob("*.problem.json"))
    if not files:
        raise FileNotFoundError(f"no *.problem.json files in {path}")
    return [problems.load_problem(f) for f in files]


def cmd_train(args) -> int:
    cfg = training.parse_config(args.config)
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.abs_pos:
        overrides["abs_pos"] = True
    if args.no_noise:
        overrides["no_noise"] = True
    if args.no_global:
        overrides["no_global"] = True
    if args.decoder:
        overrides["mlp_decoder"] = args.decoder == "mlp"
    if args.tbs:
        overrides["n_tb"] = args.tbs
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if args.problems_dir:
        pool = _load_problem_dir(Path(args.problems_dir))
        train_specs, val_specs = training.build_split(cfg, pool=pool)
    else:
        train_specs, val_specs = training.build_split(cfg)
    model, history = training.train(train_specs, val_specs, cfg,
                                    checkpoint_path=args.out,
                                    metrics_path=args.metrics)
    vals = [row[4] for row in history if not np.isnan(row[4])]
    print(f"train: {cfg.experiment}/{cfg.mode} seed {cfg.seed}: "
          f"{len(history)} steps, best val L2 {min(vals):.4f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = mgn.load_checkpoint(args.ckpt)
    specs = _load_problem_dir(Path(args.problems))
    truth_dir = Path(args.truth)
    rows = []
    for spec in specs:
        tfile = truth_dir / f"{spec.name}.traj"
        if not tfile.exists():
            raise FileNotFoundError(f"missing reference trajectory {tfile}")
        truth = fem.read_trajectory(tfile)
        pred = mgn.rollout(spec, model)
        err = evaluate.normalized_l2(pred, truth)
        rows.append((spec.name, spec.mesh.num_nodes, spec.mesh.num_elements,
                     err))
    with open(args.report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("problem", "nodes", "elements", "normalized_l2"))
        writer.writerows(rows)
    mean = float(np.mean([r[3] for r in rows]))
    print(f"eval: {len(rows)} problems, mean normalized L2 {mean:.4f} "
          f"({1e3 * mean:.2f} x1e3) -> {args.report}")
    return 0


def cmd_bench(args) -> int:
    model = mgn.load_checkpoint(args.ckpt)
    spec = problems.load_problem(args.problem)
    result = evaluate.bench(model, spec, repeats=args.repeats)
    for key, value in result.items():
        print(f"{key}={value}")
    return 0


def cmd_plot(args) -> int:
    mesh = read_mesh(args.mesh)
    traj = fem.read_trajectory(args.traj)
    if not 0 <= args.step < traj.data.shape[0]:
        raise ValueError(f"step {args.step} outside trajectory "
                         f"(0..{traj.data.shape[0] - 1})")
    evaluate.plot_field(mesh, traj.data[args.step], args.out,
                        title=f"step {args.step} (t = {args.step * traj.dt:g})")
    print(f"plot: step {args.step} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfem",
        description="Neural surrogate workbench for transient heat "
                    "conduction on unstructured meshes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="sample problems and write them to disk")
    p.add_argument("--experiment", required=True, choices=PROBLEM_TAGS)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fem", help="reference implicit-Euler solve")
    p.add_argument("--problem", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fem)

    p = sub.add_parser("train", help="train a surrogate model")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("pi", "data"))
    p.add_argument("--abs-pos", action="store_true")
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--no-global", action="store_true")
    p.add_argument("--decoder", choices=("cnn", "mlp"))
    p.add_argument("--tbs", type=int, choices=(10, 20, 50))
    p.add_argument("--seed", type=int)
    p.add_argument("--problems-dir")
    p.add_argument("--metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="normalized L2 report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--problems", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="rollout vs reference solver timing")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--problem", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="render one trajectory step as SVG")
    p.add_argument("--traj", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:
        print(f"{_error_category(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
