"""Physics-informed and data-driven training of the mesh surrogate.

One optimization window covers N_TB time steps: build graphs from the
current window input (with training noise), run the model, evaluate the
loss (element-residual physics loss or supervised MSE), take one Adam
step, then advance the window using detached predictions (pi mode) or
ground-truth states (data mode).  The learning rate decays exponentially
per optimizer step; validation rollouts select the retained checkpoint.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import diff, fem, mgn
from .evaluate import normalized_l2
from .problems import (ProblemSpec, build_problem_pool, initial_condition,
                       resample_initial_conditions, train_val_split)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ABLATION_TAGS = ("abs_pos", "no_noise", "no_global", "mlp_decoder",
                 "tbs10", "tbs50")

METRICS_COLUMNS = ("epoch", "step", "lr", "train_loss", "val_L2_mean")


class TrainingError(RuntimeError):
    """Aborted run: divergence, NaN residuals, or bad configuration."""


@dataclass
class TrainConfig:
    """Everything one training repetition depends on."""

    experiment: str = "exp1"
    mode: str = "pi"  # pi: element-residual loss; data: supervised MSE
    epochs: int = 500
    batch_size: int = 2
    lr_start: float = 0.0  # 0 selects the per-experiment default
    lr_end: float = 1e-5
    clip_norm: float = 1.0
    n_tb: int = 20
    noise_sigma: float = -1.0  # negative selects 0.01 x temperature scale
    seed: int = 0
    repetitions: int = 5
    n_problems: int = 100
    pool_seed: int = 2024
    latent: int = 128
    n_blocks: int = 12
    validate_every: int = 10
    divergence_limit: float = 1e12
    abs_pos: bool = False
    no_noise: bool = False
    no_global: bool = False
    mlp_decoder: bool = False

    def __post_init__(self):
        if self.mode not in ("pi", "data"):
            raise TrainingError(f"unknown training mode {self.mode!r}")
        if self.epochs < 1:
            raise TrainingError("epochs must be at least 1")
        if self.lr_start == 0.0:
            self.lr_start = 1e-4 if self.experiment == "exp3" else 1e-3
        if self.lr_end > self.lr_start:
            raise TrainingError("lr_end must not exceed lr_start")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be positive")


def save_config(cfg: TrainConfig, path: str | Path):
    """Flat key=value text file, one field per line."""
    lines = [f"{k}={v}" for k, v in asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_config(path: str | Path) -> TrainConfig:
    """Inverse of :func:`save_config`; '#' starts a comment line."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TrainingError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise TrainingError(f"{path}:{ln}: unknown config key {key!r}")
        kind = types[key]
        if kind == "bool":
            if value.lower() not in ("true", "false", "0", "1"):
                raise TrainingError(f"{path}:{ln}: bad boolean {value!r}")
            kwargs[key] = value.lower() in ("true", "1")
        elif kind == "int":
            kwargs[key] = int(value)
        elif kind == "float":
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return TrainConfig(**kwargs)


def learning_rate(step: int, total_steps: int, lr_start: float,
                  lr_end: float) -> float:
    """Exponential decay per optimizer step, exact at both endpoints."""
    if total_steps <= 1:
        return lr_start
    frac = step / (total_steps - 1)
    return lr_start * (lr_end / lr_start) ** frac


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: list, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``.

    Returns the pre-clip norm.  Gradients are rebound, not mutated (they
    may share storage; see the autodiff module note).
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def physics_loss(form: fem.ResidualForm, U, T_old: np.ndarray,
                 times: np.ndarray):
    """Mean squared free-node residual over the bundle (on the tape)."""
    res = form.residuals(U, T_old, times)
    if np.isnan(res.data).any():
        raise TrainingError(
            f"NaN residual on problem {form.spec.name!r}: "
            f"max |U| = {np.abs(U.data).max():.3e}")
    return diff.reduce_mean(diff.square(res))


def data_loss(U, truth: np.ndarray, free: np.ndarray):
    """Mean squared prediction error over free nodes and bundle steps."""
    err = diff.gather(U - diff.tensor(truth), free, axis=1)
    return diff.reduce_mean(diff.square(err))


def windows_per_trajectory(n_steps: int, n_tb: int) -> int:
    if n_steps % n_tb:
        log.warning("horizon %d not divisible by bundle %d; the tail is "
                    "not trained on", n_steps, n_tb)
    return n_steps // n_tb


def steps_per_epoch(n_train: int, batch_size: int, n_steps: int,
                    n_tb: int) -> int:
    return math.ceil(n_train / batch_size) * windows_per_trajectory(n_steps, n_tb)


def build_split(cfg: TrainConfig, mesh_cfg=None,
                pool: list | None = None) -> tuple[list, list]:
    """Geometry pool fixed by pool_seed; split and ICs re-drawn per seed."""
    if pool is None:
        pool = build_problem_pool(cfg.experiment, cfg.n_problems,
                                  cfg.pool_seed, mesh_cfg=mesh_cfg)
    if cfg.experiment == "exp1":
        pool = [resample_initial_conditions(
            s, np.random.default_rng([cfg.seed, 0x1C, i]))
            for i, s in enumerate(pool)]
    tr, va = train_val_split(len(pool), cfg.seed)
    return [pool[i] for i in tr], [pool[i] for i in va]


def _model_config(cfg: TrainConfig, spec: ProblemSpec) -> mgn.ModelConfig:
    return mgn.ModelConfig(
        experiment=spec.experiment, dim=spec.mesh.dim, latent=cfg.latent,
        n_blocks=cfg.n_blocks, n_tb=cfg.n_tb,
        temp_scale=spec.constants["temp_scale"], abs_pos=cfg.abs_pos,
        no_global=cfg.no_global, mlp_decoder=cfg.mlp_decoder)


def _snapshot(model: mgn.ModelParams) -> mgn.ModelParams:
    return mgn.ModelParams(
        config=model.config,
        params={k: diff.parameter(p.data.copy())
                for k, p in model.params.items()})


class _ProblemState:
    """Per-problem training caches: residual form, truth, initial state."""

    def __init__(self, spec: ProblemSpec, mode: str):
        self.spec = spec
        self.free = spec.free_nodes()
        self.form = fem.ResidualForm(spec) if mode == "pi" else None
        self.truth = fem.solve_trajectory(spec).data if mode == "data" else None
        start = initial_condition(spec)
        start[spec.dirichlet_nodes()] = spec.dirichlet_values
        self.start = start


def train(train_specs: list, val_specs: list, cfg: TrainConfig,
          checkpoint_path: str | Path | None = None,
          metrics_path: str | Path | None = None):
    """One training repetition.

    Returns ``(best_model, history)`` where history is a list of metric
    rows (one per optimizer step, columns as in METRICS_COLUMNS).  The
    best-validation checkpoint is also written to ``checkpoint_path``
    when given, and the metrics to ``metrics_path`` (CSV).
    """
    if not train_specs or not val_specs:
        raise TrainingError("both train and validation problems are required")
    spec0 = train_specs[0]
    sigma = cfg.noise_sigma
    if sigma < 0.0:
        sigma = 0.01 * spec0.constants["temp_scale"]
    if cfg.no_noise:
        sigma = 0.0

    model = mgn.init_params(_model_config(cfg, spec0),
                            np.random.default_rng([cfg.seed, 0xA17]))
    log.info("training %s/%s: %d parameters, %d train / %d val problems",
             cfg.experiment, cfg.mode, model.param_count(),
             len(train_specs), len(val_specs))
    rng = np.random.default_rng([cfg.seed, 0xB0B])
    opt = Adam(model.parameters())

    states = [_ProblemState(s, cfg.mode) for s in train_specs]
    val_truth = [fem.solve_trajectory(s) for s in val_specs]

    n_windows = windows_per_trajectory(spec0.n_steps, cfg.n_tb)
    if n_windows < 1:
        raise TrainingError("bundle longer than the trajectory")
    per_epoch = steps_per_epoch(len(train_specs), cfg.batch_size,
                                spec0.n_steps, cfg.n_tb)
    total_steps = cfg.epochs * per_epoch

    def validate() -> float:
        errs = []
        for spec, truth in zip(val_specs, val_truth):
            pred = mgn.rollout(spec, model)
            errs.append(normalized_l2(pred, truth))
        return float(np.mean(errs))

    history = []
    best_err = math.inf
    best_model = _snapshot(model)
    step = 0
    val_err = math.nan
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(states))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            group = [states[i] for i in order[lo:lo + cfg.batch_size]]
            current = [ps.start.copy() for ps in group]
            for w in range(n_windows):
                t_in = w * cfg.n_tb * spec0.dt
                bundle_times = spec0.dt * (w * cfg.n_tb
                                           + np.arange(1, cfg.n_tb + 1))
                graphs = [mgn.build_graph(ps.spec, cur, t_in, mode=cfg.mode,
                                          noise_sigma=sigma, rng=rng,
                                          abs_pos=cfg.abs_pos)
                          for ps, cur in zip(group, current)]
                batch = mgn.batch_graphs(graphs)
                U = mgn.forward(batch, model, np.concatenate(current))
                terms = []
                for ps, cur, (a, b) in zip(group, current, batch.node_slices):
                    Up = diff.gather(U, np.arange(a, b), axis=1)
                    if cfg.mode == "pi":
                        terms.append(physics_loss(ps.form, Up, cur,
                                                  bundle_times))
                    else:
                        rows = slice(w * cfg.n_tb + 1, (w + 1) * cfg.n_tb + 1)
                        terms.append(data_loss(Up, ps.truth[rows], ps.free))
                loss = diff.add_n(*terms) * (1.0 / len(terms)) \
                    if len(terms) > 1 else terms[0]
                loss_value = float(loss.data)
                if not math.isfinite(loss_value) \
                        or loss_value > cfg.divergence_limit:
                    raise TrainingError(
                        f"divergence at epoch {epoch} step {step}: "
                        f"loss = {loss_value:.3e}")
                for p in model.parameters():
                    p.zero_grad()
                diff.backward(loss)
                lr = learning_rate(step, total_steps, cfg.lr_start, cfg.lr_end)
                clip_gradients(model.parameters(), cfg.clip_norm)
                opt.step(lr)
                step += 1
                epoch_losses.append(loss_value)
                history.append((epoch, step, lr, loss_value, val_err))
                for ps, cur, (a, b) in zip(group, current, batch.node_slices):
                    if cfg.mode == "pi":
                        cur[:] = U.data[-1, a:b]
                    else:
                        cur[:] = ps.truth[(w + 1) * cfg.n_tb]
        if epoch % cfg.validate_every == 0 or epoch == cfg.epochs:
            val_err = validate()
            if history:  # attribute the validation to the step just taken
                history[-1] = history[-1][:4] + (val_err,)
            if val_err < best_err:
                best_err = val_err
                best_model = _snapshot(model)
                if checkpoint_path is not None:
                    mgn.save_checkpoint(best_model, checkpoint_path)
            log.info("epoch %d/%d: train loss %.3e, val L2 %.4f (best %.4f)",
                     epoch, cfg.epochs, float(np.mean(epoch_losses)),
                     val_err, best_err)

    if metrics_path is not None:
        write_metrics(history, metrics_path)
    return best_model, history


def write_metrics(history: list, path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(history)


def run_ablation(base: TrainConfig, tag: str) -> TrainConfig:
    """Config variant for one named ablation."""
    if tag == "abs_pos":
        return replace(base, abs_pos=True)
    if tag == "no_noise":
        return replace(base, no_noise=True)
    if tag == "no_global":
        return replace(base, no_global=True)
    if tag == "mlp_decoder":
        return replace(base, mlp_decoder=True)
    if tag == "tbs10":
        return replace(base, n_tb=10)
    if tag == "tbs50":
        return replace(base, n_tb=50)
    raise TrainingError(f"unknown ablation {tag!r} (choose from "
                        f"{', '.join(ABLATION_TAGS)})")
