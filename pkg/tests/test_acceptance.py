"""Acceptance gate: ten end-to-end checks covering solver fidelity,
gradient integrity, decoder arithmetic, desk-scale training in both
modes, structural invariants, generalization, the nonlinear path, and
the timing harness.

Each criterion prints exactly one `[acceptance] criterion N: PASS/FAIL`
line (visible even under pytest capture).  The two training criteria
run a real 100-epoch repetition each and take ~30 minutes apiece on one
CPU core; everything else finishes in a few minutes.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

import test_fem
import test_mgn
from neuralfem import diff, evaluate, fem, meshgen, mgn, problems, training
from neuralfem.mesh import DIRICHLET, Facet, Mesh, tag_nodes_from_facets

pytestmark = pytest.mark.acceptance


def _announce(capsys, criterion: int, ok: bool, detail: str):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {criterion:2d}: "
              f"{'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# --- desk-scale training runs, shared between criteria 5, 6 and 8 -----

_DESK = {}
_DESK_EPOCHS = 100
_DESK_POOL = 22  # 75/25 split -> 16 train / 6 validation problems


def _desk_mesh_cfg():
    # full-scale mesh sampling truncated at the 300-element cap, so the
    # run keeps descending for all 100 epochs instead of idling on the
    # converged plateau where the loss curve is noise-dominated
    return meshgen.LShapeConfig(element_target=(230, 300),
                                element_window=(155, 300))


def _desk_config(mode: str) -> training.TrainConfig:
    return training.TrainConfig(experiment="exp1", mode=mode,
                                epochs=_DESK_EPOCHS, n_problems=_DESK_POOL,
                                pool_seed=2024, seed=0, validate_every=10)


def _desk_run(mode: str):
    """Train (once per mode) and cache model, history and wall time."""
    if mode not in _DESK:
        cfg = _desk_config(mode)
        tr, va = training.build_split(cfg, mesh_cfg=_desk_mesh_cfg())
        assert len(tr) == 16 and len(va) == 6
        assert max(s.mesh.num_elements for s in tr + va) <= 300
        t0 = time.perf_counter()
        model, hist = training.train(tr, va, cfg)
        minutes = (time.perf_counter() - t0) / 60.0
        _DESK[mode] = (model, hist, tr, va, minutes)
    return _DESK[mode]


def _epoch_means(history):
    by_epoch = {}
    for epoch, _step, _lr, loss, _val in history:
        by_epoch.setdefault(epoch, []).append(loss)
    return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def _smoothed(means, window=10):
    return [float(np.mean(means[i:i + window]))
            for i in range(0, len(means), window)]


def _best_validation(history):
    vals = [row[4] for row in history if not math.isnan(row[4])]
    assert vals, "no validation measurements recorded"
    return min(vals)


def _persistence_baseline(cfg, val_specs):
    zero = mgn.init_params(training._model_config(cfg, val_specs[0]),
                           np.random.default_rng(0))
    errs = [evaluate.normalized_l2(mgn.rollout(s, zero),
                                   fem.solve_trajectory(s))
            for s in val_specs]
    return float(np.mean(errs))


# --- criterion 1: residual duality --------------------------------------


def test_criterion_01_fem_trajectory_zeroes_the_physics_loss(capsys):
    """Plugging the reference solver's own trajectory into the physics
    loss must give (numerically) zero: <= 1e-16 of the persistence loss
    on at least 20 random problems of the first family."""
    t0 = time.perf_counter()
    pool = problems.build_problem_pool("exp1", 20, seed=321)
    n_tb = 20
    worst = 0.0
    for spec in pool:
        short = dataclasses.replace(spec, n_steps=n_tb)
        truth = fem.solve_trajectory(short).data
        form = fem.ResidualForm(short)
        times = short.times[1:]
        loss_fem = float(training.physics_loss(
            form, diff.tensor(truth[1:]), truth[0], times).data)
        loss_pers = float(training.physics_loss(
            form, diff.tensor(np.tile(truth[0], (n_tb, 1))), truth[0],
            times).data)
        assert loss_pers > 0.0
        worst = max(worst, loss_fem / loss_pers)
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-16 and seconds < 60.0
    _announce(capsys, 1, ok,
              f"max loss(FEM)/loss(persistence) = {worst:.2e} over "
              f"{len(pool)} problems (<= 1e-16), {seconds:.0f}s (< 60s)")


# --- criterion 2: manufactured-solution convergence ----------------------


def test_criterion_02_manufactured_solution_convergence(capsys):
    """Halving h cuts the terminal error by 4 +- 20% at second order in
    space; halving dt cuts it by 2 +- 20% at first order in time."""
    t0 = time.perf_counter()
    errs_h = [test_fem._manufactured_error(n, dt=2e-4, t_end=0.02)
              for n in (8, 16, 32)]
    ratios_h = [a / b for a, b in zip(errs_h, errs_h[1:])]
    errs_t = [test_fem._manufactured_error(48, dt, t_end=0.2)
              for dt in (0.04, 0.02)]
    ratio_t = errs_t[0] / errs_t[1]
    seconds = time.perf_counter() - t0
    ok = (all(3.2 <= r <= 4.8 for r in ratios_h)
          and 1.6 <= ratio_t <= 2.4 and seconds < 300.0)
    _announce(capsys, 2, ok,
              f"spatial ratios {[f'{r:.2f}' for r in ratios_h]} "
              f"(in [3.2, 4.8]), temporal ratio {ratio_t:.2f} "
              f"(in [1.6, 2.4]), {seconds:.0f}s (< 300s)")


# --- criterion 3: gradient integrity on a ten-element mesh ---------------


def _decagon_spec():
    """Fan triangulation of a regular decagon: exactly 10 elements,
    one free interior node, Dirichlet boundary."""
    k = 10
    ang = 2.0 * np.pi * np.arange(k) / k
    nodes = np.vstack([[0.0, 0.0], np.c_[np.cos(ang), np.sin(ang)]])
    elements = np.array([[0, 1 + i, 1 + (i + 1) % k] for i in range(k)])
    facets = [Facet((1 + i, 1 + (i + 1) % k), DIRICHLET) for i in range(k)]
    m = Mesh(2, nodes, elements, facets, tag_nodes_from_facets(k + 1, facets))
    return problems.ProblemSpec(
        experiment="exp1", mesh=m, ic_params=np.zeros((0, 5)),
        material_params=np.zeros((0, 5)), vf0=0.5,
        constants={"alpha": 0.05, "t0": 1.0, "temp_scale": 1.0},
        dirichlet_values=np.linspace(0.8, 1.2, k), neumann_flux={})


def test_criterion_03_loss_gradient_matches_finite_differences(capsys):
    t0 = time.perf_counter()
    spec = _decagon_spec()
    assert spec.mesh.num_elements == 10
    state = 1.0 + 0.5 * np.exp(-2.0 * np.sum(spec.mesh.nodes ** 2, axis=1))
    state[spec.dirichlet_nodes()] = spec.dirichlet_values
    form = fem.ResidualForm(spec)
    times = spec.times[1:5]
    cfg = mgn.ModelConfig(experiment="exp1", dim=2, latent=64, n_blocks=2,
                          n_tb=4, temp_scale=1.0)
    model = test_mgn._randomize(mgn.init_params(cfg, np.random.default_rng(5)),
                                scale=0.1)
    batch = mgn.batch_graphs([mgn.build_graph(spec, state, 0.0)])

    def loss_value():
        with diff.no_grad():
            U = mgn.forward(batch, model, state)
            return float(training.physics_loss(form, U, state, times).data)

    for p in model.parameters():
        p.zero_grad()
    loss = training.physics_loss(form, mgn.forward(batch, model, state),
                                 state, times)
    diff.backward(loss)

    names = sorted(model.params)
    n_probes = 60
    eps = 1e-6
    worst = 0.0
    for i in range(n_probes):
        p = model.params[names[i % len(names)]]
        idx = np.unravel_index((i * 7919) % p.data.size, p.data.shape)
        keep = p.data[idx]
        p.data[idx] = keep + eps
        up = loss_value()
        p.data[idx] = keep - eps
        dn = loss_value()
        p.data[idx] = keep
        fd = (up - dn) / (2.0 * eps)
        an = p.grad[idx] if p.grad is not None else 0.0
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-4 and seconds < 60.0
    _announce(capsys, 3, ok,
              f"max relative gradient error {worst:.2e} over {n_probes} "
              f"probed parameters (<= 1e-4), {seconds:.0f}s (< 60s)")


# --- criterion 4: bundle decoder arithmetic -------------------------------


def test_criterion_04_decoder_emits_exact_bundle_sizes(capsys):
    geometry = {}
    emitted = {}
    spec = test_mgn._square_spec(3)
    state = np.zeros(spec.mesh.num_nodes)
    state[spec.dirichlet_nodes()] = spec.dirichlet_values
    for n_tb in (10, 20, 50):
        cfg = mgn.ModelConfig(experiment="exp1", dim=2, latent=128,
                              n_blocks=1, n_tb=n_tb, temp_scale=1.0)
        geometry[n_tb] = cfg.conv_geometry()
        model = mgn.init_params(cfg, np.random.default_rng(n_tb))
        out = mgn.predict_bundle(spec, model, state, 0.0)
        emitted[n_tb] = out.shape[0]
        assert out.shape == (n_tb, spec.mesh.num_nodes)
    ok = (geometry[20] == (4, 29, 10) and emitted[20] == 20
          and geometry[10] == (4, 29, 20) and emitted[10] == 10
          and geometry[50] == (1, 114, 65) and emitted[50] == 50)
    _announce(capsys, 4, ok,
              "latent 128: kernel 15 stride 4 then kernel "
              f"{geometry[20][2]} -> {emitted[20]} steps; bundle 10 -> "
              f"{emitted[10]}, bundle 50 -> {emitted[50]} (stride "
              f"{geometry[50][0]}, kernel {geometry[50][2]})")


# --- criterion 5: desk-scale physics-informed training --------------------


def test_criterion_05_physics_informed_training_desk_scale(capsys):
    """16 training problems on meshes capped at 300 elements, 100
    epochs, one seed, no labels: validation normalized L2 <= 0.15 with
    a monotone-decreasing 10-epoch-smoothed training loss, within 60
    minutes on one core."""
    model, hist, tr, va, minutes = _desk_run("pi")
    best_val = _best_validation(hist)
    blocks = _smoothed(_epoch_means(hist))
    monotone = all(b <= a for a, b in zip(blocks, blocks[1:]))
    baseline = _persistence_baseline(_desk_config("pi"), va)
    ok = best_val <= 0.15 and monotone and minutes <= 60.0
    _announce(capsys, 5, ok,
              f"val L2 {best_val:.4f} (<= 0.15; persistence baseline "
              f"{baseline:.4f}, improvement {baseline / best_val:.1f}x), "
              f"smoothed loss [{', '.join(f'{b:.2e}' for b in blocks)}] "
              f"monotone={monotone}, {minutes:.0f} min (<= 60)")


# --- criterion 6: supervised mode reaches parity --------------------------


def test_criterion_06_supervised_mode_parity(capsys):
    model_pi, _, _, _, _ = _desk_run("pi")
    model_da, hist, _tr, va, minutes = _desk_run("data")
    best_val = _best_validation(hist)
    same_arch = (dataclasses.asdict(model_pi.config)
                 == dataclasses.asdict(model_da.config))
    spec = va[0]
    roll_pi = mgn.rollout(spec, model_pi)
    roll_da = mgn.rollout(spec, model_da)
    same_path = (roll_pi.data.shape == roll_da.data.shape
                 and roll_pi.dt == roll_da.dt)
    ok = best_val <= 0.15 and minutes <= 60.0 and same_arch and same_path
    _announce(capsys, 6, ok,
              f"data-mode val L2 {best_val:.4f} (<= 0.15), {minutes:.0f} "
              f"min (<= 60), identical architecture={same_arch}, "
              f"identical rollout path={same_path}")


# --- criterion 7: structural invariants -----------------------------------


def test_criterion_07_structural_invariants(capsys):
    t0 = time.perf_counter()
    spec = test_mgn._exp1_spec(6)
    state = problems.initial_condition(spec)
    state[spec.dirichlet_nodes()] = spec.dirichlet_values
    model = test_mgn._randomize(test_mgn._small_model())

    out = mgn.predict_bundle(spec, model, state, 0.0)
    perm = np.random.default_rng(9).permutation(spec.mesh.num_nodes)
    spec_p, state_p = test_mgn._permuted_spec(spec, state, perm)
    e_perm = float(np.max(np.abs(
        mgn.predict_bundle(spec_p, model, state_p, 0.0) - out[:, perm])))

    moved = dataclasses.replace(
        spec, mesh=Mesh(2, spec.mesh.nodes + np.array([17.0, -4.0]),
                        spec.mesh.elements, spec.mesh.boundary_facets,
                        spec.mesh.node_tags))
    e_trans = float(np.max(np.abs(
        mgn.predict_bundle(moved, model, state, 0.0) - out)))

    roll = mgn.rollout(spec, model)
    dn = spec.dirichlet_nodes()
    e_dir = float(np.max(np.abs(roll.data[:, dn]
                                - spec.dirichlet_values[None, :])))

    const = 0.7
    sq = test_mgn._square_spec(3)
    sq = dataclasses.replace(
        sq, dirichlet_values=np.full(len(sq.dirichlet_nodes()), const))
    n = sq.mesh.num_nodes
    flat = np.full(n, const)
    form = fem.ResidualForm(sq)
    e_const_res = float(np.max(np.abs(form.residuals(
        diff.tensor(np.tile(flat, (2, 1))), flat, sq.times[1:3]).data)))
    ws = fem.Workspace(sq)
    e_const_step = float(np.max(np.abs(ws.step_linear(flat.copy(), sq.dt)
                                       - const)))

    deterministic = np.array_equal(roll.data, mgn.rollout(spec, model).data)
    seconds = time.perf_counter() - t0
    ok = (e_perm <= 1e-12 and e_trans <= 1e-12 and e_dir == 0.0
          and e_const_res <= 1e-12 and e_const_step <= 1e-12
          and deterministic and seconds < 300.0)
    _announce(capsys, 7, ok,
              f"permutation {e_perm:.1e}, translation {e_trans:.1e} "
              f"(<= 1e-12), Dirichlet rows exact ({e_dir:.1e}), constant "
              f"state residual {e_const_res:.1e} / step drift "
              f"{e_const_step:.1e} (<= 1e-12), deterministic="
              f"{deterministic}, {seconds:.0f}s (< 300s)")


# --- criterion 8: generalization smoke test --------------------------------


def test_criterion_08_generalization_to_large_sheet(capsys):
    model, _, _, _, _ = _desk_run("pi")
    t0 = time.perf_counter()
    spec = problems.sample_problem("sheet10", np.random.default_rng(2024),
                                   name="sheet10-smoke")
    assert spec.mesh.num_elements >= 5000  # ~1e4-element target
    truth = fem.solve_trajectory(spec)
    pred = mgn.rollout(spec, model)
    err = evaluate.normalized_l2(pred, truth)
    report = evaluate.compare({("pi", "exp1", 0): [err]},
                              provenance={"problem": spec.name})
    row = report.rows[0]
    seconds = time.perf_counter() - t0
    ok = (pred.data.shape == truth.data.shape and np.isfinite(err)
          and len(report.rows) == 1 and np.isfinite(row.mu)
          and bool(report.format()))
    _announce(capsys, 8, ok,
              f"rolled out on {spec.mesh.num_elements} elements, "
              f"normalized L2 {err:.4f} (finite; no accuracy gate), "
              f"report row mu={row.mu * 1e3:.2f} x1e3, {seconds:.0f}s")


# --- criterion 9: nonlinear reference path ----------------------------------


def test_criterion_09_nonlinear_steps_and_unit_values(capsys):
    spec = problems.sample_problem("exp2", np.random.default_rng(11))
    truth = fem.solve_trajectory(spec).data
    form = fem.ResidualForm(spec)
    n_tb = 20
    worst = 0.0
    for w in range(spec.n_steps // n_tb):
        rows = slice(w * n_tb + 1, (w + 1) * n_tb + 1)
        r = form.residuals(diff.tensor(truth[rows]), truth[w * n_tb],
                           spec.times[rows])
        worst = max(worst, float(np.max(np.abs(r.data))))
    alpha = problems.diffusivity(0.5)
    q = problems.source_term(100.0, 0.0, 0.5)
    ok = (worst <= 1e-6 and abs(alpha - 1.0 / 55.0) <= 1e-12
          and abs(q - 80.0) <= 1e-12)
    _announce(capsys, 9, ok,
              f"max assembled residual over all steps {worst:.2e} "
              f"(<= 1e-6), alpha(0.5) = {alpha:.12f} (1/55), "
              f"q(100, 0, 0.5) = {q:.10f} (80)")


# --- criterion 10: timing harness -------------------------------------------


def test_criterion_10_timing_harness_reports_ratio(capsys):
    spec = problems.sample_problem("exp2", np.random.default_rng(3),
                                   name="exp2-bench")
    cfg = mgn.ModelConfig(experiment="exp2", dim=2, latent=128, n_blocks=12,
                          n_tb=20, temp_scale=spec.constants["temp_scale"])
    model = mgn.init_params(cfg, np.random.default_rng(0))
    result = evaluate.bench(model, spec)
    ok = (result["rollout_seconds"] > 0.0 and result["fem_seconds"] > 0.0
          and np.isfinite(result["fem_over_rollout"])
          and result["elements"] == spec.mesh.num_elements)
    _announce(capsys, 10, ok,
              f"{result['elements']} elements: rollout "
              f"{result['rollout_seconds']:.2f}s vs reference solve "
              f"{result['fem_seconds']:.2f}s, ratio "
              f"{result['fem_over_rollout']:.2f} (informational)")
