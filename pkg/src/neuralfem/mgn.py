"""Graph construction and the message-passing surrogate model.

The mesh becomes a directed graph (both directions of every mesh edge plus
one self-loop per node).  Features follow the per-experiment layout; the
model is a MeshGraphNet-style encode/process/decode stack with a global
feature stream and a temporal-bundling decoder emitting N_TB time steps
per call.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import diff
from .mesh import DIRICHLET, NEUMANN
from .problems import ProblemSpec, material_values

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NFCKPT1"


class ConfigurationError(ValueError):
    """Model configuration inconsistent with its inputs."""


@dataclass
class ModelConfig:
    """Architecture and ablation switches."""

    experiment: str  # exp1 | exp2 | exp3
    dim: int = 2
    latent: int = 128
    n_blocks: int = 12
    n_tb: int = 20
    temp_scale: float = 1.0
    abs_pos: bool = False
    no_global: bool = False
    mlp_decoder: bool = False
    offset_output: bool = True

    @property
    def node_feat_dim(self) -> int:
        base = 3  # one-hot (Dirichlet, Neumann, interior)
        if self.experiment == "exp2":
            base += 3  # t/t0, T/T0, V_f
        elif self.experiment == "exp3":
            base += 1  # alpha*h_N
        if self.abs_pos:
            base += self.dim
        return base

    @property
    def edge_feat_dim(self) -> int:
        return self.dim + 2  # relative position, its norm, solution difference

    @property
    def global_feat_dim(self) -> int:
        return 1  # [t/t0] for exp2, the constant [1] otherwise

    def feature_schema(self) -> dict:
        """Names of every feature slot, in storage order."""
        nodes = ["type_dirichlet", "type_neumann", "type_interior"]
        if self.experiment == "exp2":
            nodes += ["time_scaled", "temperature_scaled", "fiber_fraction"]
        elif self.experiment == "exp3":
            nodes += ["neumann_flux"]
        if self.abs_pos:
            nodes += [f"position_{ax}" for ax in "xyz"[:self.dim]]
        edges = [f"relative_{ax}" for ax in "xyz"[:self.dim]]
        edges += ["distance", "solution_difference_scaled"]
        glob = ["time_scaled"] if self.experiment == "exp2" else ["constant_one"]
        return {"experiment": self.experiment, "node_features": nodes,
                "edge_features": edges, "global_features": glob}

    def conv_geometry(self) -> tuple[int, int, int]:
        """(stride1, mid_length, kernel2) of the two-layer conv decoder."""
        k1 = 15
        for s1 in (4, 1):
            mid = (self.latent - k1) // s1 + 1
            k2 = mid - self.n_tb + 1
            if k2 >= 1:
                return s1, mid, k2
        raise ConfigurationError(
            f"bundle size {self.n_tb} too large for latent width {self.latent}")


@dataclass
class Graph:
    """Featured graph of one problem at one input time."""

    senders: np.ndarray
    receivers: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    global_features: np.ndarray  # (1, Fg)
    free_mask: np.ndarray  # (N,) 1.0 on free nodes
    dirichlet_row: np.ndarray  # (N,) boundary values on Dirichlet nodes, else 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)


def build_graph(spec: ProblemSpec, state: np.ndarray, t: float,
                mode: str = "pi", noise_sigma: float = 0.0,
                rng: np.random.Generator = None,
                abs_pos: bool = False) -> Graph:
    """Featured graph from the current nodal state at input time ``t``.

    ``state`` is the window input: the model's own previous approximation
    in pi mode, the ground truth in data mode.  Gaussian noise perturbs
    the state-derived features only (training-time regularization); the
    physics residual later sees the noiseless state.
    """
    if mode not in ("pi", "data"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    mesh = spec.mesh
    if len(state) != mesh.num_nodes:
        raise ConfigurationError("state length does not match the mesh")
    edges = mesh.edge_array()
    loops = np.arange(mesh.num_nodes)
    senders = np.concatenate([edges[:, 0], edges[:, 1], loops])
    receivers = np.concatenate([edges[:, 1], edges[:, 0], loops])

    noisy = state
    if noise_sigma > 0.0:
        if rng is None:
            raise ConfigurationError("noise requires an rng")
        noisy = state + rng.normal(0.0, noise_sigma, mesh.num_nodes)

    scale = spec.constants["temp_scale"]
    t0 = spec.constants["t0"]
    one_hot = np.zeros((mesh.num_nodes, 3))
    one_hot[np.arange(mesh.num_nodes), mesh.node_tags] = 1.0
    cols = [one_hot]
    if spec.experiment == "exp2":
        cols.append(np.full((mesh.num_nodes, 1), t / t0))
        cols.append((noisy / scale)[:, None])
        cols.append(material_values(spec)[:, None])
    elif spec.experiment == "exp3":
        flux = np.zeros(mesh.num_nodes)
        for f in mesh.boundary_facets:
            if f.tag == NEUMANN:
                value = spec.neumann_flux.get(f.group, 0.0)
                for v in f.nodes:
                    if mesh.node_tags[v] == NEUMANN:
                        flux[v] = value
        cols.append(flux[:, None])
    if abs_pos:
        cols.append(mesh.nodes)
    node_features = np.concatenate(cols, axis=1)

    rel = mesh.nodes[receivers] - mesh.nodes[senders]
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    dsol = ((noisy[receivers] - noisy[senders]) / scale)[:, None]
    edge_features = np.concatenate([rel, dist, dsol], axis=1)

    if spec.experiment == "exp2":
        global_features = np.array([[t / t0]])
    else:
        global_features = np.array([[1.0]])

    free_mask = (mesh.node_tags != DIRICHLET).astype(np.float64)
    dirichlet_row = np.zeros(mesh.num_nodes)
    dirichlet_row[mesh.node_tags == DIRICHLET] = spec.dirichlet_values
    return Graph(senders, receivers, node_features, edge_features,
                 global_features, free_mask, dirichlet_row)


@dataclass
class Batch:
    """Block-diagonal composition of graphs with constant sparse operators."""

    node_features: np.ndarray
    edge_features: np.ndarray
    global_features: np.ndarray  # (B, Fg), one row per graph
    recv_of_edge: sp.csr_matrix  # (E, N) gathers receiver node latents
    send_of_edge: sp.csr_matrix  # (E, N)
    agg_to_node: sp.csr_matrix  # (N, E) sum of incoming edge latents
    node_pool: sp.csr_matrix  # (B, N) per-graph mean
    edge_pool: sp.csr_matrix  # (B, E) per-graph mean
    node_bcast: sp.csr_matrix  # (N, B) repeats the graph global to its nodes
    edge_bcast: sp.csr_matrix  # (E, B)
    free_mask: np.ndarray
    dirichlet_row: np.ndarray
    node_slices: list  # [(start, stop)] per graph

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)


def batch_graphs(graphs: list[Graph]) -> Batch:
    n_off = 0
    senders, receivers = [], []
    node_gid, edge_gid = [], []
    slices = []
    for g, graph in enumerate(graphs):
        senders.append(graph.senders + n_off)
        receivers.append(graph.receivers + n_off)
        node_gid.append(np.full(graph.n_nodes, g))
        edge_gid.append(np.full(len(graph.senders), g))
        slices.append((n_off, n_off + graph.n_nodes))
        n_off += graph.n_nodes
    senders = np.concatenate(senders)
    receivers = np.concatenate(receivers)
    node_gid = np.concatenate(node_gid)
    edge_gid = np.concatenate(edge_gid)
    n_nodes, n_edges, n_graphs = n_off, len(senders), len(graphs)

    def one_hot_csr(rows, cols, shape, data=None):
        if data is None:
            data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=shape)

    e_idx = np.arange(n_edges)
    n_idx = np.arange(n_nodes)
    node_counts = np.bincount(node_gid, minlength=n_graphs).astype(np.float64)
    edge_counts = np.bincount(edge_gid, minlength=n_graphs).astype(np.float64)
    return Batch(
        node_features=np.concatenate([g.node_features for g in graphs]),
        edge_features=np.concatenate([g.edge_features for g in graphs]),
        global_features=np.concatenate([g.global_features for g in graphs]),
        recv_of_edge=one_hot_csr(e_idx, receivers, (n_edges, n_nodes)),
        send_of_edge=one_hot_csr(e_idx, senders, (n_edges, n_nodes)),
        agg_to_node=one_hot_csr(receivers, e_idx, (n_nodes, n_edges)),
        node_pool=one_hot_csr(node_gid, n_idx, (n_graphs, n_nodes),
                              1.0 / node_counts[node_gid]),
        edge_pool=one_hot_csr(edge_gid, e_idx, (n_graphs, n_edges),
                              1.0 / edge_counts[edge_gid]),
        node_bcast=one_hot_csr(n_idx, node_gid, (n_nodes, n_graphs)),
        edge_bcast=one_hot_csr(e_idx, edge_gid, (n_edges, n_graphs)),
        free_mask=np.concatenate([g.free_mask for g in graphs]),
        dirichlet_row=np.concatenate([g.dirichlet_row for g in graphs]),
        node_slices=slices,
    )


@dataclass
class ModelParams:
    """Named weight tensors plus the architecture description."""

    config: ModelConfig
    params: dict = field(default_factory=dict)

    def parameters(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def named(self) -> list:
        return [(k, self.params[k]) for k in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out) if shape is None else shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-initialized weights; the decoder output layer starts at zero
    so an untrained model predicts persistence."""
    h = cfg.latent
    p = {}

    def linear(name, fi, fo):
        p[f"{name}_w"] = diff.parameter(_glorot(rng, fi, fo))
        p[f"{name}_b"] = diff.parameter(np.zeros(fo))

    def mlp_head(name, parts, fan_in):
        # first layer is split per input stream; joint fan-in for the init
        for part, width in parts:
            p[f"{name}_w1{part}"] = diff.parameter(
                _glorot(rng, fan_in, h, shape=(width, h)))
        p[f"{name}_b1"] = diff.parameter(np.zeros(h))
        p[f"{name}_w2"] = diff.parameter(_glorot(rng, h, h))
        p[f"{name}_b2"] = diff.parameter(np.zeros(h))
        p[f"{name}_ln_g"] = diff.parameter(np.ones(h))
        p[f"{name}_ln_b"] = diff.parameter(np.zeros(h))

    linear("enc_node", cfg.node_feat_dim, h)
    linear("enc_edge", cfg.edge_feat_dim, h)
    if not cfg.no_global:
        linear("enc_glob", cfg.global_feat_dim, h)
    g_extra = 0 if cfg.no_global else h
    for i in range(cfg.n_blocks):
        parts_e = [("r", h), ("s", h), ("e", h)] + ([] if cfg.no_global else [("g", h)])
        mlp_head(f"blk{i}_e", parts_e, 3 * h + g_extra)
        parts_n = [("x", h), ("a", h)] + ([] if cfg.no_global else [("g", h)])
        mlp_head(f"blk{i}_n", parts_n, 2 * h + g_extra)
        if not cfg.no_global:
            mlp_head(f"blk{i}_g", [("n", h), ("e", h), ("g", h)], 3 * h)

    if cfg.mlp_decoder:
        p["dec_w1"] = diff.parameter(_glorot(rng, h, h))
        p["dec_b1"] = diff.parameter(np.zeros(h))
        p["dec_w2"] = diff.parameter(np.zeros((h, cfg.n_tb)))
        p["dec_b2"] = diff.parameter(np.zeros(cfg.n_tb))
    else:
        s1, mid, k2 = cfg.conv_geometry()
        p["dec_w1"] = diff.parameter(_glorot(rng, 15, 8 * 15, shape=(8, 1, 15)))
        p["dec_b1"] = diff.parameter(np.zeros(8))
        p["dec_w2"] = diff.parameter(np.zeros((1, 8, k2)))
        p["dec_b2"] = diff.parameter(np.zeros(1))
    return ModelParams(config=cfg, params=p)


def _mlp(name, p, pre_act):
    """Second MLP layer plus terminal layer norm.

    ``pre_act`` is the first layer's affine output (bias included), summed
    over the update's input streams.
    """
    hidden = diff.relu(pre_act)
    out = diff.linear(hidden, p[f"{name}_w2"], p[f"{name}_b2"])
    return diff.layer_norm(out, p[f"{name}_ln_g"], p[f"{name}_ln_b"])


def forward(batch: Batch, model: ModelParams, state: np.ndarray):
    """Bundle prediction, shape (N_TB, total nodes), on the tape.

    ``state`` is the window input T^n; the decoder emits offsets scaled by
    the experiment temperature scale (or absolute values when configured),
    and Dirichlet rows are overwritten with the boundary values.
    """
    cfg = model.config
    p = model.params
    if batch.node_features.shape[1] != cfg.node_feat_dim:
        raise ConfigurationError(
            f"graph node features {batch.node_features.shape[1]} != "
            f"model expectation {cfg.node_feat_dim}")
    if batch.edge_features.shape[1] != cfg.edge_feat_dim:
        raise ConfigurationError("edge feature width mismatch")

    X = diff.linear(diff.tensor(batch.node_features), p["enc_node_w"],
                    p["enc_node_b"])
    E = diff.linear(diff.tensor(batch.edge_features), p["enc_edge_w"],
                    p["enc_edge_b"])
    G = None
    if not cfg.no_global:
        G = diff.linear(diff.tensor(batch.global_features), p["enc_glob_w"],
                        p["enc_glob_b"])

    for i in range(cfg.n_blocks):
        e, n, g = f"blk{i}_e", f"blk{i}_n", f"blk{i}_g"
        terms = [diff.matmul_const(batch.recv_of_edge, diff.matmul(X, p[f"{e}_w1r"])),
                 diff.matmul_const(batch.send_of_edge, diff.matmul(X, p[f"{e}_w1s"])),
                 diff.linear(E, p[f"{e}_w1e"], p[f"{e}_b1"])]
        if G is not None:
            terms.append(diff.matmul_const(batch.edge_bcast,
                                           diff.matmul(G, p[f"{e}_w1g"])))
        E = _mlp(e, p, diff.add_n(*terms))

        agg = diff.matmul_const(batch.agg_to_node, E)
        terms = [diff.linear(X, p[f"{n}_w1x"], p[f"{n}_b1"]),
                 diff.matmul(agg, p[f"{n}_w1a"])]
        if G is not None:
            terms.append(diff.matmul_const(batch.node_bcast,
                                           diff.matmul(G, p[f"{n}_w1g"])))
        X = _mlp(n, p, diff.add_n(*terms))

        if G is not None:
            terms = [diff.linear(diff.matmul_const(batch.node_pool, X),
                                 p[f"{g}_w1n"]),
                     diff.matmul(diff.matmul_const(batch.edge_pool, E),
                                 p[f"{g}_w1e"]),
                     diff.linear(G, p[f"{g}_w1g"], p[f"{g}_b1"])]
            G = _mlp(g, p, diff.add_n(*terms))

    if cfg.mlp_decoder:
        hidden = diff.relu(diff.linear(X, p["dec_w1"], p["dec_b1"]))
        out = diff.linear(hidden, p["dec_w2"], p["dec_b2"])  # (N, n_tb)
    else:
        s1, _, _ = cfg.conv_geometry()
        n_tot = batch.n_nodes
        xs = diff.reshape(X, (n_tot, 1, cfg.latent))
        mid = diff.relu(diff.conv1d(xs, p["dec_w1"], p["dec_b1"], stride=s1))
        out = diff.conv1d(mid, p["dec_w2"], p["dec_b2"], stride=1)
        out = diff.reshape(out, (n_tot, cfg.n_tb))
    out = diff.transpose(out)  # (n_tb, N)

    if cfg.offset_output:
        U = diff.tensor(state[None, :]) + out * cfg.temp_scale
    else:
        U = out * cfg.temp_scale
    return U * batch.free_mask[None, :] + diff.tensor(batch.dirichlet_row[None, :])


def predict_bundle(spec: ProblemSpec, model: ModelParams, state: np.ndarray,
                   t: float) -> np.ndarray:
    """Noise-free single-graph forward pass, returning plain arrays."""
    graph = build_graph(spec, state, t, abs_pos=model.config.abs_pos)
    batch = batch_graphs([graph])
    with diff.no_grad():
        return forward(batch, model, state).data


def rollout(spec: ProblemSpec, model: ModelParams):
    """Autoregressive trajectory over the problem's full time grid."""
    from .fem import Trajectory
    from .problems import initial_condition

    n_tb = model.config.n_tb
    state = initial_condition(spec)
    dn = spec.dirichlet_nodes()
    state[dn] = spec.dirichlet_values
    data = np.empty((spec.n_steps + 1, spec.mesh.num_nodes))
    data[0] = state
    filled = 0
    while filled < spec.n_steps:
        t_in = filled * spec.dt
        bundle = predict_bundle(spec, model, state, t_in)
        take = min(n_tb, spec.n_steps - filled)
        data[filled + 1: filled + 1 + take] = bundle[:take]
        state = data[filled + take]
        filled += take
    return Trajectory(data=data, dt=spec.dt)


def save_checkpoint(model: ModelParams, path: str | Path):
    """Versioned binary: magic, JSON header, then named f64 arrays."""
    names = sorted(model.params)
    header = {
        "config": asdict(model.config),
        "arrays": [{"name": k, "shape": list(model.params[k].data.shape)}
                   for k in names],
    }
    blob = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(model.params[k].data,
                                          dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    cfg = ModelConfig(**header["config"])
    params = {}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", offset=off, count=count)
        params[item["name"]] = diff.parameter(arr.reshape(shape).copy())
        off += 8 * count
    model = ModelParams(config=cfg, params=params)
    log.info("loaded checkpoint %s: %d arrays, %d parameters",
             path, len(params), model.param_count())
    return model
