"""Equivariant graph message passing.

Layer update over the complete node graph:

    m_ij = phi_e(h_i, h_j, |p_i - p_j|^2, w_ij, present_ij)
    p_i <- p_i + 1/(N-1) * sum_{j != i} (p_i - p_j) * phi_x(m_ij)
    m_i  = sum_{j != i} m_ij
    h_i <- phi_h(h_i, m_i)

Positions transform with any rotation/translation/reflection of the inputs;
hidden features are invariant (all their inputs are distances or labels).
`w_ij` is the known distance weight of the source graph (0 when absent) and
`present_ij` its presence flag; both are invariant so they do not disturb the
symmetry.

The baseline layer feeds raw coordinates through the message MLP and
re-predicts positions from hidden state, deliberately breaking equivariance;
it exists for the architecture ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tensor
from .graphs import PointGraph


# ---------------------------------------------------------------------------
# parameter init and MLP helpers
# ---------------------------------------------------------------------------

def init_linear(params: ModelParams, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False,
                bias_value: float = 0.0) -> None:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params.add(name + ".w", w)
    params.add(name + ".b", np.full(fan_out, bias_value))


def linear(params: ModelParams, name: str, x: Tensor) -> Tensor:
    flat = x
    shape = x.shape
    if x.ndim != 2:
        flat = ad.reshape(x, (-1, shape[-1]))
    out = ad.add(ad.matmul(flat, params[name + ".w"]), params[name + ".b"])
    if x.ndim != 2:
        out = ad.reshape(out, shape[:-1] + (out.shape[-1],))
    return out


def init_mlp(params: ModelParams, prefix: str, fan_in: int, hidden: int,
             fan_out: int, rng: np.random.Generator, zero_last: bool = False,
             last_bias: float = 0.0) -> None:
    """Two-layer MLP: linear, silu, linear."""
    init_linear(params, prefix + ".l0", fan_in, hidden, rng)
    init_linear(params, prefix + ".l1", hidden, fan_out, rng,
                zero=zero_last, bias_value=last_bias)


def mlp(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return linear(params, prefix + ".l1", ad.silu(linear(params, prefix + ".l0", x)))


# ---------------------------------------------------------------------------
# batched graphs
# ---------------------------------------------------------------------------

class GraphBatch:
    """B same-shaped graphs flattened to (B*N, .) arrays with dense per-pair
    edge attributes. Unknown node positions are initialized at the centroid of
    the graph's known nodes (a translation-equivariant choice; the stored
    graph representation keeps them at zero)."""

    def __init__(self, batch: int, nodes: int, dim: int,
                 positions0: np.ndarray, features: np.ndarray,
                 known: np.ndarray, weights: np.ndarray, presence: np.ndarray):
        self.batch = batch
        self.nodes = nodes
        self.dim = dim
        self.positions0 = positions0   # (B*N, D) initial positions
        self.features = features       # (B*N, 3) one-hot node kinds
        self.known = known             # (B*N,) bool
        self.weights = weights         # (B, N, N, 1) distance weights, 0 if absent
        self.presence = presence       # (B, N, N, 1) edge presence flags

    @staticmethod
    def from_graphs(graphs: list[PointGraph]) -> "GraphBatch":
        first = graphs[0]
        n, dim = first.num_nodes, first.dim
        if any(g.num_nodes != n or g.dim != dim for g in graphs):
            raise ValueError("all graphs in a batch must share node count and dim")
        b = len(graphs)
        pos = np.zeros((b, n, dim))
        feats = np.zeros((b, n, 3))
        known = np.zeros((b, n), dtype=bool)
        w = np.zeros((b, n, n, 1))
        pres = np.zeros((b, n, n, 1))
        for i, g in enumerate(graphs):
            pos[i] = g.points
            if g.is_partial:
                centroid = g.points[g.known_mask].mean(axis=0)
                pos[i, ~g.known_mask] = centroid
            feats[i] = g.features
            known[i] = g.known_mask
            w[i, :, :, 0] = g.weight_matrix()
            pres[i, :, :, 0] = g.presence_matrix()
        return GraphBatch(batch=b, nodes=n, dim=dim,
                          positions0=pos.reshape(b * n, dim),
                          features=feats.reshape(b * n, 3),
                          known=known.reshape(b * n),
                          weights=w, presence=pres)

    def offdiag_mask(self) -> np.ndarray:
        m = 1.0 - np.eye(self.nodes)
        return np.broadcast_to(m[None, :, :, None],
                               (self.batch, self.nodes, self.nodes, 1)).copy()


@dataclass
class GraphState:
    """Differentiable state flowing through a stack: equivariant positions
    and invariant hidden features, both flattened to (B*N, .)."""

    positions: Tensor
    hidden: Tensor
    batch: "GraphBatch"


def initial_state(batch: GraphBatch, hidden: Tensor) -> GraphState:
    return GraphState(positions=Tensor(batch.positions0.copy()), hidden=hidden,
                      batch=batch)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def init_egnn_layer(params: ModelParams, prefix: str, hidden_dim: int,
                    message_dim: int, rng: np.random.Generator) -> None:
    init_mlp(params, prefix + ".phi_e", 2 * hidden_dim + 3, message_dim,
             message_dim, rng)
    init_mlp(params, prefix + ".phi_x", message_dim, message_dim, 1, rng,
             zero_last=True)
    init_mlp(params, prefix + ".phi_h", hidden_dim + message_dim, message_dim,
             hidden_dim, rng)


def egnn_layer(state: GraphState, params: ModelParams, prefix: str) -> GraphState:
    gb = state.batch
    b, n, d = gb.batch, gb.nodes, gb.dim
    f = state.hidden.shape[-1]

    p = ad.reshape(state.positions, (b, n, 1, d))
    pj = ad.reshape(state.positions, (b, 1, n, d))
    diff = ad.sub(p, pj)                                       # (B,N,N,D)
    sqdist = ad.tsum(ad.square(diff), axis=-1, keepdims=True)  # (B,N,N,1)

    hi = ad.broadcast_to(ad.reshape(state.hidden, (b, n, 1, f)), (b, n, n, f))
    hj = ad.broadcast_to(ad.reshape(state.hidden, (b, 1, n, f)), (b, n, n, f))
    edge_in = ad.concat([hi, hj, sqdist, Tensor(gb.weights), Tensor(gb.presence)],
                        axis=-1)
    m_ij = mlp(params, prefix + ".phi_e", edge_in)             # (B,N,N,fm)

    mask = gb.offdiag_mask()
    x_scale = ad.mul(mlp(params, prefix + ".phi_x", m_ij), mask)  # (B,N,N,1)
    upd = ad.tsum(ad.mul(diff, x_scale), axis=2)               # (B,N,D)
    new_p = ad.add(state.positions,
                   ad.reshape(ad.mul(upd, 1.0 / (n - 1)), (b * n, d)))

    m_i = ad.tsum(ad.mul(m_ij, mask), axis=2)                  # (B,N,fm)
    node_in = ad.concat([state.hidden,
                         ad.reshape(m_i, (b * n, m_i.shape[-1]))], axis=-1)
    new_h = mlp(params, prefix + ".phi_h", node_in)
    return GraphState(positions=new_p, hidden=new_h, batch=gb)


def init_baseline_layer(params: ModelParams, prefix: str, hidden_dim: int,
                        message_dim: int, dim: int, rng: np.random.Generator) -> None:
    init_mlp(params, prefix + ".phi_e", 2 * hidden_dim + 2 * dim + 2,
             message_dim, message_dim, rng)
    init_mlp(params, prefix + ".phi_h", hidden_dim + message_dim, message_dim,
             hidden_dim, rng)
    init_mlp(params, prefix + ".phi_pos", hidden_dim, message_dim, dim, rng)


def baseline_layer(state: GraphState, params: ModelParams, prefix: str) -> GraphState:
    """Message passing on raw coordinates with an MLP position head."""
    gb = state.batch
    b, n, d = gb.batch, gb.nodes, gb.dim
    f = state.hidden.shape[-1]

    pi = ad.broadcast_to(ad.reshape(state.positions, (b, n, 1, d)), (b, n, n, d))
    pj = ad.broadcast_to(ad.reshape(state.positions, (b, 1, n, d)), (b, n, n, d))
    hi = ad.broadcast_to(ad.reshape(state.hidden, (b, n, 1, f)), (b, n, n, f))
    hj = ad.broadcast_to(ad.reshape(state.hidden, (b, 1, n, f)), (b, n, n, f))
    edge_in = ad.concat([hi, hj, pi, pj, Tensor(gb.weights), Tensor(gb.presence)],
                        axis=-1)
    m_ij = mlp(params, prefix + ".phi_e", edge_in)

    mask = gb.offdiag_mask()
    m_i = ad.mul(ad.tsum(ad.mul(m_ij, mask), axis=2), 1.0 / (n - 1))
    node_in = ad.concat([state.hidden,
                         ad.reshape(m_i, (b * n, m_i.shape[-1]))], axis=-1)
    new_h = mlp(params, prefix + ".phi_h", node_in)
    new_p = mlp(params, prefix + ".phi_pos", new_h)
    return GraphState(positions=new_p, hidden=new_h, batch=gb)


def init_stack(params: ModelParams, prefix: str, layers: int, hidden_dim: int,
               message_dim: int, rng: np.random.Generator, arch: str = "egnn",
               dim: int = 0) -> None:
    for i in range(layers):
        if arch == "egnn":
            init_egnn_layer(params, f"{prefix}.layer{i}", hidden_dim,
                            message_dim, rng)
        elif arch == "baseline":
            init_baseline_layer(params, f"{prefix}.layer{i}", hidden_dim,
                                message_dim, dim, rng)
        else:
            raise ValueError(f"unknown architecture {arch!r}")


def run_stack(state: GraphState, params: ModelParams, prefix: str, layers: int,
              arch: str = "egnn") -> GraphState:
    layer_fn = egnn_layer if arch == "egnn" else baseline_layer
    for i in range(layers):
        state = layer_fn(state, params, f"{prefix}.layer{i}")
    return state
