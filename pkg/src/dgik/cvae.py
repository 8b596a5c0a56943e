"""Conditional generative model over IK graphs.

An encoder maps a complete graph to per-node Gaussian latents, a prior maps
the partial graph to a per-node Gaussian mixture, and a decoder maps latents
plus the partial graph back to node positions. Training maximizes the
evidence lower bound; sampling draws latents from the prior, decodes point
sets in parallel, and recovers joint configurations from them.

Latents live on the invariant hidden channel, so they are unchanged under
rigid motions of the problem while decoded positions transform along.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import egnn
from .autodiff import ModelParams, Tensor
from .chains import KinematicChain, Pose, forward_kinematics, pose_error
from .dgp import (DegenerateAnchorsError, IkSolutionSet, MalformedPointSetError,
                  config_from_points)
from .egnn import GraphBatch, GraphState, initial_state
from .graphs import (PointGraph, anchor_positions, effector_node_ids,
                     node_kinds, num_anchor_nodes, num_graph_nodes,
                     partial_graph, points_from_config, structural_edges)

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-6
# softplus(x) = 1 at this bias, so heads start near unit scale
_UNIT_SOFTPLUS_BIAS = math.log(math.e - 1.0)


class AllSamplesMalformedError(RuntimeError):
    """No decoded sample survived configuration recovery."""


class EmptyCandidatesError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# distribution containers (inference-side, plain arrays)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianNodeDistribution:
    """Independent per-node diagonal Gaussians: mu, sigma of shape (N, Z)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma shapes differ")
        if (self.sigma <= 0).any():
            raise ValueError("sigma must be strictly positive")

    def log_density(self, z: np.ndarray) -> np.ndarray:
        """Per-node log density, shape (N,)."""
        u = (z - self.mu) / self.sigma
        return (-0.5 * (u * u).sum(axis=-1) - np.log(self.sigma).sum(axis=-1)
                - 0.5 * self.mu.shape[-1] * LOG_2PI)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal(self.mu.shape)


@dataclass(frozen=True)
class GmmNodeDistribution:
    """Per-node K-component mixtures: mu, sigma (K, N, Z); weights pi (K, N)."""

    mu: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.pi.shape != self.mu.shape[:2]:
            raise ValueError("inconsistent mixture shapes")
        if (self.sigma <= 0).any():
            raise ValueError("sigma must be strictly positive")
        if (self.pi < 0).any() or np.abs(self.pi.sum(axis=0) - 1.0).max() > 1e-9:
            raise ValueError("mixing weights must be nonnegative and sum to 1 per node")

    @property
    def num_components(self) -> int:
        return self.mu.shape[0]

    def log_density(self, z: np.ndarray) -> np.ndarray:
        """Per-node mixture log density, shape (N,)."""
        u = (z[None, :, :] - self.mu) / self.sigma
        comp = (-0.5 * (u * u).sum(axis=-1) - np.log(self.sigma).sum(axis=-1)
                - 0.5 * self.mu.shape[-1] * LOG_2PI)          # (K, N)
        w = np.log(np.maximum(self.pi, 1e-300)) + comp
        m = w.max(axis=0, keepdims=True)
        return (m + np.log(np.exp(w - m).sum(axis=0, keepdims=True)))[0]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw `count` per-node latents: component by pi, then Gaussian."""
        k, n, z = self.mu.shape
        cum = np.cumsum(self.pi, axis=0)                       # (K, N)
        u = rng.random((count, n))
        comp = (u[:, None, :] > cum[None, :, :]).sum(axis=1)   # (count, N)
        comp = np.minimum(comp, k - 1)
        eps = rng.standard_normal((count, n, z))
        idx_n = np.arange(n)[None, :]
        return self.mu[comp, idx_n, :] + self.sigma[comp, idx_n, :] * eps


# ---------------------------------------------------------------------------
# model configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 16
    mixture_k: int = 8
    hidden_dim: int = 64
    message_dim: int = 64
    layers: int = 4
    arch: str = "egnn"       # "egnn" or "baseline"
    dim: int = 0             # workspace dim; required (2 or 3) for "baseline"

    def __post_init__(self):
        if self.arch not in ("egnn", "baseline"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch == "baseline" and self.dim not in (2, 3):
            raise ValueError("baseline architecture requires dim 2 or 3")

    def to_dict(self) -> dict:
        return {"latent_dim": self.latent_dim, "mixture_k": self.mixture_k,
                "hidden_dim": self.hidden_dim, "message_dim": self.message_dim,
                "layers": self.layers, "arch": self.arch, "dim": self.dim}

    @staticmethod
    def from_dict(obj: dict) -> "ModelConfig":
        return ModelConfig(**obj)


def _init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    f, fm, z, k = (config.hidden_dim, config.message_dim, config.latent_dim,
                   config.mixture_k)
    egnn.init_linear(params, "enc.emb", 3, f, rng)
    egnn.init_stack(params, "enc", config.layers, f, fm, rng, config.arch, config.dim)
    egnn.init_linear(params, "enc.head.mu", f, z, rng)
    egnn.init_linear(params, "enc.head.sigma", f, z, rng,
                     bias_value=_UNIT_SOFTPLUS_BIAS)
    egnn.init_linear(params, "prior.emb", 3, f, rng)
    egnn.init_stack(params, "prior", config.layers, f, fm, rng, config.arch, config.dim)
    egnn.init_linear(params, "prior.head.mu", f, k * z, rng)
    egnn.init_linear(params, "prior.head.sigma", f, k * z, rng,
                     bias_value=_UNIT_SOFTPLUS_BIAS)
    egnn.init_linear(params, "prior.head.pi", f, k, rng)
    egnn.init_linear(params, "dec.emb", z + 3, f, rng)
    egnn.init_stack(params, "dec", config.layers, f, fm, rng, config.arch, config.dim)
    if config.arch == "baseline":
        # final positions come from each layer's own head; no extra head needed
        pass
    return params


class GenerativeIkModel:
    """Encoder, mixture prior, and decoder sharing one parameter store."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @staticmethod
    def create(config: ModelConfig | None = None, seed: int = 0) -> "GenerativeIkModel":
        config = config or ModelConfig()
        return GenerativeIkModel(config, _init_params(config, seed))

    def num_params(self) -> int:
        return self.params.num_params()

    # -- batched cores ------------------------------------------------------

    def encode_batch(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        h0 = egnn.linear(self.params, "enc.emb", Tensor(batch.features))
        state = egnn.run_stack(initial_state(batch, h0), self.params, "enc",
                               self.config.layers, self.config.arch)
        mu = egnn.linear(self.params, "enc.head.mu", state.hidden)
        sigma = ad.add(ad.softplus(
            egnn.linear(self.params, "enc.head.sigma", state.hidden)), SIGMA_FLOOR)
        return mu, sigma

    def prior_batch(self, batch: GraphBatch) -> tuple[Tensor, Tensor, Tensor]:
        """Per-node mixture parameters: mu, sigma (BN, K, Z) and log_pi (BN, K)."""
        h0 = egnn.linear(self.params, "prior.emb", Tensor(batch.features))
        state = egnn.run_stack(initial_state(batch, h0), self.params, "prior",
                               self.config.layers, self.config.arch)
        k, z = self.config.mixture_k, self.config.latent_dim
        bn = state.hidden.shape[0]
        mu = ad.reshape(egnn.linear(self.params, "prior.head.mu", state.hidden),
                        (bn, k, z))
        sigma = ad.add(ad.softplus(ad.reshape(
            egnn.linear(self.params, "prior.head.sigma", state.hidden),
            (bn, k, z))), SIGMA_FLOOR)
        logits = egnn.linear(self.params, "prior.head.pi", state.hidden)
        log_pi = ad.sub(logits, ad.logsumexp(logits, axis=-1, keepdims=True))
        return mu, sigma, log_pi

    def decode_batch(self, batch: GraphBatch, z) -> Tensor:
        """Predicted node positions (BN, D) from latents (BN, Z)."""
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=float))
        h0 = egnn.linear(self.params, "dec.emb",
                         ad.concat([zt, Tensor(batch.features)], axis=-1))
        state = egnn.run_stack(initial_state(batch, h0), self.params, "dec",
                               self.config.layers, self.config.arch)
        return state.positions

    # -- single-graph conveniences -------------------------------------------

    def encode(self, g: PointGraph) -> GaussianNodeDistribution:
        if g.is_partial:
            raise ValueError("encoder expects a complete graph")
        mu, sigma = self.encode_batch(GraphBatch.from_graphs([g]))
        return GaussianNodeDistribution(mu=mu.data.copy(), sigma=sigma.data.copy())

    def prior(self, g: PointGraph) -> GmmNodeDistribution:
        if not g.is_partial:
            raise ValueError("prior expects a partial graph")
        mu, sigma, log_pi = self.prior_batch(GraphBatch.from_graphs([g]))
        pi = np.exp(log_pi.data)
        pi = pi / pi.sum(axis=-1, keepdims=True)
        return GmmNodeDistribution(mu=np.transpose(mu.data, (1, 0, 2)).copy(),
                                   sigma=np.transpose(sigma.data, (1, 0, 2)).copy(),
                                   pi=pi.T.copy())

    def decode(self, g: PointGraph, z: np.ndarray) -> np.ndarray:
        if not g.is_partial:
            raise ValueError("decoder expects a partial graph")
        out = self.decode_batch(GraphBatch.from_graphs([g]), np.asarray(z, dtype=float))
        return out.data.copy()

    # -- sampling -------------------------------------------------------------

    def sample_ik(self, chain: KinematicChain, goal: Pose, n_samples: int,
                  k_best: int, seed: int, graph: PointGraph | None = None):
        return sample_solutions(self, chain, goal, n_samples=n_samples,
                                k_best=k_best, seed=seed, graph=graph)

    # -- persistence -----------------------------------------------------------

    def save(self, path, extra_hyper: dict | None = None) -> None:
        hyper = {"model": self.config.to_dict()}
        if extra_hyper:
            hyper.update(extra_hyper)
        ad.save_checkpoint(path, self.params, hyper)

    @staticmethod
    def load(path) -> "GenerativeIkModel":
        params, hyper = ad.load_checkpoint(path)
        return GenerativeIkModel(ModelConfig.from_dict(hyper["model"]), params)


# ---------------------------------------------------------------------------
# densities and objective
# ---------------------------------------------------------------------------

def _gauss_log_density_t(z, mu, sigma) -> Tensor:
    """Per-node Gaussian log density via tensor ops; sums the last axis."""
    u = ad.div(ad.sub(z, mu), sigma)
    zdim = (z if isinstance(z, Tensor) else np.asarray(z)).shape[-1]
    return ad.sub(ad.mul(ad.tsum(ad.square(u), axis=-1), -0.5),
                  ad.add(ad.tsum(ad.log(sigma), axis=-1), 0.5 * zdim * LOG_2PI))


def _gmm_log_density_t(z, mu, sigma, log_pi) -> Tensor:
    """Mixture log density per node. z: (..., N, Z); mu/sigma: (N, K, Z) or
    broadcastable; log_pi: (N, K)."""
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=float))
    zshape = zt.shape
    expanded = ad.reshape(zt, zshape[:-1] + (1, zshape[-1]))
    comp = _gauss_log_density_t(expanded, mu, sigma)       # (..., N, K)
    return ad.logsumexp(ad.add(comp, log_pi), axis=-1)     # (..., N)


def log_likelihood(true_positions, mu) -> Tensor:
    """Unit-variance Gaussian reconstruction log likelihood, summed over nodes:
    -0.5 * sum |p_i - mu_i|^2 - (N*D/2) * log 2pi."""
    p = true_positions if isinstance(true_positions, Tensor) else \
        np.asarray(true_positions, dtype=float)
    shape = (p if isinstance(p, Tensor) else p).shape
    n, d = shape[-2], shape[-1]
    sq = ad.tsum(ad.square(ad.sub(mu, p)))
    return ad.sub(ad.mul(sq, -0.5), 0.5 * n * d * LOG_2PI)


def graph_log_likelihood(g: PointGraph, mu: np.ndarray) -> float:
    """Reconstruction log likelihood of a complete graph's positions."""
    if g.is_partial:
        raise ValueError("log likelihood is evaluated against complete graphs")
    return float(log_likelihood(g.points, Tensor(np.asarray(mu, dtype=float))).data)


def _kl_estimate(q_mu, q_sigma, p_mu, p_sigma, p_log_pi, num_mc: int,
                 rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Reparameterized MC estimate of KL(q || gmm), summed over nodes.

    Returns (scalar estimate, per-draw totals for error bars)."""
    n, z = (q_mu if isinstance(q_mu, Tensor) else np.asarray(q_mu)).shape
    eps = rng.standard_normal((num_mc, n, z))
    zs = ad.add(q_mu, ad.mul(q_sigma, eps))                 # (S, N, Z)
    log_q = _gauss_log_density_t(zs, q_mu, q_sigma)         # (S, N)
    log_p = _gmm_log_density_t(zs, p_mu, p_sigma, p_log_pi)  # (S, N)
    per_draw = ad.tsum(ad.sub(log_q, log_p), axis=1)        # (S,)
    return ad.tmean(per_draw), per_draw.data.copy()


def kl_gauss_vs_gmm(q: GaussianNodeDistribution, p: GmmNodeDistribution,
                    num_mc: int, seed: int) -> float:
    """Monte Carlo KL(q || p): mean over reparameterized draws of
    log q(z) - log p(z), summed over nodes."""
    value, _ = kl_gauss_vs_gmm_with_stderr(q, p, num_mc, seed)
    return value


def kl_gauss_vs_gmm_with_stderr(q: GaussianNodeDistribution,
                                p: GmmNodeDistribution, num_mc: int,
                                seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    est, per_draw = _kl_estimate(Tensor(q.mu), Tensor(q.sigma),
                                 Tensor(np.transpose(p.mu, (1, 0, 2)).copy()),
                                 Tensor(np.transpose(p.sigma, (1, 0, 2)).copy()),
                                 Tensor(np.log(np.maximum(p.pi.T, 1e-300)).copy()),
                                 num_mc, rng)
    stderr = float(per_draw.std(ddof=1) / math.sqrt(num_mc)) if num_mc > 1 else 0.0
    return float(est.data), stderr


def elbo_batch(model: GenerativeIkModel, partial_batch: GraphBatch,
               complete_batch: GraphBatch, num_mc: int,
               rng: np.random.Generator) -> tuple[Tensor, dict]:
    """Mean per-graph evidence lower bound over a batch.

    Reconstruction uses reparameterized encoder draws; the KL term against the
    mixture prior is estimated by Monte Carlo with its own draws."""
    b = partial_batch.batch
    q_mu, q_sigma = model.encode_batch(complete_batch)
    p_mu, p_sigma, p_log_pi = model.prior_batch(partial_batch)

    true_pos = complete_batch.positions0
    recon = None
    for _ in range(num_mc):
        eps = rng.standard_normal(q_mu.shape)
        z = ad.add(q_mu, ad.mul(q_sigma, eps))
        mu_pos = model.decode_batch(partial_batch, z)
        term = log_likelihood(true_pos, mu_pos)
        recon = term if recon is None else ad.add(recon, term)
    recon = ad.mul(recon, 1.0 / num_mc)

    kl, _ = _kl_estimate(q_mu, q_sigma, p_mu, p_sigma, p_log_pi, num_mc, rng)
    total = ad.mul(ad.sub(recon, kl), 1.0 / b)
    stats = {"recon": float(recon.data) / b, "kl": float(kl.data) / b}
    return total, stats


def elbo(model: GenerativeIkModel, g_complete: PointGraph, g_partial: PointGraph,
         num_mc: int = 1, seed: int = 0) -> tuple[Tensor, dict]:
    """Single-problem ELBO with a frozen Monte Carlo seed."""
    rng = np.random.default_rng(seed)
    return elbo_batch(model, GraphBatch.from_graphs([g_partial]),
                      GraphBatch.from_graphs([g_complete]), num_mc, rng)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    num_mc: int = 1
    clip_norm: float = 100.0


@dataclass
class TrainResult:
    step_elbo: np.ndarray
    step_chain: list[str]
    epoch_elbo: list[float]

    def smoothed(self, window: int = 10) -> np.ndarray:
        if len(self.step_elbo) < window:
            return self.step_elbo.copy()
        kernel = np.ones(window) / window
        return np.convolve(self.step_elbo, kernel, mode="valid")


class ChainBatcher:
    """Precomputed per-chain arrays for fast batch assembly (no padding;
    batches always hold graphs of one chain)."""

    def __init__(self, chain: KinematicChain):
        self.chain = chain
        self.n_nodes = num_graph_nodes(chain)
        self.dim = chain.dim
        kinds = node_kinds(chain)
        self.known = (kinds == 0) | (kinds == 2)
        feats = np.zeros((self.n_nodes, 3))
        feats[np.arange(self.n_nodes), kinds] = 1.0
        self.feats = feats
        n = self.n_nodes
        struct = structural_edges(chain)
        self.struct_w = np.zeros((n, n))
        pres = np.zeros((n, n))
        for (u, v), w in struct.items():
            self.struct_w[u, v] = self.struct_w[v, u] = w
            pres[u, v] = pres[v, u] = 1.0
        known_ids = np.flatnonzero(self.known)
        self.known_pair = np.zeros((n, n), dtype=bool)
        for a in known_ids:
            for b_ in known_ids:
                if a != b_:
                    self.known_pair[a, b_] = True
        pres[self.known_pair] = 1.0
        self.pres_partial = pres
        self.anchor_pos = anchor_positions(chain.dim)
        self.ee_ids = np.array(effector_node_ids(chain))

    def assemble(self, configs: np.ndarray) -> tuple[GraphBatch, GraphBatch]:
        """(partial_batch, complete_batch) for a block of configurations."""
        b = configs.shape[0]
        n, d = self.n_nodes, self.dim
        pts = np.empty((b, n, d))
        for i in range(b):
            pts[i] = points_from_config(self.chain, configs[i])[0]
        diff = pts[:, :, None, :] - pts[:, None, :, :]
        w_complete = np.sqrt(np.einsum("bijd,bijd->bij", diff, diff))
        pres_complete = np.broadcast_to(1.0 - np.eye(n), (b, n, n)).copy()

        known_pts = np.zeros((b, n, d))
        known_pts[:, : num_anchor_nodes(d)] = self.anchor_pos
        known_pts[:, self.ee_ids] = pts[:, self.ee_ids]
        kdiff = known_pts[:, :, None, :] - known_pts[:, None, :, :]
        kdist = np.sqrt(np.einsum("bijd,bijd->bij", kdiff, kdiff))
        w_partial = np.where(self.known_pair[None, :, :], kdist,
                             self.struct_w[None, :, :])

        pos0 = known_pts.copy()
        centroid = known_pts[:, self.known].mean(axis=1)
        pos0[:, ~self.known] = centroid[:, None, :]

        feats = np.broadcast_to(self.feats, (b, n, 3)).reshape(b * n, 3).copy()
        known_flat = np.broadcast_to(self.known, (b, n)).reshape(b * n).copy()
        partial = GraphBatch(batch=b, nodes=n, dim=d,
                             positions0=pos0.reshape(b * n, d),
                             features=feats, known=known_flat,
                             weights=w_partial[..., None],
                             presence=np.broadcast_to(
                                 self.pres_partial[None, :, :, None],
                                 (b, n, n, 1)).copy())
        complete = GraphBatch(batch=b, nodes=n, dim=d,
                              positions0=pts.reshape(b * n, d),
                              features=feats.copy(), known=np.ones(b * n, dtype=bool),
                              weights=w_complete[..., None],
                              presence=pres_complete[..., None])
        return partial, complete


def train(model: GenerativeIkModel, items: list[tuple[KinematicChain, np.ndarray]],
          opts: TrainOptions | None = None,
          log_fn=None) -> TrainResult:
    """Adam on the negative ELBO. `items` are (chain, configuration) pairs;
    chains of different sizes are batched separately (padding-free)."""
    opts = opts or TrainOptions()
    rng = np.random.default_rng(opts.seed)

    by_chain: dict[str, tuple[KinematicChain, list[np.ndarray]]] = {}
    for chain, q in items:
        by_chain.setdefault(chain.name, (chain, []))[1].append(np.asarray(q, dtype=float))
    batchers = {name: ChainBatcher(chain) for name, (chain, _) in by_chain.items()}
    configs = {name: np.vstack([q[None, :] for q in qs])
               for name, (_, qs) in by_chain.items()}

    state = ad.AdamState.fresh(model.params)
    step_elbo: list[float] = []
    step_chain: list[str] = []
    epoch_means: list[float] = []
    for epoch in range(opts.epochs):
        schedules = {}
        for name in sorted(by_chain):
            order = rng.permutation(configs[name].shape[0])
            blocks = [order[i: i + opts.batch_size]
                      for i in range(0, order.size, opts.batch_size)]
            schedules[name] = blocks
        max_blocks = max(len(b) for b in schedules.values())
        epoch_vals = []
        for bi in range(max_blocks):
            for name in sorted(schedules):
                blocks = schedules[name]
                if bi >= len(blocks):
                    continue
                q_block = configs[name][blocks[bi]]
                partial_b, complete_b = batchers[name].assemble(q_block)
                try:
                    value, _ = elbo_batch(model, partial_b, complete_b,
                                          opts.num_mc, rng)
                    loss = ad.neg(value)
                    model.params.zero_grads()
                    ad.backward(loss)
                except ad.NonFiniteError as exc:
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch} step {len(step_elbo)} "
                        f"chain {name}: {exc}") from exc
                grads = model.params.grads()
                ad.clip_gradients(grads, opts.clip_norm)
                state = ad.adam_step(model.params, grads, opts.lr, opts.betas,
                                     opts.adam_eps, state)
                step_elbo.append(float(value.data))
                step_chain.append(name)
                epoch_vals.append(float(value.data))
                if log_fn is not None and len(step_elbo) % 50 == 0:
                    log_fn(epoch, len(step_elbo), float(value.data))
        epoch_means.append(float(np.mean(epoch_vals)))
    return TrainResult(step_elbo=np.array(step_elbo), step_chain=step_chain,
                       epoch_elbo=epoch_means)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleReport:
    solutions: IkSolutionSet
    num_requested: int
    num_malformed: int
    num_clamped: int


def select_solutions(goal: Pose, chain: KinematicChain,
                     configs: list[np.ndarray], k_best: int) -> IkSolutionSet:
    """Rank candidates by pos_err/reach + rot_err/pi and keep the best k;
    ties keep the earlier candidate."""
    if not configs:
        raise EmptyCandidatesError("no candidate configurations")
    errors = [pose_error(goal, forward_kinematics(chain, q)) for q in configs]
    scal = [p / chain.reach + r / math.pi for p, r in errors]
    order = sorted(range(len(configs)), key=lambda i: (scal[i], i))[:k_best]
    return IkSolutionSet(configs=tuple(configs[i].copy() for i in order),
                         pose_errors=tuple(errors[i] for i in order))


def _tile_batch(batch: GraphBatch, count: int) -> GraphBatch:
    b, n, d = batch.batch, batch.nodes, batch.dim
    if b != 1:
        raise ValueError("tiling expects a singleton batch")
    return GraphBatch(
        batch=count, nodes=n, dim=d,
        positions0=np.tile(batch.positions0, (count, 1)),
        features=np.tile(batch.features, (count, 1)),
        known=np.tile(batch.known, count),
        weights=np.broadcast_to(batch.weights, (count, n, n, 1)).copy(),
        presence=np.broadcast_to(batch.presence, (count, n, n, 1)).copy())


def sample_solutions(model: GenerativeIkModel, chain: KinematicChain, goal: Pose,
                     n_samples: int, k_best: int, seed: int,
                     graph: PointGraph | None = None) -> SampleReport:
    """Draw latents from the prior, decode point sets in one batch, recover
    configurations, and keep the k lowest-error ones."""
    if not 1 <= k_best <= n_samples:
        raise ValueError("need 1 <= k_best <= n_samples")
    g = graph if graph is not None else partial_graph(chain, goal)
    prior = model.prior(g)
    rng = np.random.default_rng(seed)
    z = prior.sample(n_samples, rng)                          # (L, N, Z)
    batch = _tile_batch(GraphBatch.from_graphs([g]), n_samples)
    decoded = model.decode_batch(batch, z.reshape(n_samples * g.num_nodes, -1))
    points = decoded.data.reshape(n_samples, g.num_nodes, g.dim)

    lo, hi = chain.lower_limits, chain.upper_limits
    candidates: list[np.ndarray] = []
    malformed = 0
    clamped = 0
    for s in range(n_samples):
        try:
            q = config_from_points(chain, points[s])
        except (MalformedPointSetError, DegenerateAnchorsError):
            malformed += 1
            continue
        q_clamped = np.clip(q, lo, hi)
        if np.abs(q_clamped - q).max() > 1e-12:
            clamped += 1
        candidates.append(q_clamped)
    if not candidates:
        raise AllSamplesMalformedError(
            f"all {n_samples} samples failed configuration recovery")
    solutions = select_solutions(goal, chain, candidates, k_best)
    return SampleReport(solutions=solutions, num_requested=n_samples,
                        num_malformed=malformed, num_clamped=clamped)


def chain_digest(chain: KinematicChain) -> str:
    blob = json.dumps(chain.to_json_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
