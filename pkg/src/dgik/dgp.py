"""Classical machinery: partial-graph completion by nonlinear least squares,
rigid alignment, configuration recovery from point sets, and brute-force IK
enumeration for small chains."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chains import (KinematicChain, Pose, forward_kinematics, pose_error,
                     wrap_angle)
from .graphs import (PointGraph, anchor_positions, base_axis_node_ids,
                     effector_node_ids, joint_node_ids, num_anchor_nodes,
                     partial_graph)


class NonConvergenceError(RuntimeError):
    """Completion residual stayed above tolerance after all restarts.

    Carries the best attempt in `.result` so callers may accept it anyway."""

    def __init__(self, result: "CompletionResult"):
        self.result = result
        super().__init__(f"no restart reached tolerance (best residual {result.residual:.3e})")


class DegenerateAnchorsError(ValueError):
    """Anchor set is rank-deficient; the rigid alignment is not determined."""


class MalformedPointSetError(ValueError):
    """Point set is too far from any valid configuration of the chain."""


class ProblemTooLargeError(ValueError):
    """Chain has too many joints for grid enumeration."""


@dataclass(frozen=True)
class DgpSolveOptions:
    max_iters: int = 300
    residual_tol: float = 1e-10
    step_tol: float = 1e-12
    damping_init: float = 1e-3
    seed: int = 0
    num_restarts: int = 8
    init_scale: float | None = None  # default: mean positive edge weight
    threads: int = 1

    def __post_init__(self):
        if self.max_iters <= 0 or self.num_restarts <= 0 or self.threads <= 0:
            raise ValueError("max_iters, num_restarts and threads must be positive")
        if self.residual_tol < 1e-12:
            raise ValueError("residual_tol must be >= 1e-12")
        if self.step_tol <= 0 or self.damping_init <= 0:
            raise ValueError("step_tol and damping_init must be positive")


@dataclass(frozen=True)
class CompletionResult:
    points: np.ndarray          # (N, D) best completion, known rows fixed
    residual: float             # 2-norm of squared-distance residual vector
    iterations: int
    restart_used: int
    success: bool
    restart_points: tuple[np.ndarray, ...] = ()
    restart_residuals: tuple[float, ...] = ()

    def report(self) -> dict:
        return {"residual": self.residual, "iters": self.iterations,
                "restart_used": self.restart_used, "success": self.success}


@dataclass(frozen=True)
class IkSolutionSet:
    """Configurations with matched (position, rotation) errors."""

    configs: tuple[np.ndarray, ...]
    pose_errors: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.configs) != len(self.pose_errors):
            raise ValueError("configs and pose_errors must have matching lengths")
        for p, r in self.pose_errors:
            if p < 0 or r < 0:
                raise ValueError("pose errors must be nonnegative")

    def __len__(self) -> int:
        return len(self.configs)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt completion
# ---------------------------------------------------------------------------

def _edge_residuals(points, eu, ev, w2):
    diff = points[eu] - points[ev]
    return np.einsum("ij,ij->i", diff, diff) - w2


def _lm_complete(points0, known_mask, eu, ev, w, opts: DgpSolveOptions):
    """Minimize sum over edges of (|pu-pv|^2 - d^2)^2 over unknown rows."""
    free = np.flatnonzero(~known_mask)
    points = points0.copy()
    dim = points.shape[1]
    w2 = w * w
    col_of = -np.ones(points.shape[0], dtype=int)
    col_of[free] = np.arange(free.size)

    r = _edge_residuals(points, eu, ev, w2)
    cost = float(np.linalg.norm(r))
    lam = opts.damping_init
    n_vars = free.size * dim
    iters = 0
    if n_vars == 0:
        return points, cost, iters
    for iters in range(1, opts.max_iters + 1):
        if cost < opts.residual_tol:
            iters -= 1
            break
        diff = points[eu] - points[ev]
        J = np.zeros((eu.size, n_vars))
        rows = np.arange(eu.size)
        for side, sign in ((eu, 2.0), (ev, -2.0)):
            cols = col_of[side]
            sel = cols >= 0
            for k in range(dim):
                J[rows[sel], cols[sel] * dim + k] += sign * diff[sel, k]
        A = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(25):
            try:
                delta = np.linalg.solve(A + lam * np.eye(n_vars), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = points.copy()
            cand[free] += delta.reshape(free.size, dim)
            r_new = _edge_residuals(cand, eu, ev, w2)
            cost_new = float(np.linalg.norm(r_new))
            if cost_new < cost:
                points, r, cost = cand, r_new, cost_new
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        if np.linalg.norm(delta) < opts.step_tol:
            break
    return points, cost, iters


def complete_partial(g: PointGraph, opts: DgpSolveOptions | None = None,
                     init: np.ndarray | None = None) -> CompletionResult:
    """Complete a partial graph into point positions by damped least squares
    with random restarts; known positions stay fixed.

    Returns the best restart (ties broken by lowest restart index). Raises
    NonConvergenceError (carrying the best attempt) if no restart reaches
    `opts.residual_tol`."""
    if not g.is_partial:
        raise ValueError("complete_partial expects a partial graph")
    opts = opts or DgpSolveOptions()
    known = g.known_mask
    scale = opts.init_scale
    if scale is None:
        positive = g.edges_w[g.edges_w > 0]
        scale = float(positive.mean()) if positive.size else 1.0
    centroid = g.points[known].mean(axis=0)
    rng = np.random.default_rng(opts.seed)

    inits = []
    for restart in range(opts.num_restarts):
        pts = g.points.copy()
        if restart == 0 and init is not None:
            pts = np.asarray(init, dtype=float).copy()
            pts[known] = g.points[known]
        else:
            noise = rng.normal(scale=scale, size=(g.num_nodes, g.dim))
            pts[~known] = centroid + noise[~known]
        inits.append(pts)

    def run(pts0):
        return _lm_complete(pts0, known, g.edges_u, g.edges_v, g.edges_w, opts)

    if opts.threads > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            outcomes = list(pool.map(run, inits))
    else:
        outcomes = [run(p) for p in inits]

    best = min(range(len(outcomes)), key=lambda i: (outcomes[i][1], i))
    points, residual, iters = outcomes[best]
    result = CompletionResult(
        points=points, residual=residual, iterations=iters, restart_used=best,
        success=residual < opts.residual_tol,
        restart_points=tuple(o[0] for o in outcomes),
        restart_residuals=tuple(o[1] for o in outcomes))
    if not result.success:
        raise NonConvergenceError(result)
    return result


# ---------------------------------------------------------------------------
# rigid alignment
# ---------------------------------------------------------------------------

def procrustes_align(points: np.ndarray, anchor_ids, anchor_targets: np.ndarray,
                     allow_reflection: bool = True) -> np.ndarray:
    """Rigidly move `points` so the anchor rows best match `anchor_targets`
    in least squares. A reflection is applied only when it fits the anchors
    strictly better than any proper rotation."""
    points = np.asarray(points, dtype=float)
    anchor_ids = np.asarray(anchor_ids, dtype=int)
    targets = np.asarray(anchor_targets, dtype=float)
    dim = points.shape[1]
    if anchor_ids.size < dim + 1:
        raise DegenerateAnchorsError(f"need >= {dim + 1} anchors, got {anchor_ids.size}")
    src = points[anchor_ids]
    c_src = src.mean(axis=0)
    c_tgt = targets.mean(axis=0)
    src_c = src - c_src
    tgt_c = targets - c_tgt
    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[-1] <= 1e-8 * max(sv[0], 1e-30):
        raise DegenerateAnchorsError("anchor configuration is rank-deficient")

    H = src_c.T @ tgt_c
    U, _, Vt = np.linalg.svd(H)
    R_free = Vt.T @ U.T
    det_sign = np.sign(np.linalg.det(R_free))
    D = np.eye(dim)
    D[-1, -1] = det_sign
    R_proper = Vt.T @ D @ U.T

    def resid(R):
        return float(np.linalg.norm(src_c @ R.T - tgt_c))

    R = R_free
    if det_sign < 0:
        scale = float(np.linalg.norm(tgt_c)) + 1e-12
        if not allow_reflection or resid(R_proper) <= resid(R_free) + 1e-9 * scale:
            R = R_proper
    t = c_tgt - R @ c_src
    return points @ R.T + t


# ---------------------------------------------------------------------------
# configuration recovery
# ---------------------------------------------------------------------------

PAIR_SEPARATION_TOL = 0.1       # |within-pair distance - 1| beyond this is malformed
GEOMETRY_RESIDUAL_TOL = 0.3     # rms misfit of a pair against chain geometry


def _local_rotation(joint, theta: float, dim: int) -> tuple[np.ndarray, np.ndarray]:
    ct, st = math.cos(theta), math.sin(theta)
    if dim == 2:
        return np.array([[ct, -st], [st, ct]]), np.array([joint.a * ct, joint.a * st])
    ca, sa = math.cos(joint.alpha), math.sin(joint.alpha)
    R = np.array([[ct, -st * ca, st * sa],
                  [st, ct * ca, -ct * sa],
                  [0.0, sa, ca]])
    t = np.array([joint.a * ct, joint.a * st, joint.d])
    return R, t


def _pair_template(joint, dim: int) -> np.ndarray:
    """Local coordinates (before the joint rotation) of the next frame's
    axis point(s): offsets t in {0,1} along the next z-axis."""
    if dim == 2:
        return np.array([[joint.a, 0.0]])
    sa, ca = math.sin(joint.alpha), math.cos(joint.alpha)
    return np.array([[joint.a, 0.0, joint.d],
                     [joint.a, -sa, joint.d + ca]])


def config_from_points(chain: KinematicChain, points: np.ndarray) -> np.ndarray:
    """Recover joint angles from a placed point set (inverse of the placement
    used by points_from_config, up to the chain's Euclidean symmetry).

    The set is first rigidly aligned onto the canonical base anchors, then each
    angle is extracted as the planar rotation best matching the next axis
    pair; angles are wrapped to (-pi, pi]. Raises MalformedPointSetError when
    the points are too far from any valid configuration."""
    points = np.asarray(points, dtype=float)
    dim = chain.dim
    n_anchor = num_anchor_nodes(dim)
    aligned = procrustes_align(points, np.arange(n_anchor), anchor_positions(dim))

    if dim == 3:
        pairs = [joint_node_ids(chain, i) for i in range(1, chain.n + 1)]
        pairs.append(effector_node_ids(chain))
        for ids in pairs:
            sep = float(np.linalg.norm(aligned[ids[1]] - aligned[ids[0]]))
            if abs(sep - 1.0) > PAIR_SEPARATION_TOL:
                raise MalformedPointSetError(
                    f"axis pair {ids} separation {sep:.4f} deviates from 1")

    # the first joint's points must coincide with the base axis
    base_ids = joint_node_ids(chain, 1)
    base_template = np.zeros((len(base_ids), dim))
    if dim == 3:
        base_template[1, 2] = 1.0
    rms = math.sqrt(float(np.mean(np.sum((aligned[list(base_ids)] - base_template) ** 2,
                                         axis=1))))
    if rms > GEOMETRY_RESIDUAL_TOL:
        raise MalformedPointSetError(f"first joint points off the base axis (rms {rms:.4f})")

    R = np.eye(dim)
    o = np.zeros(dim)
    q = np.zeros(chain.n)
    for i, joint in enumerate(chain.joints, start=1):
        ids = joint_node_ids(chain, i + 1) if i < chain.n else effector_node_ids(chain)
        obs = (aligned[list(ids)] - o) @ R
        tpl = _pair_template(joint, dim)
        num = float(np.sum(tpl[:, 0] * obs[:, 1] - tpl[:, 1] * obs[:, 0]))
        den = float(np.sum(tpl[:, 0] * obs[:, 0] + tpl[:, 1] * obs[:, 1]))
        if num == 0.0 and den == 0.0:
            raise MalformedPointSetError(f"joint {i} angle is unobservable from points")
        theta = math.atan2(num, den)
        ct, st = math.cos(theta), math.sin(theta)
        rot2 = np.array([[ct, -st], [st, ct]])
        pred = tpl.copy()
        pred[:, :2] = tpl[:, :2] @ rot2.T
        rms = math.sqrt(float(np.mean(np.sum((obs - pred) ** 2, axis=1))))
        if rms > GEOMETRY_RESIDUAL_TOL:
            raise MalformedPointSetError(
                f"joint {i} geometry misfit rms {rms:.4f} exceeds {GEOMETRY_RESIDUAL_TOL}")
        q[i - 1] = wrap_angle(theta - joint.theta_offset)
        R_loc, t_loc = _local_rotation(joint, theta, dim)
        o = o + R @ t_loc
        R = R @ R_loc
    return q


# ---------------------------------------------------------------------------
# brute-force enumeration
# ---------------------------------------------------------------------------

def _fk_positions_batch(chain: KinematicChain, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized forward kinematics: (M, n) configs -> translations (M, D)
    and rotations (M, D, D)."""
    m = Q.shape[0]
    T = np.broadcast_to(np.eye(4), (m, 4, 4)).copy()
    for j, joint in enumerate(chain.joints):
        th = Q[:, j] + joint.theta_offset
        ct, st = np.cos(th), np.sin(th)
        ca, sa = math.cos(joint.alpha), math.sin(joint.alpha)
        Tj = np.zeros((m, 4, 4))
        Tj[:, 0, 0] = ct
        Tj[:, 0, 1] = -st * ca
        Tj[:, 0, 2] = st * sa
        Tj[:, 0, 3] = joint.a * ct
        Tj[:, 1, 0] = st
        Tj[:, 1, 1] = ct * ca
        Tj[:, 1, 2] = -ct * sa
        Tj[:, 1, 3] = joint.a * st
        Tj[:, 2, 1] = sa
        Tj[:, 2, 2] = ca
        Tj[:, 2, 3] = joint.d
        Tj[:, 3, 3] = 1.0
        T = np.einsum("mij,mjk->mik", T, Tj)
    d = chain.dim
    return T[:, :d, 3], T[:, :d, :d]


def _pose_objective_batch(chain: KinematicChain, goal: Pose, Q: np.ndarray) -> np.ndarray:
    """Scalarized pose error; rotation is unconstrained for planar chains
    (a single end-effector point cannot pin orientation)."""
    t, Rm = _fk_positions_batch(chain, Q)
    pos = np.linalg.norm(t - goal.translation, axis=1)
    e = pos / chain.reach
    if chain.dim == 3:
        rel = np.einsum("ij,mjk->mik", goal.rotation.T, Rm)
        tr = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
        e = e + np.arccos(tr) / math.pi
    return e


def _dedup_configs(configs: np.ndarray, errors: np.ndarray, tol: float) -> np.ndarray:
    order = np.lexsort((np.arange(errors.size), errors))
    kept: list[int] = []
    for idx in order:
        q = configs[idx]
        close = any(np.abs(wrap_angle(q - configs[k])).max() < tol for k in kept)
        if not close:
            kept.append(int(idx))
    return np.array(sorted(kept), dtype=int)


def brute_force_ik(chain: KinematicChain, goal: Pose, grid_per_joint: int = 16,
                   tol: tuple[float, float] = (1e-3, 1e-3),
                   coarse_threshold: float = 0.5, max_refine: int = 4096,
                   dedup_tol: float = 1e-3) -> IkSolutionSet:
    """Independent IK oracle: dense joint-space grid scan plus coordinate
    descent refinement from every cell below a coarse error threshold.

    Planar chains are matched on position only. Solutions closer than
    `dedup_tol` radians (max joint difference) are merged."""
    if chain.n > 4:
        raise ProblemTooLargeError(f"{chain.n} joints is too many for grid enumeration")
    if grid_per_joint < 8:
        raise ValueError("grid_per_joint must be >= 8")

    lo, hi = chain.lower_limits, chain.upper_limits
    axes = [lo[j] + (np.arange(grid_per_joint) + 0.5) * (hi[j] - lo[j]) / grid_per_joint
            for j in range(chain.n)]
    grids = np.meshgrid(*axes, indexing="ij")
    Q = np.stack([g.ravel() for g in grids], axis=1)
    e = _pose_objective_batch(chain, goal, Q)

    keep = np.flatnonzero(e < coarse_threshold)
    if keep.size > max_refine:
        keep = keep[np.argsort(e[keep], kind="stable")[:max_refine]]
        keep.sort()
    if keep.size == 0:
        return IkSolutionSet(configs=(), pose_errors=())
    Q = Q[keep].copy()

    window = float((hi - lo).max()) / grid_per_joint
    offsets = np.linspace(-1.0, 1.0, 9)
    for _ in range(48):
        for j in range(chain.n):
            cand = Q[:, j][:, None] + window * offsets[None, :]
            cand = np.clip(cand, lo[j], hi[j])
            best_e = None
            best_v = Q[:, j].copy()
            for c in range(offsets.size):
                trial = Q.copy()
                trial[:, j] = cand[:, c]
                ec = _pose_objective_batch(chain, goal, trial)
                if best_e is None:
                    best_e, best_v = ec, trial[:, j].copy()
                else:
                    better = ec < best_e
                    best_e = np.where(better, ec, best_e)
                    best_v = np.where(better, trial[:, j], best_v)
            Q[:, j] = best_v
        window *= 0.55
        if window < 1e-12:
            break

    t, Rm = _fk_positions_batch(chain, Q)
    pos = np.linalg.norm(t - goal.translation, axis=1)
    if chain.dim == 3:
        rel = np.einsum("ij,mjk->mik", goal.rotation.T, Rm)
        tr = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
        rot = np.arccos(tr)
    else:
        ta = np.arctan2(Rm[:, 1, 0], Rm[:, 0, 0])
        tg = math.atan2(goal.rotation[1, 0], goal.rotation[0, 0])
        rot = np.abs(wrap_angle(ta - tg))
    ok = pos <= tol[0]
    if chain.dim == 3:
        ok &= rot <= tol[1]
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return IkSolutionSet(configs=(), pose_errors=())
    sol_q = Q[idx]
    sol_err = pos[idx] / chain.reach + (rot[idx] / math.pi if chain.dim == 3 else 0.0)
    keep_idx = _dedup_configs(sol_q, sol_err, dedup_tol)
    configs = tuple(sol_q[k].copy() for k in keep_idx)
    errors = tuple((float(pos[idx[k]]), float(rot[idx[k]])) for k in keep_idx)
    return IkSolutionSet(configs=configs, pose_errors=errors)


def two_link_planar_solutions(chain: KinematicChain, target: np.ndarray) -> list[np.ndarray]:
    """Closed-form position IK for a planar 2R chain (both elbow branches)."""
    if chain.dim != 2 or chain.n != 2:
        raise ValueError("closed form applies to planar 2R chains only")
    a1, a2 = chain.joints[0].a, chain.joints[1].a
    x, y = float(target[0]), float(target[1])
    r2 = x * x + y * y
    c2 = (r2 - a1 * a1 - a2 * a2) / (2.0 * a1 * a2)
    if abs(c2) > 1.0 + 1e-12:
        return []
    c2 = min(1.0, max(-1.0, c2))
    sols = []
    for sign in (1.0, -1.0):
        t2 = sign * math.acos(c2)
        t1 = math.atan2(y, x) - math.atan2(a2 * math.sin(t2), a1 + a2 * math.cos(t2))
        q = np.array([wrap_angle(t1 - chain.joints[0].theta_offset),
                      wrap_angle(t2 - chain.joints[1].theta_offset)])
        if not any(np.abs(wrap_angle(q - s)).max() < 1e-9 for s in sols):
            sols.append(q)
    return sols


def planar_3r_manifold(chain: KinematicChain, target: np.ndarray,
                       step: float = 1e-3) -> list[np.ndarray]:
    """Dense sampling of the 1-D solution set of a planar 3R position IK
    problem: sweep the first joint and solve the remaining 2R subchain in
    closed form. Used as a dense oracle for continuum agreement checks."""
    if chain.dim != 2 or chain.n != 3:
        raise ValueError("manifold sweep applies to planar 3R chains only")
    j1, j2, j3 = chain.joints
    lo1, hi1 = j1.limits
    count = max(2, int(math.ceil((hi1 - lo1) / step)) + 1)
    sols: list[np.ndarray] = []
    tx, ty = float(target[0]), float(target[1])
    for q1 in np.linspace(lo1, hi1, count):
        th1 = q1 + j1.theta_offset
        ox, oy = j1.a * math.cos(th1), j1.a * math.sin(th1)
        vx, vy = tx - ox, ty - oy
        lx = math.cos(th1) * vx + math.sin(th1) * vy
        ly = -math.sin(th1) * vx + math.cos(th1) * vy
        r2 = lx * lx + ly * ly
        c3 = (r2 - j2.a * j2.a - j3.a * j3.a) / (2.0 * j2.a * j3.a)
        if abs(c3) > 1.0:
            continue
        for sign in (1.0, -1.0):
            t3 = sign * math.acos(min(1.0, max(-1.0, c3)))
            t2 = math.atan2(ly, lx) - math.atan2(j3.a * math.sin(t3),
                                                 j2.a + j3.a * math.cos(t3))
            q2 = wrap_angle(t2 - j2.theta_offset)
            q3 = wrap_angle(t3 - j3.theta_offset)
            if j2.limits[0] <= q2 <= j2.limits[1] and j3.limits[0] <= q3 <= j3.limits[1]:
                sols.append(np.array([q1, q2, q3]))
    return sols


# ---------------------------------------------------------------------------
# end-to-end classical solve
# ---------------------------------------------------------------------------

def solve_ik(chain: KinematicChain, goal: Pose,
             opts: DgpSolveOptions | None = None) -> tuple[IkSolutionSet, CompletionResult]:
    """Classical IK: build the partial graph, complete it from every restart,
    and recover the distinct configurations found."""
    opts = opts or DgpSolveOptions()
    if opts.init_scale is None:
        opts = DgpSolveOptions(**{**opts.__dict__, "init_scale": chain.reach / chain.n})
    g = partial_graph(chain, goal)
    try:
        result = complete_partial(g, opts)
    except NonConvergenceError as exc:
        result = exc.result
    configs = []
    for pts, res in zip(result.restart_points, result.restart_residuals):
        if res >= opts.residual_tol:
            continue
        try:
            q = config_from_points(chain, pts)
        except (MalformedPointSetError, DegenerateAnchorsError):
            continue
        if not any(np.abs(wrap_angle(q - prev)).max() < 1e-6 for prev in configs):
            configs.append(q)
    errors = tuple(pose_error(goal, forward_kinematics(chain, q)) for q in configs)
    return IkSolutionSet(configs=tuple(configs), pose_errors=errors), result
