"""Point-graph encoding of IK problems.

A configuration maps to a complete graph over placed points (all pairwise
distances known); a problem instance maps to a partial graph whose edges are
only the distances fixed by the robot structure and by the goal pose.

Node layout (stable ordering, used everywhere downstream):
  [base anchors: origin, +x, +y (, +z)] [joint points in chain order] [end-effector points]

For dim=3 each joint contributes a pair of points on its rotation axis at
offsets 0 and +1, and the end-effector contributes such a pair on the final
axis (N = 2n + 6). For dim=2 each joint is a single point and the
end-effector a single point (N = n + 4).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .chains import KinematicChain, Pose, forward_kinematics, joint_frames


class NodeKind(IntEnum):
    BASE = 0
    GENERAL = 1
    END_EFFECTOR = 2


_KIND_NAMES = {NodeKind.BASE: "base", NodeKind.GENERAL: "general",
               NodeKind.END_EFFECTOR: "end_effector"}
_KIND_FROM_NAME = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True)
class PointGraph:
    """Weighted distance graph over placed points.

    Unknown node positions are stored as exact zeros; absent edges are simply
    missing from the edge list (dense views expose them as weight 0 with a
    presence flag of 0).
    """

    dim: int
    kinds: np.ndarray          # (N,) int8 NodeKind values
    points: np.ndarray         # (N, dim) float64, zeros where unknown
    known_mask: np.ndarray     # (N,) bool
    edges_u: np.ndarray        # (E,) int32, u < v
    edges_v: np.ndarray        # (E,) int32
    edges_w: np.ndarray        # (E,) float64, nonnegative
    is_partial: bool

    def __post_init__(self):
        object.__setattr__(self, "kinds", np.asarray(self.kinds, dtype=np.int8))
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "known_mask", np.asarray(self.known_mask, dtype=bool))
        object.__setattr__(self, "edges_u", np.asarray(self.edges_u, dtype=np.int32))
        object.__setattr__(self, "edges_v", np.asarray(self.edges_v, dtype=np.int32))
        object.__setattr__(self, "edges_w", np.asarray(self.edges_w, dtype=float))

    @property
    def num_nodes(self) -> int:
        return self.points.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges_u.shape[0]

    @property
    def features(self) -> np.ndarray:
        """One-hot node features, N x 3, rows summing to 1."""
        out = np.zeros((self.num_nodes, 3))
        out[np.arange(self.num_nodes), self.kinds] = 1.0
        return out

    def weight_matrix(self) -> np.ndarray:
        """Dense symmetric (N, N) edge weights; absent edges are 0."""
        w = np.zeros((self.num_nodes, self.num_nodes))
        w[self.edges_u, self.edges_v] = self.edges_w
        w[self.edges_v, self.edges_u] = self.edges_w
        return w

    def presence_matrix(self) -> np.ndarray:
        """Dense symmetric (N, N) 0/1 flags marking present edges."""
        p = np.zeros((self.num_nodes, self.num_nodes))
        p[self.edges_u, self.edges_v] = 1.0
        p[self.edges_v, self.edges_u] = 1.0
        return p

    def validate(self, atol: float = 1e-9) -> None:
        n = self.num_nodes
        if self.points.shape != (n, self.dim):
            raise ValueError("points shape mismatch")
        if not ((self.kinds >= 0) & (self.kinds <= 2)).all():
            raise ValueError("invalid node kind")
        if (self.edges_u >= self.edges_v).any():
            raise ValueError("edges must satisfy u < v")
        if (self.edges_w < 0).any():
            raise ValueError("negative edge weight")
        if self.is_partial:
            expect_known = (self.kinds == NodeKind.BASE) | (self.kinds == NodeKind.END_EFFECTOR)
            if not (self.known_mask == expect_known).all():
                raise ValueError("partial graph must know exactly base and end-effector nodes")
            if np.abs(self.points[~self.known_mask]).max(initial=0.0) != 0.0:
                raise ValueError("unknown node positions must be exactly zero")
        else:
            if not self.known_mask.all():
                raise ValueError("complete graph must have all positions known")
            if self.num_edges != n * (n - 1) // 2:
                raise ValueError("complete graph must contain all node pairs")
            d = np.linalg.norm(self.points[self.edges_u] - self.points[self.edges_v], axis=1)
            if np.abs(d - self.edges_w).max(initial=0.0) >= atol:
                raise ValueError("complete-graph edge weights must match point distances")

    def to_json_dict(self) -> dict:
        nodes = []
        for i in range(self.num_nodes):
            pos = [float(x) for x in self.points[i]] if self.known_mask[i] else None
            nodes.append({"kind": _KIND_NAMES[NodeKind(int(self.kinds[i]))], "pos": pos})
        edges = [[int(u), int(v), float(w)]
                 for u, v, w in zip(self.edges_u, self.edges_v, self.edges_w)]
        return {"dim": self.dim, "nodes": nodes, "edges": edges}

    @staticmethod
    def from_json_dict(obj: dict) -> "PointGraph":
        dim = int(obj["dim"])
        kinds, pts, known = [], [], []
        for node in obj["nodes"]:
            kinds.append(int(_KIND_FROM_NAME[node["kind"]]))
            if node["pos"] is None:
                pts.append([0.0] * dim)
                known.append(False)
            else:
                pts.append([float(x) for x in node["pos"]])
                known.append(True)
        edges = sorted((int(u), int(v), float(w)) for u, v, w in obj["edges"])
        eu = [e[0] for e in edges]
        ev = [e[1] for e in edges]
        ew = [e[2] for e in edges]
        n = len(kinds)
        return PointGraph(dim=dim, kinds=np.array(kinds), points=np.array(pts),
                          known_mask=np.array(known), edges_u=np.array(eu),
                          edges_v=np.array(ev), edges_w=np.array(ew),
                          is_partial=not all(known))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "PointGraph":
        return PointGraph.from_json_dict(json.loads(text))


# ---------------------------------------------------------------------------
# node layout helpers
# ---------------------------------------------------------------------------

def num_anchor_nodes(dim: int) -> int:
    return dim + 1


def num_graph_nodes(chain: KinematicChain) -> int:
    if chain.dim == 3:
        return 2 * chain.n + 6
    return chain.n + 4


def anchor_positions(dim: int) -> np.ndarray:
    """Canonical base anchors: origin then unit points along each base axis."""
    return np.vstack([np.zeros(dim), np.eye(dim)])


def joint_node_ids(chain: KinematicChain, i: int) -> tuple[int, ...]:
    """Graph node indices for joint i's point(s), i in 1..n."""
    base = num_anchor_nodes(chain.dim)
    if chain.dim == 3:
        k = base + 2 * (i - 1)
        return (k, k + 1)
    return (base + i - 1,)


def effector_node_ids(chain: KinematicChain) -> tuple[int, ...]:
    n_nodes = num_graph_nodes(chain)
    if chain.dim == 3:
        return (n_nodes - 2, n_nodes - 1)
    return (n_nodes - 1,)


def base_axis_node_ids(chain: KinematicChain) -> tuple[int, ...]:
    """Anchor nodes lying on the first joint's rotation axis."""
    if chain.dim == 3:
        return (0, 3)  # origin and +z anchor
    return (0,)


def node_kinds(chain: KinematicChain) -> np.ndarray:
    kinds = np.full(num_graph_nodes(chain), int(NodeKind.GENERAL), dtype=np.int8)
    kinds[: num_anchor_nodes(chain.dim)] = int(NodeKind.BASE)
    for e in effector_node_ids(chain):
        kinds[e] = int(NodeKind.END_EFFECTOR)
    return kinds


def effector_points_from_pose(chain: KinematicChain, goal: Pose) -> np.ndarray:
    """End-effector node positions implied by a goal pose."""
    if goal.dim != chain.dim:
        raise ValueError(f"goal dim {goal.dim} does not match chain dim {chain.dim}")
    if chain.dim == 3:
        return np.vstack([goal.translation, goal.translation + goal.rotation[:, 2]])
    return goal.translation[None, :].copy()


def points_from_config(chain: KinematicChain, q) -> tuple[np.ndarray, np.ndarray]:
    """Place graph points for a configuration; returns (points, one-hot features)."""
    frames = joint_frames(chain, q)
    pts = [anchor_positions(chain.dim)]
    if chain.dim == 3:
        for i in range(chain.n):
            o = frames[i].translation
            z = frames[i].rotation[:, 2]
            pts.append(np.vstack([o, o + z]))
        o = frames[chain.n].translation
        z = frames[chain.n].rotation[:, 2]
        pts.append(np.vstack([o, o + z]))
    else:
        pts.append(np.vstack([frames[i].translation for i in range(chain.n)]))
        pts.append(frames[chain.n].translation[None, :])
    points = np.vstack(pts)
    kinds = node_kinds(chain)
    feats = np.zeros((points.shape[0], 3))
    feats[np.arange(points.shape[0]), kinds] = 1.0
    return points, feats


# ---------------------------------------------------------------------------
# graph constructors
# ---------------------------------------------------------------------------

def complete_graph(chain: KinematicChain, q) -> PointGraph:
    """All-pairs distance graph of the placed points for configuration q."""
    points, _ = points_from_config(chain, q)
    n = points.shape[0]
    iu, iv = np.triu_indices(n, k=1)
    w = np.linalg.norm(points[iu] - points[iv], axis=1)
    return PointGraph(dim=chain.dim, kinds=node_kinds(chain), points=points,
                      known_mask=np.ones(n, dtype=bool),
                      edges_u=iu, edges_v=iv, edges_w=w, is_partial=False)


def consecutive_pair_distances(joint) -> dict[tuple[int, int], float]:
    """Distances between axis-pair points of consecutive frames related by a
    joint's DH transform.

    Point s on the earlier axis (offset s in {0,1}) and point t on the later
    axis are separated by a configuration-independent distance."""
    a, al, d = joint.a, joint.alpha, joint.d
    out = {}
    for s in (0, 1):
        for t in (0, 1):
            out[(s, t)] = math.sqrt(a * a + (t * math.sin(al)) ** 2
                                    + (d + t * math.cos(al) - s) ** 2)
    return out


def structural_edges(chain: KinematicChain) -> dict[tuple[int, int], float]:
    """Edges whose weights are fixed by the robot structure, independent of q."""
    edges: dict[tuple[int, int], float] = {}

    def put(u, v, w):
        if u == v:
            raise ValueError("self edge")
        key = (u, v) if u < v else (v, u)
        edges[key] = w

    pairs = [base_axis_node_ids(chain)]
    pairs += [joint_node_ids(chain, i) for i in range(1, chain.n + 1)]
    pairs.append(effector_node_ids(chain))

    if chain.dim == 3:
        # within-pair separations are 1 by placement
        for pr in pairs[1:]:
            put(pr[0], pr[1], 1.0)
        # base axis pair and joint-1 pair are coincident point sets
        for s in (0, 1):
            for t in (0, 1):
                put(pairs[0][s], pairs[1][t], float(abs(s - t)))
        for k in range(1, chain.n + 1):
            dists = consecutive_pair_distances(chain.joints[k - 1])
            for (s, t), w in dists.items():
                put(pairs[k][s], pairs[k + 1][t], w)
    else:
        put(pairs[0][0], pairs[1][0], 0.0)
        for k in range(1, chain.n + 1):
            put(pairs[k][0], pairs[k + 1][0], chain.joints[k - 1].a)
    return edges


def partial_graph(chain: KinematicChain, goal: Pose) -> PointGraph:
    """Problem graph: structural edges plus all edges among the known
    (base anchor and goal-placed end-effector) nodes. Unknown positions are
    stored as zeros. Reachability is not checked here."""
    n_nodes = num_graph_nodes(chain)
    kinds = node_kinds(chain)
    known = (kinds == NodeKind.BASE) | (kinds == NodeKind.END_EFFECTOR)
    points = np.zeros((n_nodes, chain.dim))
    points[: num_anchor_nodes(chain.dim)] = anchor_positions(chain.dim)
    ee_ids = effector_node_ids(chain)
    points[list(ee_ids)] = effector_points_from_pose(chain, goal)

    edges = structural_edges(chain)
    known_ids = np.flatnonzero(known)
    for ai in range(len(known_ids)):
        for bi in range(ai + 1, len(known_ids)):
            u, v = int(known_ids[ai]), int(known_ids[bi])
            edges[(u, v)] = float(np.linalg.norm(points[u] - points[v]))

    items = sorted(edges.items())
    eu = np.array([k[0] for k, _ in items], dtype=np.int32)
    ev = np.array([k[1] for k, _ in items], dtype=np.int32)
    ew = np.array([w for _, w in items])
    return PointGraph(dim=chain.dim, kinds=kinds, points=points, known_mask=known,
                      edges_u=eu, edges_v=ev, edges_w=ew, is_partial=True)


def transform_graph(g: PointGraph, rotation: np.ndarray, translation: np.ndarray) -> PointGraph:
    """Apply a rigid (or reflecting) transform to the known positions.

    Edge weights are distances and therefore unchanged; unknown positions stay
    zero placeholders."""
    rotation = np.asarray(rotation, dtype=float)
    translation = np.asarray(translation, dtype=float)
    pts = g.points.copy()
    pts[g.known_mask] = g.points[g.known_mask] @ rotation.T + translation
    return PointGraph(dim=g.dim, kinds=g.kinds.copy(), points=pts,
                      known_mask=g.known_mask.copy(), edges_u=g.edges_u.copy(),
                      edges_v=g.edges_v.copy(), edges_w=g.edges_w.copy(),
                      is_partial=g.is_partial)


def random_rigid_transform(dim: int, rng: np.random.Generator,
                           allow_reflection: bool = False,
                           translation_scale: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Random orthogonal matrix (det +1, or -1 when reflections are allowed)
    and translation vector."""
    m = rng.normal(size=(dim, dim))
    qmat, r = np.linalg.qr(m)
    qmat = qmat * np.sign(np.diag(r))
    if allow_reflection:
        if rng.random() < 0.5:
            qmat[:, 0] = -qmat[:, 0]
    elif np.linalg.det(qmat) < 0:
        qmat[:, 0] = -qmat[:, 0]
    t = rng.normal(scale=translation_scale, size=dim)
    return qmat, t


# ---------------------------------------------------------------------------
# array adapter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphArrays:
    """Dense-array view of a PointGraph in the stable node ordering."""

    dim: int
    features: np.ndarray     # (N, 3) one-hot
    positions: np.ndarray    # (N, dim), zeros where unknown
    known: np.ndarray        # (N,) bool
    edge_index: np.ndarray   # (2, E) int32 with u < v
    edge_weights: np.ndarray  # (E,)
    is_partial: bool


def graph_to_arrays(g: PointGraph) -> GraphArrays:
    return GraphArrays(dim=g.dim, features=g.features, positions=g.points.copy(),
                       known=g.known_mask.copy(),
                       edge_index=np.vstack([g.edges_u, g.edges_v]),
                       edge_weights=g.edges_w.copy(), is_partial=g.is_partial)


def arrays_to_graph(arrays: GraphArrays) -> PointGraph:
    kinds = np.argmax(arrays.features, axis=1).astype(np.int8)
    return PointGraph(dim=arrays.dim, kinds=kinds, points=arrays.positions.copy(),
                      known_mask=arrays.known.copy(),
                      edges_u=arrays.edge_index[0].copy(),
                      edges_v=arrays.edge_index[1].copy(),
                      edges_w=arrays.edge_weights.copy(),
                      is_partial=arrays.is_partial)


def graph_goal_pose(chain: KinematicChain, q) -> Pose:
    """Goal pose realized by configuration q (convenience for dataset code)."""
    return forward_kinematics(chain, q)
