"""Serial revolute-joint chains: DH description, forward kinematics, pose metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class RobotSpecError(ValueError):
    """Raised when a robot description violates an invariant. Carries the JSON path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def wrap_angle(theta):
    """Wrap angle(s) to the interval (-pi, pi]."""
    wrapped = np.asarray(theta, dtype=float) - TWO_PI * np.floor(
        (np.asarray(theta, dtype=float) + math.pi) / TWO_PI
    )
    # floor maps +pi to -pi; fold it back so the interval is half-open at -pi
    wrapped = np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)
    if np.isscalar(theta):
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class JointSpec:
    """One revolute joint in DH form: (a, alpha, d, theta_offset), limits in radians."""

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0
    limits: tuple[float, float] = (-math.pi, math.pi)

    def validate(self, path: str = "joint") -> None:
        lo, hi = self.limits
        for name, v in (("a", self.a), ("alpha", self.alpha), ("d", self.d),
                        ("theta_offset", self.theta_offset)):
            if not math.isfinite(v):
                raise RobotSpecError(f"{path}.dh", f"{name} must be finite, got {v!r}")
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise RobotSpecError(f"{path}.limits", "limits must be finite")
        if not lo < hi:
            raise RobotSpecError(f"{path}.limits", f"need lo < hi, got [{lo}, {hi}]")
        if hi - lo > TWO_PI + 1e-12:
            raise RobotSpecError(f"{path}.limits", f"interval width {hi - lo} exceeds 2*pi")
        if self.a < 0:
            raise RobotSpecError(f"{path}.dh", f"a must be >= 0, got {self.a}")


@dataclass(frozen=True)
class Pose:
    """Rigid pose: DxD rotation (det +1, orthonormal) and a D-translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        R, t = self.rotation, self.translation
        d = t.shape[0]
        if R.shape != (d, d):
            raise ValueError(f"rotation shape {R.shape} does not match translation dim {d}")
        if np.abs(R.T @ R - np.eye(d)).max() >= 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) >= 1e-9:
            raise ValueError("rotation determinant is not +1")

    @property
    def dim(self) -> int:
        return self.translation.shape[0]

    def compose(self, other: "Pose") -> "Pose":
        """self followed by other expressed in self's frame (self @ other)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (.. x D) through this pose."""
        return points @ self.rotation.T + self.translation

    @staticmethod
    def identity(dim: int) -> "Pose":
        return Pose(np.eye(dim), np.zeros(dim))

    def to_json_dict(self) -> dict:
        return {"rotation": [list(map(float, row)) for row in self.rotation],
                "translation": [float(x) for x in self.translation]}

    @staticmethod
    def from_json_dict(obj: dict) -> "Pose":
        return Pose(np.array(obj["rotation"], dtype=float),
                    np.array(obj["translation"], dtype=float))


@dataclass(frozen=True)
class KinematicChain:
    """Serial chain of revolute joints; workspace dimension 2 (planar) or 3."""

    name: str
    joints: tuple[JointSpec, ...]
    dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        self.validate()

    def validate(self) -> None:
        if self.dim not in (2, 3):
            raise RobotSpecError("dim", f"workspace dim must be 2 or 3, got {self.dim}")
        if len(self.joints) < 2:
            raise RobotSpecError("joints", f"need >= 2 joints, got {len(self.joints)}")
        reach = 0.0
        for i, j in enumerate(self.joints):
            j.validate(path=f"joints[{i}]")
            if self.dim == 2 and (j.alpha != 0.0 or j.d != 0.0):
                raise RobotSpecError(f"joints[{i}]",
                                     "planar chains require alpha = 0 and d = 0")
            reach += abs(j.a) + abs(j.d)
        if reach <= 0.0:
            raise RobotSpecError("joints", "total reach (sum of |a| and |d|) must be > 0")

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def reach(self) -> float:
        """Total reach: sum of |a| and |d| over all joints."""
        return sum(abs(j.a) + abs(j.d) for j in self.joints)

    @property
    def lower_limits(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    @property
    def upper_limits(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "joints": [
                {"dh": [j.a, j.alpha, j.d, j.theta_offset],
                 "limits": [j.limits[0], j.limits[1]]}
                for j in self.joints
            ],
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "KinematicChain":
        return chain_from_dict(obj)


def _joint_transform(joint: JointSpec, q: float) -> np.ndarray:
    """4x4 homogeneous transform Rz(theta) Tz(d) Tx(a) Rx(alpha), theta = q + offset."""
    th = q + joint.theta_offset
    ct, st = math.cos(th), math.sin(th)
    ca, sa = math.cos(joint.alpha), math.sin(joint.alpha)
    a, d = joint.a, joint.d
    return np.array([
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def _check_config(chain: KinematicChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise ValueError(f"config has shape {q.shape}, chain has {chain.n} joints")
    if not np.isfinite(q).all():
        raise ValueError("config contains non-finite angles")
    return q


def _pose_from_homogeneous(T: np.ndarray, dim: int) -> Pose:
    return Pose(T[:dim, :dim].copy(), T[:dim, 3].copy())


def joint_frames(chain: KinematicChain, q) -> list[Pose]:
    """Prefix-product frames: frame k is the composition of the first k joint
    transforms (frame 0 is the base, frame n the end-effector pose).

    The z-axis of frame k-1 is joint k's rotation axis.
    """
    q = _check_config(chain, q)
    frames = [Pose.identity(chain.dim)]
    T = np.eye(4)
    for joint, qi in zip(chain.joints, q):
        T = T @ _joint_transform(joint, float(qi))
        frames.append(_pose_from_homogeneous(T, chain.dim))
    return frames


def forward_kinematics(chain: KinematicChain, q) -> Pose:
    """End-effector pose for configuration q (radians)."""
    return joint_frames(chain, q)[-1]


def pose_error(target: Pose, actual: Pose) -> tuple[float, float]:
    """(position error, rotation angle error in radians) between two poses."""
    if target.dim != actual.dim:
        raise ValueError(f"pose dims differ: {target.dim} vs {actual.dim}")
    pos = float(np.linalg.norm(target.translation - actual.translation))
    if target.dim == 3:
        rel = target.rotation.T @ actual.rotation
        c = (np.trace(rel) - 1.0) / 2.0
        rot = float(math.acos(min(1.0, max(-1.0, c))))
    else:
        ta = math.atan2(actual.rotation[1, 0], actual.rotation[0, 0])
        tt = math.atan2(target.rotation[1, 0], target.rotation[0, 0])
        rot = abs(wrap_angle(ta - tt))
    return pos, rot


def random_config(chain: KinematicChain, seed) -> np.ndarray:
    """Uniform draw within each joint's limit interval; deterministic given seed.

    `seed` may be an int or a numpy Generator (for callers managing streams)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.uniform(chain.lower_limits, chain.upper_limits)


# ---------------------------------------------------------------------------
# robot spec JSON
# ---------------------------------------------------------------------------

def chain_from_dict(obj: dict) -> KinematicChain:
    """Build and validate a chain from the robot spec JSON structure.

    Raises RobotSpecError naming the first offending field."""
    if not isinstance(obj, dict):
        raise RobotSpecError("$", "robot spec must be a JSON object")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise RobotSpecError("name", "missing or empty robot name")
    dim = obj.get("dim")
    if dim not in (2, 3):
        raise RobotSpecError("dim", f"dim must be 2 or 3, got {dim!r}")
    joints_obj = obj.get("joints")
    if not isinstance(joints_obj, list):
        raise RobotSpecError("joints", "joints must be a list")
    joints = []
    for i, jo in enumerate(joints_obj):
        path = f"joints[{i}]"
        if not isinstance(jo, dict):
            raise RobotSpecError(path, "joint entry must be an object")
        dh = jo.get("dh")
        if not (isinstance(dh, list) and len(dh) == 4):
            raise RobotSpecError(f"{path}.dh", "dh must be a list [a, alpha, d, theta0]")
        limits = jo.get("limits", [-math.pi, math.pi])
        if not (isinstance(limits, list) and len(limits) == 2):
            raise RobotSpecError(f"{path}.limits", "limits must be a list [lo, hi]")
        try:
            a, alpha, d, theta0 = (float(x) for x in dh)
            lo, hi = float(limits[0]), float(limits[1])
        except (TypeError, ValueError) as exc:
            raise RobotSpecError(path, f"non-numeric entry: {exc}") from None
        joints.append(JointSpec(a=a, alpha=alpha, d=d, theta_offset=theta0,
                                limits=(lo, hi)))
    return KinematicChain(name=name, joints=tuple(joints), dim=dim)


def load_chain(path) -> KinematicChain:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RobotSpecError("$", f"invalid JSON: {exc}") from None
    return chain_from_dict(obj)


def save_chain(chain: KinematicChain, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(chain.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
