"""Domain types and world/grid coordinate transforms.

World frame convention: fixed at episode start, origin at the agent start
position, x axis along the start heading, y left, z up. The map grid lives in
this frame; its center need not be the origin (episodes center the grid on the
environment).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

# Marker returned by world_to_grid for points outside the map extent. Callers
# route the associated probability mass to the out-of-bounds bucket.
OUT_OF_MAP = None


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]. Idempotent."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    """Planar pose with a camera tilt. Position is (x, y, z) in meters."""

    position: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    pitch: float = 0.0  # camera tilt only; the body stays level

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) == 2:
            pos = (pos[0], pos[1], 0.0)
        if not all(math.isfinite(v) for v in pos) or not math.isfinite(self.yaw):
            raise ValueError("non-finite pose")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.position[:2], dtype=float)

    def heading(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])

    def moved(self, x: float, y: float, yaw: float) -> "Pose":
        return replace(self, position=(x, y, self.position[2]), yaw=yaw)


STOP = "STOP"


@dataclass(frozen=True)
class Action:
    """Either STOP or a setpoint update (v forward m/s, omega yaw rate rad/s)."""

    stop: bool = False
    v: float = 0.0
    omega: float = 0.0

    @classmethod
    def stop_action(cls) -> "Action":
        return cls(stop=True)

    def clipped(self, v_max: float, omega_max: float) -> "Action":
        """Executed setpoints satisfy v in [0, v_max], omega in [-omega_max, omega_max]."""
        if self.stop:
            return self
        return Action(
            v=min(max(self.v, 0.0), v_max),
            omega=min(max(self.omega, -omega_max), omega_max),
        )


@dataclass
class Execution:
    """Sequence of (state id, pose, action); exactly the last action is STOP."""

    steps: list  # list[tuple[int, Pose, Action]]
    instruction_id: str = ""

    def __post_init__(self):
        if not self.steps:
            raise ValueError("execution must be nonempty")
        stops = [i for i, (_, _, a) in enumerate(self.steps) if a.stop]
        if stops != [len(self.steps) - 1]:
            raise ValueError("exactly the last action must be STOP")

    def poses(self) -> list:
        return [p for (_, p, _) in self.steps]

    def positions(self) -> np.ndarray:
        return np.array([p.xy for p in self.poses()])

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class GridSpec:
    """Uniform square lattice over the map extent.

    ``center`` is the map center in world coordinates; ``env_yaw`` rotates the
    environment square (centered on the map) relative to the world axes. The
    environment edge is half the map extent.
    """

    side_cells: int = 32
    meters_per_cell: float = 9.4 / 32
    center: tuple = (0.0, 0.0)
    env_yaw: float = 0.0

    def __post_init__(self):
        if self.side_cells < 1 or self.meters_per_cell <= 0:
            raise ValueError("invalid grid spec")

    @property
    def extent(self) -> float:
        return self.side_cells * self.meters_per_cell

    @property
    def env_side(self) -> float:
        return self.extent / 2.0

    def shape(self) -> tuple:
        return (self.side_cells, self.side_cells)

    @classmethod
    def for_config(cls, cfg, center=(0.0, 0.0), env_yaw: float = 0.0) -> "GridSpec":
        return cls(
            side_cells=cfg.map_cells,
            meters_per_cell=cfg.meters_per_cell,
            center=(float(center[0]), float(center[1])),
            env_yaw=float(env_yaw),
        )


def grid_coords(p, spec: GridSpec) -> np.ndarray:
    """Continuous grid coordinates of world point(s); cell centers at integers."""
    p = np.asarray(p, dtype=float)
    off = (spec.side_cells - 1) / 2.0
    return (p - np.asarray(spec.center)) / spec.meters_per_cell + off


def world_to_grid(p, spec: GridSpec):
    """Cell index (ix, iy) containing world point p, or OUT_OF_MAP."""
    g = np.rint(grid_coords(p, spec)).astype(int)
    if np.any(g < 0) or np.any(g >= spec.side_cells):
        return OUT_OF_MAP
    return (int(g[0]), int(g[1]))


def grid_to_world(cell, spec: GridSpec) -> np.ndarray:
    """World coordinates of the center of a cell."""
    ix, iy = cell
    if not (0 <= ix < spec.side_cells and 0 <= iy < spec.side_cells):
        raise IndexError(f"cell {cell} out of range for side {spec.side_cells}")
    off = (spec.side_cells - 1) / 2.0
    return np.asarray(spec.center) + (np.array([ix, iy], dtype=float) - off) * spec.meters_per_cell


def cell_centers(spec: GridSpec) -> np.ndarray:
    """(side, side, 2) array of cell center world coordinates."""
    off = (spec.side_cells - 1) / 2.0
    idx = np.arange(spec.side_cells, dtype=float) - off
    xx, yy = np.meshgrid(idx, idx, indexing="ij")
    out = np.stack([xx, yy], axis=-1) * spec.meters_per_cell
    return out + np.asarray(spec.center)


def rot2d(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def transform_points(points, angle: float, translation) -> np.ndarray:
    """Apply the rigid transform p -> R(angle) p + t to an (..., 2) array."""
    pts = np.asarray(points, dtype=float)
    return pts @ rot2d(angle).T + np.asarray(translation, dtype=float)


def relative_pose(world_pose: Pose, reference_pose: Pose) -> Pose:
    """Express world_pose in the frame attached to reference_pose.

    relative_pose(p, p) is the identity; composing with compose_pose inverts it.
    """
    d = world_pose.xy - reference_pose.xy
    local = rot2d(-reference_pose.yaw) @ d
    return Pose(
        position=(local[0], local[1], world_pose.position[2] - reference_pose.position[2]),
        yaw=wrap_angle(world_pose.yaw - reference_pose.yaw),
        pitch=world_pose.pitch,
    )


def compose_pose(reference_pose: Pose, local_pose: Pose) -> Pose:
    """Inverse of relative_pose: map a pose from the reference frame to world."""
    p = rot2d(reference_pose.yaw) @ local_pose.xy + reference_pose.xy
    return Pose(
        position=(p[0], p[1], reference_pose.position[2] + local_pose.position[2]),
        yaw=wrap_angle(reference_pose.yaw + local_pose.yaw),
        pitch=local_pose.pitch,
    )


def validate_grid(arr: np.ndarray, spec: GridSpec, channels: Optional[int] = None) -> np.ndarray:
    """Check that an array matches the spec shape and is finite."""
    arr = np.asarray(arr)
    expect = spec.shape() if channels is None else (channels,) + spec.shape()
    if arr.shape != expect:
        raise ValueError(f"grid shape {arr.shape} does not match {expect}")
    if arr.dtype != bool and not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    return arr
