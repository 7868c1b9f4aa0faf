"""Quadcopter environment: layouts, setpoint dynamics, safety clamp, rendering.

The environment is a square course populated with colored landmark discs and
surrounded by four colored fences. Dynamics are planar: the vehicle holds a
velocity setpoint (forward speed, yaw rate) between actions and tracks it with
a first-order lag. The renderer is a vectorized ray caster over the ground
plane, the landmark discs, and the fence walls; visual styles recolor the same
geometry and never move it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .config import Config
from .geometry import Action, GridSpec, Pose, rot2d, transform_points, wrap_angle


class FailedPlacement(Exception):
    """Rejection sampling could not place all landmarks."""


# (name, radius m, RGB) -- 15 distinct catalog entries
LANDMARK_CATALOG = [
    ("red box", 0.16, (200, 40, 40)),
    ("blue bale", 0.20, (40, 70, 200)),
    ("yellow cone", 0.13, (230, 200, 30)),
    ("green bush", 0.22, (40, 150, 60)),
    ("orange barrel", 0.17, (235, 130, 30)),
    ("purple rock", 0.15, (130, 60, 170)),
    ("white chair", 0.14, (235, 235, 235)),
    ("black pot", 0.13, (35, 35, 35)),
    ("pink ball", 0.12, (240, 120, 180)),
    ("brown crate", 0.19, (130, 90, 50)),
    ("teal drum", 0.16, (40, 170, 170)),
    ("gray statue", 0.15, (120, 120, 130)),
    ("gold lamp", 0.12, (210, 170, 60)),
    ("maroon stump", 0.17, (120, 40, 50)),
    ("navy bucket", 0.13, (30, 40, 110)),
]

FENCE_HEIGHT = 0.35
FLOOR_COLOR = (96, 130, 88)
OUTSIDE_COLOR = (150, 145, 135)
SKY_COLOR = (170, 200, 235)
# fence colors on the +y, +x, -y, -x edges of the course square (its own frame)
FENCE_COLORS = {"top": (210, 50, 50), "right": (245, 245, 245),
                "bottom": (50, 80, 210), "left": (225, 210, 60)}

# semantic ids in rendered geometry
SEM_SKY = -1
SEM_FLOOR = -2
SEM_OUTSIDE = -3
SEM_FENCE = {"top": -4, "right": -5, "bottom": -6, "left": -7}
# landmarks use their index within the layout (0..len-1)


class DomainStyle(Enum):
    """Visual styles standing in for the simulated/physical appearance gap."""

    STYLE_SIM = "sim"
    STYLE_REALISH = "realish"


@dataclass(frozen=True, eq=False)
class Landmark:
    kind: int           # index into LANDMARK_CATALOG
    position: np.ndarray  # (2,)
    radius: float

    @property
    def name(self) -> str:
        return LANDMARK_CATALOG[self.kind][0]

    @property
    def color(self):
        return LANDMARK_CATALOG[self.kind][2]


@dataclass(frozen=True, eq=False)
class WorldLayout:
    """Landmark placement plus the pose of the course square in the current frame."""

    landmarks: tuple
    env_side: float = 4.7
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    yaw: float = 0.0  # rotation of the course square relative to the frame axes

    def transformed(self, angle: float, translation) -> "WorldLayout":
        """Rigidly map the layout into another frame (p -> R(angle) p + t)."""
        lms = tuple(
            replace(lm, position=transform_points(lm.position, angle, translation))
            for lm in self.landmarks
        )
        return WorldLayout(
            landmarks=lms,
            env_side=self.env_side,
            center=transform_points(self.center, angle, translation),
            yaw=wrap_angle(self.yaw + angle),
        )

    def to_course_frame(self, p) -> np.ndarray:
        """Coordinates of world point(s) in the course square's own frame."""
        return (np.atleast_2d(np.asarray(p, float)) - self.center) @ rot2d(self.yaw)

    def inside(self, p, margin: float = 0.0) -> np.ndarray:
        """True where point(s) lie inside the course square, shrunk by margin."""
        local = self.to_course_frame(p)
        half = self.env_side / 2.0 - margin
        return np.all(np.abs(local) <= half, axis=-1)

    def grid_spec(self, cfg: Config) -> GridSpec:
        return GridSpec(
            side_cells=cfg.map_cells,
            meters_per_cell=cfg.meters_per_cell,
            center=(float(self.center[0]), float(self.center[1])),
            env_yaw=self.yaw,
        )


def sample_layout(rng: np.random.Generator, cfg: Config, max_tries: int = 4000) -> WorldLayout:
    """Random course with 5-8 landmarks drawn from the catalog of 15.

    Placement is rejection-sampled: landmarks keep a margin from the fences and
    never overlap each other. Deterministic per rng state.
    """
    count = int(rng.integers(5, 9))
    kinds = rng.choice(len(LANDMARK_CATALOG), size=count, replace=False)
    half = cfg.env_side / 2.0
    clearance = 0.25
    placed = []
    for kind in kinds:
        radius = LANDMARK_CATALOG[kind][1]
        for attempt in range(max_tries):
            pos = rng.uniform(-(half - radius - 0.3), half - radius - 0.3, size=2)
            if all(
                np.linalg.norm(pos - q.position) >= radius + q.radius + clearance
                for q in placed
            ):
                placed.append(Landmark(kind=int(kind), position=np.round(pos, 4), radius=radius))
                break
        else:
            raise FailedPlacement(f"could not place landmark {kind} after {max_tries} tries")
    return WorldLayout(landmarks=tuple(placed), env_side=cfg.env_side)


def sample_start_pose(rng: np.random.Generator, layout: WorldLayout, margin: float = 0.5) -> Pose:
    """Random collision-free start pose in the course frame."""
    half = layout.env_side / 2.0 - margin
    for _ in range(1000):
        pos = rng.uniform(-half, half, size=2)
        if all(np.linalg.norm(pos - lm.position) > lm.radius + 0.25 for lm in layout.landmarks):
            pos = np.round(pos, 4)
            return Pose((pos[0], pos[1], 0.0), yaw=round(rng.uniform(-math.pi, math.pi), 6))
    raise FailedPlacement("no free start pose")


# ---------------------------------------------------------------------------
# dynamics


@dataclass(frozen=True)
class SimState:
    pose: Pose
    v: float = 0.0          # actual forward speed
    omega: float = 0.0      # actual yaw rate
    setpoint: tuple = (0.0, 0.0)
    t: int = 0              # actions taken
    done: bool = False


def integrate_unicycle(pose: Pose, v: float, omega: float, h: float) -> Pose:
    """Closed-form constant-velocity unicycle advance over h seconds."""
    x, y, _ = pose.position
    yaw = pose.yaw
    if abs(omega) < 1e-12:
        x += v * h * math.cos(yaw)
        y += v * h * math.sin(yaw)
        return pose.moved(x, y, yaw)
    yaw2 = yaw + omega * h
    x += v / omega * (math.sin(yaw2) - math.sin(yaw))
    y += v / omega * (math.cos(yaw) - math.cos(yaw2))
    return pose.moved(x, y, wrap_angle(yaw2))


def step(state: SimState, action: Action, dt: float, cfg: Config, substeps: int = 20):
    """Advance one control interval; returns (next state, substep pose trace).

    The actual velocities track the setpoint with time constant cfg.tau_dyn
    (0 gives the ideal unicycle); STOP freezes the state and ends the episode.
    The action must already be clipped/clamped by the caller.
    """
    if state.done:
        return state, [state.pose]
    if action.stop:
        return replace(state, done=True, t=state.t + 1), [state.pose]
    v_sp, w_sp = action.v, action.omega
    tau = cfg.tau_dyn
    pose = state.pose
    v, w = state.v, state.omega
    h = dt / substeps
    trace = []
    for _ in range(substeps):
        if tau <= 1e-9:
            v_mid, w_mid = v_sp, w_sp
            v_end, w_end = v_sp, w_sp
        else:
            decay_mid = math.exp(-0.5 * h / tau)
            decay_end = math.exp(-h / tau)
            v_mid = v_sp + (v - v_sp) * decay_mid
            w_mid = w_sp + (w - w_sp) * decay_mid
            v_end = v_sp + (v - v_sp) * decay_end
            w_end = w_sp + (w - w_sp) * decay_end
        pose = integrate_unicycle(pose, v_mid, w_mid, h)
        v, w = v_end, w_end
        trace.append(pose)
    return (
        SimState(pose=pose, v=v, omega=w, setpoint=(v_sp, w_sp), t=state.t + 1, done=False),
        trace,
    )


def safety_clamp(
    state: SimState, setpoint: Action, layout: WorldLayout, cfg: Config, margin: float = 0.01
) -> Action:
    """Reduce forward velocity (never yaw rate) until a forward simulation over
    the safety horizon stays inside the course."""
    if setpoint.stop:
        return setpoint

    def safe(v_try: float) -> bool:
        a = Action(v=v_try, omega=setpoint.omega)
        s = state
        remaining = cfg.safety_horizon
        while remaining > 1e-9:
            s, trace = step(s, a, min(cfg.dt, remaining), cfg)
            if not all(layout.inside(p.xy, margin=margin) for p in trace):
                return False
            remaining -= cfg.dt
        return True

    if safe(setpoint.v):
        return setpoint
    lo, hi = 0.0, setpoint.v
    if not safe(0.0):
        return Action(v=0.0, omega=setpoint.omega)  # momentum carries; best effort
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if safe(mid):
            lo = mid
        else:
            hi = mid
    return Action(v=lo, omega=setpoint.omega)


class Simulator:
    """Owns one episode's state; applies clipping, the safety clamp, and dynamics."""

    def __init__(self, layout: WorldLayout, start: Pose, cfg: Config, clamp: bool = True):
        self.layout = layout
        self.cfg = cfg
        self.clamp = clamp
        self.state = SimState(pose=start)

    def apply(self, action: Action) -> SimState:
        a = action.clipped(self.cfg.v_max, self.cfg.omega_max)
        if self.clamp and not a.stop:
            a = safety_clamp(self.state, a, self.layout, self.cfg)
        self.state, _ = step(self.state, a, self.cfg.dt, self.cfg)
        return self.state


# ---------------------------------------------------------------------------
# camera and rendering


@dataclass(frozen=True)
class CameraModel:
    fov: float = math.radians(84.0)     # horizontal
    width: int = 128
    height: int = 72
    pitch: float = math.radians(15.0)   # downward tilt
    mount_height: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.fov < math.pi):
            raise ValueError("fov out of range")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(self.fov / 2.0)

    @classmethod
    def for_config(cls, cfg: Config) -> "CameraModel":
        return cls(
            fov=cfg.cam_fov,
            width=cfg.image_w,
            height=cfg.image_h,
            pitch=cfg.cam_pitch,
            mount_height=cfg.cam_height,
        )


def camera_basis(pose: Pose, camera: CameraModel):
    """World-frame (right, down, forward) axes and origin of the camera."""
    yaw = pose.yaw
    beta = camera.pitch + pose.pitch
    cy, sy = math.cos(yaw), math.sin(yaw)
    cb, sb = math.cos(beta), math.sin(beta)
    forward = np.array([cy * cb, sy * cb, -sb])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    origin = np.array([pose.position[0], pose.position[1], camera.mount_height])
    return right, down, forward, origin


def pixel_rays(pose: Pose, camera: CameraModel, us=None, vs=None):
    """World-frame ray directions for pixel centers (full grid by default)."""
    if us is None:
        us = np.arange(camera.width) + 0.5
        vs = np.arange(camera.height) + 0.5
        uu, vv = np.meshgrid(us, vs)  # (H, W)
    else:
        uu, vv = np.asarray(us, float), np.asarray(vs, float)
    right, down, forward, origin = camera_basis(pose, camera)
    xc = (uu - camera.width / 2.0) / camera.focal
    yc = (vv - camera.height / 2.0) / camera.focal
    dirs = (
        xc[..., None] * right + yc[..., None] * down + forward
    )
    return dirs, origin


def project_to_image(points, pose: Pose, camera: CameraModel):
    """Pinhole projection of world points (x, y, z); returns (u, v, depth)."""
    pts = np.atleast_2d(np.asarray(points, float))
    if pts.shape[1] == 2:
        pts = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
    right, down, forward, origin = camera_basis(pose, camera)
    rel = pts - origin
    x = rel @ right
    y = rel @ down
    z = rel @ forward
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.width / 2.0 + camera.focal * x / z
        v = camera.height / 2.0 + camera.focal * y / z
    return u, v, z


def visible_landmarks(pose: Pose, layout: WorldLayout, camera: CameraModel) -> list:
    """Indices of layout landmarks whose center projects into the image."""
    if not layout.landmarks:
        return []
    pts = np.array([lm.position for lm in layout.landmarks])
    u, v, z = project_to_image(pts, pose, camera)
    ok = (z > 0.05) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return [i for i in range(len(layout.landmarks)) if ok[i]]


def render_geometry(state_pose: Pose, layout: WorldLayout, camera: CameraModel) -> np.ndarray:
    """Per-pixel semantic ids (H, W): landmark index, floor, fence, sky."""
    dirs, origin = pixel_rays(state_pose, camera)
    H, W = camera.height, camera.width
    dz = dirs[..., 2]
    ids = np.full((H, W), SEM_SKY, dtype=np.int32)

    # ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz < -1e-9, -origin[2] / dz, np.inf)
    ground = origin[None, None, :2] + t_ground[..., None] * dirs[..., :2]

    # fences: vertical walls on the course square edges
    half = layout.env_side / 2.0
    R = rot2d(layout.yaw)  # course -> world
    t_wall = np.full((H, W), np.inf)
    wall_id = np.zeros((H, W), dtype=np.int32)
    o_local = (origin[:2] - layout.center) @ R
    d_local = dirs[..., :2] @ R
    walls = [
        ("top", 1, half), ("bottom", 1, -half), ("right", 0, half), ("left", 0, -half),
    ]
    for name, axis, coord in walls:
        dn = d_local[..., axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(dn) > 1e-12, (coord - o_local[axis]) / dn, np.inf)
        other = o_local[1 - axis] + t * d_local[..., 1 - axis]
        z_hit = origin[2] + t * dz
        hit = (t > 1e-9) & (np.abs(other) <= half) & (z_hit >= 0.0) & (z_hit <= FENCE_HEIGHT)
        closer = hit & (t < t_wall)
        t_wall[closer] = t[closer]
        wall_id[closer] = SEM_FENCE[name]

    ground_valid = np.isfinite(t_ground)
    use_ground = ground_valid & (t_ground < t_wall)
    use_wall = np.isfinite(t_wall) & ~use_ground

    # classify ground hits
    if np.any(use_ground):
        g = ground[use_ground]
        inside = layout.inside(g)
        gid = np.where(inside, SEM_FLOOR, SEM_OUTSIDE).astype(np.int32)
        for i, lm in enumerate(layout.landmarks):
            on_disc = np.linalg.norm(g - lm.position, axis=1) <= lm.radius
            gid[on_disc] = i
        ids[use_ground] = gid
    ids[use_wall] = wall_id[use_wall]
    return ids


_STYLE_PARAMS = {
    DomainStyle.STYLE_SIM: dict(noise=0.0, gain=1.0, tint=(0, 0, 0), gradient=0.0),
    DomainStyle.STYLE_REALISH: dict(noise=9.0, gain=0.88, tint=(14, 8, -10), gradient=0.25),
}


def colorize(ids: np.ndarray, layout: WorldLayout, style: DomainStyle, seed: int = 0) -> np.ndarray:
    """Color a semantic-id image according to the visual style."""
    H, W = ids.shape
    img = np.zeros((H, W, 3), dtype=float)
    img[ids == SEM_SKY] = SKY_COLOR
    img[ids == SEM_FLOOR] = FLOOR_COLOR
    img[ids == SEM_OUTSIDE] = OUTSIDE_COLOR
    for name, sid in SEM_FENCE.items():
        img[ids == sid] = FENCE_COLORS[name]
    for i, lm in enumerate(layout.landmarks):
        img[ids == i] = lm.color
    p = _STYLE_PARAMS[style]
    if p["gradient"]:
        ramp = 1.0 - p["gradient"] * (np.arange(H) / max(H - 1, 1))[:, None, None]
        img = img * ramp
    img = img * p["gain"] + np.asarray(p["tint"], float)
    if p["noise"]:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, p["noise"], size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def render(
    state_pose: Pose,
    layout: WorldLayout,
    camera: CameraModel,
    style: DomainStyle = DomainStyle.STYLE_SIM,
    seed: int = 0,
    return_ids: bool = False,
):
    """First-person RGB image (H, W, 3) uint8; deterministic per arguments."""
    ids = render_geometry(state_pose, layout, camera)
    img = colorize(ids, layout, style, seed=seed)
    if return_ids:
        return img, ids
    return img


def render_topdown(layout: WorldLayout, trajectories=(), size: int = 360, heat=None) -> np.ndarray:
    """Orthographic overhead view for debugging; returns (size, size, 3) uint8."""
    span = layout.env_side * 1.25
    scale = size / span

    def to_px(p):
        local = layout.to_course_frame(p)[0]
        return (
            int(size / 2 + local[0] * scale),
            int(size / 2 - local[1] * scale),
        )

    img = np.full((size, size, 3), OUTSIDE_COLOR, dtype=np.uint8)
    half_px = int(layout.env_side / 2 * scale)
    c = size // 2
    img[c - half_px : c + half_px, c - half_px : c + half_px] = FLOOR_COLOR
    if heat is not None:
        # overlay a scalar field sampled on the course square
        hsz = heat.shape[0]
        ys, xs = np.mgrid[c - half_px : c + half_px, c - half_px : c + half_px]
        fx = ((xs - (c - half_px)) / (2 * half_px) * (hsz - 1)).astype(int)
        fy = (((c + half_px - 1) - ys) / (2 * half_px) * (hsz - 1)).astype(int)
        v = heat[np.clip(fx, 0, hsz - 1), np.clip(fy, 0, hsz - 1)]
        v = v / (v.max() + 1e-12)
        img[ys, xs, 0] = np.clip(img[ys, xs, 0] + 255 * v, 0, 255).astype(np.uint8)
    img[c - half_px, c - half_px : c + half_px] = FENCE_COLORS["top"]
    img[c + half_px - 1, c - half_px : c + half_px] = FENCE_COLORS["bottom"]
    img[c - half_px : c + half_px, c + half_px - 1] = FENCE_COLORS["right"]
    img[c - half_px : c + half_px, c - half_px] = FENCE_COLORS["left"]
    for lm in layout.landmarks:
        px, py = to_px(lm.position)
        r = max(2, int(lm.radius * scale))
        ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
        disc = ys**2 + xs**2 <= r * r
        yy = np.clip(py + ys[disc], 0, size - 1)
        xx = np.clip(px + xs[disc], 0, size - 1)
        img[yy, xx] = lm.color
    for traj, color in trajectories:
        pts = np.atleast_2d(np.asarray(traj, float))
        for p in pts:
            px, py = to_px(p)
            if 0 <= px < size and 0 <= py < size:
                img[max(py - 1, 0) : py + 2, max(px - 1, 0) : px + 2] = color
    return img


# ---------------------------------------------------------------------------
# hand-coded controllers


def resample_path(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a polyline at fixed arc-length spacing (endpoints kept)."""
    pts = np.atleast_2d(np.asarray(points, float))
    if len(pts) == 1:
        return pts.copy()
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total < 1e-12:
        return pts[:1].copy()
    n = max(int(math.ceil(total / spacing)) + 1, 2)
    si = np.linspace(0.0, total, n)
    x = np.interp(si, s, pts[:, 0])
    y = np.interp(si, s, pts[:, 1])
    return np.stack([x, y], axis=1)


class OracleController:
    """P-controller tracking a gold trajectory through a moving goal point.

    The dynamic goal sits a fixed distance ahead of the vehicle's progress
    along the trajectory; yaw rate is proportional to the heading error and the
    forward speed is the maximum minus a multiple of the commanded yaw rate.
    """

    def __init__(self, gold_trajectory: np.ndarray, cfg: Config):
        if len(gold_trajectory) == 0:
            raise ValueError("gold trajectory must be nonempty")
        self.cfg = cfg
        self.path = resample_path(np.asarray(gold_trajectory, float), 0.02)
        seg = np.linalg.norm(np.diff(self.path, axis=0), axis=1)
        self.arc = np.concatenate([[0.0], np.cumsum(seg)])
        self.progress_idx = 0

    def _advance_progress(self, position: np.ndarray):
        window_m = 1.0
        i0 = self.progress_idx
        i1 = np.searchsorted(self.arc, self.arc[i0] + window_m, side="right")
        cand = self.path[i0 : max(i1, i0 + 1)]
        d = np.linalg.norm(cand - position, axis=1)
        self.progress_idx = i0 + int(np.argmin(d))

    def action(self, state: SimState) -> Action:
        cfg = self.cfg
        pos = state.pose.xy
        self._advance_progress(pos)
        goal_s = self.arc[self.progress_idx] + cfg.oracle_goal_ahead
        gi = int(np.searchsorted(self.arc, goal_s, side="left"))
        at_end = gi >= len(self.path) - 1
        goal = self.path[-1] if at_end else self.path[gi]
        if at_end and np.linalg.norm(pos - self.path[-1]) < cfg.oracle_stop_radius:
            return Action.stop_action()
        bearing = math.atan2(goal[1] - pos[1], goal[0] - pos[0])
        err = wrap_angle(bearing - state.pose.yaw)
        omega = max(-cfg.omega_max, min(cfg.omega_max, cfg.oracle_kp * err))
        v = max(0.0, cfg.v_max - cfg.oracle_komega * abs(omega))
        if state.t + 2 >= cfg.max_steps:
            return Action.stop_action()
        return Action(v=v, omega=omega)
