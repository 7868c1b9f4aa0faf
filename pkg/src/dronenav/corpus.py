"""Synthetic instruction corpus: task templates, gold paths, persistence, PMI.

Records live in a course-fixed frame (environment centered at the origin).
Episodes re-express them in a world frame anchored at the start pose, with the
x axis along the start heading, via :func:`world_geometry`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .geometry import GridSpec, Pose, rot2d, transform_points, wrap_angle
from .world import Landmark, WorldLayout, resample_path, sample_layout, sample_start_pose

DATASET_FORMAT = "dronenav-dataset"
DATASET_VERSION = 1
CONNECTIVE = "then"  # joins concatenated instruction segments
MIN_TURN_RADIUS = 0.15  # gold paths stay within the vehicle's turning ability


class PlanFailed(Exception):
    """Geometry admits no gold path for the sampled template."""


class MismatchedSegments(Exception):
    """Second segment does not continue the first."""


class EmptyDataset(Exception):
    pass


class ParseError(Exception):
    def __init__(self, path, lineno, why):
        super().__init__(f"{path}:{lineno}: {why}")
        self.lineno = lineno


@dataclass(eq=False)
class InstructionRecord:
    """One instruction with its layout, start pose, and gold trajectory."""

    id: str
    tokens: list
    layout: WorldLayout
    start_pose: Pose
    gold: np.ndarray          # (K, 2) course-frame positions, start first
    segments: int = 1
    templates: list = field(default_factory=list)  # semantics for truth checking
    style: str = "sim"

    def __post_init__(self):
        self.gold = np.atleast_2d(np.asarray(self.gold, float))
        if len(self.gold) == 0:
            raise ValueError("gold trajectory must be nonempty")
        if not all(t == t.lower() for t in self.tokens):
            raise ValueError("tokens must be lowercase")
        if self.segments not in (1, 2):
            raise ValueError("segments must be 1 or 2")


def world_geometry(record: InstructionRecord, cfg: Config):
    """Express a record in its episode world frame (start at origin, x forward).

    Returns (layout, gold trajectory, grid spec, start pose) in world frame.
    """
    p0 = record.start_pose.xy
    yaw0 = record.start_pose.yaw
    angle = -yaw0
    translation = -(rot2d(angle) @ p0)
    layout_w = record.layout.transformed(angle, translation)
    gold_w = transform_points(record.gold, angle, translation)
    spec = layout_w.grid_spec(cfg)
    return layout_w, gold_w, spec, Pose((0.0, 0.0, 0.0), yaw=0.0)


# ---------------------------------------------------------------------------
# gold path construction


def _chaikin(points: np.ndarray, iterations: int) -> np.ndarray:
    pts = points
    for _ in range(iterations):
        if len(pts) < 3:
            break
        out = [pts[0]]
        for p, q in zip(pts[:-1], pts[1:]):
            out.append(0.75 * p + 0.25 * q)
            out.append(0.25 * p + 0.75 * q)
        out.append(pts[-1])
        pts = np.array(out)
    return pts


def _max_curvature(path: np.ndarray) -> float:
    if len(path) < 3:
        return 0.0
    d = np.diff(path, axis=0)
    seg = np.linalg.norm(d, axis=1)
    keep = seg > 1e-9
    d, seg = d[keep], seg[keep]
    if len(d) < 2:
        return 0.0
    ang = np.arctan2(d[:, 1], d[:, 0])
    dang = np.abs(np.array([wrap_angle(a) for a in np.diff(ang)]))
    ds = 0.5 * (seg[:-1] + seg[1:])
    return float(np.max(dang / ds))


def _smooth_waypoints(way: np.ndarray, layout: WorldLayout, spacing: float = 0.10) -> np.ndarray:
    path = _chaikin(np.asarray(way, float), 3)
    fine = resample_path(path, 0.05)
    if not np.all(layout.inside(fine, margin=0.12)):
        raise PlanFailed("path leaves the course")
    if _max_curvature(fine) > 1.0 / MIN_TURN_RADIUS:
        fine = resample_path(_chaikin(np.asarray(way, float), 5), 0.05)
        if _max_curvature(fine) > 1.0 / MIN_TURN_RADIUS:
            raise PlanFailed("path too sharp for the vehicle")
    # 0.1 mm quantization keeps dataset round trips exact and files small
    return np.round(resample_path(fine, spacing), 4)


def _left_normal(d: np.ndarray) -> np.ndarray:
    return np.array([-d[1], d[0]])


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-9:
        raise PlanFailed("degenerate direction")
    return v / n


def _blend_heading(p0: np.ndarray, yaw: float, target: np.ndarray,
                   step: float = 0.45, max_turn: float = math.radians(40.0)):
    """Pursuit-style prefix that turns the heading toward the target gradually.

    Returns (waypoints including p0, final position, final heading). Keeps the
    resulting corners within the vehicle's turn capability after smoothing.
    """
    pts = [p0]
    p = p0.copy()
    for _ in range(14):
        to_go = target - p
        if np.linalg.norm(to_go) < step:
            break
        bearing = math.atan2(to_go[1], to_go[0])
        err = wrap_angle(bearing - yaw)
        if abs(err) <= max_turn:
            break
        yaw = wrap_angle(yaw + math.copysign(max_turn, err))
        p = p + step * np.array([math.cos(yaw), math.sin(yaw)])
        pts.append(p.copy())
    return pts, p, yaw


def _plan_waypoints(kind, start: Pose, lms, direction, rng):
    """Waypoint list realizing the template semantics; raises PlanFailed."""
    p0 = start.xy
    yaw0 = start.yaw
    if kind == "goto":
        lm = lms[0]
        if np.linalg.norm(lm.position - p0) < 0.7 + lm.radius:
            raise PlanFailed("target too close")
        prefix, p, _ = _blend_heading(p0, yaw0, lm.position)
        d = _unit(lm.position - p)
        end = lm.position - d * (lm.radius + 0.3)
        return prefix + [end]
    if kind == "pass":
        lm = lms[0]
        if np.linalg.norm(lm.position - p0) < 1.0:
            raise PlanFailed("landmark too close to pass")
        prefix, p, _ = _blend_heading(p0, yaw0, lm.position)
        d = _unit(lm.position - p)
        side = 1.0 if direction == "left" else -1.0
        n = _left_normal(d) * side
        margin = lm.radius + 0.4
        beside = lm.position + n * margin
        beyond = lm.position + d * (lm.radius + 0.75) + n * margin * 0.8
        return prefix + [beside, beyond]
    if kind == "between":
        a, b = lms
        mid = 0.5 * (a.position + b.position)
        gap = np.linalg.norm(a.position - b.position) - a.radius - b.radius
        if gap < 0.5:
            raise PlanFailed("gap too narrow")
        if np.linalg.norm(mid - p0) < 0.8:
            raise PlanFailed("midpoint too close")
        prefix, p, _ = _blend_heading(p0, yaw0, mid)
        d = _unit(mid - p)
        beyond = mid + d * 0.5
        return prefix + [mid, beyond]
    if kind == "turn_after":
        lm = lms[0]
        if np.linalg.norm(lm.position - p0) < 1.0:
            raise PlanFailed("landmark too close to turn after")
        prefix, p, _ = _blend_heading(p0, yaw0, lm.position)
        d = _unit(lm.position - p)
        side = 1.0 if direction == "left" else -1.0
        reach = lm.position - d * (lm.radius + 0.45)
        t1 = rot2d(side * math.radians(30.0)) @ d
        t2 = rot2d(side * math.radians(60.0)) @ d
        out1 = reach + t1 * 0.45
        out2 = out1 + t2 * 0.5
        return prefix + [reach, out1, out2]
    raise ValueError(f"unknown template kind {kind!r}")


_PHRASES = {
    "goto": ["go to the {a}", "fly to the {a}", "head to the {a}", "move to the {a}"],
    "pass": ["pass {dir} of the {a}", "fly past the {dir} side of the {a}",
             "go around the {dir} of the {a}"],
    "between": ["go between the {a} and the {b}", "fly between the {a} and the {b}",
                "pass between the {a} and the {b}"],
    "turn_after": ["turn {dir} after the {a}", "after the {a} turn {dir}",
                   "go to the {a} and turn {dir}"],
}


def _phrase(kind, lms, direction, rng) -> list:
    tpl = _PHRASES[kind][int(rng.integers(len(_PHRASES[kind])))]
    text = tpl.format(a=lms[0].name, b=lms[-1].name, dir=direction or "")
    return text.split()


def template_satisfied(template: dict, layout: WorldLayout, traj: np.ndarray):
    """Geometric predicates for one template: (goal correct, path correct)."""
    traj = np.atleast_2d(np.asarray(traj, float))
    kind = template["kind"]
    lms = [layout.landmarks[k] for k in template["landmarks"]]
    direction = template.get("direction")
    end = traj[-1]
    if kind == "goto":
        lm = lms[0]
        goal = np.linalg.norm(end - lm.position) <= lm.radius + 0.55
        return goal, goal
    if kind == "pass":
        lm = lms[0]
        d2 = np.linalg.norm(traj - lm.position, axis=1)
        k = int(np.argmin(d2))
        closest = traj[k]
        if k + 1 < len(traj):
            tangent = traj[min(k + 1, len(traj) - 1)] - traj[max(k - 1, 0)]
        else:
            tangent = traj[k] - traj[max(k - 1, 0)]
        if np.linalg.norm(tangent) < 1e-9:
            return False, False
        rel = closest - lm.position
        cross = tangent[0] * rel[1] - tangent[1] * rel[0]
        side_ok = cross > 0 if direction == "left" else cross < 0
        near = lm.radius + 1.0 >= d2[k] >= lm.radius * 0.8
        # goal: ended past the landmark, not at it
        goal = np.linalg.norm(end - lm.position) <= lm.radius + 1.6
        return goal, bool(side_ok and near)
    if kind == "between":
        a, b = lms
        mid = 0.5 * (a.position + b.position)
        path_ok = np.min(np.linalg.norm(traj - mid, axis=1)) <= 0.35
        goal = np.linalg.norm(end - mid) <= 1.2
        return bool(goal), bool(path_ok)
    if kind == "turn_after":
        lm = lms[0]
        d2 = np.linalg.norm(traj - lm.position, axis=1)
        reach_idx = np.nonzero(d2 <= lm.radius + 0.9)[0]
        if len(reach_idx) == 0:
            return False, False
        k = int(reach_idx[0])
        pre = traj[max(k - 1, 0)] - traj[max(k - 6, 0)]
        post = traj[-1] - traj[min(k + 1, len(traj) - 1)]
        if np.linalg.norm(pre) < 1e-9 or np.linalg.norm(post) < 1e-9:
            return False, False
        turn = wrap_angle(math.atan2(post[1], post[0]) - math.atan2(pre[1], pre[0]))
        want_sign = 1.0 if direction == "left" else -1.0
        ok = turn * want_sign >= math.radians(30.0)
        return bool(ok), bool(ok)
    raise ValueError(f"unknown template kind {kind!r}")


def generate_segment(rng, layout: WorldLayout, start: Pose, max_tries: int = 60):
    """One template instantiation with a self-checked gold path."""
    kinds = ["goto", "pass", "between", "turn_after"]
    for _ in range(max_tries):
        kind = kinds[int(rng.integers(len(kinds)))]
        idx = [int(i) for i in rng.permutation(len(layout.landmarks))]
        lm_ids = idx[:2] if kind == "between" else idx[:1]
        lms = [layout.landmarks[i] for i in lm_ids]
        direction = None
        if kind in ("pass", "turn_after"):
            direction = "left" if rng.random() < 0.5 else "right"
        try:
            way = _plan_waypoints(kind, start, lms, direction, rng)
            path = _smooth_waypoints(way, layout)
        except PlanFailed:
            continue
        template = {"kind": kind, "landmarks": lm_ids, "direction": direction}
        goal_ok, path_ok = template_satisfied(template, layout, path)
        if not (goal_ok and path_ok):
            continue
        tokens = _phrase(kind, lms, direction, rng)
        return tokens, path, template
    raise PlanFailed(f"no feasible template after {max_tries} tries")


def generate_task(
    rng: np.random.Generator,
    layout: WorldLayout,
    cfg: Config,
    record_id: str = "task",
    segments: int = 1,
    style: str = "sim",
    max_tries: int = 12,
) -> InstructionRecord:
    """Sample an instruction/path pair on the given layout."""
    last = None
    for _ in range(max_tries):
        start = sample_start_pose(rng, layout)
        try:
            tokens, path, template = generate_segment(rng, layout, start)
            rec = InstructionRecord(
                id=record_id,
                tokens=tokens,
                layout=layout,
                start_pose=start,
                gold=path,
                segments=1,
                templates=[template],
                style=style,
            )
            if segments == 1:
                return rec
            end = path[-1]
            tangent = path[-1] - path[max(len(path) - 6, 0)]
            yaw = math.atan2(tangent[1], tangent[0])
            start2 = Pose((end[0], end[1], 0.0), yaw=yaw)
            tokens2, path2, template2 = generate_segment(rng, layout, start2)
            rec2 = InstructionRecord(
                id=record_id + "-b",
                tokens=tokens2,
                layout=layout,
                start_pose=start2,
                gold=path2,
                segments=1,
                templates=[template2],
                style=style,
            )
            return concat_segments(rec, rec2)
        except PlanFailed as exc:
            last = exc
    raise PlanFailed(f"no feasible task on this layout: {last}")


def concat_segments(r1: InstructionRecord, r2: InstructionRecord) -> InstructionRecord:
    """Join two consecutive segments into one two-segment record."""
    if r1.layout is not r2.layout and not _same_layout(r1.layout, r2.layout):
        raise MismatchedSegments("segments use different layouts")
    if np.linalg.norm(r1.gold[-1] - r2.gold[0]) > 1e-6:
        raise MismatchedSegments("second segment does not start at the first's end")
    if len(r2.gold) < 2 or len(r1.gold) < 2:
        raise MismatchedSegments("degenerate segment")
    return InstructionRecord(
        id=r1.id,
        tokens=list(r1.tokens) + [CONNECTIVE] + list(r2.tokens),
        layout=r1.layout,
        start_pose=r1.start_pose,
        gold=np.concatenate([r1.gold, r2.gold[1:]], axis=0),
        segments=2,
        templates=list(r1.templates) + list(r2.templates),
        style=r1.style,
    )


def _same_layout(a: WorldLayout, b: WorldLayout) -> bool:
    if len(a.landmarks) != len(b.landmarks) or a.env_side != b.env_side:
        return False
    return all(
        la.kind == lb.kind and np.allclose(la.position, lb.position)
        for la, lb in zip(a.landmarks, b.landmarks)
    )


def make_corpus(
    rng: np.random.Generator,
    n: int,
    cfg: Config,
    two_segment_frac: float = 0.0,
    style: str = "sim",
    id_prefix: str = "task",
) -> list:
    """Sample n records on fresh layouts."""
    out = []
    while len(out) < n:
        layout = sample_layout(rng, cfg)
        segments = 2 if rng.random() < two_segment_frac else 1
        try:
            out.append(
                generate_task(rng, layout, cfg, f"{id_prefix}-{len(out):05d}", segments, style)
            )
        except PlanFailed:
            continue
    return out


@dataclass
class RotationAugment:
    """Training-time rotation of the map and gold distributions (radians)."""

    angle: float


def rotation_augment(rng: np.random.Generator, std: float = 0.5) -> RotationAugment:
    return RotationAugment(angle=float(rng.normal(0.0, std)))


# ---------------------------------------------------------------------------
# word-object alignments


@dataclass
class AlignmentTable:
    """PMI of (object kind, word) events with the accepted alignment set."""

    scores: dict              # (kind, token) -> pmi
    accepted: set             # pairs passing both thresholds
    word_freq: dict

    def mentioned(self, kind: int, tokens) -> bool:
        toks = set(tokens)
        return any((kind, t) in self.accepted for t in toks)


def extract_alignments(dataset, radius: float = 1.4, t_pmi: float = 0.008,
                       t_tau: float = 0.1) -> AlignmentTable:
    """Pointwise mutual information between near-trajectory objects and words."""
    if not dataset:
        raise EmptyDataset("alignment extraction needs a nonempty dataset")
    n = len(dataset)
    obj_count: dict = {}
    word_count: dict = {}
    joint_count: dict = {}
    for rec in dataset:
        near = set()
        for lm in rec.layout.landmarks:
            if np.min(np.linalg.norm(rec.gold - lm.position, axis=1)) <= radius:
                near.add(lm.kind)
        words = set(rec.tokens)
        for o in near:
            obj_count[o] = obj_count.get(o, 0) + 1
        for w in words:
            word_count[w] = word_count.get(w, 0) + 1
        for o in near:
            for w in words:
                joint_count[(o, w)] = joint_count.get((o, w), 0) + 1
    scores = {}
    accepted = set()
    freqs = {w: c / n for w, c in word_count.items()}
    for (o, w), c in joint_count.items():
        p_ow = c / n
        p_o = obj_count[o] / n
        p_w = freqs[w]
        pmi = p_ow * math.log(p_ow / (p_o * p_w))
        scores[(o, w)] = pmi
        if pmi > t_pmi and p_w < t_tau:
            accepted.add((o, w))
    return AlignmentTable(scores=scores, accepted=accepted, word_freq=freqs)


# ---------------------------------------------------------------------------
# persistence (line-delimited JSON records with a header line)


def _pack(arr) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(arr, float).ravel())


def _unpack(s: str, cols: int = 2) -> np.ndarray:
    return np.fromstring(s, sep=" ").reshape(-1, cols)


def _layout_to_json(layout: WorldLayout) -> dict:
    return {
        "env_side": layout.env_side,
        "center": _pack(layout.center),
        "yaw": layout.yaw,
        "landmarks": [
            {"kind": lm.kind, "position": _pack(lm.position), "radius": lm.radius}
            for lm in layout.landmarks
        ],
    }


def _layout_from_json(d: dict) -> WorldLayout:
    return WorldLayout(
        landmarks=tuple(
            Landmark(kind=l["kind"], position=_unpack(l["position"])[0], radius=l["radius"])
            for l in d["landmarks"]
        ),
        env_side=d["env_side"],
        center=_unpack(d["center"])[0],
        yaw=d["yaw"],
    )


def record_to_json(rec: InstructionRecord) -> dict:
    return {
        "id": rec.id,
        "tokens": rec.tokens,
        "layout": _layout_to_json(rec.layout),
        "start_pose": {"position": list(rec.start_pose.position), "yaw": rec.start_pose.yaw},
        "gold": _pack(rec.gold),  # packed floats parse an order of magnitude faster
        "segments": rec.segments,
        "templates": rec.templates,
        "style": rec.style,
    }


def record_from_json(d: dict) -> InstructionRecord:
    return InstructionRecord(
        id=d["id"],
        tokens=list(d["tokens"]),
        layout=_layout_from_json(d["layout"]),
        start_pose=Pose(tuple(d["start_pose"]["position"]), yaw=d["start_pose"]["yaw"]),
        gold=_unpack(d["gold"]),
        segments=d["segments"],
        templates=list(d["templates"]),
        style=d.get("style", "sim"),
    )


def save_dataset(dataset, path) -> None:
    path = Path(path)
    with path.open("w") as f:
        header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "count": len(dataset)}
        f.write(json.dumps(header) + "\n")
        for rec in dataset:
            f.write(json.dumps(record_to_json(rec)) + "\n")


def load_dataset(path) -> list:
    path = Path(path)
    records = []
    with path.open() as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"bad JSON: {exc.msg}") from exc
            if lineno == 1:
                if obj.get("format") != DATASET_FORMAT:
                    raise ParseError(path, lineno, "missing dataset header")
                if obj.get("version") != DATASET_VERSION:
                    raise ParseError(path, lineno, f"unsupported version {obj.get('version')}")
                continue
            try:
                records.append(record_from_json(obj))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, lineno, f"bad record: {exc}") from exc
    return records
