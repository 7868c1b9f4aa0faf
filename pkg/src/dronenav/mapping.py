"""Differentiable deterministic geometry between camera and map.

Projection splats first-person feature pixels onto the ground plane, the
semantic map keeps a per-cell running mean over observations, observability
and boundary masks are plain numpy, and grid rotation is a bilinear resample.
Projection, accumulation, and rotation are all linear in the feature values,
so gradients flow through them exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import GridSpec, cell_centers, grid_coords, rot2d
from .world import CameraModel, Pose, pixel_rays, project_to_image


class DegeneratePose(Exception):
    """No camera ray reaches the ground plane."""


@dataclass(frozen=True, eq=False)
class ProjectionTable:
    """Bilinear splat weights from feature pixels to map cells for one pose."""

    pixel_index: np.ndarray  # (K,) flat indices into feat_h * feat_w
    cell_index: np.ndarray   # (K,) flat indices into side * side
    weight: np.ndarray       # (K,)
    visible: np.ndarray      # (side, side) bool, cells touched by any splat


def build_projection(
    pose: Pose,
    camera: CameraModel,
    spec: GridSpec,
    feat_w: int,
    feat_h: int,
    max_range: float | None = None,
) -> ProjectionTable:
    """Intersect every feature pixel's ray with the ground and splat bilinearly.

    Rays at or above the horizon and ground hits beyond max_range (default
    twice the map diagonal) are discarded; splat weights falling off the map
    are clipped, so weights per source pixel sum to at most one.
    """
    if max_range is None:
        max_range = 2.0 * spec.extent * math.sqrt(2.0)
    sx = camera.width / feat_w
    sy = camera.height / feat_h
    us = (np.arange(feat_w) + 0.5) * sx
    vs = (np.arange(feat_h) + 0.5) * sy
    uu, vv = np.meshgrid(us, vs)  # (feat_h, feat_w)
    dirs, origin = pixel_rays(pose, camera, us=uu, vs=vv)
    dz = dirs[..., 2].ravel()
    flat_dirs = dirs.reshape(-1, 3)
    ok = dz < -1e-9
    if not np.any(ok):
        raise DegeneratePose("camera looks at or above the horizon everywhere")
    t = np.where(ok, -origin[2] / np.where(ok, dz, -1.0), 0.0)
    ground = origin[None, :2] + t[:, None] * flat_dirs[:, :2]
    dist = np.linalg.norm(ground - origin[None, :2], axis=1)
    ok &= dist <= max_range

    g = grid_coords(ground, spec)
    i0 = np.floor(g).astype(int)
    frac = g - i0
    S = spec.side_cells
    pix, cell, wgt = [], [], []
    for di in (0, 1):
        for dj in (0, 1):
            ii = i0[:, 0] + di
            jj = i0[:, 1] + dj
            w = (frac[:, 0] if di else 1 - frac[:, 0]) * (frac[:, 1] if dj else 1 - frac[:, 1])
            keep = ok & (ii >= 0) & (ii < S) & (jj >= 0) & (jj < S) & (w > 0)
            pix.append(np.nonzero(keep)[0])
            cell.append(ii[keep] * S + jj[keep])
            wgt.append(w[keep])
    pixel_index = np.concatenate(pix)
    cell_index = np.concatenate(cell)
    weight = np.concatenate(wgt)
    visible = np.zeros(S * S, dtype=bool)
    visible[cell_index] = True
    return ProjectionTable(
        pixel_index=pixel_index,
        cell_index=cell_index,
        weight=weight,
        visible=visible.reshape(S, S),
    )


def project_to_ground(featC: torch.Tensor, table: ProjectionTable, spec: GridSpec):
    """Splat (C, feat_h, feat_w) features into a (C, side, side) world grid."""
    C = featC.shape[0]
    S = spec.side_cells
    flat = featC.reshape(C, -1)
    src = flat[:, table.pixel_index] * torch.as_tensor(
        table.weight, dtype=featC.dtype, device=featC.device
    )
    out = featC.new_zeros(C, S * S)
    idx = torch.as_tensor(table.cell_index, dtype=torch.long, device=featC.device)
    out.index_add_(1, idx, src)
    return out.reshape(C, S, S), table.visible


@dataclass(eq=False)
class SemanticMap:
    """Per-cell feature running mean plus the observation count behind it."""

    data: torch.Tensor    # (C, side, side)
    counts: torch.Tensor  # (side, side), detached bookkeeping
    spec: GridSpec

    @classmethod
    def empty(cls, channels: int, spec: GridSpec, dtype=torch.float32) -> "SemanticMap":
        S = spec.side_cells
        return cls(
            data=torch.zeros(channels, S, S, dtype=dtype),
            counts=torch.zeros(S, S, dtype=dtype),
            spec=spec,
        )


def accumulate(map_prev: SemanticMap, featW: torch.Tensor, visible: np.ndarray) -> SemanticMap:
    """Running mean update on visible cells: S <- (count * S + feat) / (count + 1)."""
    vis = torch.as_tensor(visible, dtype=map_prev.data.dtype, device=map_prev.data.device)
    counts = map_prev.counts
    new_counts = counts + vis
    denom = torch.clamp(new_counts, min=1.0)
    data = (counts * map_prev.data + vis * featW) / denom
    # untouched cells keep their value exactly
    data = torch.where(vis.bool(), data, map_prev.data)
    return SemanticMap(data=data, counts=new_counts.detach(), spec=map_prev.spec)


def update_observability(
    mask_prev: np.ndarray | None,
    pose: Pose,
    camera: CameraModel,
    spec: GridSpec,
    max_range: float | None = None,
) -> np.ndarray:
    """Union the previous mask with cells inside the current view frustum."""
    if max_range is None:
        max_range = 2.0 * spec.extent * math.sqrt(2.0)
    centers = cell_centers(spec).reshape(-1, 2)
    u, v, z = project_to_image(centers, pose, camera)
    dist = np.linalg.norm(centers - pose.xy[None, :], axis=1)
    now = (
        (z > 0.05)
        & (u >= 0)
        & (u < camera.width)
        & (v >= 0)
        & (v < camera.height)
        & (dist <= max_range)
    ).reshape(spec.shape())
    if mask_prev is None:
        return now
    return mask_prev.astype(bool) | now


def _clip_segment_to_rect(p0, p1, lo, hi):
    """Liang-Barsky: does segment p0-p1 intersect the axis-aligned rect [lo, hi]?"""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis in range(2):
        if abs(d[axis]) < 1e-15:
            if p0[axis] < lo[axis] or p0[axis] > hi[axis]:
                return False
        else:
            ta = (lo[axis] - p0[axis]) / d[axis]
            tb = (hi[axis] - p0[axis]) / d[axis]
            ta, tb = min(ta, tb), max(ta, tb)
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                return False
    return True


def boundary_mask(spec: GridSpec) -> np.ndarray:
    """Cells whose square overlaps the environment border (exact clip test)."""
    S = spec.side_cells
    half_env = spec.env_side / 2.0
    R = rot2d(spec.env_yaw)
    corners_local = np.array(
        [[-half_env, -half_env], [half_env, -half_env], [half_env, half_env], [-half_env, half_env]]
    )
    corners = corners_local @ R.T + np.asarray(spec.center)
    edges = [(corners[k], corners[(k + 1) % 4]) for k in range(4)]
    centers = cell_centers(spec)
    h = spec.meters_per_cell / 2.0
    mask = np.zeros(spec.shape(), dtype=bool)
    for i in range(S):
        for j in range(S):
            c = centers[i, j]
            lo, hi = c - h, c + h
            if any(_clip_segment_to_rect(e0, e1, lo, hi) for e0, e1 in edges):
                mask[i, j] = True
    return mask


def _bilinear_gather(grids: torch.Tensor, src: np.ndarray, spec: GridSpec) -> torch.Tensor:
    """Sample (N, S, S) channel grids at continuous source coords (S, S, 2)."""
    S = spec.side_cells
    g = grid_coords(src.reshape(-1, 2), spec)
    i0 = np.floor(g).astype(int)
    frac = g - i0
    out = grids.new_zeros(grids.shape[0], S * S)
    for di in (0, 1):
        for dj in (0, 1):
            ii = i0[:, 0] + di
            jj = i0[:, 1] + dj
            w = (frac[:, 0] if di else 1 - frac[:, 0]) * (frac[:, 1] if dj else 1 - frac[:, 1])
            ok = (ii >= 0) & (ii < S) & (jj >= 0) & (jj < S)
            idx_src = ii[ok] * S + jj[ok]
            idx_dst = np.nonzero(ok)[0]
            wt = torch.as_tensor(w[ok], dtype=grids.dtype, device=grids.device)
            out[:, idx_dst] += grids.reshape(grids.shape[0], -1)[:, idx_src] * wt
    return out.reshape(grids.shape[0], S, S)


def rotate_to_egocentric(grids: torch.Tensor, pose: Pose, spec: GridSpec) -> torch.Tensor:
    """Resample world-frame grids into the agent's egocentric frame.

    The agent sits at the output grid center heading +x; values are bilinear
    samples (zero outside the map), linear in the inputs.
    """
    S = spec.side_cells
    off = (S - 1) / 2.0
    idx = np.arange(S, dtype=float) - off
    ex, ey = np.meshgrid(idx, idx, indexing="ij")
    ego = np.stack([ex, ey], axis=-1) * spec.meters_per_cell
    src = ego.reshape(-1, 2) @ rot2d(pose.yaw).T + pose.xy[None, :]
    return _bilinear_gather(grids, src.reshape(S, S, 2), spec)


def rotate_about_center(grids: torch.Tensor, angle: float, spec: GridSpec) -> torch.Tensor:
    """Rotate grid contents by angle about the map center (augmentation)."""
    src_of_dst = lambda pts: (pts - np.asarray(spec.center)) @ rot2d(angle) + np.asarray(spec.center)
    centers = cell_centers(spec).reshape(-1, 2)
    src = src_of_dst(centers)
    return _bilinear_gather(grids, src.reshape(spec.side_cells, spec.side_cells, 2), spec)
