"""Visitation distributions over the map grid with explicit out-of-bounds mass.

A VisitationDist assigns probability to every observed map cell plus a single
scalar bucket (``oob``) aggregating everything not yet observed. Gold
distributions are built from demonstration trajectories; empirical ones from
executed positions. All values are plain numpy; the differentiable training
path lives in nets.py and shares the same math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import GridSpec, cell_centers, grid_coords, validate_grid
from .transport import DiscreteDistribution, ZeroObservedMass

GOLD_FLOOR = 1e-6  # epsilon floor baked into gold distributions (training regularizer)


@dataclass(frozen=True, eq=False)
class VisitationDist:
    """Probability grid over map cells plus out-of-bounds mass; sums to one."""

    grid: np.ndarray
    oob: float
    spec: GridSpec

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        validate_grid(grid, self.spec)
        if np.any(grid < 0) or self.oob < -1e-9:
            raise ValueError("negative probability")
        total = grid.sum() + self.oob
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probability mass sums to {total}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "oob", float(max(self.oob, 0.0)))

    @classmethod
    def from_grid(cls, grid: np.ndarray, spec: GridSpec, mask: np.ndarray | None = None,
                  oob_extra: float = 0.0) -> "VisitationDist":
        """Normalize a nonnegative grid; mass on mask==0 cells moves to oob."""
        grid = np.asarray(grid, dtype=float).copy()
        if np.any(grid < 0):
            raise ValueError("negative mass")
        total = grid.sum() + oob_extra
        if total <= 0:
            raise ValueError("no mass to normalize")
        grid /= total
        oob = oob_extra / total
        if mask is not None:
            unobserved = ~mask.astype(bool)
            oob += grid[unobserved].sum()
            grid[unobserved] = 0.0
        return cls(grid=grid, oob=oob, spec=spec)

    def observed_mass(self) -> float:
        return float(self.grid.sum())

    def conditioned_on_observed(self) -> DiscreteDistribution:
        """Drop the oob bucket and renormalize over cell centers."""
        mass = self.observed_mass()
        if mass <= 1e-12:
            raise ZeroObservedMass("no observed probability mass")
        idx = np.nonzero(self.grid > 0)
        centers = cell_centers(self.spec)[idx]
        return DiscreteDistribution(centers, self.grid[idx] / mass)

    def to_json(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "oob": self.oob,
            "side_cells": self.spec.side_cells,
            "meters_per_cell": self.spec.meters_per_cell,
            "center": list(self.spec.center),
            "env_yaw": self.spec.env_yaw,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VisitationDist":
        spec = GridSpec(
            side_cells=d["side_cells"],
            meters_per_cell=d["meters_per_cell"],
            center=tuple(d["center"]),
            env_yaw=d["env_yaw"],
        )
        return cls(grid=np.array(d["grid"]), oob=d["oob"], spec=spec)


def condition_on_observed(d: VisitationDist) -> DiscreteDistribution:
    return d.conditioned_on_observed()


def splat_points(points, spec: GridSpec) -> np.ndarray:
    """Bilinear rasterization of points into the grid; off-map mass is dropped."""
    g = grid_coords(np.atleast_2d(np.asarray(points, float)), spec)
    out = np.zeros(spec.shape())
    i0 = np.floor(g).astype(int)
    frac = g - i0
    S = spec.side_cells
    for di in (0, 1):
        for dj in (0, 1):
            ii = i0[:, 0] + di
            jj = i0[:, 1] + dj
            w = (frac[:, 0] if di else 1 - frac[:, 0]) * (frac[:, 1] if dj else 1 - frac[:, 1])
            ok = (ii >= 0) & (ii < S) & (jj >= 0) & (jj < S)
            np.add.at(out, (ii[ok], jj[ok]), w[ok])
    return out


def _smooth_normalize_mask(raw: np.ndarray, spec: GridSpec, mask, sigma_cells: float):
    if sigma_cells > 0:
        raw = gaussian_filter(raw, sigma=sigma_cells, mode="constant")
    total = raw.sum()
    if total <= 0:
        raise ValueError("gold mass vanished")
    grid = raw / total
    observed = np.ones(spec.shape(), dtype=bool) if mask is None else mask.astype(bool)
    oob = grid[~observed].sum()
    grid = np.where(observed, grid, 0.0)
    # epsilon floor over the observed support, then renormalize
    grid = np.where(observed, grid + GOLD_FLOOR, 0.0)
    z = grid.sum() + oob
    return grid / z, oob / z


def gold_distributions(
    gold_trajectory, mask: np.ndarray | None, spec: GridSpec, sigma_cells: float = 1.0
):
    """Gold trajectory-visitation and goal-visitation distributions.

    Mass is smoothed along the demonstration (std sigma_cells) and at its final
    position; mass on unobserved cells is summed into oob. Growing the mask can
    only shrink oob.
    """
    pts = np.atleast_2d(np.asarray(gold_trajectory, float))
    if len(pts) == 0:
        raise ValueError("gold trajectory must be nonempty")
    raw_p = splat_points(pts, spec)
    raw_g = splat_points(pts[-1:], spec)
    gp, op = _smooth_normalize_mask(raw_p, spec, mask, sigma_cells)
    gg, og = _smooth_normalize_mask(raw_g, spec, mask, sigma_cells)
    return (
        VisitationDist(grid=gp, oob=op, spec=spec),
        VisitationDist(grid=gg, oob=og, spec=spec),
    )


def empirical_visited(positions, spec: GridSpec, mask: np.ndarray | None = None) -> VisitationDist:
    """Uniform distribution over the distinct cells visited so far; oob = 0."""
    pts = np.atleast_2d(np.asarray(positions, float))
    if len(pts) == 0:
        raise ValueError("positions must be nonempty")
    g = np.rint(grid_coords(pts, spec)).astype(int)
    S = spec.side_cells
    ok = np.all((g >= 0) & (g < S), axis=1)
    if not np.any(ok):
        raise ValueError("all positions fall outside the map")
    cells = {(int(i), int(j)) for i, j in g[ok]}
    grid = np.zeros(spec.shape())
    for i, j in cells:
        if mask is not None and not mask[i, j]:
            raise ValueError(f"visited cell {(i, j)} is not observed")
        grid[i, j] = 1.0 / len(cells)
    return VisitationDist(grid=grid, oob=0.0, spec=spec)


def empirical_stop(final_position, spec: GridSpec) -> VisitationDist:
    """Unit mass at the stop cell; oob = 0."""
    return empirical_visited(np.atleast_2d(np.asarray(final_position, float))[-1:], spec)


def kl_loss(pred: VisitationDist, gold: VisitationDist, floor: float = GOLD_FLOOR) -> float:
    """D_KL(pred || gold) over the joint support (grid cells + oob).

    Gold probabilities are floored so the result is always finite; constructed
    gold distributions already carry the floor, for which this is a no-op.
    """
    if pred.spec != gold.spec:
        raise ValueError("grid specs differ")
    p = np.concatenate([pred.grid.ravel(), [pred.oob]])
    q = np.concatenate([gold.grid.ravel(), [gold.oob]])
    nz = p > 0
    q_safe = np.where(q[nz] > 0, q[nz], floor)  # floor only hard zeros; keeps KL finite
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q_safe))))


def heatmap_image(d: VisitationDist, bar_width: int = 4, upscale: int = 4) -> np.ndarray:
    """Grayscale-to-hot heatmap with a side bar showing the oob mass."""
    g = d.grid / (d.grid.max() + 1e-12)
    img = np.zeros(d.spec.shape() + (3,), dtype=float)
    img[..., 0] = np.clip(3 * g, 0, 1)
    img[..., 1] = np.clip(3 * g - 1, 0, 1)
    img[..., 2] = np.clip(3 * g - 2, 0, 1)
    # grid x is image up: transpose so row 0 is +x, col is +y flipped
    img = np.flipud(img.transpose(1, 0, 2))
    img = np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
    H = img.shape[0]
    bar = np.zeros((H, bar_width, 3))
    fill = int(round(d.oob * H))
    if fill > 0:
        bar[H - fill :, :, 1] = 0.8  # green bar height = oob belief
    out = np.concatenate([img, np.ones((H, 2, 3)) * 0.2, bar], axis=1)
    return (out * 255).astype(np.uint8)
