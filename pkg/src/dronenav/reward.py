"""Intrinsic reward: five terms computed from model predictions only.

The visitation and exploration terms are potential-based shapings, so their
episode sums telescope to potential differences exactly. Nothing here reads
hidden world state; everything derives from the agent context and the
stage-one predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .geometry import Action, GridSpec
from .transport import emd
from .visitation import VisitationDist, empirical_stop, empirical_visited


@dataclass(frozen=True)
class RewardWeights:
    lambda_v: float = 0.3
    lambda_s: float = 0.5
    lambda_e: float = 1.0
    lambda_a: float = 0.3
    lambda_step: float = 0.04  # applied as a subtraction every action

    def __post_init__(self):
        for name in ("lambda_v", "lambda_s", "lambda_e", "lambda_a", "lambda_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def from_config(cls, cfg: Config) -> "RewardWeights":
        return cls(
            lambda_v=cfg.lambda_v,
            lambda_s=cfg.lambda_s,
            lambda_e=cfg.lambda_e,
            lambda_a=cfg.lambda_a,
            lambda_step=cfg.lambda_step,
        )


def action_penalty(action: Action, cfg: Config) -> float:
    """Linear penalty for sampled setpoints outside the permitted intervals."""
    if action.stop:
        return 0.0
    r = 0.0
    if action.v < cfg.v_penalty_lo:
        r += cfg.v_penalty_lo - action.v
    elif action.v > cfg.v_penalty_hi:
        r += action.v - cfg.v_penalty_hi
    if action.omega < cfg.omega_penalty_lo:
        r += cfg.omega_penalty_lo - action.omega
    elif action.omega > cfg.omega_penalty_hi:
        r += action.omega - cfg.omega_penalty_hi
    return r


def _neg_emd_to_empirical(empirical: VisitationDist, pred: VisitationDist,
                          cfg: Config) -> float:
    """Shaping potential: -EMD(empirical, pred | observed)."""
    return -emd(
        empirical.conditioned_on_observed(),
        pred.conditioned_on_observed(),
        backend=cfg.emd_backend,
        truncate=cfg.emd_reward_truncate,
        support_cap=cfg.emd_support_cap,
        sinkhorn_reg=cfg.sinkhorn_reg,
        sinkhorn_iters=cfg.sinkhorn_iters,
    )


@dataclass
class RewardTracker:
    """Per-rollout reward state: previous potentials, belief maximum, visits."""

    weights: RewardWeights
    cfg: Config
    spec: GridSpec
    visited: list = field(default_factory=list)
    phi_v_prev: float = 0.0
    phi_e_prev: float = 0.0
    best_seen: float = 0.0  # max over past contexts of (1 - d^g(oob)); monotone
    started: bool = False

    def start(self, position, d_p: VisitationDist) -> None:
        """Initialize the visitation potential from the start singleton."""
        self.visited = [np.asarray(position, float)]
        self.phi_v_prev = _neg_emd_to_empirical(
            empirical_visited(self.visited, self.spec), d_p, self.cfg
        )
        self.phi_e_prev = 0.0
        self.best_seen = 0.0
        self.started = True

    def step(self, position, d_p: VisitationDist, d_g: VisitationDist,
             action: Action) -> dict:
        """Reward for acting from the current context; returns the term breakdown."""
        if not self.started:
            raise RuntimeError("RewardTracker.start was not called")
        position = np.asarray(position, float)
        if not any(np.array_equal(position, v) for v in self.visited):
            self.visited.append(position)

        phi_v = _neg_emd_to_empirical(
            empirical_visited(self.visited, self.spec), d_p, self.cfg
        )
        r_v = phi_v - self.phi_v_prev
        self.phi_v_prev = phi_v

        # exploration shaping uses the belief maximum over strictly past contexts
        phi_e = self.best_seen
        r_e = phi_e - self.phi_e_prev
        self.phi_e_prev = phi_e
        self.best_seen = max(self.best_seen, 1.0 - d_g.oob)

        r_s = 0.0
        if action.stop:
            stop_dist = empirical_stop(position, self.spec)
            r_s = -emd(
                stop_dist.conditioned_on_observed(),
                d_g.conditioned_on_observed(),
                backend=self.cfg.emd_backend,
                truncate=self.cfg.emd_reward_truncate,
                support_cap=self.cfg.emd_support_cap,
                sinkhorn_reg=self.cfg.sinkhorn_reg,
                sinkhorn_iters=self.cfg.sinkhorn_iters,
            )
            r_e = r_e - d_g.oob

        r_a = action_penalty(action, self.cfg)
        w = self.weights
        total = (
            w.lambda_v * r_v
            + w.lambda_s * r_s
            + w.lambda_e * r_e
            - w.lambda_a * r_a
            - w.lambda_step
        )
        return {
            "total": total,
            "r_v": r_v,
            "r_s": r_s,
            "r_e": r_e,
            "r_a": r_a,
            "phi_v": phi_v,
            "phi_e": phi_e,
        }


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """R_t = sum_{i >= t} gamma^(i-t) r_i, computed right to left."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.zeros_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out
