"""Run configuration: every tunable in one flat dataclass.

Values default to the reference setup at desk scale. A config file is plain
``key = value`` text (``#`` comments, blank lines ignored); every field of
:class:`Config` is addressable by its field name.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class Config:
    # --- environment / simulator ---
    env_side: float = 4.7            # environment edge length, meters
    map_cells: int = 32              # semantic map side, cells (env occupies the centered half)
    v_max: float = 0.7               # forward velocity clip, m/s
    omega_max: float = 1.0           # yaw rate clip, rad/s
    dt: float = 0.5                  # control interval, s
    tau_dyn: float = 0.3             # first-order setpoint tracking time constant, s (0 = ideal)
    max_steps: int = 40              # episode cap; STOP forced afterwards
    safety_horizon: float = 1.0      # forward-simulation horizon of the safety clamp, s
    n_actors: int = 4                # parallel rollout workers in concurrent mode

    # --- camera / image ---
    cam_fov_deg: float = 84.0        # horizontal field of view
    cam_pitch_deg: float = 15.0      # downward tilt
    cam_height: float = 0.8          # flight altitude, meters
    image_w: int = 128
    image_h: int = 72

    # --- model dimensions ---
    feat_w: int = 32                 # first-person feature grid width (image_w / 4)
    feat_h: int = 18                 # first-person feature grid height (image_h / 4)
    feat_channels: int = 8           # C: semantic map channel count
    embed_dim: int = 16              # word embedding size
    instruction_dim: int = 32        # instruction RNN hidden size
    unet_levels: int = 3             # down/up cascade depth
    unet_channels: int = 16          # base channel width inside the cascade
    control_hidden: int = 64         # control/value MLP width
    q_dim: int = 8                   # fixed random embedding size for out-of-bounds scalars
    q_seed: int = 7771               # seed of the fixed q vectors (never trained)

    # --- stage coupling ---
    t_d: int = 1                     # visitation prediction interval, steps
    kappa: float = 0.5               # STOP probability threshold (deterministic action mode)
    stop_bias_init: float = -2.0     # initial stop-logit bias; keeps early rollouts moving

    # --- reward ---
    lambda_v: float = 0.3            # visitation reward weight
    lambda_s: float = 0.5            # stop reward weight
    lambda_e: float = 1.0            # exploration reward weight
    lambda_a: float = 0.3            # action-range penalty weight (not in the reference table; unvalidated)
    lambda_step: float = 0.04        # per-step penalty, applied as a subtraction
    v_penalty_lo: float = -0.5       # sampled actions outside these intervals are penalized
    v_penalty_hi: float = 1.7
    omega_penalty_lo: float = -2.0
    omega_penalty_hi: float = 2.0

    # --- supervised process (A) ---
    lr_supervised: float = 0.001
    weight_decay: float = 1e-6
    k_b_iter: int = 25               # warm-start supervised epochs before RL starts
    k_sl_discr: int = 5              # discriminator ascent steps per supervised iteration
    k_sl_iter: int = 10              # parameter sync period, iterations
    t_psi: float = 0.01              # discriminator parameter clamp bound
    contexts_per_execution: int = 6  # loss timesteps sampled per execution (0 = all)
    lambda_percept: float = 1.0
    lambda_ground: float = 1.0
    lambda_lang: float = 1.0
    sigma_gold: float = 1.0          # gold distribution smoothing, cells
    kl_floor: float = 1e-6           # epsilon floor on gold probabilities inside the KL
    rotation_aug_std: float = 0.5    # random map/gold rotation, radians (0 disables)

    # --- reinforcement process (B) ---
    gamma: float = 0.99
    ppo_clip: float = 0.1
    lr_rl: float = 0.00025
    adam_eps: float = 1e-5
    k_rl_epoch: int = 400            # RL epochs
    k_rl_iter: int = 50              # iterations per epoch
    n_rollouts: int = 20             # rollouts collected per iteration
    k_rl_steps: int = 8              # PPO gradient updates per iteration
    minibatch_size: int = 2          # episodes per PPO minibatch
    value_loss_weight: float = 1.0
    entropy_coef: float = 0.001
    entropy_decay_after: int = 200   # epochs; afterwards the coefficient is multiplied once by
    entropy_decay_factor: float = 0.1
    max_grad_norm: float = 1.0

    # --- word-object alignment ---
    t_pmi: float = 0.008             # PMI acceptance threshold
    t_tau: float = 0.1               # word frequency ceiling
    pmi_radius: float = 1.4          # object-near-trajectory radius, meters (15 m scaled to 4.7 m world)

    # --- transport ---
    emd_support_cap: int = 512       # hard cap per side for the exact solver
    emd_reward_truncate: int = 256   # support truncation inside the reward loop
    emd_backend: str = "exact"       # "exact" or "entropic" for reward-loop EMD
    sinkhorn_reg: float = 0.01
    sinkhorn_iters: int = 2000
    eval_resample_m: float = 0.05    # trajectory resampling spacing for the EMD metric, meters

    # --- oracle policy ---
    oracle_goal_ahead: float = 0.5   # dynamic goal distance along the gold trajectory, meters
    oracle_kp: float = 1.8           # P gain on heading error
    oracle_komega: float = 0.45      # forward speed reduction per rad/s of commanded turn
    oracle_stop_radius: float = 0.15

    # --- evaluation ---
    success_radius: float = 0.47     # stop-distance success threshold, meters

    # --- misc ---
    seed: int = 0
    train_dtype: str = "float32"     # learned blocks run in this dtype during training

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        for name in ("lambda_v", "lambda_s", "lambda_e", "lambda_a", "lambda_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.meters_per_cell <= 0:
            raise ValueError("map geometry degenerate")
        if not (0.0 < self.cam_fov_deg < 180.0):
            raise ValueError(f"cam_fov_deg must be in (0, 180), got {self.cam_fov_deg}")

    @property
    def map_side(self) -> float:
        """Map extent in meters: twice the environment edge."""
        return 2.0 * self.env_side

    @property
    def meters_per_cell(self) -> float:
        return self.map_side / self.map_cells

    @property
    def cam_fov(self) -> float:
        return math.radians(self.cam_fov_deg)

    @property
    def cam_pitch(self) -> float:
        return math.radians(self.cam_pitch_deg)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype == "bool":
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


def load_config(path) -> Config:
    """Parse a ``key = value`` config file into a Config."""
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        overrides[key] = _parse_value(key, raw)
    return Config(**overrides)


def save_config(cfg: Config, path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")
