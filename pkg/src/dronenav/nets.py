"""Learned blocks: instruction encoder, image CNNs, grounding filter,
instruction-conditioned UNet, control/value networks, domain discriminator,
and auxiliary heads.

Everything is a small torch module sized for CPU training. Blocks are built
with an explicit dtype (float64 in gradient checks, float32 in training) and
verified against central finite differences before training is allowed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .geometry import Action, GridSpec
from .visitation import GOLD_FLOOR, VisitationDist


class NonFinite(Exception):
    """A tensor went NaN/Inf; training halts with context."""


def ensure_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFinite(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# vocabulary

PAD, OOV = 0, 1


class Vocabulary:
    """Token ids with reserved padding and out-of-vocabulary slots."""

    def __init__(self, tokens=()):
        self.itos = ["<pad>", "<oov>"] + sorted(set(tokens))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_records(cls, records) -> "Vocabulary":
        toks = [t for r in records for t in r.tokens]
        return cls(toks)

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens) -> torch.Tensor:
        ids = [self.stoi.get(t, OOV) for t in tokens]
        if not ids:
            ids = [OOV]  # defined fallback for empty instructions
        return torch.tensor(ids, dtype=torch.long)


# ---------------------------------------------------------------------------
# blocks


class InstructionEncoder(nn.Module):
    """Word embeddings + LSTM; the instruction vector is the last hidden state."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD)
        self.rnn = nn.LSTM(embed_dim, hidden, batch_first=True)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = self.embed(token_ids)[None]  # (1, L, E)
        _, (h, _) = self.rnn(x)
        return h[0, 0]


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        y = F.leaky_relu(self.c1(x), 0.1)
        y = self.c2(y)
        return F.leaky_relu(x + y, 0.1)


class ImageEncoder(nn.Module):
    """Reduced-depth residual CNN, 4x spatial downsample: (3,H,W) -> (C,H/4,W/4)."""

    def __init__(self, out_channels: int, width: int = 16):
        super().__init__()
        self.c1 = nn.Conv2d(3, width, 5, stride=2, padding=2)
        self.r1 = ResidualBlock(width)
        self.c2 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.r2 = ResidualBlock(width)
        self.out = nn.Conv2d(width, out_channels, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = img[None] if img.dim() == 3 else img
        x = F.leaky_relu(self.c1(x), 0.1)
        x = self.r1(x)
        x = F.leaky_relu(self.c2(x), 0.1)
        x = self.r2(x)
        x = self.out(x)
        return x[0] if img.dim() == 3 else x


def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float in [0, 1]."""
    return torch.as_tensor(img.astype(np.float32) / 255.0, dtype=dtype).permute(2, 0, 1)


class GroundingFilter(nn.Module):
    """1x1 convolution whose kernel is an affine function of the instruction."""

    def __init__(self, channels: int, u_dim: int):
        super().__init__()
        self.channels = channels
        self.make_kernel = nn.Linear(u_dim, channels * channels)

    def kernel(self, u: torch.Tensor) -> torch.Tensor:
        return self.make_kernel(u).reshape(self.channels, self.channels, 1, 1)

    def forward(self, sem: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        return F.conv2d(sem[None], self.kernel(u))[0]  # no additive bias on the conv


class ConditionalUNet(nn.Module):
    """Down/up convolution cascade with instruction-generated 1x1 filters.

    Returns a 2-channel score map at input resolution plus a 2-vector of
    out-of-bounds logits (one per output distribution).
    """

    def __init__(self, in_channels: int, base: int, levels: int, u_dim: int):
        super().__init__()
        self.levels = levels
        downs, lang, ups = [], [], []
        ch = in_channels
        for k in range(levels):
            downs.append(nn.Conv2d(ch, base, 3, stride=2, padding=1))
            lang.append(nn.Linear(u_dim, base * base))
            ch = base
        for k in range(levels):
            in_ch = base if k == levels - 1 else 2 * base
            out_ch = 2 if k == 0 else base
            ups.append(nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.downs = nn.ModuleList(downs)
        self.lang = nn.ModuleList(lang)
        self.ups = nn.ModuleList(ups)
        self.base = base
        self.head = nn.Conv2d(base, 2, 3, padding=1)

    def forward(self, sem: torch.Tensor, ground: torch.Tensor, u: torch.Tensor):
        x = torch.cat([sem, ground], dim=0)[None]
        feats = []
        for down in self.downs:
            x = F.leaky_relu(down(x), 0.1)
            feats.append(x)
        gs = []
        for k, feat in enumerate(feats):
            K = self.lang[k](u).reshape(self.base, self.base, 1, 1)
            gs.append(F.conv2d(feat, K))
        h_vec = None
        up = None
        for k in range(self.levels - 1, -1, -1):
            inp = gs[k] if up is None else torch.cat([up, gs[k]], dim=1)
            y = self.ups[k](inp)
            if k > 0:
                y = F.leaky_relu(y, 0.1)
            up = F.interpolate(y, scale_factor=2, mode="nearest")
            if k == 1:
                # oob head reads the second-to-last decoder level
                h_vec = self.head(up).mean(dim=(2, 3))[0]
        scores = up[0]  # (2, S, S)
        if h_vec is None:  # single-level cascade
            h_vec = self.head(up).mean(dim=(2, 3))[0]
        return scores, h_vec


def normalize_with_oob(scores: torch.Tensor, oob_logit: torch.Tensor, mask: np.ndarray):
    """Joint softmax over observed cells plus the out-of-bounds logit.

    Unobserved cells are excluded from the support. Returns (cell log-probs
    with -inf outside the mask, oob log-prob).
    """
    m = torch.as_tensor(mask.astype(bool))
    flat = scores.reshape(-1)
    keep = m.reshape(-1)
    neg = torch.finfo(scores.dtype).min
    masked = torch.where(keep, flat, torch.full_like(flat, neg))
    joint = torch.cat([masked, oob_logit.reshape(1)])
    logz = torch.logsumexp(joint[torch.cat([keep, torch.ones(1, dtype=torch.bool)])], dim=0)
    logp_cells = torch.where(keep, flat - logz, torch.full_like(flat, -float("inf")))
    return logp_cells.reshape(scores.shape), oob_logit - logz


def visitation_from_logprobs(logp_cells: torch.Tensor, logp_oob: torch.Tensor,
                             spec: GridSpec) -> VisitationDist:
    grid = torch.exp(logp_cells).detach().cpu().double().numpy()
    grid[~np.isfinite(grid)] = 0.0
    oob = float(torch.exp(logp_oob).detach())
    total = grid.sum() + oob
    return VisitationDist(grid=grid / total, oob=oob / total, spec=spec)


def kl_to_gold(logp_cells: torch.Tensor, logp_oob: torch.Tensor, gold: VisitationDist):
    """Differentiable D_KL(pred || gold) matching visitation.kl_loss."""
    q = torch.as_tensor(gold.grid, dtype=logp_cells.dtype).reshape(-1)
    lp = logp_cells.reshape(-1)
    support = torch.isfinite(lp)
    p = torch.exp(lp[support])
    qs = q[support]
    qs = torch.where(qs > 0, qs, torch.full_like(qs, GOLD_FLOOR))
    kl = (p * (lp[support] - torch.log(qs))).sum()
    p_oob = torch.exp(logp_oob)
    q_oob = max(gold.oob, GOLD_FLOOR)
    kl = kl + p_oob * (logp_oob - math.log(q_oob))
    return kl


# ---------------------------------------------------------------------------
# stage 2: control and value networks


@dataclass
class Stage2Output:
    v_mean: torch.Tensor
    omega_mean: torch.Tensor
    stop_logit: torch.Tensor
    sigma_v: torch.Tensor
    sigma_omega: torch.Tensor

    def detached(self) -> "Stage2Output":
        return Stage2Output(*(x.detach() for x in
                              (self.v_mean, self.omega_mean, self.stop_logit,
                               self.sigma_v, self.sigma_omega)))


def _half(n: int) -> int:
    return (n + 1) // 2


class GridEncoder(nn.Module):
    def __init__(self, in_ch: int, side: int, hidden: int):
        super().__init__()
        self.c1 = nn.Conv2d(in_ch, 8, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(16, 16, 3, stride=2, padding=1)
        s = _half(_half(_half(side)))
        self.fc = nn.Linear(16 * s * s, hidden)

    def forward(self, x):
        x = F.leaky_relu(self.c1(x[None]), 0.1)
        x = F.leaky_relu(self.c2(x), 0.1)
        x = F.leaky_relu(self.c3(x), 0.1)
        return F.leaky_relu(self.fc(x.reshape(1, -1)), 0.1)[0]


class ControlNet(nn.Module):
    """Maps egocentric visitation grids, masks, and oob scalars to action stats.

    The oob scalars are embedded with fixed random vectors that are never
    trained: embed(x) = q * x - q * (1 - x).
    """

    def __init__(self, side: int, hidden: int, q_dim: int, q_seed: int, outputs: int = 5,
                 stop_bias: float = 0.0):
        super().__init__()
        self.enc_dist = GridEncoder(2, side, hidden)
        self.enc_mask = GridEncoder(2, side, hidden)
        rng = np.random.default_rng(q_seed)
        self.register_buffer("q1", torch.tensor(rng.normal(size=q_dim), dtype=torch.float32))
        self.register_buffer("q2", torch.tensor(rng.normal(size=q_dim), dtype=torch.float32))
        self.mlp = nn.Sequential(
            nn.Linear(2 * hidden + 2 * q_dim, hidden),
            nn.LeakyReLU(0.1),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.1),
            nn.Linear(hidden, outputs),
        )
        self.outputs = outputs
        if outputs == 5 and stop_bias != 0.0:
            with torch.no_grad():
                self.mlp[-1].bias[2] = stop_bias

    def forward(self, dists: torch.Tensor, masks: torch.Tensor,
                oob_p: torch.Tensor, oob_g: torch.Tensor):
        a = self.enc_dist(dists)
        b = self.enc_mask(masks)
        e1 = self.q1.to(dists.dtype) * oob_g - self.q1.to(dists.dtype) * (1 - oob_g)
        e2 = self.q2.to(dists.dtype) * oob_p - self.q2.to(dists.dtype) * (1 - oob_p)
        raw = self.mlp(torch.cat([a, b, e1, e2])[None])[0]
        if self.outputs == 1:
            return raw[0]
        return Stage2Output(
            v_mean=raw[0],
            omega_mean=raw[1],
            stop_logit=raw[2],
            sigma_v=F.softplus(raw[3]) + 1e-3,
            sigma_omega=F.softplus(raw[4]) + 1e-3,
        )


# ---------------------------------------------------------------------------
# action sampling


def act(out: Stage2Output, rng: np.random.Generator | None = None,
        deterministic: bool = False, kappa: float = 0.5) -> Action:
    """Sample an action from the policy head.

    Deterministic mode uses the means and stops iff sigmoid(stop logit) > kappa.
    Stochastic mode samples the velocities from their normals and the stop
    decision from its Bernoulli (PPO needs a stochastic stop to optimize it).
    """
    p_stop = torch.sigmoid(out.stop_logit).item()
    if deterministic:
        if p_stop > kappa:
            return Action.stop_action()
        return Action(v=out.v_mean.item(), omega=out.omega_mean.item())
    if rng is None:
        raise ValueError("stochastic act needs an rng")
    if rng.random() < p_stop:
        return Action.stop_action()
    v = rng.normal(out.v_mean.item(), out.sigma_v.item())
    w = rng.normal(out.omega_mean.item(), out.sigma_omega.item())
    return Action(v=v, omega=w)


def action_log_prob(out: Stage2Output, action: Action) -> torch.Tensor:
    """Log-probability of an action under the policy head (differentiable)."""
    p_stop = torch.sigmoid(out.stop_logit)
    eps = 1e-8
    if action.stop:
        return torch.log(p_stop + eps)
    def norm_lp(x, mu, sigma):
        return -0.5 * ((x - mu) / sigma) ** 2 - torch.log(sigma) - 0.5 * math.log(2 * math.pi)
    lp = torch.log(1 - p_stop + eps)
    lp = lp + norm_lp(torch.as_tensor(action.v, dtype=out.v_mean.dtype), out.v_mean, out.sigma_v)
    lp = lp + norm_lp(torch.as_tensor(action.omega, dtype=out.v_mean.dtype),
                      out.omega_mean, out.sigma_omega)
    return lp


def policy_entropy(out: Stage2Output) -> torch.Tensor:
    p = torch.sigmoid(out.stop_logit)
    eps = 1e-8
    h_bern = -(p * torch.log(p + eps) + (1 - p) * torch.log(1 - p + eps))
    h_norm = 0.5 * math.log(2 * math.pi * math.e) * 2 + torch.log(out.sigma_v) + torch.log(out.sigma_omega)
    return h_bern + h_norm


# ---------------------------------------------------------------------------
# discriminator


class Discriminator(nn.Module):
    """Four-conv cascade + linear head scoring first-person feature maps."""

    def __init__(self, channels: int, feat_h: int = 18, feat_w: int = 32):
        super().__init__()
        self.c1 = nn.Conv2d(channels, 16, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(16, 16, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(16, 16, 3, stride=2, padding=1)
        self.c4 = nn.Conv2d(16, 16, 3, padding=1)
        h = _half(_half(_half(feat_h)))
        w = _half(_half(_half(feat_w)))
        self.fc = nn.Linear(16 * h * w, 1)

    def forward(self, featC: torch.Tensor) -> torch.Tensor:
        x = featC[None] if featC.dim() == 3 else featC
        x = F.leaky_relu(self.c1(x), 0.2)
        x = F.leaky_relu(self.c2(x), 0.2)
        x = F.leaky_relu(self.c3(x), 0.2)
        x = F.leaky_relu(self.c4(x), 0.2)
        return self.fc(x.reshape(x.shape[0], -1)).squeeze(-1)

    def clamp_(self, bound: float):
        """Clamp every parameter to [-bound, bound]; idempotent."""
        with torch.no_grad():
            for p in self.parameters():
                p.clamp_(-bound, bound)


# ---------------------------------------------------------------------------
# auxiliary heads


class AuxHeads(nn.Module):
    """Object-identity, grounding-mention, and language-mention classifiers."""

    def __init__(self, channels: int, u_dim: int, n_kinds: int):
        super().__init__()
        self.percept = nn.Linear(channels, n_kinds)
        self.ground = nn.Linear(channels, 1)
        self.lang = nn.Linear(u_dim, n_kinds)
        self.n_kinds = n_kinds

    def losses(self, sem: torch.Tensor, ground_map: torch.Tensor, u: torch.Tensor,
               visible: list, mentioned: dict):
        """Cross-entropy terms averaged per the reference formulas.

        visible: list of (kind, (ix, iy)) for objects in the current view.
        mentioned: kind -> 0/1 mention label.
        Empty visible set contributes zero to the first two terms.
        """
        dtype = sem.dtype
        zero = torch.zeros((), dtype=dtype)
        l_percept, l_ground = zero, zero.clone()
        if visible:
            for kind, (ix, iy) in visible:
                logits = self.percept(sem[:, ix, iy])
                l_percept = l_percept + F.cross_entropy(
                    logits[None], torch.tensor([kind]))
                score = self.ground(ground_map[:, ix, iy])[0]
                target = torch.as_tensor(float(mentioned.get(kind, 0)), dtype=dtype)
                l_ground = l_ground + F.binary_cross_entropy_with_logits(score, target)
            l_percept = l_percept / len(visible)
            l_ground = l_ground / len(visible)
        lang_logits = self.lang(u)
        l_lang = zero.clone()
        for kind, (_, _) in visible:
            target = torch.as_tensor(float(mentioned.get(kind, 0)), dtype=dtype)
            l_lang = l_lang + F.binary_cross_entropy_with_logits(lang_logits[kind], target)
        l_lang = l_lang / self.n_kinds  # reference formula normalizes by all objects
        return l_percept, l_ground, l_lang


# ---------------------------------------------------------------------------
# parameter bookkeeping


class ParamStore:
    """Named parameter groups with exact snapshot/restore semantics."""

    def __init__(self, groups: dict):
        self.groups = groups  # name -> nn.Module
        self.sequence = 0

    def snapshot(self, name: str) -> dict:
        mod = self.groups[name]
        return {k: v.detach().clone() for k, v in mod.state_dict().items()}

    def restore(self, name: str, snap: dict) -> None:
        self.groups[name].load_state_dict(snap)

    def snapshot_all(self) -> dict:
        self.sequence += 1
        return {name: self.snapshot(name) for name in self.groups}

    def restore_all(self, snaps: dict) -> None:
        for name, snap in snaps.items():
            self.restore(name, snap)


def config_hash(cfg: Config) -> str:
    import dataclasses as _dc
    blob = repr(sorted(_dc.asdict(cfg).items())).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, store: ParamStore, cfg: Config, vocab: Vocabulary,
                    extra: dict | None = None) -> None:
    payload = {
        "version": 1,
        "config_hash": config_hash(cfg),
        "config": {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
        "vocab": vocab.itos,
        "state": {name: store.snapshot(name) for name in store.groups},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


# ---------------------------------------------------------------------------
# bundle


class ModelBundle:
    """All learned blocks for one experiment, grouped for the ParamStore.

    Groups: ``stage1`` (encoder, real-style CNN, grounding, UNet, aux heads),
    ``stage1_sim_cnn`` (simulation-style CNN), ``stage2`` (control),
    ``value``, and ``discriminator``.
    """

    def __init__(self, cfg: Config, vocab: Vocabulary, dtype=torch.float32):
        self.cfg = cfg
        self.vocab = vocab
        self.dtype = dtype
        C = cfg.feat_channels
        self.encoder = InstructionEncoder(len(vocab), cfg.embed_dim, cfg.instruction_dim)
        self.cnn_real = ImageEncoder(C)
        self.cnn_sim = ImageEncoder(C)
        self.grounding = GroundingFilter(C, cfg.instruction_dim)
        self.unet = ConditionalUNet(2 * C, cfg.unet_channels, cfg.unet_levels, cfg.instruction_dim)
        from .world import LANDMARK_CATALOG

        self.aux = AuxHeads(C, cfg.instruction_dim, len(LANDMARK_CATALOG))
        self.control = ControlNet(cfg.map_cells, cfg.control_hidden, cfg.q_dim, cfg.q_seed,
                                  outputs=5, stop_bias=cfg.stop_bias_init)
        self.value = ControlNet(cfg.map_cells, cfg.control_hidden, cfg.q_dim, cfg.q_seed + 1,
                                outputs=1)
        self.discriminator = Discriminator(C, cfg.feat_h, cfg.feat_w)
        self._stage1_shared = nn.ModuleDict(
            dict(encoder=self.encoder, cnn_real=self.cnn_real,
                 grounding=self.grounding, unet=self.unet, aux=self.aux)
        )
        for m in self.modules():
            m.to(dtype)
        self.store = ParamStore(
            {
                "stage1": self._stage1_shared,
                "stage1_sim_cnn": self.cnn_sim,
                "stage2": self.control,
                "value": self.value,
                "discriminator": self.discriminator,
            }
        )

    def modules(self):
        return [self.encoder, self.cnn_real, self.cnn_sim, self.grounding,
                self.unet, self.aux, self.control, self.value, self.discriminator]

    def cnn(self, style):
        from .world import DomainStyle

        return self.cnn_sim if style == DomainStyle.STYLE_SIM else self.cnn_real

    def stage1_parameters(self):
        return list(self._stage1_shared.parameters()) + list(self.cnn_sim.parameters())

    def seed_all(self, seed: int):
        torch.manual_seed(seed)
        for m in self.modules():
            for p in m.parameters():
                if p.dim() > 1:
                    nn.init.xavier_uniform_(p)
        with torch.no_grad():
            if self.cfg.stop_bias_init:
                self.control.mlp[-1].bias[2] = self.cfg.stop_bias_init
        return self


# ---------------------------------------------------------------------------
# finite-difference gradient gate


def finite_difference_check(make_loss, params, rng: np.random.Generator,
                            probes: int = 20, h: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    make_loss must be a deterministic closure over the given parameters.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = make_loss()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for p in params]
    worst = 0.0
    flat_sizes = [p.numel() for p in params]
    total = sum(flat_sizes)
    for _ in range(probes):
        k = int(rng.integers(total))
        pi = 0
        while k >= flat_sizes[pi]:
            k -= flat_sizes[pi]
            pi += 1
        p = params[pi]
        step = h * max(1.0, float(p.detach().reshape(-1)[k].abs()))
        with torch.no_grad():
            p.reshape(-1)[k] += step
        up = make_loss().item()
        with torch.no_grad():
            p.reshape(-1)[k] -= 2 * step
        down = make_loss().item()
        with torch.no_grad():
            p.reshape(-1)[k] += step
        fd = (up - down) / (2 * step)
        an = float(grads[pi].reshape(-1)[k])
        denom = max(abs(fd), abs(an), 1e-6)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def gradient_gate(cfg: Config, seed: int = 0, probes: int = 15):
    """Finite-difference verification of every learned block at float64.

    Returns [(block name, max relative error, passed)]; training must refuse
    to start unless all pass.
    """
    from .geometry import Pose
    from .mapping import build_projection, project_to_ground, rotate_to_egocentric
    from .world import CameraModel, LANDMARK_CATALOG

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg64 = cfg.replace(map_cells=16, feat_channels=4, unet_channels=8,
                        control_hidden=16, instruction_dim=8, embed_dim=6)
    vocab = Vocabulary(["go", "to", "the", "red", "box"])
    nets = ModelBundle(cfg64, vocab, dtype=torch.float64)
    spec = GridSpec(side_cells=cfg64.map_cells, meters_per_cell=cfg64.meters_per_cell)
    camera = CameraModel.for_config(cfg64)
    S = cfg64.map_cells
    C = cfg64.feat_channels
    results = []

    def check(name, make_loss, params):
        err = finite_difference_check(make_loss, [p for p in params if p.requires_grad],
                                      rng, probes=probes)
        results.append((name, err, err < 1e-4))

    tokens = vocab.encode(["go", "to", "the", "red", "box"])
    seed_u = torch.randn(cfg64.instruction_dim, dtype=torch.float64)
    check("instruction_encoder",
          lambda: (nets.encoder(tokens) * seed_u).sum(),
          list(nets.encoder.parameters()))

    img = torch.rand(3, cfg64.image_h, cfg64.image_w, dtype=torch.float64)
    seed_f = torch.randn(C, cfg64.feat_h, cfg64.feat_w, dtype=torch.float64)
    check("image_cnn",
          lambda: (nets.cnn_real(img) * seed_f).sum(),
          list(nets.cnn_real.parameters()))

    sem = torch.randn(C, S, S, dtype=torch.float64)
    seed_g = torch.randn(C, S, S, dtype=torch.float64)
    u_fixed = torch.randn(cfg64.instruction_dim, dtype=torch.float64)
    check("grounding_filter",
          lambda: (nets.grounding(sem, u_fixed) * seed_g).sum(),
          list(nets.grounding.parameters()))

    ground = torch.randn(C, S, S, dtype=torch.float64)
    mask = np.zeros((S, S), dtype=bool)
    mask[2 : S - 2, 2 : S - 2] = True
    seed_s = torch.randn(2, S, S, dtype=torch.float64)

    def unet_loss():
        scores, h_vec = nets.unet(sem, ground, u_fixed)
        lp, lo = normalize_with_oob(scores[0], h_vec[0], mask)
        fin = torch.where(torch.isfinite(lp), lp, torch.zeros_like(lp))
        return (fin * seed_s[0]).sum() + 3.0 * lo + (scores[1] * seed_s[1]).sum()

    check("conditioned_unet", unet_loss, list(nets.unet.parameters()))

    dists = torch.rand(2, S, S, dtype=torch.float64)
    masks_t = torch.rand(2, S, S, dtype=torch.float64)
    oob_p = torch.tensor(0.3, dtype=torch.float64)
    oob_g = torch.tensor(0.6, dtype=torch.float64)

    def control_loss():
        out = nets.control(dists, masks_t, oob_p, oob_g)
        return (out.v_mean + 2 * out.omega_mean + 0.5 * out.stop_logit
                + out.sigma_v - 0.3 * out.sigma_omega)

    check("control_net", control_loss, list(nets.control.parameters()))
    check("value_net",
          lambda: nets.value(dists, masks_t, oob_p, oob_g),
          list(nets.value.parameters()))

    feat_in = torch.randn(C, cfg64.feat_h, cfg64.feat_w, dtype=torch.float64)
    check("discriminator",
          lambda: nets.discriminator(feat_in).sum(),
          list(nets.discriminator.parameters()))

    visible = [(0, (3, 3)), (2, (5, 8))]
    mentioned = {0: 1, 2: 0}

    def aux_loss():
        lp_, lg_, ll_ = nets.aux.losses(sem, ground, u_fixed, visible, mentioned)
        return lp_ + lg_ + ll_

    check("aux_losses", aux_loss, list(nets.aux.parameters()))

    # KL through the normalization (logits as the free parameters)
    logits = torch.randn(S, S, dtype=torch.float64, requires_grad=True)
    oob_logit = torch.randn(1, dtype=torch.float64, requires_grad=True)
    gold_grid = np.abs(rng.normal(size=(S, S)))
    gold_grid[~mask] = 0.0
    from .visitation import VisitationDist as _VD

    gold = _VD.from_grid(gold_grid, spec, mask=mask, oob_extra=0.2 * gold_grid.sum())

    def kl_loss_fn():
        lp, lo = normalize_with_oob(logits, oob_logit[0], mask)
        return kl_to_gold(lp, lo, gold)

    check("kl_loss", kl_loss_fn, [logits, oob_logit])

    # deterministic geometry ops
    pose = Pose((0.3, -0.2, 0.0), yaw=0.4)
    table = build_projection(pose, camera, spec, cfg64.feat_w, cfg64.feat_h)
    feat_p = torch.randn(C, cfg64.feat_h, cfg64.feat_w, dtype=torch.float64, requires_grad=True)
    seed_w = torch.randn(C, S, S, dtype=torch.float64)
    check("projection",
          lambda: (project_to_ground(feat_p, table, spec)[0] * seed_w).sum(),
          [feat_p])

    grid_in = torch.randn(2, S, S, dtype=torch.float64, requires_grad=True)
    seed_r = torch.randn(2, S, S, dtype=torch.float64)
    check("rotation",
          lambda: (rotate_to_egocentric(grid_in, pose, spec) * seed_r).sum(),
          [grid_in])

    return results
