"""Conditional denoising refiner: schedule, context encoder, noise estimator, reverse loop.

Step indexing: the state at step ``t`` is ``sqrt(abar_t) Y0 + sqrt(1 - abar_t) eps``
(``abar_0 = 1``), and one reverse update from step ``t`` uses ``alpha_t`` and
``abar_t``. Inference treats coarse samples as the state at step ``tau`` and
applies updates ``t = tau, ..., 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config, ConfigError
from .data import SceneBatch
from .wave import MultiHeadSelfAttention, feature_width, motion_features


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray  # (T + 1,), betas[0] = 0 padding
    tau: int

    def __post_init__(self):
        b = self.betas[1:]
        if b.size == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("betas must lie in (0, 1)")
        if not 0 <= self.tau <= len(b):
            raise ConfigError(f"tau={self.tau} outside [0, {len(b)}]")

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @classmethod
    def from_betas(cls, betas, tau: int) -> "DiffusionSchedule":
        return cls(np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)]), int(tau))

    def to_dict(self) -> dict:
        return {"betas": self.betas[1:].tolist(), "tau": self.tau}


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 5e-2, tau: int = 10) -> DiffusionSchedule:
    """Linear beta schedule over ``T`` steps."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    if not 0 <= tau <= T:
        raise ConfigError(f"tau={tau} outside [0, {T}]")
    return DiffusionSchedule.from_betas(np.linspace(beta_start, beta_end, T), tau)


def _coef(values: np.ndarray, t, like: torch.Tensor):
    """Gather schedule entries for int or per-row tensor ``t`` and broadcast against ``like``."""
    v = torch.as_tensor(values, dtype=like.dtype)
    if isinstance(t, int):
        return v[t]
    t = torch.as_tensor(t).long()
    out = v[t]
    return out.reshape(*t.shape, *([1] * (like.dim() - t.dim())))


def _check_t(t, lo: int, hi: int):
    tt = torch.as_tensor(t)
    if tt.numel() and (int(tt.min()) < lo or int(tt.max()) > hi):
        raise IndexError(f"diffusion step outside [{lo}, {hi}]")


def forward_diffuse(y0, t, eps, schedule: DiffusionSchedule):
    """``sqrt(abar_t) y0 + sqrt(1 - abar_t) eps``."""
    if eps.shape != y0.shape:
        raise ValueError("eps must match y0")
    _check_t(t, 0, schedule.T)
    ab = _coef(schedule.alpha_bars, t, y0)
    return torch.sqrt(ab) * y0 + torch.sqrt(1.0 - ab) * eps


def denoise_step(y, eps_theta, t, z, schedule: DiffusionSchedule):
    """One reverse update from step ``t``."""
    _check_t(t, 1, schedule.T)
    a = _coef(schedule.alphas, t, y)
    ab = _coef(schedule.alpha_bars, t, y)
    return (y - (1.0 - a) / torch.sqrt(1.0 - ab) * eps_theta) / torch.sqrt(a) + torch.sqrt(1.0 - a) * z


def step_embedding(t, dim: int, dtype=torch.float32):
    """Sinusoidal embedding of integer diffusion steps, shape ``(*t.shape, dim)``."""
    t = torch.as_tensor(t, dtype=dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    ang = t.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _positional(T: int, dim: int) -> torch.Tensor:
    return step_embedding(torch.arange(T), dim)


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.proj = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        a, _ = self.attn(x)
        x = self.norm1(x + self.proj(a))
        return self.norm2(x + self.ff(x))


class ContextEncoder(nn.Module):
    """Self-attention over each agent's history, masked mean over neighbors, projected to ``chi``."""

    def __init__(self, cfg: Config):
        super().__init__()
        D = cfg.refiner_dim
        self.coord_scale = cfg.coord_scale
        self.inputs = cfg.encoder_input
        self.hz = cfg.target_hz
        self.lateral_gain = cfg.lateral_gain
        self.target_embed = nn.Linear(feature_width(cfg.encoder_input), D)
        self.neighbor_embed = nn.Linear(feature_width(cfg.encoder_input), D)
        self.block = AttentionBlock(D, cfg.refiner_heads)
        self.register_buffer("pos", _positional(cfg.t_h, D), persistent=False)
        self.out = nn.Linear(2 * D, cfg.chi_dim)

    def agent(self, history, embed):
        x = embed(motion_features(history, self.coord_scale, self.inputs, self.hz, self.lateral_gain)) + self.pos.to(history.dtype)
        return self.block(x).mean(dim=-2)

    def forward(self, batch: SceneBatch):
        tar = self.agent(batch.history, self.target_embed)
        nbr_sum = torch.zeros_like(tar)
        count = tar.new_zeros(tar.shape[0], 1)
        if len(batch.nbr_history):
            nbr = self.agent(batch.nbr_history, self.neighbor_embed)
            nbr_sum = nbr_sum.index_add(0, batch.nbr_batch, nbr)
            count = count.index_add(0, batch.nbr_batch, torch.ones_like(nbr[:, :1]))
        nbr_mean = nbr_sum / count.clamp_min(1.0)
        return self.out(torch.cat([tar, nbr_mean], dim=-1))


class NoiseEstimator(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.t_f = cfg.t_f
        self.step_dim = cfg.step_embed
        h = cfg.estimator_hidden
        self.net = nn.Sequential(
            nn.Linear(2 * cfg.t_f + cfg.chi_dim + cfg.step_embed, h),
            nn.SiLU(),
            nn.Linear(h, h),
            nn.SiLU(),
            nn.Linear(h, h),
            nn.SiLU(),
            nn.Linear(h, 2 * cfg.t_f),
        )

    def forward(self, y, chi, t):
        """``y`` ``(..., t_f, 2)``, ``chi`` broadcastable to ``(..., chi_dim)``, ``t`` int or ``y.shape[:-2]``."""
        lead = y.shape[:-2]
        t = torch.as_tensor(t).expand(lead) if torch.as_tensor(t).dim() == 0 else t
        emb = step_embedding(t, self.step_dim, y.dtype)
        while chi.dim() < len(lead) + 1:
            chi = chi.unsqueeze(-2)
        chi = chi.expand(*lead, chi.shape[-1])
        out = self.net(torch.cat([y.flatten(-2), chi, emb], dim=-1))
        return out.reshape(*lead, self.t_f, 2)


class Refiner(nn.Module):
    """Context encoder + noise estimator operating on trajectories divided by ``traj_scale``."""

    def __init__(self, cfg: Config, schedule: DiffusionSchedule | None = None):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule or make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.tau)
        self.context = ContextEncoder(cfg)
        self.estimator = NoiseEstimator(cfg)

    def forward(self, batch: SceneBatch):
        return self.context(batch)


def encode_context(batch: SceneBatch, params: Refiner):
    return params.context(batch)


def estimate_noise(y, chi, t, params: Refiner):
    return params.estimator(y, chi, t)


def refine(samples, chi, schedule: DiffusionSchedule, params: Refiner, seed=None, tau=None, generator=None):
    """Denoise coarse samples ``(B, K, t_f, 2)`` in meters for ``tau`` steps.

    Each sample is treated as the diffusion state at step ``tau``; with
    ``cfg.inject_scaled`` it is first multiplied by ``sqrt(abar_tau)``, the mean
    of the forward process at that step, so the refiner does not read a
    stretched trajectory. Fresh Gaussian noise is added after every update
    except the last.
    """
    tau = schedule.tau if tau is None else tau
    if not 0 <= tau <= schedule.T:
        raise ConfigError(f"tau={tau} outside [0, {schedule.T}]")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    scale = params.cfg.traj_scale
    y = samples / scale
    if params.cfg.inject_scaled:
        y = y * math.sqrt(schedule.alpha_bars[tau])
    for t in range(tau, 0, -1):
        eps = params.estimator(y, chi, t)
        z = torch.randn(y.shape, generator=generator, dtype=y.dtype) if t > 1 else torch.zeros_like(y)
        y = denoise_step(y, eps, t, z, schedule)
    return y * scale


def noise_estimation_loss(batch: SceneBatch, schedule: DiffusionSchedule, params: Refiner, seed=None, generator=None):
    """Mean over the batch of ``||eps - f(Y_t, chi, t)||`` with ``t ~ U{1..T}``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    y0 = batch.future / params.cfg.traj_scale
    B = y0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(y0.shape, generator=generator, dtype=y0.dtype)
    y_t = forward_diffuse(y0, t, eps, schedule)
    pred = params.estimator(y_t, params.context(batch), t)
    sq = (eps - pred).pow(2).flatten(1).sum(-1)
    per = sq if params.cfg.squared_norm else torch.sqrt(sq)
    return per.mean()
