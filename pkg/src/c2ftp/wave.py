"""Motion encoding, wave-superposition pooling and temporal self-attention."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config, ConfigError
from .data import SceneBatch


def superpose_waves(z_i, theta_i, z_j, theta_j):
    """Amplitude and phase of ``|z_i| e^{i theta_i} + |z_j| e^{i theta_j}`` in closed form.

    When the summed amplitude is exactly zero the phase is defined as ``theta_i``.
    """
    a, b = torch.abs(z_i), torch.abs(z_j)
    diff = theta_j - theta_i
    cos, sin = torch.cos(diff), torch.sin(diff)
    z_r = torch.sqrt(torch.clamp(a * a + b * b + 2.0 * a * b * cos, min=0.0))
    theta_r = theta_i + torch.atan2(b * sin, a + b * cos)
    theta_r = torch.where(z_r == 0, theta_i, theta_r)
    return z_r, theta_r


def surrounding_fc(z, theta, mask, w_real, w_imag, bias=None):
    """Token mixing of agent waves: ``o_j = sum_k Wt_jk z_k cos(theta_k) + Wi_jk z_k sin(theta_k)``.

    ``z``/``theta`` are ``(..., n, d)``, ``mask`` is ``(..., n)`` and the weights ``(n, n)``.
    Masked agents contribute exactly zero; with everything masked only ``bias`` remains.
    """
    m = mask.to(z.dtype).unsqueeze(-1)
    # where() rather than a product so non-finite garbage in empty slots cannot leak
    re = torch.where(m > 0, z * torch.cos(theta), torch.zeros_like(z))
    im = torch.where(m > 0, z * torch.sin(theta), torch.zeros_like(z))
    out = torch.matmul(w_real, re) + torch.matmul(w_imag, im)
    if bias is not None:
        out = out + bias
    return out


def surrounding_fc_row(z, theta, scene, cell, row: int, n_scenes: int, w_real, w_imag, bias=None):
    """Output slot ``row`` of ``surrounding_fc`` for every scene, from agents listed as ``(A, ..., d)``.

    ``scene``/``cell`` give each listed agent's scene and grid cell; cells not
    listed are unoccupied. Returns ``(n_scenes, ..., d)``.
    """
    shape = (-1,) + (1,) * (z.dim() - 1)
    terms = w_real[row, cell].view(shape) * z * torch.cos(theta) + w_imag[row, cell].view(shape) * z * torch.sin(theta)
    out = z.new_zeros(n_scenes, *z.shape[1:]).index_add(0, scene, terms)
    return out if bias is None else out + bias


class WaveDecompose(nn.Module):
    """Plain-FC amplitude and phase maps applied to a hidden state."""

    def __init__(self, dim: int):
        super().__init__()
        self.amplitude = nn.Linear(dim, dim)
        self.phase = nn.Linear(dim, dim)

    def forward(self, h):
        return self.amplitude(h), self.phase(h)


def wave_decompose(h, params: WaveDecompose):
    return params(h)


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention; heads are concatenated without an output projection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.d_k = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def forward(self, x, key_padding_mask=None):
        *lead, T, dim = x.shape

        def split(t):
            return t.reshape(*lead, T, self.heads, self.d_k).transpose(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        if key_padding_mask is not None:
            logits = logits.masked_fill(~key_padding_mask[..., None, None, :], float("-inf"))
        scores = torch.softmax(logits, dim=-1)
        heads = scores @ v  # (..., heads, T, d_k)
        return heads.transpose(-3, -2).reshape(*lead, T, dim), scores


class TemporalAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, H):
        out, scores = self.attn(H)
        return self.norm(out), scores


def temporal_attention(H, params: TemporalAttention):
    return params(H)


def motion_features(history, coord_scale: float = 1.0, mode: str = "both", hz: float = 5.0, lateral_gain: float = 1.0):
    """Per-step encoder inputs from a ``(..., T, 2)`` history.

    ``position`` is the coordinate over ``coord_scale``; ``displacement`` is the
    finite-difference velocity (zero at the first step) on the same scale per
    second; ``both`` concatenates the two. Because histories end at the origin,
    the displacement view loses nothing. ``lateral_gain`` multiplies the first
    (lateral) axis, whose motion is far smaller than the longitudinal one.
    """
    if history.shape[-1] != 2:
        raise ValueError(f"history must end in a coordinate axis of size 2, got {tuple(history.shape)}")
    gain = history.new_tensor([lateral_gain, 1.0]) / coord_scale
    pos = history * gain
    if mode == "position":
        return pos
    vel = torch.diff(history, dim=-2, prepend=history[..., :1, :]) * (gain * hz)
    if mode == "displacement":
        return vel
    if mode == "both":
        return torch.cat([vel, pos], dim=-1)
    raise ConfigError(f"unknown encoder input {mode!r}")


def feature_width(mode: str) -> int:
    return 4 if mode == "both" else 2


class MotionEncoder(nn.Module):
    """Per-step MLP embedding followed by an LSTM; returns every hidden state."""

    def __init__(
        self,
        embed: int,
        hidden: int,
        coord_scale: float = 1.0,
        inputs: str = "position",
        hz: float = 5.0,
        lateral_gain: float = 1.0,
    ):
        super().__init__()
        self.coord_scale = coord_scale
        self.inputs = inputs
        self.hz = hz
        self.lateral_gain = lateral_gain
        self.embed = nn.Linear(feature_width(inputs), embed)
        self.lstm = nn.LSTM(embed, hidden, batch_first=True)

    def forward(self, history):
        e = F.leaky_relu(self.embed(motion_features(history, self.coord_scale, self.inputs, self.hz, self.lateral_gain)), 0.1)
        out, _ = self.lstm(e)
        return out


def encode_motion(history, params: MotionEncoder):
    return params(history)


def fuse_context(social, enc_tar, projection: nn.Linear):
    if social.shape[:-1] != enc_tar.shape[:-1]:
        raise ValueError(f"length mismatch: {tuple(social.shape)} vs {tuple(enc_tar.shape)}")
    return projection(torch.cat([social, enc_tar], dim=-1))


class InteractionEncoder(nn.Module):
    """Target/neighbor encoders, per-timestep wave pooling on the grid and temporal attention.

    Produces the interaction context ``C`` of shape ``(B, t_h, context_dim)``.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        d, n = cfg.hidden, cfg.grid_cells
        self.center = cfg.center_cell
        self.target_encoder = MotionEncoder(cfg.embed, d, cfg.coord_scale, cfg.encoder_input, cfg.target_hz, cfg.lateral_gain)
        self.neighbor_encoder = MotionEncoder(cfg.embed, d, cfg.coord_scale, cfg.encoder_input, cfg.target_hz, cfg.lateral_gain)
        self.wave = WaveDecompose(d)
        self.w_real = nn.Parameter(torch.randn(n, n) / math.sqrt(n))
        self.w_imag = nn.Parameter(torch.randn(n, n) / math.sqrt(n))
        self.pool_bias = nn.Parameter(torch.zeros(d))
        self.attention = TemporalAttention(d, cfg.heads)
        self.fuse = nn.Linear(2 * d, cfg.context_dim)

    def agents(self, batch: SceneBatch, enc_tar):
        """Target and neighbor encodings stacked as one agent list with their scene and cell ids."""
        B = enc_tar.shape[0]
        enc_nbrs = self.neighbor_encoder(batch.nbr_history) if len(batch.nbr_history) else enc_tar[:0]
        enc = torch.cat([enc_tar, enc_nbrs])
        scene = torch.cat([torch.arange(B), batch.nbr_batch.long()])
        cell = torch.cat([torch.full((B,), self.center, dtype=torch.long), batch.nbr_cell.long()])
        return enc, scene, cell

    def grid(self, batch: SceneBatch, enc_tar):
        """Dense ``(B, n, T, d)`` grid and occupancy mask; the reference layout for ``social``."""
        enc, scene, cell = self.agents(batch, enc_tar)
        B, T, d = enc_tar.shape
        g = enc_tar.new_zeros(B, self.cfg.grid_cells, T, d).index_put((scene, cell), enc)
        mask = torch.zeros(B, self.cfg.grid_cells, dtype=torch.bool).index_put((scene, cell), torch.tensor(True))
        return g, mask

    def social(self, batch: SceneBatch, enc_tar):
        """Per-timestep social feature ``H`` ``(B, T, d)``: the target's own output slot of the
        wave token mixing, i.e. every occupied cell's wave as seen from the center cell."""
        enc, scene, cell = self.agents(batch, enc_tar)
        z, theta = self.wave(enc)
        return surrounding_fc_row(
            z, theta, scene, cell, self.center, enc_tar.shape[0], self.w_real, self.w_imag, self.pool_bias
        )

    def forward(self, batch: SceneBatch):
        enc_tar = self.target_encoder(batch.history)
        if self.cfg.use_interaction_pooling:
            H_tilde, _ = self.attention(self.social(batch, enc_tar))
        else:
            H_tilde = torch.zeros_like(enc_tar)
        return fuse_context(H_tilde, enc_tar, self.fuse), enc_tar
