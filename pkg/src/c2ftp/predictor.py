"""Maneuver probabilities, re-weighted multimodal decoding and the bivariate Gaussian machinery."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config

N_MODES = 6
LOG_2PI = math.log(2.0 * math.pi)
RHO_LIMIT = 1.0 - 1e-6


@dataclass
class ManeuverProbs:
    log_lateral: torch.Tensor  # (B, 3)
    log_longitudinal: torch.Tensor  # (B, 2)

    @property
    def lateral(self):
        return self.log_lateral.exp()

    @property
    def longitudinal(self):
        return self.log_longitudinal.exp()

    @property
    def log_joint(self):
        """``log p(m)`` for the six modes, index ``2 * lateral + longitudinal``."""
        j = self.log_lateral.unsqueeze(-1) + self.log_longitudinal.unsqueeze(-2)
        return j.flatten(-2)

    @property
    def joint(self):
        return self.log_joint.exp()

    def best_mode(self):
        # argmax returns the first maximum, i.e. ties go to the lowest index
        return torch.argmax(self.log_joint, dim=-1)


@dataclass
class Gaussian2D:
    """Per-step bivariate normal: ``mu``/``sigma`` ``(..., T, 2)``, ``rho`` ``(..., T)``."""

    mu: torch.Tensor
    sigma: torch.Tensor
    rho: torch.Tensor

    def __getitem__(self, idx) -> "Gaussian2D":
        return Gaussian2D(self.mu[idx], self.sigma[idx], self.rho[idx])

    def select(self, mode: torch.Tensor) -> "Gaussian2D":
        """Pick one mode per batch row from ``(B, 6, T, ...)`` parameters."""
        b = torch.arange(mode.shape[0])
        return Gaussian2D(self.mu[b, mode], self.sigma[b, mode], self.rho[b, mode])

    def log_prob(self, y, sigma_floor: float = 0.0):
        """Closed-form log density per step, shape ``(..., T)``."""
        sx, sy = self.sigma[..., 0], self.sigma[..., 1]
        if sigma_floor > 0:
            sx, sy = sx.clamp_min(sigma_floor), sy.clamp_min(sigma_floor)
        rho = self.rho
        dx = (y[..., 0] - self.mu[..., 0]) / sx
        dy = (y[..., 1] - self.mu[..., 1]) / sy
        one_m = 1.0 - rho * rho
        quad = (dx * dx + dy * dy - 2.0 * rho * dx * dy) / one_m
        return -LOG_2PI - torch.log(sx) - torch.log(sy) - 0.5 * torch.log(one_m) - 0.5 * quad

    def sample(self, eta):
        """Reparameterized draw ``mu + L eta`` with ``L`` the 2x2 Cholesky factor; ``eta`` is ``(..., T, 2)``."""
        rho = self.rho.clamp(-RHO_LIMIT, RHO_LIMIT)
        sx, sy = self.sigma[..., 0], self.sigma[..., 1]
        x = self.mu[..., 0] + sx * eta[..., 0]
        y = self.mu[..., 1] + sy * (rho * eta[..., 0] + torch.sqrt(1.0 - rho * rho) * eta[..., 1])
        return torch.stack([x, y], dim=-1)


@dataclass
class CoarseSamples:
    samples: torch.Tensor  # (B, K, T, 2)
    mode: torch.Tensor  # (B,) or (B, K) under proportional sampling
    seed: Optional[int] = None


class MultimodalPredictor(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        dc = cfg.context_dim
        self.lateral = nn.Linear(dc, 3)
        self.longitudinal = nn.Linear(dc, 2)
        self.scores = nn.Linear(dc, N_MODES * cfg.t_f)
        self.decoder = nn.LSTM(2 * dc + N_MODES, cfg.decoder_hidden, batch_first=True)
        self.out = nn.Linear(cfg.decoder_hidden, 5)

    def forward(self, C, modes=None):
        """Maneuver probabilities and Gaussians for ``modes`` (``(B,)``) or all six."""
        probs = predict_maneuver_probs(C, self)
        u = compute_mode_weights(C, self)  # (B, 6, t_h, t_f)
        if modes is None:
            B = C.shape[0]
            Cm = C.unsqueeze(1).expand(B, N_MODES, *C.shape[1:]).reshape(B * N_MODES, *C.shape[1:])
            um = u.reshape(B * N_MODES, *u.shape[2:])
            idx = torch.arange(N_MODES).repeat(B)
            g = decode_gaussian(reweight_context(Cm, um), Cm, self, idx)
            return probs, Gaussian2D(
                g.mu.reshape(B, N_MODES, -1, 2), g.sigma.reshape(B, N_MODES, -1, 2), g.rho.reshape(B, N_MODES, -1)
            )
        b = torch.arange(C.shape[0])
        return probs, decode_gaussian(reweight_context(C, u[b, modes]), C, self, modes)


def predict_maneuver_probs(C, params: MultimodalPredictor) -> ManeuverProbs:
    pooled = C.mean(dim=-2)
    return ManeuverProbs(
        F.log_softmax(params.lateral(pooled), dim=-1),
        F.log_softmax(params.longitudinal(pooled), dim=-1),
    )


def compute_mode_weights(C, params: MultimodalPredictor):
    """``(B, 6, t_h, t_f)`` weights; each column is a softmax over the history axis."""
    B, T_h, _ = C.shape
    t_f = params.cfg.t_f
    if not params.cfg.use_reweighting:
        return C.new_full((B, N_MODES, T_h, t_f), 1.0 / T_h)
    s = params.scores(C).reshape(B, T_h, N_MODES, t_f).permute(0, 2, 1, 3)
    return torch.softmax(s, dim=-2)


def reweight_context(C, u):
    """``V[t_f] = sum_t C[t] * u[t, t_f]`` -> ``(..., t_f, d_c)``."""
    return torch.einsum("...ht,...hc->...tc", u, C)


def decode_gaussian(V, C, params: MultimodalPredictor, mode) -> Gaussian2D:
    """Recurrent decoding of per-step Gaussians for the given mode(s).

    ``mode`` is an int or a ``(B,)`` tensor. Means are accumulated per-step
    displacements in meters; ``sigma = exp(raw)`` and ``rho = tanh(raw)``.
    """
    B, T_f, _ = V.shape
    mode = torch.as_tensor(mode).expand(B) if not torch.is_tensor(mode) or mode.dim() == 0 else mode
    onehot = F.one_hot(mode.long(), N_MODES).to(V.dtype)
    pooled = C.mean(dim=-2)
    inp = torch.cat([V, pooled.unsqueeze(1).expand(B, T_f, -1), onehot.unsqueeze(1).expand(B, T_f, -1)], dim=-1)
    h, _ = params.decoder(inp)
    raw = params.out(h)
    bad = ~torch.isfinite(raw)
    if bad.any():
        step = int(bad.any(dim=-1).any(dim=0).nonzero()[0])
        raise FloatingPointError(f"non-finite decoder output at future step {step}")
    return raw_to_gaussian(raw, params.cfg.coord_scale)


def raw_to_gaussian(raw, coord_scale: float = 1.0) -> Gaussian2D:
    mu = torch.cumsum(raw[..., :2], dim=-2) * coord_scale
    return Gaussian2D(mu, torch.exp(raw[..., 2:4]), torch.tanh(raw[..., 4]))


def mixture_posterior(gauss: Gaussian2D, probs: ManeuverProbs) -> Callable:
    """Density handle ``Y -> sum_i p(m_i) prod_t N(Y_t | mode i)``; ``gauss`` is ``(..., 6, T, ...)``.

    The returned callable has a ``log`` attribute giving the log density.
    """
    log_w = probs.log_joint

    def log_density(y):
        lp = gauss.log_prob(y.unsqueeze(-3)).sum(-1)  # (..., 6)
        return torch.logsumexp(lp + log_w, dim=-1)

    def density(y):
        return log_density(y).exp()

    density.log = log_density
    return density


def mode_log_prob(probs: ManeuverProbs, mode):
    return probs.log_joint.gather(-1, mode.long().unsqueeze(-1)).squeeze(-1)


def nll_loss(
    gauss: Gaussian2D,
    probs: ManeuverProbs,
    y,
    mode=None,
    sigma_floor: float = 1e-4,
    reduction: str = "mean",
):
    """``-log(P(Y | m, X) P(m | X))`` for the supervised mode.

    ``gauss`` is either all six modes ``(B, 6, T, ...)`` or already the chosen
    mode ``(B, T, ...)`` (then ``mode`` is required). Without ``mode`` the
    most probable mode is used.
    """
    if mode is None:
        mode = probs.best_mode()
    if gauss.mu.dim() == y.dim() + 1:
        gauss = gauss.select(mode)
    lp = gauss.log_prob(y, sigma_floor).sum(-1) + mode_log_prob(probs, mode)
    loss = -lp
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def sample_coarse(
    gauss: Gaussian2D,
    probs: ManeuverProbs,
    k: int,
    generator: torch.Generator | None = None,
    mode_rule: str = "max",
    eta=None,
    seed: int | None = None,
) -> CoarseSamples:
    """Draw ``k`` trajectories per scene from ``(B, 6, T, ...)`` Gaussians.

    ``max`` samples the most probable mode only; ``proportional`` picks a mode
    per sample from the joint probabilities. Draws are reparameterized, so
    gradients reach ``mu``, ``sigma`` and ``rho``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(seed)
    B, _, T, _ = gauss.mu.shape
    if mode_rule == "max":
        mode = probs.best_mode()
        g = gauss.select(mode)
        g = Gaussian2D(g.mu.unsqueeze(1), g.sigma.unsqueeze(1), g.rho.unsqueeze(1))
    elif mode_rule == "proportional":
        mode = torch.multinomial(probs.joint.detach().to(torch.float64), k, replacement=True, generator=generator)
        b = torch.arange(B).unsqueeze(1)
        g = Gaussian2D(gauss.mu[b, mode], gauss.sigma[b, mode], gauss.rho[b, mode])
    else:
        raise ValueError(f"unknown mode rule {mode_rule!r}")
    if eta is None:
        eta = torch.randn(B, k, T, 2, generator=generator, dtype=gauss.mu.dtype)
    return CoarseSamples(g.sample(eta), mode, seed)


def dump_distribution(gauss: Gaussian2D, probs: ManeuverProbs, index: int = 0) -> dict:
    """JSON-ready per-mode arrays for one scene of a batched ``(B, 6, T, ...)`` distribution."""
    gauss = Gaussian2D(gauss.mu.detach(), gauss.sigma.detach(), gauss.rho.detach())
    return {
        "joint_probs": probs.joint[index].detach().tolist(),
        "modes": [
            {
                "mode": i,
                "mu": gauss.mu[index, i].tolist(),
                "sigma": gauss.sigma[index, i].tolist(),
                "rho": gauss.rho[index, i].tolist(),
            }
            for i in range(N_MODES)
        ],
    }
