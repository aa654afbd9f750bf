"""Independent reference computations used by the tests (numpy / plain loops)."""
import math

import numpy as np
import torch


def complex_superpose(a, ti, b, tj):
    s = a * np.exp(1j * ti) + b * np.exp(1j * tj)
    return np.abs(s), s


def complex_surrounding_fc(z, theta, mask, wt, wi):
    """``Re(Wt w) + Im(Wi w)`` with ``w = z e^{i theta}`` on occupied rows only."""
    w = np.where(mask[:, None], z * np.exp(1j * theta), 0)
    return (wt @ w).real + (wi @ w).imag


def attention_oracle(x, wq, bq, wk, bk, wv, bv, heads, gamma, beta, eps=1e-5):
    """Per head, per query row: explicit softmax loop, then concat and layer-norm."""
    T, d = x.shape
    dk = d // heads
    q, k, v = x @ wq.T + bq, x @ wk.T + bk, x @ wv.T + bv
    out = np.zeros((T, d))
    scores = np.zeros((heads, T, T))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(T):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dk) for j in range(T)])
            p = np.exp(logits - logits.max())
            p /= p.sum()
            scores[h, i] = p
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(T))
    mu = out.mean(-1, keepdims=True)
    var = out.var(-1, keepdims=True)
    return (out - mu) / np.sqrt(var + eps) * gamma + beta, scores


def bivariate_logpdf(y, mu, sx, sy, rho):
    """Density via the explicit 2x2 covariance inverse and determinant."""
    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    d = np.asarray(y) - np.asarray(mu)
    return -math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(cov)) - 0.5 * d @ np.linalg.solve(cov, d)


def param_grad_rel_error(module, loss_fn, coords=40, eps=1e-6, seed=0):
    """Relative error between autograd and central differences on sampled parameter entries (float64)."""
    module = module.double()
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    gen = np.random.default_rng(seed)
    ag, fd = [], []
    with torch.no_grad():
        for _ in range(coords):
            p = params[gen.integers(len(params))]
            i = int(gen.integers(p.numel()))
            flat = p.view(-1)
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            fd.append((up - down) / (2 * eps))
            ag.append(0.0 if p.grad is None else p.grad.view(-1)[i].item())
    ag, fd = np.array(ag), np.array(fd)
    return np.linalg.norm(ag - fd) / max(np.linalg.norm(ag), 1e-12)
