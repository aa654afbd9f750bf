"""RMSE / ADE / FDE metrics, per-horizon reports, the tau sweep and case plots."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .data import SceneTensors, SceneWindow
from .pipeline import ModelCheckpoint, Predictor

REPORT_SCHEMA = "c2ftp-report/1"
HORIZONS_S = (1, 2, 3, 4, 5)


class MetricError(ValueError):
    """Metric undefined for the given input (e.g. no instances)."""


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _displacement(pred, truth) -> np.ndarray:
    pred, truth = _np(pred), _np(truth)
    if pred.shape[0] == 0:
        raise MetricError("no instances")
    if pred.ndim == truth.ndim + 1:
        truth = truth[:, None]
    return np.sqrt(((pred - truth) ** 2).sum(-1))


def rmse_at(predictions, truths, step: int) -> float:
    """RMSE of the 2-D displacement at 1-indexed future ``step`` over ``(N, T, 2)`` arrays."""
    d = _displacement(predictions, truths)
    return float(np.sqrt(np.mean(d[:, step - 1] ** 2)))


def ade_fde(predictions, truths, aggregation: str = "single") -> tuple[float, float]:
    """``single``: predictions ``(N, T, 2)``. ``best_of_k``: ``(N, K, T, 2)``, picking per
    instance the sample with the lowest ADE and reporting its ADE and FDE."""
    d = _displacement(predictions, truths)
    if aggregation == "single":
        if d.ndim != 2:
            raise ValueError("single aggregation expects (N, T, 2) predictions")
        return float(d.mean()), float(d[:, -1].mean())
    if aggregation in ("best_of_k", "best"):
        if d.ndim != 3 or d.shape[1] == 0:
            raise ValueError("best_of_k aggregation expects (N, K, T, 2) predictions with K >= 1")
        pick = d.mean(-1).argmin(1)
        chosen = d[np.arange(len(d)), pick]
        return float(chosen.mean()), float(chosen[:, -1].mean())
    raise ValueError(f"unknown aggregation {aggregation!r}")


@dataclass
class HorizonReport:
    rows: list  # one dict per horizon: horizon_s, step, rmse, ade, fde
    average: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "code_version": __version__, "metadata": self.metadata,
                "horizons": self.rows, "average": self.average}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        agg = self.metadata.get("aggregation", "")
        lines = [f"{'Horizon':>8} {'RMSE':>8} {'ADE':>8} {'FDE':>8}   (m, ADE/FDE: {agg})"]
        for r in self.rows:
            lines.append(f"{str(r['horizon_s']) + 's':>8} {r['rmse']:8.3f} {r['ade']:8.3f} {r['fde']:8.3f}")
        a = self.average
        lines.append(f"{'Average':>8} {a['rmse']:8.3f} {a['ade']:8.3f} {a['fde']:8.3f}")
        return "\n".join(lines)


def horizon_metrics(mean_traj, samples, truths, aggregation: str = "best_of_k", hz: int = 5) -> tuple[list, dict]:
    """Rows for 1..5 s. RMSE uses ``mean_traj`` (N, T, 2); ADE/FDE use ``samples`` (N, K, T, 2)."""
    samples = _np(samples)
    rows = []
    for h in HORIZONS_S:
        step = h * hz
        if aggregation == "single":
            ade, fde = ade_fde(samples.mean(1)[:, :step], _np(truths)[:, :step], "single")
        else:
            ade, fde = ade_fde(samples[:, :, :step], _np(truths)[:, :step], "best_of_k")
        rows.append({"horizon_s": h, "step": step, "rmse": rmse_at(mean_traj, truths, step), "ade": ade, "fde": fde})
    avg = {k: float(np.mean([r[k] for r in rows])) for k in ("rmse", "ade", "fde")}
    return rows, avg


def run_predictions(ckpt: ModelCheckpoint, data: SceneTensors, k: int, tau: int, seed: int, batch_size: int = 256):
    """Most-probable-mode means, coarse and refined samples for every scene (fixed batch order)."""
    pred = Predictor(ckpt)
    gen = torch.Generator().manual_seed(seed)
    mus, coarse, refined, probs = [], [], [], []
    for b in data.batches(batch_size):
        out = pred.predict(b, k, tau, gen)
        mus.append(out.gauss.select(out.probs.best_mode()).mu)
        coarse.append(out.coarse)
        refined.append(out.refined)
        probs.append(out.probs.joint)
    cat = lambda xs: torch.cat(xs).numpy().astype(np.float64)
    return cat(mus), cat(coarse), cat(refined), cat(probs)


def horizon_report(
    ckpt: ModelCheckpoint,
    test_set,
    k: int = 20,
    tau: int = 10,
    seed: int = 0,
    aggregation: str = "best_of_k",
    dataset: str = "",
    checkpoint_id: str = "",
) -> HorizonReport:
    if len(test_set) == 0:
        raise MetricError("empty test set")
    data = test_set if isinstance(test_set, SceneTensors) else SceneTensors(test_set)
    aggregation = "best_of_k" if aggregation == "best" else aggregation
    mu, _, refined, _ = run_predictions(ckpt, data, k, tau, seed)
    truth = data.future.numpy().astype(np.float64)
    rows, avg = horizon_metrics(mu, refined, truth, aggregation, ckpt.cfg.target_hz)
    meta = {
        "dataset": dataset,
        "checkpoint": checkpoint_id,
        "k": k,
        "tau": tau,
        "seed": seed,
        "aggregation": aggregation,
        "rmse_source": "most probable mode mean",
        "scenes": len(data),
    }
    return HorizonReport(rows, avg, meta)


def sweep_tau(ckpt: ModelCheckpoint, data, taus: Sequence[int] = (3, 10, 15), k: int = 20, seed: int = 0) -> list[dict]:
    """Latency and accuracy of the full pipeline for each number of denoising steps."""
    if len(data) == 0:
        raise MetricError("empty test set")
    data = data if isinstance(data, SceneTensors) else SceneTensors(data)
    truth = data.future.numpy().astype(np.float64)
    out = []
    for tau in taus:
        start = time.perf_counter()
        _, _, refined, _ = run_predictions(ckpt, data, k, tau, seed)
        elapsed = time.perf_counter() - start
        ade, fde = ade_fde(refined, truth, "best_of_k")
        out.append({"tau": tau, "latency_ms_per_scene": 1000.0 * elapsed / len(data), "ade": ade, "fde": fde})
    return out


# ---------------------------------------------------------------------------
# case plots


def case_geometry(scene: SceneWindow, predictions, truth=None, lane_width: float = 3.7, lanes: int = 5) -> dict:
    """Plot payload in scene-relative meters: lane boundaries, histories, truth and predictions."""
    preds = _np(predictions).reshape(-1, *scene.target_future.shape) if len(predictions) else np.zeros((0, 0, 2))
    truth = scene.target_future if truth is None else _np(truth)
    hist = scene.target_history
    y_lo = float(min(hist[:, 1].min(), truth[:, 1].min(), preds[..., 1].min() if preds.size else 0.0)) - 5.0
    y_hi = float(max(hist[:, 1].max(), truth[:, 1].max(), preds[..., 1].max() if preds.size else 0.0)) + 5.0
    half = lanes / 2.0
    bounds = [(-half + i) * lane_width for i in range(lanes + 1)]
    return {
        "lanes": [[[x, y_lo], [x, y_hi]] for x in bounds],
        "neighbors": [h.tolist() for h in scene.neighbor_histories],
        "history": hist.tolist(),
        "truth": truth.tolist(),
        "predictions": [p.tolist() for p in preds],
    }


def emit_case_plot(scene: SceneWindow, predictions, truth, out_path: str | Path, lane_width: float = 3.7) -> dict:
    """Render the case to ``out_path`` (format from the extension, e.g. ``.png``/``.svg``); returns the geometry."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    geo = case_geometry(scene, predictions, truth, lane_width)
    fig, ax = plt.subplots(figsize=(4, 8))
    for i, seg in enumerate(geo["lanes"]):
        s = np.asarray(seg)
        style = "-" if i in (0, len(geo["lanes"]) - 1) else "--"
        ax.plot(s[:, 0], s[:, 1], style, color="0.6", lw=0.8)
    for n in geo["neighbors"]:
        n = np.asarray(n)
        ax.plot(n[:, 0], n[:, 1], color="tab:gray", lw=1.2)
        ax.plot(n[-1, 0], n[-1, 1], "s", color="tab:gray", ms=4)
    for j, p in enumerate(geo["predictions"]):
        p = np.asarray(p)
        ax.plot(p[:, 0], p[:, 1], color="tab:red", alpha=0.35, lw=0.8, label="prediction" if j == 0 else None)
    h, t = np.asarray(geo["history"]), np.asarray(geo["truth"])
    ax.plot(h[:, 0], h[:, 1], color="tab:blue", lw=2, label="history")
    ax.plot(t[:, 0], t[:, 1], color="tab:green", lw=2, label="ground truth")
    ax.set_xlabel("lateral (m)")
    ax.set_ylabel("longitudinal (m)")
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return geo
