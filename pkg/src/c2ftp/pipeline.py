"""Two-stage training, checkpoint container and end-to-end inference."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import Config, ConfigError
from .data import SceneBatch, SceneTensors
from .diffusion import DiffusionSchedule, Refiner, make_schedule, noise_estimation_loss, refine
from .predictor import (
    Gaussian2D,
    ManeuverProbs,
    MultimodalPredictor,
    compute_mode_weights,
    decode_gaussian,
    mode_log_prob,
    nll_loss,
    predict_maneuver_probs,
    reweight_context,
    sample_coarse,
)
from .wave import InteractionEncoder

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"C2FTPCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable, corrupt or incompatible checkpoint."""


class InteractionModel(nn.Module):
    """Spatial-temporal interaction stage: context encoder plus multimodal predictor."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        self.encoder = InteractionEncoder(cfg)
        self.predictor = MultimodalPredictor(cfg)

    def forward(self, batch: SceneBatch, modes: torch.Tensor | None = None):
        """Returns ``(probs, gauss)``; ``gauss`` covers all six modes unless ``modes`` is given."""
        C, _ = self.encoder(batch)
        return self.predictor(C, modes)

    def supervised(self, batch: SceneBatch, teacher_forcing: bool = True):
        """Probabilities and the Gaussian of the mode used for supervision (label, else argmax)."""
        C, _ = self.encoder(batch)
        probs = predict_maneuver_probs(C, self.predictor)
        mode = probs.best_mode()
        if teacher_forcing:
            mode = torch.where(batch.mode >= 0, batch.mode, mode)
        u = compute_mode_weights(C, self.predictor)
        b = torch.arange(C.shape[0])
        gauss = decode_gaussian(reweight_context(C, u[b, mode]), C, self.predictor, mode)
        return probs, gauss, mode


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    config: dict
    interaction: Optional[dict] = None  # state_dict
    refiner: Optional[dict] = None
    schedule: Optional[dict] = None  # {"betas": [...], "tau": int}
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION
    last: Optional["ModelCheckpoint"] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.interaction is None and self.refiner is None:
            raise CheckpointError("checkpoint needs at least one parameter block")

    @property
    def cfg(self) -> Config:
        return Config.from_dict(self.config)

    def diffusion_schedule(self) -> DiffusionSchedule:
        if self.schedule is None:
            cfg = self.cfg
            return make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.tau)
        return DiffusionSchedule.from_betas(self.schedule["betas"], self.schedule["tau"])

    def build_interaction(self) -> InteractionModel:
        if self.interaction is None:
            raise ConfigError("checkpoint has no interaction block")
        m = InteractionModel(self.cfg)
        m.load_state_dict(self.interaction)
        return m.eval()

    def build_refiner(self) -> Refiner:
        if self.refiner is None:
            raise ConfigError("checkpoint has no refiner block")
        r = Refiner(self.cfg, self.diffusion_schedule())
        r.load_state_dict(self.refiner)
        return r.eval()


def _state(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    tensors, chunks, offset = [], [], 0
    for block in ("interaction", "refiner"):
        state = getattr(ckpt, block)
        if state is None:
            continue
        for name in sorted(state):
            arr = state[name].detach().cpu().contiguous().numpy()
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            tensors.append(
                {"block": block, "name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                 "offset": offset, "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
    header = json.dumps(
        {
            "version": ckpt.version,
            "config": ckpt.config,
            "schedule": ckpt.schedule,
            "history": ckpt.history,
            "blocks": [b for b in ("interaction", "refiner") if getattr(ckpt, b) is not None],
            "tensors": tensors,
        },
        sort_keys=True,
    ).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", ckpt.version, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 12
    if len(data) < head + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint or truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    version, hlen = struct.unpack("<IQ", body[len(CHECKPOINT_MAGIC) : head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(body[head : head + hlen])
    payload = body[head + hlen :]
    blocks: dict[str, dict] = {b: {} for b in header["blocks"]}
    for t in header["tensors"]:
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"]).newbyteorder("<")).reshape(t["shape"])
        blocks[t["block"]][t["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return ModelCheckpoint(
        config=header["config"],
        interaction=blocks.get("interaction"),
        refiner=blocks.get("refiner"),
        schedule=header["schedule"],
        history=header["history"],
        version=version,
    )


# ---------------------------------------------------------------------------
# training


def _tensors(data) -> SceneTensors:
    if isinstance(data, SceneTensors):
        return data
    if not data:
        raise ConfigError("empty dataset")
    return SceneTensors(data)


def _optimizer(params, cfg: Config):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _set_lr(opt, cfg: Config, epoch: int) -> float:
    lr = cfg.lr_at(epoch)
    for g in opt.param_groups:
        g["lr"] = lr
    return lr


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


def best_of_k_loss(y, samples, reduction: str = "mean"):
    """``min_k ||Y - Y_k||_2`` over the flattened trajectory; ``samples`` is ``(B, K, T, 2)``."""
    d = (samples - y.unsqueeze(1)).pow(2).flatten(2).sum(-1).sqrt()
    loss = d.min(dim=1).values
    return loss.mean() if reduction == "mean" else loss


def _run_epochs(cfg, train, val, params, step_loss, eval_loss, snapshot, history):
    """Shared epoch loop. Returns (best_state, last_state) as produced by ``snapshot``.

    The starting parameters are scored first (history entry ``epoch 0``) and
    compete for the best-validation slot, so a warm start is never made worse.
    """
    opt = _optimizer(params, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    best_state = last_state = snapshot()
    best_val = math.inf
    if val is not None:
        best_val = eval_loss(val)
        history.append({"epoch": 0, "val_loss": best_val})
    for epoch in range(cfg.epochs):
        lr = _set_lr(opt, cfg, epoch)
        total, n = 0.0, 0
        diverged = False
        for batch in train.batches(cfg.batch_size, shuffle=True, generator=gen):
            loss = step_loss(batch, gen, epoch)
            if not _finite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            total += loss.item() * len(batch)
            n += len(batch)
        if diverged:
            logger.warning("epoch %d: non-finite loss, stopping with the last finite parameters", epoch + 1)
            history.append({"epoch": epoch + 1, "diverged": True})
            break
        last_state = snapshot()
        val_loss = eval_loss(val) if val is not None else None
        history.append({"epoch": epoch + 1, "lr": lr, "train_loss": total / max(n, 1), "val_loss": val_loss})
        logger.info("epoch %d lr %.2e train %.4f val %s", epoch + 1, lr, total / max(n, 1), val_loss)
        score = val_loss if val_loss is not None else total / max(n, 1)
        if score < best_val:
            best_val, best_state = score, last_state
    return best_state, last_state


def _split_args(train, val):
    train = _tensors(train)
    val = _tensors(val) if val is not None and len(val) else None
    return train, val


def train_refiner(train, val, config: Config) -> ModelCheckpoint:
    """Fit the denoiser with the noise-estimation loss; returns the best-validation checkpoint."""
    cfg = config.for_stage("refiner")
    train, val = _split_args(train, val)
    torch.manual_seed(cfg.seed)
    refiner = Refiner(cfg)
    schedule = refiner.schedule

    def step(batch, gen, epoch):
        return noise_estimation_loss(batch, schedule, refiner, generator=gen)

    @torch.no_grad()
    def evaluate(data):
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        tot = sum(float(noise_estimation_loss(b, schedule, refiner, generator=gen)) * len(b)
                  for b in data.batches(cfg.batch_size))
        return tot / len(data)

    history: list = []
    best, last = _run_epochs(cfg, train, val, list(refiner.parameters()), step, evaluate, lambda: _state(refiner), history)
    mk = lambda s: ModelCheckpoint(cfg.to_dict(), refiner=s, schedule=schedule.to_dict(), history=history)
    ckpt = mk(best)
    ckpt.last = mk(last)
    return ckpt


@torch.no_grad()
def evaluate_nll(model: InteractionModel, data: SceneTensors, cfg: Config) -> float:
    was = model.training
    model.eval()
    tot = 0.0
    for b in data.batches(cfg.batch_size):
        probs, gauss, mode = model.supervised(b, cfg.teacher_forcing)
        tot += float(nll_loss(gauss, probs, b.future, mode, cfg.sigma_floor, reduction="sum"))
    model.train(was)
    return tot / len(data)


def _init_interaction(cfg: Config, init: ModelCheckpoint | None) -> InteractionModel:
    torch.manual_seed(cfg.seed)
    model = InteractionModel(cfg)
    if init is not None:
        if init.interaction is None:
            raise ConfigError("init checkpoint has no interaction block")
        model.load_state_dict(init.interaction)
    return model.train()


def warmup_loss(gauss: Gaussian2D, probs: ManeuverProbs, y, mode, coord_scale: float = 1.0):
    """Squared error of the supervised mode's mean, in ``coord_scale`` units, plus the
    maneuver cross-entropy. Measuring the error in meters would drown the classifier."""
    sq = (((gauss.mu - y) / coord_scale) ** 2).sum(-1).mean()
    return sq - mode_log_prob(probs, mode).mean()


def train_interaction_standalone(train, val, config: Config, init: ModelCheckpoint | None = None) -> ModelCheckpoint:
    """Fit the interaction stage alone with the maneuver-conditioned NLL."""
    cfg = config.for_stage("interaction_standalone")
    train, val = _split_args(train, val)
    model = _init_interaction(cfg, init)

    def step(batch, gen, epoch):
        probs, gauss, mode = model.supervised(batch, cfg.teacher_forcing)
        if epoch < cfg.mse_warmup_epochs:
            return warmup_loss(gauss, probs, batch.future, mode, cfg.coord_scale)
        return nll_loss(gauss, probs, batch.future, mode, cfg.sigma_floor)

    history: list = []
    best, last = _run_epochs(
        cfg, train, val, list(model.parameters()), step,
        lambda d: evaluate_nll(model, d, cfg), lambda: _state(model), history,
    )
    mk = lambda s: ModelCheckpoint(cfg.to_dict(), interaction=s, history=history)
    ckpt = mk(best)
    ckpt.last = mk(last)
    return ckpt


def coarse_and_refined(model, refiner, batch, cfg, k, tau, generator, teacher_forcing=False):
    """Differentiable coarse draws from the selected mode and their refinement (refiner frozen)."""
    probs, gauss, mode = model.supervised(batch, teacher_forcing)
    B, T = batch.future.shape[:2]
    eta = torch.randn(B, k, T, 2, generator=generator, dtype=batch.future.dtype)
    g = Gaussian2D(gauss.mu.unsqueeze(1), gauss.sigma.unsqueeze(1), gauss.rho.unsqueeze(1))
    coarse = g.sample(eta)
    with torch.no_grad():
        chi = refiner.context(batch)
    refined = refine(coarse, chi, refiner.schedule, refiner, tau=tau, generator=generator)
    return coarse, refined, probs


def train_interaction(
    train, val, refiner_ckpt: ModelCheckpoint, config: Config, init: ModelCheckpoint | None = None
) -> ModelCheckpoint:
    """Fit the interaction stage through the frozen refiner with the best-of-K displacement loss."""
    if refiner_ckpt is None or refiner_ckpt.refiner is None:
        raise ConfigError("stage-2 training needs a checkpoint with a refiner block")
    cfg = config.for_stage("interaction")
    train, val = _split_args(train, val)
    refiner = refiner_ckpt.build_refiner()
    frozen = _state(refiner)
    for p in refiner.parameters():
        p.requires_grad_(False)
    model = _init_interaction(cfg, init)
    tau = cfg.tau

    def step(batch, gen, epoch):
        _, refined, _ = coarse_and_refined(model, refiner, batch, cfg, cfg.k, tau, gen, cfg.teacher_forcing)
        return best_of_k_loss(batch.future, refined)

    @torch.no_grad()
    def evaluate(data):
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        was = model.training
        model.eval()
        tot = 0.0
        for b in data.batches(cfg.batch_size):
            _, refined, _ = coarse_and_refined(model, refiner, b, cfg, cfg.k, tau, gen, False)
            tot += float(best_of_k_loss(b.future, refined, reduction="none").sum())
        model.train(was)
        return tot / len(data)

    history: list = []
    best, last = _run_epochs(
        cfg, train, val, list(model.parameters()), step, evaluate, lambda: _state(model), history
    )
    after = refiner.state_dict()
    if any(not torch.equal(frozen[k], after[k]) for k in frozen):
        raise RuntimeError("refiner parameters changed during stage-2 training")
    mk = lambda s: ModelCheckpoint(
        cfg.to_dict(), interaction=s, refiner=frozen, schedule=refiner_ckpt.schedule,
        history=list(refiner_ckpt.history) + [dict(h, stage="interaction") for h in history],
    )
    ckpt = mk(best)
    ckpt.last = mk(last)
    return ckpt


def train(stage: str, train_data, val_data, config: Config, refiner_ckpt=None, init=None) -> ModelCheckpoint:
    stage = stage.replace("-", "_")
    if stage == "refiner":
        return train_refiner(train_data, val_data, config)
    if stage == "interaction":
        return train_interaction(train_data, val_data, refiner_ckpt, config, init)
    if stage == "interaction_standalone":
        return train_interaction_standalone(train_data, val_data, config, init)
    raise ConfigError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    probs: ManeuverProbs
    gauss: Gaussian2D  # (B, 6, t_f, ...)
    coarse: torch.Tensor  # (B, K, t_f, 2)
    refined: torch.Tensor  # (B, K, t_f, 2)
    mode: torch.Tensor


class Predictor:
    """Read-only inference over a checkpoint holding both parameter blocks."""

    def __init__(self, ckpt: ModelCheckpoint):
        self.cfg = ckpt.cfg
        self.model = ckpt.build_interaction()
        self.refiner = ckpt.build_refiner() if ckpt.refiner is not None else None
        self.schedule = self.refiner.schedule if self.refiner is not None else None

    @torch.no_grad()
    def predict(self, batch: SceneBatch, k: int, tau: int | None = None, generator=None, sample_mode=None) -> Prediction:
        tau = self.cfg.tau if tau is None else tau
        if tau and self.refiner is None:
            raise ConfigError("tau > 0 needs a refiner block")
        if self.schedule is not None and tau > self.schedule.T:
            raise ConfigError(f"tau={tau} exceeds the schedule length {self.schedule.T}")
        generator = generator or torch.Generator().manual_seed(self.cfg.seed)
        probs, gauss = self.model(batch)
        coarse = sample_coarse(gauss, probs, k, generator, sample_mode or self.cfg.sample_mode)
        refined = coarse.samples
        if tau:
            chi = self.refiner.context(batch)
            refined = refine(coarse.samples, chi, self.schedule, self.refiner, tau=tau, generator=generator)
        return Prediction(probs, gauss, coarse.samples, refined, coarse.mode)


def scene_batch(history, neighbors=(), dtype=torch.float32, grid_cols: int = 5) -> SceneBatch:
    """Single-scene batch; ``neighbors`` holds ``(cell, history)`` with cell a flat id or ``(row, col)``."""
    cells, hists = [], []
    for cell, h in neighbors:
        cells.append(cell[0] * grid_cols + cell[1] if isinstance(cell, (tuple, list)) else int(cell))
        hists.append(np.asarray(h, dtype=np.float64))
    history = np.asarray(history, dtype=np.float64)
    t_h = history.shape[0]
    return SceneBatch(
        history=torch.as_tensor(history[None], dtype=dtype),
        future=torch.zeros(1, 0, 2, dtype=dtype),
        nbr_history=torch.as_tensor(np.stack(hists) if hists else np.zeros((0, t_h, 2)), dtype=dtype),
        nbr_batch=torch.zeros(len(cells), dtype=torch.long),
        nbr_cell=torch.as_tensor(cells, dtype=torch.long),
        mode=torch.full((1,), -1, dtype=torch.long),
    )


def infer(history, neighbors, ckpt: ModelCheckpoint, k: int = 20, tau: int = 10, seed: int = 0) -> dict:
    """End-to-end inference for one scene: ``K`` refined futures and maneuver probabilities."""
    if ckpt.interaction is None or ckpt.refiner is None:
        raise ConfigError("inference needs both parameter blocks")
    pred = Predictor(ckpt)
    batch = scene_batch(history, neighbors, grid_cols=pred.cfg.grid_cols)
    out = pred.predict(batch, k, tau, torch.Generator().manual_seed(seed))
    return {
        "trajectories": out.refined[0],
        "coarse": out.coarse[0],
        "joint_probs": out.probs.joint[0],
        "mode": int(out.mode[0]),
        "distribution": out.gauss[0],
    }
