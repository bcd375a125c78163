"""Training loop: Adam, a halving learning-rate schedule, per-epoch checkpoints.

Each epoch writes ``epoch_NNN.ckpt`` (model weights, config sidecar) and
``epoch_NNN.adam.ckpt`` (first/second moments, step count) to the checkpoint
directory, and appends one JSON line to ``log.jsonl``. Shuffling and dropout
masks derive from ``(seed, epoch, batch)`` only, so a resumed run continues
exactly as an uninterrupted one would.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tape, xavier_init
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Dataset
from .decoder import CaptionModel, make_batch, teacher_forced_loss

__all__ = [
    "TrainConfig",
    "AdamMoments",
    "DivergenceError",
    "EpochLog",
    "TrainResult",
    "lr_at",
    "xavier_init",
    "adam_step",
    "train",
]

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """Loss or gradient went non-finite; earlier checkpoints are left in place."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    halve_every_epochs: int = 4
    lr_min: float = 2e-4
    epochs: int = 20
    batch_size: int = 32
    dropout: float = 0.35
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr0:
            raise ValueError(f"lr_min={self.lr_min} exceeds lr0={self.lr0}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.halve_every_epochs < 1:
            raise ValueError("halve_every_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: halved every few epochs, clamped at ``lr_min``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(cfg.lr_min, cfg.lr0 * 0.5 ** (epoch // cfg.halve_every_epochs))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Iterable[Parameter]) -> "AdamMoments":
        params = list(params)
        return cls(
            {p.name: np.zeros_like(p.data) for p in params},
            {p.name: np.zeros_like(p.data) for p in params},
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_state_dict(cls, tensors: dict[str, np.ndarray], step: int) -> "AdamMoments":
        m = {k[2:]: v for k, v in tensors.items() if k.startswith("m/")}
        v = {k[2:]: val for k, val in tensors.items() if k.startswith("v/")}
        if m.keys() != v.keys():
            raise ValueError("optimizer state has mismatched first/second moment tensors")
        return cls(m, v, step)


def adam_step(
    params: Iterable[Parameter],
    grads: dict[str, np.ndarray] | None,
    moments: AdamMoments,
    step_index: int,
    lr: float,
    cfg: TrainConfig,
) -> AdamMoments:
    """One bias-corrected Adam update, in place. ``grads`` defaults to each ``p.grad``.

    Every gradient is checked before any parameter moves, so a bad step leaves
    the weights untouched.
    """
    if step_index < 1:
        raise ValueError(f"step_index must be >= 1, got {step_index}")
    params = list(params)
    gs = {}
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        if g.shape != p.data.shape:
            raise ad.DimensionError(f"gradient for {p.name} has shape {g.shape}, parameter is {p.data.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise DivergenceError(f"non-finite gradient in {p.name} ({bad} of {g.size} entries) at step {step_index}")
        gs[p.name] = g

    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    for p in params:
        g = gs[p.name]
        m = moments.m[p.name]
        v = moments.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    moments.step = step_index
    return moments


# ---------------------------------------------------------------- loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss_total: float
    loss_nll: float
    loss_attn: float
    loss_l2: float
    wall_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[EpochLog] = field(default_factory=list)


def checkpoint_path(ckpt_dir, epoch: int) -> Path:
    return Path(ckpt_dir) / f"epoch_{epoch:03d}.ckpt"


def optimizer_path(ckpt_dir, epoch: int) -> Path:
    return Path(ckpt_dir) / f"epoch_{epoch:03d}.adam.ckpt"


def _examples(dataset: Dataset, model: CaptionModel) -> tuple[np.ndarray, list[int], list[list[int]]]:
    feats = []
    for rec in dataset.records:
        fm = rec.feature_map().data
        if feats and fm.shape != feats[0].shape:
            raise ad.DimensionError(f"record {rec.id}: feature map {fm.shape} differs from {feats[0].shape}")
        feats.append(fm)
    owners, seqs = [], []
    for i, j in dataset.pairs():
        owners.append(i)
        seqs.append(model.codec.encode(dataset.records[i].captions[j]))
    return np.stack(feats), owners, seqs


def _read_log(path: Path, upto_epoch: int) -> list[EpochLog]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            entry = EpochLog(**json.loads(line))
            if entry.epoch <= upto_epoch:
                out.append(entry)
    return out


def train(
    dataset: Dataset,
    model: CaptionModel,
    cfg: TrainConfig,
    ckpt_dir,
    resume_from=None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Fit ``model.params`` in place and return the final checkpoint path.

    ``resume_from`` is an ``epoch_NNN.ckpt`` written by an earlier call; its
    optimizer state is loaded from the matching ``.adam.ckpt``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    ckpt_dir = Path(ckpt_dir)
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {ckpt_dir}: {exc}") from exc

    model.cfg = dataclasses.replace(model.cfg, dropout_rate=cfg.dropout)
    features, owners, seqs = _examples(dataset, model)
    dtype = model.params["decoder/W_I"].data.dtype
    features = features.astype(dtype, copy=False)
    moments = AdamMoments.zeros(model.params)
    log_path = ckpt_dir / "log.jsonl"
    start = 0
    history: list[EpochLog] = []

    if resume_from is not None:
        resume_from = Path(resume_from)
        tensors, meta = load_checkpoint(resume_from)
        if meta is None or "epoch" not in meta:
            raise ValueError(f"{resume_from}: sidecar lacks the epoch it was written at")
        model.params.load_state_dict(tensors)
        opt_tensors, opt_meta = load_checkpoint(resume_from.with_name(resume_from.name.replace(".ckpt", ".adam.ckpt")))
        moments = AdamMoments.from_state_dict(opt_tensors, int(opt_meta["step"]))
        start = int(meta["epoch"]) + 1
        history = _read_log(log_path, start - 1)
    log_path.write_text("".join(h.to_json() + "\n" for h in history))

    n = len(seqs)
    step_index = moments.step
    last = checkpoint_path(ckpt_dir, start - 1) if start > 0 else None
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = Rng(cfg.seed).split(1, epoch).generator().permutation(n)
        sums = np.zeros(4)
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            batch = make_batch(features[[owners[i] for i in idx]], [seqs[i] for i in idx], model.cfg)
            model.params.zero_grad()
            with Tape() as tape:
                terms = teacher_forced_loss(
                    batch, model.params, model.cfg, cfg.weight_decay, train=True,
                    rng=Rng(cfg.seed).split(2, epoch, b),
                )
            total = float(terms.total.data)
            if not np.isfinite(total):
                raise DivergenceError(
                    f"loss became {total} at epoch {epoch}, batch {b}; "
                    f"last good checkpoint: {last if last else 'none'}"
                )
            tape.backward(terms.total)
            step_index += 1
            adam_step(model.params, None, moments, step_index, lr, cfg)
            sums += len(idx) * np.array(
                [total, float(terms.nll.data), float(terms.attn_reg.data), float(terms.l2.data)]
            )
        means = sums / n
        entry = EpochLog(epoch, lr, *map(float, means), round(time.perf_counter() - t0, 3))
        last = checkpoint_path(ckpt_dir, epoch)
        model.save(last, extra={"epoch": epoch, "train": cfg.to_dict()})
        save_checkpoint(optimizer_path(ckpt_dir, epoch), moments.state_dict(), {"step": step_index, "epoch": epoch})
        with log_path.open("a") as fh:
            fh.write(entry.to_json() + "\n")
        history.append(entry)
        log.info("epoch %d lr %.2e loss %.4f nll %.4f", epoch, lr, entry.loss_total, entry.loss_nll)
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(last, history)
