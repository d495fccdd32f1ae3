"""Cross-entropy training with Adagrad, exponential learning-rate decay,
global-norm gradient clipping and late attachment of the latent-concept head."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Dataset, augment_dataset, pool_dataset
from .metrics import PredictionSet, evaluate
from .models import ModelSpec, Params, forward, init_lc_params, init_params, predict, trainable
from .rng import RngStreams, stream
from .tensor import Graph, Mode, Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
ADAGRAD_EPS = 1e-7
FULL_SCALE_DECAY_EVERY = 8_000_000


class TrainingDivergence(ArithmeticError):
    """The training loss became non-finite."""


@dataclass
class TrainConfig:
    base_lr: float = 0.0002
    decay_factor: float = 0.8
    # None: ten passes over the training set (the full-scale value is 8M examples)
    decay_every_examples: Optional[int] = None
    clip_norm: float = 0.8
    dropout_keep: float = 0.8
    batch_size: int = 1024
    epochs: int = 20
    max_steps: Optional[int] = None
    # None: take the LC spec's fire_after_epochs
    lc_fire_after_epochs: Optional[int] = None
    freeze_backbone_on_fire: bool = False
    frame_sample_fraction: float = 0.8
    augment_segments: int = 0
    eval_k: int = 20
    checkpoint_dtype: str = "<f4"
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if not 0 < self.dropout_keep <= 1:
            raise ValueError("dropout_keep must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.decay_every_examples is not None and self.decay_every_examples <= 0:
            raise ValueError("decay_every_examples must be > 0")
        if self.augment_segments < 0:
            raise ValueError("augment_segments must be >= 0")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptState:
    accumulators: dict = field(default_factory=dict)
    step: int = 0
    examples_seen: int = 0


# ---------------------------------------------------------------------------
# loss, schedule, optimiser


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean over the batch of the summed per-class binary cross-entropy."""
    y = np.asarray(labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise T.ShapeError(f"probs {probs.shape} vs labels {y.shape}")
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.add(T.mul(T.log(p), y), T.mul(T.log(T.sub(1.0, p)), 1.0 - y))
    return T.mul(T.sum(ll), -1.0 / y.shape[0])


def lr_at(examples_seen: float, cfg: TrainConfig, decay_every: Optional[float] = None) -> float:
    every = decay_every or cfg.decay_every_examples or FULL_SCALE_DECAY_EVERY
    return cfg.base_lr * cfg.decay_factor ** (examples_seen / every)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: float) -> list:
    if clip_norm <= 0:
        raise ValueError("clip_norm must be > 0")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return list(grads)
    scale = clip_norm / norm
    return [g * scale for g in grads]


def adagrad_step(params: dict, grads: dict, state: OptState, lr: float) -> None:
    """``acc += g**2; theta -= lr * g / (sqrt(acc) + eps)`` for each named parameter."""
    for name, g in grads.items():
        acc = state.accumulators.get(name)
        acc = g * g if acc is None else acc + g * g
        state.accumulators[name] = acc
        p = params[name]
        p.value = p.value - lr * g / (np.sqrt(acc) + ADAGRAD_EPS)
    state.step += 1


# ---------------------------------------------------------------------------
# the loop


def prepare(spec: ModelSpec, ds: Dataset, augment_segments: int = 0):
    """Model inputs and labels for ``ds`` under ``spec``.

    Video-level specs fed a frame dataset get pooled features (plus segment
    copies when ``augment_segments`` > 0).
    """
    if spec.frame_level:
        if ds.kind != "frame":
            raise ValueError("a frame-level model needs a frame-level dataset")
    elif ds.kind == "frame":
        ds = augment_dataset(ds, augment_segments) if augment_segments else pool_dataset(ds)
    if ds.dim != spec.input_dim:
        raise ValueError(f"dataset feature width {ds.dim} != spec input_dim {spec.input_dim}")
    if ds.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, spec has {spec.num_classes}")
    return ds


def predictions(spec: ModelSpec, params: Params, ds: Dataset) -> PredictionSet:
    return PredictionSet(ds.ids, predict(spec, params, ds.inputs()), ds.labels)


@dataclass
class TrainResult:
    spec: ModelSpec
    params: Params
    log: list
    attach_check: Optional[dict]
    opt_state: OptState


def _fire_epoch(spec: ModelSpec, cfg: TrainConfig) -> Optional[int]:
    if spec.lc is None:
        return None
    after = cfg.lc_fire_after_epochs if cfg.lc_fire_after_epochs is not None else spec.lc.fire_after_epochs
    return after + 1


def _attach_lc(spec, params, cfg, ref_ds) -> dict:
    """Attach a fresh LC head and confirm reference predictions are unchanged."""
    before = predict(spec, params, ref_ds.inputs()) if ref_ds is not None else None
    params.update(init_lc_params(spec, stream(cfg.seed, "lc_init")))
    check = {"identical": True}
    if before is not None:
        after = predict(spec, params, ref_ds.inputs())
        check["identical"] = bool(np.array_equal(before, after))
        pb, pa = PredictionSet(ref_ds.ids, before, ref_ds.labels), PredictionSet(ref_ds.ids, after, ref_ds.labels)
        if any(ref_ds.labels):
            check["gap_before"] = evaluate(pb, cfg.eval_k).gap
            check["gap_after"] = evaluate(pa, cfg.eval_k).gap
    if not check["identical"]:
        logger.warning("LC attachment changed predictions")
    return check


def train(
    spec: ModelSpec,
    train_ds: Dataset,
    cfg: TrainConfig,
    val_ds: Optional[Dataset] = None,
    out_dir=None,
) -> TrainResult:
    """Train ``spec`` from scratch.

    When ``spec`` has an LC head, the head is attached (output projection
    zeroed) at the start of epoch ``fire_after_epochs + 1`` and trained jointly
    from then on. Per epoch: mean training loss, validation GAP/mAP/PERR and
    the current learning rate go into the log, and a checkpoint is written
    when ``out_dir`` is given.
    """
    cfg.validate()
    spec.validate()
    train_ds = prepare(spec, train_ds, cfg.augment_segments)
    val_ds = prepare(spec, val_ds) if val_ds is not None else None
    n = len(train_ds)
    if n < 2:
        raise ValueError("need at least two training examples")
    inputs, y = train_ds.inputs(), train_ds.label_matrix()
    decay_every = cfg.decay_every_examples or 10 * n
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    params = init_params(spec, stream(cfg.seed, "init"))
    state = OptState()
    fire = _fire_epoch(spec, cfg)
    attach_check = None
    log = []
    frozen = False

    for epoch in range(1, cfg.epochs + 1):
        if fire is not None and epoch == fire:
            attach_check = _attach_lc(spec, params, cfg, val_ds)
            attach_check["epoch"] = epoch
            frozen = cfg.freeze_backbone_on_fire
        streams = RngStreams(cfg.seed, epoch)
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        total_loss, counted = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch-norm cannot train on a single example
            batch = inputs[idx] if isinstance(inputs, np.ndarray) else [inputs[i] for i in idx]
            with Graph(Mode.TRAIN) as graph:
                probs = forward(
                    spec, params, batch, mode=Mode.TRAIN, rng=streams,
                    keep_prob=cfg.dropout_keep, frame_fraction=cfg.frame_sample_fraction,
                )
                loss = bce_loss(probs, y[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergence(f"loss became {value} at epoch {epoch}, step {state.step + 1}")
            live = trainable(params)
            if frozen:
                live = {k: v for k, v in live.items() if k.startswith("lc/")}
            for p in live.values():
                p.grad = None
            graph.backward(loss)
            names = list(live)
            raw = [live[k].grad if live[k].grad is not None else np.zeros_like(live[k].value) for k in names]
            clipped = clip_gradients(raw, cfg.clip_norm)
            lr = lr_at(state.examples_seen, cfg, decay_every)
            adagrad_step(params, dict(zip(names, clipped)), state, lr)
            state.examples_seen += len(idx)
            total_loss += value * len(idx)
            counted += len(idx)

        row = {
            "epoch": epoch,
            "loss": total_loss / counted if counted else float("nan"),
            "gap": float("nan"),
            "map": float("nan"),
            "perr": float("nan"),
            "lr": lr_at(state.examples_seen, cfg, decay_every),
        }
        if val_ds is not None and len(val_ds):
            report = evaluate(predictions(spec, params, val_ds), cfg.eval_k)
            row.update(gap=report.gap, map=report.map, perr=report.perr)
        log.append(row)
        logger.info("epoch %d loss %.5f gap %.4f", epoch, row["loss"], row["gap"])
        if out_dir is not None:
            meta = {"epoch": epoch, "examples_seen": state.examples_seen, "seed": cfg.seed}
            checkpoint.save(out_dir / f"epoch_{epoch:03d}.ckpt", spec, params, meta, cfg.checkpoint_dtype)
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break

    if out_dir is not None:
        checkpoint.save(out_dir / "model.ckpt", spec, params, {"epoch": len(log), "seed": cfg.seed}, cfg.checkpoint_dtype)
        write_log(log, out_dir / "metrics.csv")
    return TrainResult(spec, params, log, attach_check, state)


LOG_FIELDS = ("epoch", "loss", "gap", "map", "perr", "lr")


def write_log(rows: Sequence[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in LOG_FIELDS})
