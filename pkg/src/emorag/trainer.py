"""Training loop, step learning-rate schedule, and CCC / MAE evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from emorag.corpus import Sample
from emorag.errors import NumericError, PreconditionError, ProvenanceError, ShapeError, TrainingError
from emorag.fusion import ModelConfig, ModelParams, ccc_loss, forward_batch, predict
from emorag.numkit import Adam, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 400
    base_lr: float = 6e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 100
    text_encoder_lr_multiplier: float = 0.1
    seed: int = 0
    k_retrieved: int = 5
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise PreconditionError("batch_size must be >= 2 (CCC needs two samples)")
        if self.epochs < 1:
            raise PreconditionError("epochs must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


def _decimal(x: float) -> Decimal:
    return Decimal(repr(float(x)))


def lr_at_epoch(epoch: int, config: TrainConfig) -> tuple[float, float]:
    """(main rate, text-encoder rate) for a zero-based epoch.

    The step formula is evaluated exactly on the decimal values of the
    hyperparameters and rounded once, so epoch 100 yields the float 6e-05
    rather than 6e-4 * 0.1 = 5.9999999999999995e-05.
    """
    if not 0 <= epoch < config.epochs:
        raise PreconditionError(f"epoch {epoch} outside [0, {config.epochs})")
    main = _decimal(config.base_lr) * _decimal(config.lr_decay) ** (epoch // config.lr_decay_every)
    return float(main), float(_decimal(config.text_encoder_lr_multiplier) * main)


# --- metrics -----------------------------------------------------------------


def _pair(pred, target, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"length mismatch: {p.size} predictions vs {y.size} targets")
    if p.size < min_len:
        raise PreconditionError(f"need at least {min_len} values, got {p.size}")
    return p, y


def ccc_metric(pred, target) -> float:
    """Lin's concordance correlation coefficient with 1/N moments; 0 if undefined."""
    p, y = _pair(pred, target, 2)
    mp, my = p.mean(), y.mean()
    cov = ((p - mp) * (y - my)).mean()
    denom = ((p - mp) ** 2).mean() + ((y - my) ** 2).mean() + (mp - my) ** 2
    if denom == 0.0:
        return 0.0
    return float(2.0 * cov / denom)


def mae_metric(pred, target) -> float:
    p, y = _pair(pred, target, 1)
    return float(np.abs(p - y).mean())


@dataclass
class MetricsReport:
    split: str
    n: int
    ccc: float
    mae: float
    per_sample: list[tuple[str, float, float]]

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "n": self.n,
            "ccc": self.ccc,
            "mae": self.mae,
            "per_sample": [{"id": i, "prediction": p, "target": t} for i, p, t in self.per_sample],
        }

    def recompute(self) -> tuple[float, float]:
        preds = [p for _, p, _ in self.per_sample]
        targets = [t for _, _, t in self.per_sample]
        return ccc_metric(preds, targets), mae_metric(preds, targets)

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "prediction", "target"])
        for sid, p, t in self.per_sample:
            writer.writerow([sid, repr(p), repr(t)])
        return buf.getvalue()

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        header = {k: v for k, v in self.to_json().items() if k != "per_sample"}
        (run_dir / f"metrics_{self.split}.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        (run_dir / f"predictions_{self.split}.csv").write_text(self.predictions_csv())


def _prompt_list(samples: Sequence[Sample], prompts, config: ModelConfig):
    if not config.use_emotion_prompt:
        return None
    lookup: Mapping = prompts.by_sample() if hasattr(prompts, "by_sample") else (prompts or {})
    out = []
    for s in samples:
        if s.id not in lookup:
            raise ProvenanceError(f"no Emotion Prompt for sample {s.id}")
        out.append(lookup[s.id])
    return out


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    samples: Sequence[Sample],
    prompts=None,
    split: str | None = None,
) -> MetricsReport:
    """Inference metrics over ``samples`` (one split), with clamping if configured."""
    samples = list(samples)
    if not samples:
        raise PreconditionError("cannot evaluate an empty split")
    prompt_list = _prompt_list(samples, prompts, config)
    preds = predict(samples, prompt_list, params, config)
    targets = np.array([float(s.severity) for s in samples])
    per_sample = [(s.id, float(p), float(t)) for s, p, t in zip(samples, preds, targets)]
    return MetricsReport(
        split=split or samples[0].split,
        n=len(samples),
        ccc=ccc_metric(preds, targets),
        mae=mae_metric(preds, targets),
        per_sample=per_sample,
    )


# --- training ----------------------------------------------------------------


@dataclass
class RunRecord:
    train_config: dict
    model_config: dict
    epoch_losses: list[float] = field(default_factory=list)
    steps_per_epoch: list[int] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    selection_rule: str = "best validation CCC (first epoch wins ties)"
    loss_scope: str = "per-batch CCC loss"
    metrics: dict = field(default_factory=dict)
    checkpoint_fingerprint: str = ""
    upstream: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunRecord":
        return cls(**obj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(json.loads(Path(path).read_text()))


def batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Index batches for one epoch; a trailing batch smaller than 2 is dropped."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def train(
    samples: Sequence[Sample],
    prompts,
    params: ModelParams,
    train_config: TrainConfig,
    model_config: ModelConfig,
) -> tuple[ModelParams, RunRecord]:
    """Fit ``params`` in place and return the best-validation copy plus a run record."""
    started = time.perf_counter()
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "validation"]
    if not train_set:
        raise PreconditionError("training split is empty")
    if not val_set:
        raise PreconditionError("validation split is empty; it drives checkpoint selection")
    if train_config.batch_size > len(train_set):
        raise PreconditionError(f"batch_size {train_config.batch_size} exceeds {len(train_set)} training samples")
    train_prompts = _prompt_list(train_set, prompts, model_config)
    _prompt_list(val_set, prompts, model_config)

    mult = train_config.text_encoder_lr_multiplier
    optimizer = Adam([(params.text_encoder(), mult), (params.others(), 1.0)])
    rng = np.random.default_rng(train_config.seed) if train_config.shuffle else None
    targets = np.array([float(s.severity) for s in train_set])
    record = RunRecord(train_config.to_json(), model_config.to_json())
    best_ccc, best_snapshot = -math.inf, params.snapshot()

    for epoch in range(train_config.epochs):
        lr_main, _ = lr_at_epoch(epoch, train_config)
        losses = []
        epoch_batches = batches(len(train_set), train_config.batch_size, rng)
        for b, idx in enumerate(epoch_batches):
            chunk = [train_set[i] for i in idx]
            chunk_prompts = [train_prompts[i] for i in idx] if train_prompts is not None else None
            optimizer.zero_grad()
            try:
                trace = forward_batch(chunk, chunk_prompts, params, model_config)
                loss = ccc_loss(trace.raw_prediction, targets[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError("loss is not finite")
                backward(loss)
                optimizer.step(lr_main)
            except NumericError as exc:
                raise TrainingError(f"numeric failure at epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(value)
        record.epoch_losses.append(float(np.mean(losses)))
        record.steps_per_epoch.append(len(epoch_batches))

        report = evaluate(params, model_config, val_set, prompts, "validation")
        record.validation.append({"epoch": epoch, "ccc": report.ccc, "mae": report.mae})
        if report.ccc > best_ccc:
            best_ccc, best_snapshot = report.ccc, params.snapshot()
            record.best_epoch = epoch
        if epoch % 25 == 0 or epoch == train_config.epochs - 1:
            log.info("epoch %d loss %.4f val ccc %.4f mae %.3f", epoch, record.epoch_losses[-1], report.ccc, report.mae)

    best = params.copy()
    best.load_snapshot(best_snapshot)
    record.wall_clock_seconds = time.perf_counter() - started
    return best, record
