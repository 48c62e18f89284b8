"""Mini-batch training, evaluation and the attention ablation harness."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .attention import ABLATION_MODES, AttentionMode
from .data import AugmentConfig, Dataset, FixedSample, augment, make_rng, uniform_select
from .io import csv_text
from .model import ModelConfig, ModelParams, batch_arrays, forward, init_params, predict_logits
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


class DivergedTrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch {epoch}, step {step})")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    mode: str | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.betas = tuple(float(b) for b in self.betas)
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected 'adam' or 'sgd_momentum'")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.mode is not None:
            self.mode = AttentionMode.parse(self.mode).value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["augment"]["crop_ratio"] = list(self.augment.crop_ratio)
        return d


# ---------------------------------------------------------------------------
# optimizers


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    config: TrainConfig,
    inplace: bool = False,
) -> tuple[dict[str, np.ndarray], dict]:
    """One update; returns ``(params, state)``.

    ``state`` holds the step counter and the momentum / Adam moment buffers,
    which are updated in place. Parameter arrays are overwritten only when
    ``inplace`` is set. Missing gradients count as zero.

    SGD-momentum: ``v <- mu v + g``; ``p <- p - lr (v + wd p)``.
    Adam: bias-corrected moments of ``g + wd p``.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise tc.DimensionError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergedTrainingError(f"non-finite gradient for {name}")
    step = state.get("step", 0) + 1
    state["step"] = step
    lr, wd = config.lr, config.weight_decay
    out = {}
    if config.optimizer == "sgd_momentum":
        vel = state.setdefault("velocity", {})
        for name, p in params.items():
            g = grads.get(name)
            v = vel.get(name)
            if v is None:
                v = vel[name] = np.zeros_like(p)
            v *= config.momentum
            if g is not None:
                v += g
            upd = v + wd * p if wd else v.copy()
            upd *= lr
            out[name] = np.subtract(p, upd, out=p if inplace else None)
        return out, state

    b1, b2 = config.betas
    ms, vs = state.setdefault("m", {}), state.setdefault("v", {})
    # m_hat / (sqrt(v_hat) + eps) with both bias corrections folded into scalars
    c2 = math.sqrt(1 - b2**step)
    step_size = lr * c2 / (1 - b1**step)
    eps_hat = config.eps * c2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if wd:
            g = g + wd * p
        m, v = ms.get(name), vs.get(name)
        if m is None:
            m, v = ms[name], vs[name] = np.zeros_like(p), np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        g2 = np.multiply(g, g)
        g2 *= 1 - b2
        v += g2
        den = np.sqrt(v, out=g2)
        den += eps_hat
        upd = np.divide(m, den, out=den)
        upd *= step_size
        out[name] = np.subtract(p, upd, out=p if inplace else None)
    return out, state


# ---------------------------------------------------------------------------
# training


def training_samples(dataset: Dataset, config: TrainConfig) -> list[FixedSample]:
    """Augmented samples, or one evenly spaced selection per sequence when
    augmentation is disabled."""
    aug = config.augment
    if aug.per_sample > 0:
        return augment(dataset, aug, seed=config.seed)
    return [uniform_select(s, aug.frames, aug.center) for s in dataset.samples]


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


HISTORY_HEADER = ("epoch", "loss", "accuracy")


def history_csv(history: Sequence[EpochStats]) -> str:
    return csv_text(HISTORY_HEADER, [(h.epoch, repr(h.loss), repr(h.accuracy)) for h in history])


def batch_loss(params: ModelParams, pos: np.ndarray, mot: np.ndarray, labels: np.ndarray, mode=None):
    """Mean cross-entropy of a batch and its logits, recorded on a fresh tape."""
    with tc.Tape() as tape:
        logits = forward(Tensor(pos), Tensor(mot), params, mode)
        loss = tc.softmax_cross_entropy(logits, labels)
    return loss, logits, tape


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    params: ModelParams | None = None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Train from a seeded initialization (or from ``params``, which is copied).

    Fully deterministic given ``config.seed``: initialization, augmentation and
    the per-epoch shuffles all derive from it.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if dataset.num_classes != model_config.num_classes:
        raise ContractError(
            f"dataset has {dataset.num_classes} classes, model expects {model_config.num_classes}"
        )
    if config.mode is not None and model_config.use_attention:
        model_config = ModelConfig(**{**model_config.to_dict(), "mode": config.mode})
    params = init_params(model_config, config.seed) if params is None else params.copy()
    if params.config.to_dict() != model_config.to_dict():
        params = ModelParams(model_config, params.tensors)
    samples = training_samples(dataset, config)
    pos_all, mot_all, labels_all = batch_arrays(samples)
    shuffle_rng = make_rng(config.seed, 1)
    state: dict = {}
    history: list[EpochStats] = []
    n = len(samples)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total_loss, correct = 0.0, 0
        for step, lo in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[lo : lo + config.batch_size]
            params.zero_grad()
            try:
                loss, logits, tape = batch_loss(params, pos_all[idx], mot_all[idx], labels_all[idx])
                if not math.isfinite(loss.item()):
                    raise FloatingPointError("loss is not finite")
                tape.backward(loss)
            except FloatingPointError as exc:
                raise DivergedTrainingError(f"training diverged: {exc}", epoch, step) from None
            grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
            try:
                optimizer_step({k: t.data for k, t in params.tensors.items()}, grads, state, config, inplace=True)
            except DivergedTrainingError as exc:
                raise DivergedTrainingError(str(exc), epoch, step) from None
            for k, t in params.tensors.items():
                if not np.all(np.isfinite(t.data)):
                    raise DivergedTrainingError(f"parameter {k} became non-finite", epoch, step)
            total_loss += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels_all[idx]))
        history.append(EpochStats(epoch, total_loss / n, correct / n))
        log.debug("epoch %d loss %.5f acc %.4f", epoch, history[-1].loss, history[-1].accuracy)
    params.zero_grad()
    return params, history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    count: int

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        per_class = [None if math.isnan(a) else float(a) for a in self.per_class_accuracy]
        d = {
            "accuracy": self.accuracy,
            "count": self.count,
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": per_class,
        }
        if class_names is not None:
            d["classes"] = list(class_names)
        return d


def report_from_predictions(predicted: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalReport:
    if len(labels) == 0:
        raise ContractError("cannot evaluate an empty split")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    return EvalReport(float(np.trace(confusion) / confusion.sum()), confusion, per_class, int(len(labels)))


def report_from_logits(logits: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalReport:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return report_from_predictions(np.argmax(logits, axis=1), np.asarray(labels), num_classes)


def evaluation_samples(dataset: Dataset, frames: int) -> list[FixedSample]:
    return [uniform_select(s, frames) for s in dataset.samples]


def evaluate(dataset: Dataset, params: ModelParams, mode=None) -> EvalReport:
    """Accuracy and confusion on un-augmented, evenly frame-sampled sequences."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty split")
    if dataset.num_classes != params.config.num_classes:
        raise ContractError(
            f"dataset has {dataset.num_classes} classes, checkpoint expects {params.config.num_classes}"
        )
    samples = evaluation_samples(dataset, params.config.frames)
    logits = predict_logits(samples, params, mode)
    labels = np.array([s.label for s in samples])
    return report_from_logits(logits, labels, params.config.num_classes)


def confusion_csv(report: EvalReport, class_names: Sequence[str]) -> str:
    header = ["true\\pred"] + list(class_names)
    rows = [[class_names[i]] + [int(v) for v in row] for i, row in enumerate(report.confusion)]
    return csv_text(header, rows)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    mode: str
    report: EvalReport | None = None
    history: list[EpochStats] = field(default_factory=list)
    params: ModelParams | None = None
    error: str | None = None


ABLATION_HEADER = ("mode", "accuracy", "count", "status", "error")


def ablation_suite(
    train_set: Dataset,
    test_set: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    modes: Sequence[str] = tuple(m.value for m in ABLATION_MODES),
) -> dict[str, AblationRow]:
    """Train and evaluate one model per attention mode, same seed for all.

    A failing row records its error and does not stop the others.
    """
    rows: dict[str, AblationRow] = {}
    for mode in modes:
        row = AblationRow(AttentionMode.parse(mode).value)
        try:
            cfg = TrainConfig(**{**config.to_dict(), "mode": row.mode})
            row.params, row.history = train(train_set, model_config, cfg)
            row.report = evaluate(test_set, row.params)
        except Exception as exc:  # isolate per-row failures
            log.warning("ablation row %s failed: %s", row.mode, exc)
            row.error = f"{type(exc).__name__}: {exc}"
        rows[row.mode] = row
    return rows


def ablation_csv(rows: dict[str, AblationRow]) -> str:
    out = []
    for mode, row in rows.items():
        if row.report is None:
            out.append((mode, "", "", "error", row.error or ""))
        else:
            out.append((mode, repr(row.report.accuracy), row.report.count, "ok", ""))
    return csv_text(ABLATION_HEADER, out)
