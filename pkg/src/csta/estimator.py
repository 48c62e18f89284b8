"""scikit-learn compatible front end.

``CSTAClassifier`` follows the usual estimator contract (constructor stores
hyperparameters only, ``fit`` returns ``self``, fitted state ends in ``_``) so
it drops into ``Pipeline``, ``clone`` and the model-selection utilities.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attention import AttentionMode
from .data import (
    DEFAULT_FRAMES,
    NUM_JOINTS,
    UESTC_CROP_RATIO,
    AugmentConfig,
    Dataset,
    SkeletonSequence,
    uniform_select,
)
from .model import DEFAULT_CONVS, ModelConfig, attention_maps, predict_logits
from .train import TrainConfig, train


def check_sequences(X) -> list[SkeletonSequence]:
    """Coerce ``X`` into skeleton sequences.

    Accepts a :class:`Dataset`, an iterable of :class:`SkeletonSequence`, a
    list of ``T_i x 25 x 3`` arrays, or one ``n x T x 25 x 3`` array.
    """
    if isinstance(X, Dataset):
        return list(X.samples)
    if isinstance(X, np.ndarray):
        if X.ndim != 4 or X.shape[2:] != (NUM_JOINTS, 3):
            raise ValueError(f"expected an array of shape (n, T, {NUM_JOINTS}, 3), got {X.shape}")
        items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError("no samples given")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, SkeletonSequence):
            out.append(item)
            continue
        arr = np.asarray(item, dtype=np.float64)
        try:
            out.append(SkeletonSequence(arr))
        except ValueError as exc:
            raise ValueError(f"sample {i}: {exc}") from None
    return out


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be a 1-D array with {n} labels, got shape {y.shape}")
    return y


class FrameSelector(TransformerMixin, BaseEstimator):
    """Turn variable-length sequences into a fixed ``n x T x 25 x 3`` array by
    evenly spaced frame selection."""

    def __init__(self, num_frames: int = DEFAULT_FRAMES):
        self.num_frames = num_frames

    def fit(self, X, y=None):
        check_sequences(X)
        return self

    def transform(self, X):
        return np.stack([uniform_select(s, self.num_frames).position for s in check_sequences(X)])


class CSTAClassifier(ClassifierMixin, BaseEstimator):
    """Two-stream CNN with coupled spatial-temporal attention."""

    def __init__(
        self,
        num_frames: int = DEFAULT_FRAMES,
        interp_joints: int = 30,
        convs=DEFAULT_CONVS,
        fc_widths=(256, 128),
        mode: str = "full",
        optimizer: str = "adam",
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        batch_size: int = 16,
        epochs: int = 200,
        n_sample: int = 4,
        n_crop: int = 4,
        crop_ratio=UESTC_CROP_RATIO,
        random_state: int = 0,
    ):
        self.num_frames = num_frames
        self.interp_joints = interp_joints
        self.convs = convs
        self.fc_widths = fc_widths
        self.mode = mode
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.n_sample = n_sample
        self.n_crop = n_crop
        self.crop_ratio = crop_ratio
        self.random_state = random_state

    def _configs(self, n_classes: int) -> tuple[ModelConfig, TrainConfig]:
        AttentionMode.parse(self.mode)
        model = ModelConfig(
            num_classes=n_classes,
            frames=self.num_frames,
            interp_joints=self.interp_joints,
            convs=tuple(self.convs),
            fc_widths=tuple(self.fc_widths),
            mode=self.mode,
        )
        trainer = TrainConfig(
            optimizer=self.optimizer,
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=int(self.random_state),
            augment=AugmentConfig(self.n_sample, self.n_crop, tuple(self.crop_ratio), self.num_frames),
        )
        return model, trainer

    def fit(self, X, y):
        seqs = check_sequences(X)
        y = check_labels(y, len(seqs))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        labelled = [
            SkeletonSequence(s.coords, int(c), s.subject, s.view, s.source) for s, c in zip(seqs, encoded)
        ]
        names = [str(c) for c in self.classes_]
        model_cfg, train_cfg = self._configs(len(names))
        self.params_, self.history_ = train(Dataset(labelled, names), model_cfg, train_cfg)
        return self

    def _fixed(self, X):
        return [uniform_select(s, self.num_frames) for s in check_sequences(X)]

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict_logits(self._fixed(X), self.params_)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def attention(self, X, stream: str = "pos") -> dict[str, np.ndarray]:
        """Stacked ``s_att`` (n x N), ``t_att`` (n x T) and coupled maps (n x T x N)."""
        check_is_fitted(self, "params_")
        outs = [attention_maps(s, self.params_)[stream] for s in self._fixed(X)]
        return {
            "s_att": np.stack([o.s_att.data for o in outs]),
            "t_att": np.stack([o.t_att.data for o in outs]),
            "map": np.stack([o.map.data for o in outs]),
        }
