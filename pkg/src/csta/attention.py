"""Coupled spatial-temporal attention block.

A shared fully connected unit scores every joint from its whole trajectory
(``3T`` values) and every frame from its whole pose (``3N`` values). The two
sigmoid-gated score vectors are coupled by an outer product into a rank-1
``T x N`` map that gates each (frame, joint) cell of the input.

Inputs are ``T x N x 3`` or batched ``B x T x N x 3``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as tc
from .tensor import DimensionError, Tensor


class AttentionMode(str, Enum):
    FULL = "full"
    WITHOUT_S = "without_S"
    WITHOUT_T = "without_T"
    WITHOUT_ST = "without_ST"

    @classmethod
    def parse(cls, value: "AttentionMode | str") -> "AttentionMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown attention mode {value!r}; expected one of {names}") from None


ABLATION_MODES = tuple(AttentionMode)


@dataclass
class AttentionParams:
    W_s: Tensor  # 1 x 3T, shared by all joints
    b_s: Tensor  # N, one bias per joint
    W_t: Tensor  # 1 x 3N, shared by all frames
    b_t: Tensor  # T, one bias per frame

    @property
    def frames(self) -> int:
        return self.b_t.shape[0]

    @property
    def joints(self) -> int:
        return self.b_s.shape[0]

    def __post_init__(self):
        T, N = self.frames, self.joints
        if self.W_s.shape != (1, 3 * T) or self.W_t.shape != (1, 3 * N):
            raise DimensionError(
                f"attention weights {self.W_s.shape}, {self.W_t.shape} inconsistent with T={T}, N={N}"
            )

    @classmethod
    def zeros(cls, T: int, N: int, requires_grad: bool = True) -> "AttentionParams":
        return cls(
            W_s=Tensor(np.zeros((1, 3 * T)), requires_grad),
            b_s=Tensor(np.zeros(N), requires_grad),
            W_t=Tensor(np.zeros((1, 3 * N)), requires_grad),
            b_t=Tensor(np.zeros(T), requires_grad),
        )

    @classmethod
    def init(cls, T: int, N: int, rng: np.random.Generator) -> "AttentionParams":
        """Fan-in uniform weights, zero biases."""
        ls, lt = 1.0 / np.sqrt(3 * T), 1.0 / np.sqrt(3 * N)
        return cls(
            W_s=Tensor(rng.uniform(-ls, ls, (1, 3 * T)), True),
            b_s=Tensor(np.zeros(N), True),
            W_t=Tensor(rng.uniform(-lt, lt, (1, 3 * N)), True),
            b_t=Tensor(np.zeros(T), True),
        )

    def named(self) -> dict[str, Tensor]:
        return {"W_s": self.W_s, "b_s": self.b_s, "W_t": self.W_t, "b_t": self.b_t}


@dataclass
class AttentionOutput:
    s_att: Tensor
    t_att: Tensor
    map: Tensor
    applied: Tensor


def _check_input(X: Tensor, params: AttentionParams) -> None:
    if X.ndim not in (3, 4) or X.shape[-3:] != (params.frames, params.joints, 3):
        raise DimensionError(
            f"input {X.shape} does not match attention params (T={params.frames}, N={params.joints})"
        )


def spatial_attention(X: Tensor, params: AttentionParams) -> Tensor:
    """Per-joint weights ``s_i = sigmoid(W_s . y_i + b_s[i])``; ``y_i`` is joint
    ``i``'s trajectory flattened frame-major to ``3T`` values."""
    _check_input(X, params)
    T, N = params.frames, params.joints
    lead = X.shape[:-3]
    axes = (1, 0, 2) if not lead else (0, 2, 1, 3)
    Y = tc.reshape(tc.permute(X, axes), lead + (N, 3 * T))
    scores = tc.reshape(tc.matmul(Y, tc.permute(params.W_s, (1, 0))), lead + (N,))
    return tc.sigmoid(tc.add(scores, params.b_s))


def temporal_attention(X: Tensor, params: AttentionParams) -> Tensor:
    """Per-frame weights ``t_k = sigmoid(W_t . z_k + b_t[k])``; ``z_k`` is frame
    ``k``'s pose flattened joint-major to ``3N`` values."""
    _check_input(X, params)
    T, N = params.frames, params.joints
    lead = X.shape[:-3]
    Z = tc.reshape(X, lead + (T, 3 * N))
    scores = tc.reshape(tc.matmul(Z, tc.permute(params.W_t, (1, 0))), lead + (T,))
    return tc.sigmoid(tc.add(scores, params.b_t))


def couple(s_att: Tensor, t_att: Tensor) -> Tensor:
    """Rank-1 ``T x N`` map with ``map[t, j] = t_att[t] * s_att[j]``."""
    if s_att.size == 0 or t_att.size == 0:
        raise DimensionError("attention vectors must be non-empty")
    return tc.outer_product(t_att, s_att)


def apply_attention(X: Tensor, attention_map: Tensor) -> Tensor:
    """Gate every coordinate of ``X`` by its (frame, joint) map entry."""
    if attention_map.shape != X.shape[:-1] or X.shape[-1] != 3:
        raise DimensionError(f"attention map {attention_map.shape} does not fit input {X.shape}")
    return tc.elementwise_mul(X, tc.reshape(attention_map, attention_map.shape + (1,)))


def csta_forward(X: Tensor, params: AttentionParams, mode="full") -> AttentionOutput:
    """Run the attention block under one of the four ablation modes.

    Disabled branches are replaced by all-ones gates. ``without_ST`` returns
    the input object itself as ``applied``, so the block is an exact identity.
    """
    mode = AttentionMode.parse(mode)
    _check_input(X, params)
    lead = X.shape[:-3]
    T, N = params.frames, params.joints
    if mode is AttentionMode.WITHOUT_ST:
        s = Tensor(np.ones(lead + (N,)))
        t = Tensor(np.ones(lead + (T,)))
        return AttentionOutput(s, t, Tensor(np.ones(lead + (T, N))), X)
    s = spatial_attention(X, params) if mode is not AttentionMode.WITHOUT_S else Tensor(np.ones(lead + (N,)))
    t = temporal_attention(X, params) if mode is not AttentionMode.WITHOUT_T else Tensor(np.ones(lead + (T,)))
    m = couple(s, t)
    return AttentionOutput(s, t, m, apply_attention(X, m))


ATTENTION_CSV_HEADER = ("frame", "joint", "t_weight", "s_weight", "coupled")


def attention_csv(out: AttentionOutput) -> str:
    """One row per (frame, joint) of a single, unbatched attention output."""
    s, t, m = out.s_att.data, out.t_att.data, out.map.data
    if m.ndim != 2:
        raise DimensionError(f"attention_csv expects an unbatched map, got {m.shape}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATTENTION_CSV_HEADER)
    for f in range(m.shape[0]):
        for j in range(m.shape[1]):
            w.writerow([f, j, repr(float(t[f])), repr(float(s[j])), repr(float(m[f, j]))])
    return buf.getvalue()


def read_attention_csv(text: str) -> dict[str, np.ndarray]:
    """Parse :func:`attention_csv` output back into column arrays."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != ATTENTION_CSV_HEADER:
        raise ValueError(f"unexpected attention CSV header {tuple(rows[0].keys())}")
    cols = {k: np.array([float(r[k]) for r in rows]) for k in ATTENTION_CSV_HEADER}
    cols["frame"] = cols["frame"].astype(int)
    cols["joint"] = cols["joint"].astype(int)
    return cols
