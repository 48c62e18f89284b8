"""Two-stream hierarchical CNN around the attention block.

Each stream (positions, motion) runs: attention -> learnable skeleton
transformer (N joints to M interpolated joints) -> three conv+ReLU layers on a
``3 x T x M`` image -> flatten. The two feature vectors are concatenated and
classified by three fully connected layers.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .attention import AttentionMode, AttentionOutput, AttentionParams, csta_forward
from .data import DEFAULT_FRAMES, NUM_JOINTS, FixedSample
from .io import atomic_write_bytes
from .tensor import DimensionError, Tensor, conv_output_size

STREAMS = ("pos", "mot")


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


DEFAULT_CONVS = (ConvSpec(32, 3, 1, 1), ConvSpec(64, 3, 2, 1), ConvSpec(64, 3, 2, 1))


@dataclass
class ModelConfig:
    num_classes: int = 5
    frames: int = DEFAULT_FRAMES
    joints: int = NUM_JOINTS
    interp_joints: int = 30
    convs: tuple[ConvSpec, ...] = DEFAULT_CONVS
    fc_widths: tuple[int, ...] = (256, 128)
    mode: str = "full"
    use_attention: bool = True

    def __post_init__(self):
        self.convs = tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        self.mode = AttentionMode.parse(self.mode).value
        for name in ("num_classes", "frames", "joints", "interp_joints"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be positive, got {getattr(self, name)}")
        if self.frames < 2:
            raise DimensionError("frames must be >= 2 for the motion stream")
        if not self.convs:
            raise DimensionError("at least one conv layer is required")
        if len(self.fc_widths) != 2 or min(self.fc_widths) < 1:
            raise DimensionError(f"fc_widths must be two positive widths, got {self.fc_widths}")
        self.conv_shapes()

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """Channel-first output shape of every conv layer."""
        c, h, w = 3, self.frames, self.interp_joints
        shapes = []
        for i, spec in enumerate(self.convs, start=1):
            if spec.channels < 1 or spec.kernel < 1 or spec.stride < 1 or spec.padding < 0:
                raise DimensionError(f"conv{i}: invalid spec {spec}")
            if spec.kernel > h + 2 * spec.padding or spec.kernel > w + 2 * spec.padding:
                raise DimensionError(f"conv{i}: kernel {spec.kernel} exceeds padded input {h}x{w}")
            h = conv_output_size(h, spec.kernel, spec.stride, spec.padding)
            w = conv_output_size(w, spec.kernel, spec.stride, spec.padding)
            c = spec.channels
            shapes.append((c, h, w))
        return shapes

    @property
    def stream_features(self) -> int:
        return int(np.prod(self.conv_shapes()[-1]))

    @property
    def attention_active(self) -> bool:
        return self.use_attention and self.mode != AttentionMode.WITHOUT_ST.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["convs"] = [asdict(c) for c in self.convs]
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name: dropping the attention tensors leaves
    # every other tensor's initial values unchanged
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise DimensionError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def attention(self, stream: str) -> AttentionParams | None:
        if not self.config.use_attention:
            return None
        p = f"{stream}.attention."
        t = self.tensors
        return AttentionParams(t[p + "W_s"], t[p + "b_s"], t[p + "W_t"], t[p + "b_t"])

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), True) for k, v in self.tensors.items()})

    def equal(self, other: "ModelParams") -> bool:
        return (
            self.config.to_dict() == other.config.to_dict()
            and self.names() == other.names()
            and all(np.array_equal(self[k].data, other[k].data) for k in self.tensors)
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    T, N, M = config.frames, config.joints, config.interp_joints
    shapes: dict[str, tuple[int, ...]] = {}
    for s in STREAMS:
        if config.use_attention:
            shapes[f"{s}.attention.W_s"] = (1, 3 * T)
            shapes[f"{s}.attention.b_s"] = (N,)
            shapes[f"{s}.attention.W_t"] = (1, 3 * N)
            shapes[f"{s}.attention.b_t"] = (T,)
        shapes[f"{s}.transformer"] = (N, M)
        c_in = 3
        for i, spec in enumerate(config.convs, start=1):
            shapes[f"{s}.conv{i}.weight"] = (spec.channels, c_in, spec.kernel, spec.kernel)
            shapes[f"{s}.conv{i}.bias"] = (spec.channels,)
            c_in = spec.channels
    d_in = 2 * config.stream_features
    for i, d_out in enumerate(config.fc_widths + (config.num_classes,), start=1):
        shapes[f"fc{i}.weight"] = (d_out, d_in)
        shapes[f"fc{i}.bias"] = (d_out,)
        d_in = d_out
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded initialization.

    Attention weights are fan-in uniform with zero biases; the skeleton
    transformer starts as ``[I | small noise]``; conv and hidden fc weights are
    He-uniform; the output layer is scaled down so initial logits are small.
    """
    tensors: dict[str, Tensor] = {}
    T, N, M = config.frames, config.joints, config.interp_joints
    for name, shape in param_shapes(config).items():
        rng = _param_rng(seed, name)
        if name.endswith(("bias", "b_s", "b_t")):
            value = np.zeros(shape)
        elif name.endswith("W_s"):
            value = rng.uniform(-1, 1, shape) / np.sqrt(3 * T)
        elif name.endswith("W_t"):
            value = rng.uniform(-1, 1, shape) / np.sqrt(3 * N)
        elif name.endswith("transformer"):
            value = rng.normal(0.0, 0.01, shape)
            k = min(N, M)
            value[:k, :k] = np.eye(k)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            if name == f"fc{len(config.fc_widths) + 1}.weight":
                bound = 0.1 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, shape)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    return ModelParams(config, tensors)


def skeleton_transform(O: Tensor, A: Tensor) -> Tensor:
    """``out[..., t, m, c] = sum_j O[..., t, j, c] * A[j, m]``."""
    if O.ndim not in (3, 4) or A.ndim != 2 or O.shape[-2] != A.shape[0] or O.shape[-1] != 3:
        raise DimensionError(f"skeleton_transform: input {O.shape} incompatible with map {A.shape}")
    swap = (0, 2, 1) if O.ndim == 3 else (0, 1, 3, 2)
    out = tc.matmul(tc.permute(O, swap), A)  # (..., T, 3, M)
    return tc.permute(out, swap)


def _resolve_mode(params: ModelParams, mode) -> AttentionMode:
    if not params.config.use_attention:
        return AttentionMode.WITHOUT_ST
    return AttentionMode.parse(params.config.mode if mode is None else mode)


def stream_forward(X: Tensor, params: ModelParams, stream: str, mode=None, trace: dict | None = None) -> Tensor:
    """Features of one stream for ``X`` shaped ``T x N x 3`` or ``B x T x N x 3``."""
    cfg = params.config
    if X.shape[-3:] != (cfg.frames, cfg.joints, 3) or X.ndim not in (3, 4):
        raise DimensionError(f"stream input {X.shape} does not match config ({cfg.frames}, {cfg.joints}, 3)")
    mode = _resolve_mode(params, mode)
    if mode is AttentionMode.WITHOUT_ST:
        h = X
    else:
        att = csta_forward(X, params.attention(stream), mode)
        if trace is not None:
            trace[stream] = att
        h = att.applied
    h = skeleton_transform(h, params[f"{stream}.transformer"])  # (..., T, M, 3)
    batched = X.ndim == 4
    h = tc.permute(h, (0, 3, 1, 2) if batched else (2, 0, 1))  # channels first
    for i, spec in enumerate(cfg.convs, start=1):
        h = tc.conv2d(h, params[f"{stream}.conv{i}.weight"], spec.stride, spec.padding)
        bias = params[f"{stream}.conv{i}.bias"]
        h = tc.relu(tc.add(h, tc.reshape(bias, (spec.channels, 1, 1))))
    return tc.reshape(h, (X.shape[0], -1) if batched else (-1,))


def forward(position: Tensor, motion: Tensor, params: ModelParams, mode=None, trace: dict | None = None) -> Tensor:
    """Logits for a sample (``T x N x 3`` inputs) or a batch (``B x T x N x 3``)."""
    if position.shape != motion.shape:
        raise DimensionError(f"position {position.shape} and motion {motion.shape} differ")
    u = stream_forward(position, params, "pos", mode, trace)
    u2 = stream_forward(motion, params, "mot", mode, trace)
    h = tc.concat([u, u2], axis=-1)
    n_fc = len(params.config.fc_widths) + 1
    for i in range(1, n_fc + 1):
        h = tc.linear(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"])
        if i < n_fc:
            h = tc.relu(h)
    return h


def model_forward(sample: FixedSample, params: ModelParams, mode=None) -> Tensor:
    return forward(Tensor(sample.position), Tensor(sample.motion), params, mode)


def batch_arrays(samples: Sequence[FixedSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = np.stack([s.position for s in samples])
    mot = np.stack([s.motion for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return pos, mot, labels


def predict_logits(samples: Sequence[FixedSample], params: ModelParams, mode=None, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch_size):
        pos, mot, _ = batch_arrays(samples[i : i + batch_size])
        out.append(forward(Tensor(pos), Tensor(mot), params, mode).data)
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def attention_maps(sample: FixedSample, params: ModelParams, mode=None) -> dict[str, AttentionOutput]:
    """Per-stream attention outputs for one sample (identity gates when the
    model has no active attention)."""
    trace: dict[str, AttentionOutput] = {}
    pos, mot = Tensor(sample.position), Tensor(sample.motion)
    forward(pos, mot, params, mode, trace)
    cfg = params.config
    for stream, X in (("pos", pos), ("mot", mot)):
        if stream not in trace:
            ones = AttentionParams.zeros(cfg.frames, cfg.joints, requires_grad=False)
            trace[stream] = csta_forward(X, ones, AttentionMode.WITHOUT_ST)
    return trace


# ---------------------------------------------------------------------------
# checkpoint container
#
# Little-endian layout:
#   magic     8 bytes  b"CSTACKPT"
#   version   u32      1
#   cfg_len   u64      length of the config JSON (UTF-8, sorted keys)
#   cfg       bytes
#   count     u32      number of tensors
#   per tensor, in insertion order:
#     name_len u16, name (UTF-8), ndim u8, dims u64 * ndim, values f64 * prod(dims)

MAGIC = b"CSTACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(params: ModelParams, extra: dict | None = None) -> bytes:
    meta = {"model": params.config.to_dict()}
    if extra:
        meta["extra"] = extra
    cfg = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> tuple[ModelParams, dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, cfg_len = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(cfg_len)).decode())
    config = ModelConfig.from_dict(meta["model"])
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        values = np.frombuffer(take(8 * int(np.prod(shape))), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return ModelParams(config, tensors), meta.get("extra", {})


def save_checkpoint(path: str | os.PathLike, params: ModelParams, extra: dict | None = None) -> None:
    atomic_write_bytes(path, dumps_checkpoint(params, extra))


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
