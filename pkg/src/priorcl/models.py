"""Encoder, projection head and linear classifier built on :mod:`priorcl.grad_engine`."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import grad_engine as ge
from .grad_engine import ShapeError, Tape, Tensor

N_CLASSES = 5


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel_size: int = 8
    stride: int = 4
    in_channels: int = 1
    projection_hidden: int = 64
    projection_dim: int = 32
    n_classes: int = N_CLASSES
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4:
            raise ValueError(f"encoder has exactly 4 conv layers, got channels {self.channels}")
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")

    @property
    def rep_dim(self) -> int:
        return self.channels[-1]

    def min_input_length(self) -> int:
        """Shortest input that leaves at least one time step after the last conv."""
        t = 1
        for _ in self.channels:
            t = (t - 1) * self.stride + self.kernel_size
        return t

    def lengths(self, n: int) -> list[int]:
        out = []
        for _ in self.channels:
            n = (n - self.kernel_size) // self.stride + 1
            out.append(n)
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class ModelParams:
    config: EncoderConfig
    encoder: dict[str, np.ndarray] = field(default_factory=dict)
    projection: dict[str, np.ndarray] = field(default_factory=dict)
    classifier: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.encoder.items()},
            {k: v.copy() for k, v in self.projection.items()},
            {k: v.copy() for k, v in self.classifier.items()},
        )

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        return {"encoder": self.encoder, "projection": self.projection, "classifier": self.classifier}

    def flat(self) -> dict[str, np.ndarray]:
        return {f"{g}.{k}": v for g, d in self.groups().items() for k, v in d.items()}

    def encoder_checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.encoder):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.encoder[k]).tobytes())
        return h.hexdigest()


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_classifier(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {"w": _uniform(rng, (config.n_classes, config.rep_dim), config.rep_dim),
            "b": np.zeros(config.n_classes)}


def init_params(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    enc = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.channels):
        fan_in = c_in * config.kernel_size
        enc[f"conv{i}.w"] = _uniform(rng, (c_out, c_in, config.kernel_size), fan_in)
        enc[f"conv{i}.b"] = np.zeros(c_out)
        enc[f"norm{i}.gain"] = np.ones(c_out)
        enc[f"norm{i}.offset"] = np.zeros(c_out)
        c_in = c_out
    h, hid, z = config.rep_dim, config.projection_hidden, config.projection_dim
    proj = {"w1": _uniform(rng, (hid, h), h), "b1": np.zeros(hid),
            "w2": _uniform(rng, (z, hid), hid), "b2": np.zeros(z)}
    return ModelParams(config, enc, proj, init_classifier(config, rng))


def bind(tape: Tape, group: dict[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
    """Place a parameter group on ``tape`` as leaves (or constants when frozen)."""
    if trainable:
        return {k: tape.leaf(v, name=k) for k, v in group.items()}
    return {k: tape.constant(v, name=k) for k, v in group.items()}


def encoder_forward(config: EncoderConfig, p: dict[str, Tensor], x: Tensor) -> Tensor:
    """conv -> layernorm -> GELU, four times, then mean over time.

    ``x`` is ``(N,)``, ``(C_in, N)`` or batched ``(B, C_in, N)``.
    """
    n = x.shape[-1]
    need = config.min_input_length()
    if n < need:
        raise ShapeError(
            f"time axis too short: {n} samples, need >= {need} "
            f"(4 valid convs of kernel {config.kernel_size}, stride {config.stride}: "
            f"T -> (T - {config.kernel_size}) // {config.stride} + 1)")
    if x.data.ndim == 1:
        x = ge.reshape(x, (1, n))
    for i in range(len(config.channels)):
        x = ge.conv1d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], config.stride)
        x = ge.layernorm(x, p[f"norm{i}.gain"], p[f"norm{i}.offset"], config.norm_eps)
        x = ge.gelu(x)
    return ge.global_avg_pool(x)


def projection_forward(p: dict[str, Tensor], h: Tensor) -> Tensor:
    return ge.dense(ge.gelu(ge.dense(h, p["w1"], p["b1"])), p["w2"], p["b2"])


def classifier_forward(p: dict[str, Tensor], h: Tensor) -> Tensor:
    return ge.dense(h, p["w"], p["b"])


def _as_batch(samples: np.ndarray) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        return x[None, None, :]
    if x.ndim == 2:
        return x[:, None, :]
    return x


def encode(params: ModelParams, samples: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Representations ``h`` for one epoch ``(N,)`` -> ``(D,)`` or a stack ``(B, N)`` -> ``(B, D)``."""
    single = np.ndim(samples) == 1
    x = _as_batch(samples)
    out = []
    for start in range(0, x.shape[0], chunk):
        tape = Tape()
        h = encoder_forward(params.config, bind(tape, params.encoder, False), tape.constant(x[start : start + chunk]))
        out.append(h.data)
    h = np.concatenate(out, axis=0)
    return h[0] if single else h


def project(params: ModelParams, h: np.ndarray) -> np.ndarray:
    tape = Tape()
    return projection_forward(bind(tape, params.projection, False), tape.constant(h)).data


def classify(params: ModelParams, h: np.ndarray) -> np.ndarray:
    tape = Tape()
    return classifier_forward(bind(tape, params.classifier, False), tape.constant(h)).data


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PCLM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ModelParams) -> bytes:
    """``PCLM | version | config json | sha256(config) | tensors (name, shape, float64 data)``."""
    cfg = params.config.to_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             bytes.fromhex(params.config.digest())]
    flat = params.flat()
    parts.append(struct.pack("<I", len(flat)))
    for name in sorted(flat):
        arr = np.ascontiguousarray(flat[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def params_from_bytes(blob: bytes, expected: EncoderConfig | None = None) -> ModelParams:
    try:
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {blob[:4]!r}")
        version, n_cfg = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        cfg_json = blob[off : off + n_cfg].decode()
        off += n_cfg
        digest = blob[off : off + 32].hex()
        off += 32
        cfg_dict = json.loads(cfg_json)
        config = EncoderConfig(**cfg_dict)
        if config.digest() != digest:
            raise CheckpointError("config block does not match its stored hash")
        if expected is not None and expected.digest() != digest:
            raise CheckpointError("checkpoint was written for a different model config")
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        params = ModelParams(config)
        groups = params.groups()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(blob):
                raise CheckpointError(f"tensor {name} runs past end of file")
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
            off += 8 * size
            group, key = name.split(".", 1)
            groups[group][key] = arr
        if off != len(blob):
            raise CheckpointError("trailing bytes after last tensor")
        return params
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path, expected: EncoderConfig | None = None) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes(), expected)
