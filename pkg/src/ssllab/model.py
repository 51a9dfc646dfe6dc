"""Mini convolutional encoder, its EMA teacher, and the checkpoint format.

The encoder is a stack of conv blocks (3x3 conv -> relu, optional identity
residual conv, 2x2 average pool) followed by global average pooling and a
dense classification head. Small enough to train on a CPU in minutes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ValidationError

CHECKPOINT_MAGIC = b"SSLLAB-CKPT-1\n"


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 1
    input_size: int = 48
    channel_widths: tuple = (16, 32, 64)
    use_residual: bool = False
    num_classes: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < 8:
            raise ValidationError(f"input_size must be >= 8, got {self.input_size}")
        if not self.channel_widths:
            raise ValidationError("channel_widths must be nonempty")
        if self.input_channels < 1:
            raise ValidationError("input_channels must be >= 1")
        object.__setattr__(self, "channel_widths", tuple(int(w) for w in self.channel_widths))

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "channel_widths": list(self.channel_widths),
            "use_residual": self.use_residual,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_widths"] = tuple(d["channel_widths"])
        return cls(**d)


class ModelParams:
    """Named parameter tensors plus the config they were built for.

    Owned by the training loop; parameter arrays are mutated in place by the
    optimizer between steps and treated as immutable during a step.
    """

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def names(self):
        return list(self.tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
        )

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def frozen(self):
        """Context manager: temporarily stop recording grads for these params."""
        return _FrozenParams(self)


class _FrozenParams:
    def __init__(self, params: ModelParams):
        self.params = params

    def __enter__(self):
        self._saved = {k: t.requires_grad for k, t in self.params.tensors.items()}
        for t in self.params.tensors.values():
            t.requires_grad = False
        return self.params

    def __exit__(self, *exc):
        for k, t in self.params.tensors.items():
            t.requires_grad = self._saved[k]
        return False


@dataclass
class EmaParams:
    """Teacher parameters: an exponential moving average of the student."""

    arrays: dict[str, np.ndarray]
    m: float = 0.999
    config: EncoderConfig | None = None

    @classmethod
    def from_student(cls, student: ModelParams, m: float = 0.999) -> "EmaParams":
        return cls({k: v.copy() for k, v in student.arrays().items()}, m=m, config=student.config)

    def as_model_params(self) -> ModelParams:
        """Zero-copy grad-less view usable with forward()/evaluate()."""
        return ModelParams(self.config, {k: Tensor(v) for k, v in self.arrays.items()})


def build_encoder(config: EncoderConfig, seed: int) -> ModelParams:
    """He-initialized parameters, deterministic per (config, seed); zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def conv_param(name, f, c):
        fan_in = c * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, c, 3, 3)).astype(np.float32)
        tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(f, dtype=np.float32), requires_grad=True)

    c_in = config.input_channels
    for i, width in enumerate(config.channel_widths):
        conv_param(f"block{i}.conv1", width, c_in)
        if config.use_residual:
            conv_param(f"block{i}.conv2", width, width)
        c_in = width

    fan_in = config.channel_widths[-1]
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, config.num_classes)).astype(np.float32)
    tensors["head.weight"] = Tensor(w, requires_grad=True)
    tensors["head.bias"] = Tensor(np.zeros(config.num_classes, dtype=np.float32), requires_grad=True)
    return ModelParams(config, tensors)


def _bias4d(b: Tensor) -> Tensor:
    return ad.reshape(b, (1, b.shape[0], 1, 1))


def forward(params: ModelParams, batch) -> Tensor:
    """Logits [B, num_classes] for a batch [B, C, H, W] of model inputs.

    Arrays are wrapped as constant tensors in the parameters' dtype, so a
    float64 parameter set runs a float64 graph (used by gradient checks).
    """
    cfg = params.config
    dt = next(iter(params.tensors.values())).dtype
    h = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=dt))
    if h.data.ndim != 4 or h.data.shape[1] != cfg.input_channels or h.data.shape[2] != cfg.input_size:
        raise ad.ShapeError(
            f"batch shape {h.data.shape} does not match encoder input "
            f"({cfg.input_channels}, {cfg.input_size}, {cfg.input_size})"
        )
    t = params.tensors
    for i in range(len(cfg.channel_widths)):
        h = ad.relu(ad.add(ad.conv2d(h, t[f"block{i}.conv1.weight"], 1, 1), _bias4d(t[f"block{i}.conv1.bias"])))
        if cfg.use_residual:
            inner = ad.add(ad.conv2d(h, t[f"block{i}.conv2.weight"], 1, 1), _bias4d(t[f"block{i}.conv2.bias"]))
            h = ad.relu(ad.add(inner, h))
        h = ad.avg_pool2d(h, 2)
    pooled = ad.global_avg_pool(h)
    return ad.dense(pooled, t["head.weight"], t["head.bias"])


def ema_update(teacher: EmaParams, student: ModelParams, m: float) -> EmaParams:
    """In-place EMA step: theta' <- m * theta' + (1 - m) * theta."""
    if not 0.0 <= m <= 1.0:
        raise ValidationError(f"smoothing coefficient must be in [0,1], got {m}")
    s = student.arrays()
    if set(teacher.arrays) != set(s):
        raise ad.ShapeError("teacher/student parameter names differ")
    mf = np.float32(m)
    one_minus = np.float32(1.0) - mf
    for name, t_arr in teacher.arrays.items():
        if t_arr.shape != s[name].shape:
            raise ad.ShapeError(f"shape mismatch for {name}: {t_arr.shape} vs {s[name].shape}")
        t_arr *= mf
        t_arr += one_minus * s[name]
    return teacher


# ---------------------------------------------------------------------------
# checkpoint format (layout documented in README)


def save_checkpoint(path, params: ModelParams, iteration: int, rng_state, ema: EmaParams | None = None):
    entries = []
    payload = bytearray()

    def put(prefix, arrays):
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
            entries.append(
                {"name": prefix + name, "shape": list(arr.shape), "offset": len(payload), "nbytes": len(raw)}
            )
            payload.extend(raw)

    put("", params.arrays())
    if ema is not None:
        put("ema/", ema.arrays)
    header = {
        "config": params.config.to_dict(),
        "iteration": int(iteration),
        "rng_state": rng_state,
        "ema_m": None if ema is None else ema.m,
        "has_ema": ema is not None,
        "tensors": entries,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns (params, iteration, rng_state, ema-or-None)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"not a checkpoint file: {path}")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()

    config = EncoderConfig.from_dict(header["config"])
    student: dict[str, Tensor] = {}
    ema_arrays: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).astype(np.float32)
        if ent["name"].startswith("ema/"):
            ema_arrays[ent["name"][4:]] = arr
        else:
            student[ent["name"]] = Tensor(arr, requires_grad=True)
    params = ModelParams(config, student)
    ema = None
    if header["has_ema"]:
        ema = EmaParams(ema_arrays, m=header["ema_m"], config=config)
    return params, header["iteration"], header["rng_state"], ema
