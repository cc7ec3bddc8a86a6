"""Dense-block feature extractor with MMD taps and a residual source→target classifier."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor


class ConfigError(ValueError):
    """Inconsistent network or training configuration."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class NetworkConfig:
    input_channels: int = 1
    input_size: int = 32
    num_classes: int = 6
    num_blocks: int = 3
    layers_per_block: int = 3
    growth_rate: int = 8
    stem_channels: int = 16
    stem_stride: int = 1
    stem_pool: int = 1
    transition_type: str = "B"
    transition_compression: float = 0.5
    tap_fc_dim: int = 64
    residual_hidden: int = 0  # 0 → 2·num_classes

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for name in ("input_channels", "num_blocks", "layers_per_block", "growth_rate", "stem_channels", "tap_fc_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.transition_type not in ("A", "B"):
            raise ConfigError(f"transition_type must be 'A' or 'B', got {self.transition_type!r}")
        if not 0 < self.transition_compression <= 1:
            raise ConfigError("transition_compression must lie in (0, 1]")
        if self.stem_stride < 1 or self.stem_pool < 1:
            raise ConfigError("stem_stride and stem_pool must be >= 1")
        if self.input_size % (self.stem_stride * self.stem_pool * 2**self.num_blocks):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by the stem reduction "
                f"{self.stem_stride}×{self.stem_pool} and {self.num_blocks} halvings"
            )
        if self.residual_hidden < 0:
            raise ConfigError("residual_hidden must be >= 0")

    @property
    def tap_count(self) -> int:
        return self.num_blocks + 1

    @property
    def hidden(self) -> int:
        return self.residual_hidden or 2 * self.num_classes

    def channel_plan(self) -> list[tuple[int, int, int]]:
        """Per block: (block input channels, block output channels, transition output channels)."""
        plan = []
        c = self.stem_channels
        for _ in range(self.num_blocks):
            out = c + self.layers_per_block * self.growth_rate
            squeezed = math.ceil(self.transition_compression * out)
            plan.append((c, out, squeezed))
            c = squeezed
        return plan

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> NetworkConfig:
        return cls(**json.loads(text))


@dataclass
class ForwardResult:
    taps: list[Tensor]
    fs_logits: Tensor
    ft_logits: Tensor
    ft_probs: Tensor
    gate_masks: list[np.ndarray] = field(default_factory=list)


class MagnetModel:
    """Parameters and batch-norm state of the full network, keyed by dotted names."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        cfg = config
        k = cfg.growth_rate

        self._conv("stem.conv", cfg.stem_channels, cfg.input_channels, 3, rng)
        for b, (c_in, c_out, squeezed) in enumerate(cfg.channel_plan()):
            c = c_in
            for i in range(cfg.layers_per_block):
                p = f"block{b}.layer{i}"
                self._bn(f"{p}.bn1", c)
                self._conv(f"{p}.conv1", 4 * k, c, 1, rng)
                self._bn(f"{p}.bn2", 4 * k)
                self._conv(f"{p}.conv2", k, 4 * k, 3, rng)
                c += k
            t = f"trans{b}"
            self._bn(f"{t}.bn", c_out)
            self._conv(f"{t}.conv", squeezed, c_out, 1, rng)
            if cfg.transition_type == "A":
                self._fc(f"{t}.fc1", cfg.tap_fc_dim, squeezed, rng)
                self._fc(f"{t}.fc2", cfg.tap_fc_dim, squeezed, rng)
        feat = cfg.channel_plan()[-1][2]
        self._fc("source_head", cfg.num_classes, feat, rng)
        self._fc("residual.fc1", cfg.hidden, cfg.num_classes, rng)
        self._fc("residual.fc2", cfg.num_classes, cfg.hidden, rng, zero=True)

    # -- construction helpers

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, Tensor(value, requires_grad=True))

    def _conv(self, name, out_c, in_c, ksize, rng) -> None:
        std = math.sqrt(2.0 / (in_c * ksize * ksize))
        self._add(f"{name}.weight", rng.normal(0.0, std, size=(out_c, in_c, ksize, ksize)))

    def _fc(self, name, out_f, in_f, rng, zero=False) -> None:
        w = np.zeros((out_f, in_f)) if zero else rng.normal(0.0, math.sqrt(2.0 / in_f), size=(out_f, in_f))
        self._add(f"{name}.weight", w)
        self._add(f"{name}.bias", np.zeros(out_f))

    def _bn(self, name, channels) -> None:
        self._add(f"{name}.gamma", np.ones(channels))
        self._add(f"{name}.beta", np.zeros(channels))
        self.bn[name] = BatchNormState.fresh(channels)

    # -- access

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def zero_grads(self) -> None:
        ad.zero_grads(self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and running statistic as a flat name → array map."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out


# ---------------------------------------------------------------- building blocks


def _bn_relu_conv(model: MagnetModel, prefix_bn: str, prefix_conv: str, x: Tensor, mode: str, padding=0) -> Tensor:
    h = ad.batchnorm2d(x, model[f"{prefix_bn}.gamma"], model[f"{prefix_bn}.beta"], model.bn[prefix_bn], mode)
    return ad.conv2d(ad.relu(h), model[f"{prefix_conv}.weight"], stride=1, padding=padding)


def dense_layer(model: MagnetModel, prefix: str, x: Tensor, mode: str = "train") -> Tensor:
    """BN-ReLU-Conv1×1 (to 4k) then BN-ReLU-Conv3×3 (to k); spatial size preserved."""
    h = _bn_relu_conv(model, f"{prefix}.bn1", f"{prefix}.conv1", x, mode)
    return _bn_relu_conv(model, f"{prefix}.bn2", f"{prefix}.conv2", h, mode, padding=1)


def dense_block(model: MagnetModel, block: int, x: Tensor, mode: str = "train") -> Tensor:
    """Each layer sees the block input concatenated with all earlier layer outputs."""
    features = [x]
    for i in range(model.config.layers_per_block):
        inp = ad.concat_channels(features)
        features.append(dense_layer(model, f"block{block}.layer{i}", inp, mode))
    return ad.concat_channels(features)


def _check_even(x: Tensor) -> None:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ConfigError(f"transition needs even spatial extent, got {x.shape[2]}×{x.shape[3]}")


def transition_a(model: MagnetModel, index: int, x: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
    """Bottleneck + pooling for the next block; fully connected tap on the pooled bottleneck."""
    _check_even(x)
    t = f"trans{index}"
    bottleneck = _bn_relu_conv(model, f"{t}.bn", f"{t}.conv", x, mode)
    pooled = ad.global_avg_pool(bottleneck)
    tap = ad.linear(pooled, model[f"{t}.fc1.weight"], model[f"{t}.fc1.bias"]) + ad.linear(
        pooled, model[f"{t}.fc2.weight"], model[f"{t}.fc2.bias"]
    )
    return ad.avg_pool2d(bottleneck, 2), tap


def response_gate_mask(x: np.ndarray) -> np.ndarray:
    """Keep the ⌈M/2⌉ largest-magnitude entries of each sample (earlier index wins ties)."""
    n = x.shape[0]
    flat = np.abs(x.reshape(n, -1))
    m = flat.shape[1]
    order = np.argsort(-flat, axis=1, kind="stable")
    keep = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(keep, order[:, : (m + 1) // 2], True, axis=1)
    return keep.reshape(x.shape)


def transition_b(
    model: MagnetModel, index: int, x: Tensor, mode: str = "train", gate: np.ndarray | None = None
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Bottleneck + pooling, then zero the weaker half of each sample's responses.

    The gated map feeds the next block and, flattened, is the tap. The mask is
    a constant of the graph; pass ``gate`` to reuse a previously computed one.
    """
    _check_even(x)
    t = f"trans{index}"
    pooled = ad.avg_pool2d(_bn_relu_conv(model, f"{t}.bn", f"{t}.conv", x, mode), 2)
    if gate is None:
        gate = response_gate_mask(pooled.data)
    gated = ad.mask(pooled, gate)
    return gated, ad.reshape(gated, (gated.shape[0], -1)), gate


def residual_classifier(model: MagnetModel, features: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """f_s logits, f_t = f_s + Δf logits and softmax(f_t)."""
    fs = ad.linear(features, model["source_head.weight"], model["source_head.bias"])
    hidden = ad.relu(ad.linear(fs, model["residual.fc1.weight"], model["residual.fc1.bias"]))
    delta = ad.linear(hidden, model["residual.fc2.weight"], model["residual.fc2.bias"])
    ft = fs + delta
    return fs, ft, ad.softmax(ft)


def magnet_forward(
    model: MagnetModel,
    batch,
    mode: str = "train",
    gate_masks: list[np.ndarray] | None = None,
) -> ForwardResult:
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ad.DimensionError(f"batch shape {x.shape} does not match N×{expected}")
    h = ad.conv2d(x, model["stem.conv.weight"], stride=cfg.stem_stride, padding=1)
    if cfg.stem_pool > 1:
        h = ad.avg_pool2d(h, cfg.stem_pool)
    taps: list[Tensor] = []
    masks: list[np.ndarray] = []
    for b in range(cfg.num_blocks):
        h = dense_block(model, b, h, mode)
        if cfg.transition_type == "A":
            h, tap = transition_a(model, b, h, mode)
        else:
            h, tap, m = transition_b(model, b, h, mode, None if gate_masks is None else gate_masks[b])
            masks.append(m)
        taps.append(tap)
    fs, ft, probs = residual_classifier(model, ad.global_avg_pool(h))
    taps.append(fs)
    return ForwardResult(taps, fs, ft, probs, masks)


def predict(model: MagnetModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode f_t probabilities for a stack of images."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(magnet_forward(model, images[start : start + batch_size], mode="eval").ft_probs.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


# ---------------------------------------------------------------- checkpoint file

CKPT_MAGIC = b"DMCK"
CKPT_VERSION = 1


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr


def save_checkpoint(model: MagnetModel, path) -> None:
    """Write the DMCK file: header, config JSON, parameter records, running-stat records."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        cfg = model.config.to_json().encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            _write_record(fh, name, p.data)
        fh.write(struct.pack("<I", 2 * len(model.bn)))
        for name, st in model.bn.items():
            _write_record(fh, f"{name}.running_mean", st.running_mean)
            _write_record(fh, f"{name}.running_var", st.running_var)


def load_checkpoint(path) -> MagnetModel:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError("not a DMCK checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = NetworkConfig.from_json(r.take(r.u32()).decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad network config in checkpoint: {exc}") from exc
    model = MagnetModel(config)
    n_params = r.u32()
    if n_params != len(model.params):
        raise CheckpointError(f"checkpoint has {n_params} parameters, config implies {len(model.params)}")
    for _ in range(n_params):
        name, arr = r.record()
        if name not in model.params or model.params[name].shape != arr.shape:
            raise CheckpointError(f"unexpected parameter record {name} {arr.shape}")
        model.params[name].tensor.data = arr
    n_stats = r.u32()
    for _ in range(n_stats):
        name, arr = r.record()
        bn_name, _, kind = name.rpartition(".")
        if bn_name not in model.bn or kind not in ("running_mean", "running_var"):
            raise CheckpointError(f"unexpected running-stat record {name}")
        setattr(model.bn[bn_name], kind, arr)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after checkpoint records")
    return model
