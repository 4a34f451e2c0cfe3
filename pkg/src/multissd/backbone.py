"""Convolutional trunk in 2D and inflated 3D form.

Layers are described by :class:`LayerSpec` lists and executed functionally, so
2D weights can be inflated and run through the 3D stack. Time is padded by
edge replication; space is zero padded.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import ClipTensor, Layout, ValidationError

CONV = "conv"
POOL = "pool"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    relu: bool = True
    t_kernel: int = 1
    t_stride: int = 1
    t_padding: int = 0

    def __post_init__(self):
        if self.kind not in (CONV, POOL):
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV and self.out_channels < 1:
            raise ValidationError("conv layer needs out_channels >= 1")

    @classmethod
    def conv(cls, out_channels: int, kernel: int = 3, stride: int = 1,
             padding: Optional[int] = None, relu: bool = True) -> "LayerSpec":
        if padding is None:
            padding = kernel // 2
        return cls(CONV, out_channels, kernel, stride, padding, relu)

    @classmethod
    def pool(cls, kernel: int = 2, stride: int = 2, padding: int = 0) -> "LayerSpec":
        return cls(POOL, 0, kernel, stride, padding, False)


@dataclass(frozen=True)
class BackboneConfig:
    layers: tuple
    in_channels: int = 3
    input_size: tuple = (64, 64)
    clip_length: int = 8
    taps: tuple = ()
    inflated: bool = False

    def __post_init__(self):
        for t in self.taps:
            if not 0 <= t < len(self.layers):
                raise ValidationError(f"tap point {t} is not a layer index")
        if self.clip_length < 1:
            raise ValidationError("clip_length must be >= 1")

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == CONV]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        d["input_size"] = list(self.input_size)
        d["taps"] = list(self.taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        d["input_size"] = tuple(d["input_size"])
        d["taps"] = tuple(d["taps"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ConvWeights:
    """Conv weights ``(out, in, k, k)`` (2D) or ``(out, in, T, k, k)`` (3D) plus bias."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def temporal_extent(self) -> Optional[int]:
        return self.weight.shape[2] if self.weight.ndim == 5 else None


WeightTensor2D = ConvWeights
WeightTensor3D = ConvWeights


class InflationMode(str, enum.Enum):
    REPEAT = "repeat"
    REPEAT_SCALED = "repeat_scaled"


def _out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def layer_shapes(cfg: BackboneConfig) -> list[tuple[int, int, int, int]]:
    """Closed-form ``(C, N, H, W)`` after each layer (N is 1 for 2D configs)."""
    c = cfg.in_channels
    n = cfg.clip_length if cfg.inflated else 1
    h, w = cfg.input_size
    shapes = []
    for layer in cfg.layers:
        if layer.kind == CONV:
            c = layer.out_channels
        if cfg.inflated:
            n = _out(n, layer.t_kernel, layer.t_stride, layer.t_padding)
        h = _out(h, layer.kernel, layer.stride, layer.padding)
        w = _out(w, layer.kernel, layer.stride, layer.padding)
        if min(n, h, w) < 1:
            raise ValidationError(f"layer {len(shapes)} produces an empty feature map")
        shapes.append((c, n, h, w))
    return shapes


def init_weights(cfg: BackboneConfig, generator: torch.Generator,
                 in_channels: Optional[int] = None) -> list[ConvWeights]:
    """He-normal 2D conv weights, zero bias, drawn from ``generator``."""
    c = cfg.in_channels if in_channels is None else in_channels
    out = []
    for layer in cfg.layers:
        if layer.kind != CONV:
            continue
        fan_in = c * layer.kernel * layer.kernel
        w = torch.randn((layer.out_channels, c, layer.kernel, layer.kernel),
                        generator=generator, dtype=torch.float64) * np.sqrt(2.0 / fan_in)
        out.append(ConvWeights(w.numpy().astype(np.float32), np.zeros(layer.out_channels, np.float32)))
        c = layer.out_channels
    return out


def inflate_config(cfg2d: BackboneConfig) -> BackboneConfig:
    """Inflate every conv and pool along time.

    Convs with spatial kernel ``k > 1`` get temporal extent ``k`` (3 for 3x3)
    and temporal padding ``(k-1)//2``; 1x1 convs stay 1 in time. Pools get
    temporal kernel 2 and stride 2, clamped to 1 when the incoming temporal
    size is already 1.
    """
    if cfg2d.inflated:
        raise ValidationError("config is already inflated")
    n = cfg2d.clip_length
    layers = []
    for layer in cfg2d.layers:
        if layer.kind == CONV:
            tk = layer.kernel if layer.kernel > 1 else 1
            new = replace(layer, t_kernel=tk, t_stride=1, t_padding=(tk - 1) // 2)
        else:
            tk = 2 if n >= 2 else 1
            new = replace(layer, t_kernel=tk, t_stride=tk, t_padding=0)
        n = _out(n, new.t_kernel, new.t_stride, new.t_padding)
        layers.append(new)
    return replace(cfg2d, layers=tuple(layers), inflated=True)


def inflate_weights(w: ConvWeights, T: int, mode: InflationMode = InflationMode.REPEAT_SCALED) -> ConvWeights:
    if T < 1:
        raise ValidationError("temporal extent must be >= 1")
    mode = InflationMode(mode)
    stacked = np.repeat(w.weight[:, :, None], T, axis=2)
    if mode is InflationMode.REPEAT_SCALED:
        stacked = stacked / T
    return ConvWeights(stacked.astype(w.weight.dtype), w.bias.copy())


def inflate_all(cfg3d: BackboneConfig, weights2d: Sequence[ConvWeights],
                mode: InflationMode = InflationMode.REPEAT_SCALED) -> list[ConvWeights]:
    convs = [cfg3d.layers[i] for i in cfg3d.conv_indices()]
    if len(convs) != len(weights2d):
        raise ValidationError(f"expected {len(convs)} conv weights, got {len(weights2d)}")
    return [inflate_weights(w, l.t_kernel, mode) for l, w in zip(convs, weights2d)]


def _pad_time(x: torch.Tensor, p: int) -> torch.Tensor:
    if p == 0:
        return x
    first = x[:, :, :1].expand(-1, -1, p, -1, -1)
    last = x[:, :, -1:].expand(-1, -1, p, -1, -1)
    return torch.cat([first, x, last], dim=2)


def run_layers(cfg: BackboneConfig, params: Sequence, x: torch.Tensor,
               taps: Optional[Sequence[int]] = None) -> list[torch.Tensor]:
    """Run the stack on a batched tensor ``(B,C,H,W)`` or ``(B,C,N,H,W)``.

    ``params`` is a sequence of ``(weight, bias)`` tensors, one per conv.
    Returns the outputs at ``taps`` (default ``cfg.taps``) in tap order.
    """
    taps = cfg.taps if taps is None else tuple(taps)
    want = set(taps)
    expected_rank = 5 if cfg.inflated else 4
    if x.dim() != expected_rank:
        raise ValidationError(f"expected rank-{expected_rank} batch, got shape {tuple(x.shape)}")
    if x.shape[1] != cfg.in_channels or tuple(x.shape[-2:]) != tuple(cfg.input_size):
        raise ValidationError(
            f"input shape {tuple(x.shape[1:])} does not match config "
            f"(C={cfg.in_channels}, HxW={tuple(cfg.input_size)})")
    if cfg.inflated and x.shape[2] != cfg.clip_length:
        raise ValidationError(f"clip length {x.shape[2]} != configured {cfg.clip_length}")
    found = {}
    it = iter(params)
    for i, layer in enumerate(cfg.layers):
        if layer.kind == CONV:
            w, b = next(it)
            if cfg.inflated:
                x = _pad_time(x, layer.t_padding)
                x = F.conv3d(x, w, b, stride=(1, layer.stride, layer.stride),
                             padding=(0, layer.padding, layer.padding))
            else:
                x = F.conv2d(x, w, b, stride=layer.stride, padding=layer.padding)
            if layer.relu:
                x = F.relu(x)
        else:
            if cfg.inflated:
                x = F.max_pool3d(x, (layer.t_kernel, layer.kernel, layer.kernel),
                                 (layer.t_stride, layer.stride, layer.stride),
                                 (layer.t_padding, layer.padding, layer.padding))
            else:
                x = F.max_pool2d(x, layer.kernel, layer.stride, layer.padding)
        if i in want:
            found[i] = x
    return [found[t] for t in taps]


def _as_params(weights: Sequence[ConvWeights], dtype) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [(torch.as_tensor(np.asarray(w.weight), dtype=dtype),
             torch.as_tensor(np.asarray(w.bias), dtype=dtype)) for w in weights]


def _check_weights(cfg: BackboneConfig, weights: Sequence[ConvWeights]) -> None:
    convs = cfg.conv_indices()
    if len(weights) != len(convs):
        raise ValidationError(f"expected {len(convs)} conv weights, got {len(weights)}")
    c = cfg.in_channels
    for i, w in zip(convs, weights):
        layer = cfg.layers[i]
        shape = (layer.out_channels, c)
        if cfg.inflated:
            shape += (layer.t_kernel,)
        shape += (layer.kernel, layer.kernel)
        if tuple(w.weight.shape) != shape:
            raise ValidationError(f"layer {i} weight shape {tuple(w.weight.shape)} != {shape}")
        if tuple(w.bias.shape) != (layer.out_channels,):
            raise ValidationError(f"layer {i} bias shape {tuple(w.bias.shape)} mismatched")
        c = layer.out_channels


def _forward(cfg, weights, x: ClipTensor, layout: Layout) -> list[np.ndarray]:
    if x.layout is not layout:
        raise ValidationError(f"expected {layout.value} input, got {x.layout.value}")
    _check_weights(cfg, weights)
    dtype = torch.float64 if x.values.dtype == np.float64 else torch.float32
    with torch.no_grad():
        xt = torch.as_tensor(x.values, dtype=dtype)[None]
        outs = run_layers(cfg, _as_params(weights, dtype), xt)
    return [o[0].numpy() for o in outs]


def forward_2d(cfg: BackboneConfig, weights: Sequence[ConvWeights], x: ClipTensor) -> list[np.ndarray]:
    """Feature maps ``(C', H', W')`` at each tap of a 2D config."""
    if cfg.inflated:
        raise ValidationError("forward_2d needs a 2D config")
    return _forward(cfg, weights, x, Layout.CHW)


def forward_3d(cfg: BackboneConfig, weights: Sequence[ConvWeights], x: ClipTensor) -> list[np.ndarray]:
    """Feature maps ``(C', N', H', W')`` at each tap of an inflated config."""
    if not cfg.inflated:
        raise ValidationError("forward_3d needs an inflated config")
    return _forward(cfg, weights, x, Layout.CNHW)


def temporal_pool(x: ClipTensor) -> ClipTensor:
    """Mean over the temporal axis: ``(C,N,H,W) -> (C,H,W)``."""
    if x.layout is not Layout.CNHW:
        raise ValidationError("temporal_pool needs a (C,N,H,W) input")
    return ClipTensor(x.values.mean(axis=1), Layout.CHW)


def temporal_pool_batch(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=2)


def random_config(rng: np.random.Generator, max_layers: int = 6) -> BackboneConfig:
    """A small random 2D stack (mixed 3x3/1x1 convs, strided convs, pools) with random taps."""
    size = int(rng.integers(8, 17))
    clip = int(rng.choice([1, 2, 3, 4, 8]))
    c_in = int(rng.integers(1, 4))
    layers = []
    h = size
    for _ in range(int(rng.integers(2, max_layers + 1))):
        if rng.random() < 0.3 and h >= 4:
            layers.append(LayerSpec.pool())
        else:
            k = int(rng.choice([1, 3]))
            s = 2 if (k == 3 and h >= 6 and rng.random() < 0.25) else 1
            layers.append(LayerSpec.conv(int(rng.integers(1, 6)), kernel=k, stride=s,
                                         relu=bool(rng.random() < 0.8)))
        h = _out(h, layers[-1].kernel, layers[-1].stride, layers[-1].padding)
    if not any(l.kind == CONV for l in layers):
        layers.append(LayerSpec.conv(3))
    n = len(layers)
    taps = tuple(sorted(set(rng.choice(n, size=min(n, int(rng.integers(1, 4))), replace=False).tolist())))
    return BackboneConfig(tuple(layers), c_in, (size, size), clip, taps)


def inflation_error(cfg2d: BackboneConfig, weights2d: Sequence[ConvWeights], frame: np.ndarray,
                    mode: InflationMode = InflationMode.REPEAT_SCALED) -> float:
    """Max relative error between the 2D forward of ``frame`` and the temporally pooled
    3D forward of the constant clip ``[frame]*N`` over every tap point."""
    cfg3d = inflate_config(cfg2d)
    w3d = inflate_all(cfg3d, weights2d, mode)
    ref = forward_2d(cfg2d, weights2d, ClipTensor(frame, Layout.CHW))
    clip = np.repeat(frame[:, None], cfg2d.clip_length, axis=1)
    got = forward_3d(cfg3d, w3d, ClipTensor(clip, Layout.CNHW))
    worst = 0.0
    for a, b in zip(ref, got):
        pooled = temporal_pool(ClipTensor(b, Layout.CNHW)).values
        scale = max(float(np.abs(a).max()), 1e-12)
        worst = max(worst, float(np.abs(pooled - a).max()) / scale)
    return worst
