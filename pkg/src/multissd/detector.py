"""Single-shot detection stream: trunk, extra layers, heads, decoding, loss, training."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import backbone as bb
from .anchors import AnchorConfig, AnchorGrid, MatchResult, generate_anchors, match_targets
from .backbone import BackboneConfig, ConvWeights, InflationMode, LayerSpec
from .boxops import decode_array, nms_array, nondegenerate, ranking_order
from .core import (BoundingBox, ClipTensor, Detection, Layout, NumericalError,
                   StreamKind, ValidationError)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorConfig:
    """Everything needed to build a stream apart from its kind.

    ``backbone`` is always the 2D form; 3D streams inflate it. Detection
    levels are the backbone ``taps`` followed by the ``extra_taps`` (indices
    into ``extras``).
    """

    num_classes: int
    backbone: BackboneConfig
    extras: tuple
    extra_taps: tuple
    anchors: AnchorConfig
    inflation_mode: str = InflationMode.REPEAT_SCALED.value

    def __post_init__(self):
        for e in self.extras:
            if e.kind != bb.CONV:
                raise ValidationError("extra layers must be convolutions")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        sizes = tuple(tuple(s) for s in self.level_sizes())
        if sizes != tuple(tuple(s) for s in self.anchors.feature_sizes):
            raise ValidationError(
                f"anchor feature sizes {self.anchors.feature_sizes} do not match network levels {sizes}")

    def level_sizes(self) -> list[tuple[int, int]]:
        shapes = bb.layer_shapes(self.backbone)
        sizes = [shapes[t][2:] for t in self.backbone.taps]
        c, _, h, w = shapes[-1]
        extra_sizes = []
        for layer in self.extras:
            h = bb._out(h, layer.kernel, layer.stride, layer.padding)
            w = bb._out(w, layer.kernel, layer.stride, layer.padding)
            extra_sizes.append((h, w))
        sizes += [extra_sizes[i] for i in self.extra_taps]
        return sizes

    def level_channels(self) -> list[int]:
        shapes = bb.layer_shapes(self.backbone)
        chans = [shapes[t][0] for t in self.backbone.taps]
        return chans + [self.extras[i].out_channels for i in self.extra_taps]

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "backbone": self.backbone.to_dict(),
            "extras": [asdict(l) for l in self.extras],
            "extra_taps": list(self.extra_taps),
            "anchors": self.anchors.to_dict(),
            "inflation_mode": self.inflation_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(
            num_classes=d["num_classes"],
            backbone=BackboneConfig.from_dict(d["backbone"]),
            extras=tuple(LayerSpec(**l) for l in d["extras"]),
            extra_taps=tuple(d["extra_taps"]),
            anchors=AnchorConfig.from_dict(d["anchors"]),
            inflation_mode=d.get("inflation_mode", InflationMode.REPEAT_SCALED.value),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def tiny_config(num_classes: int = 2, image_size: int = 64, clip_length: int = 8,
                width: int = 16) -> DetectorConfig:
    """Three-level desk-scale detector for ``image_size`` divisible by 16."""
    c1, c2, c3 = width // 2, width, 2 * width
    layers = (
        LayerSpec.conv(c1), LayerSpec.pool(),
        LayerSpec.conv(c2), LayerSpec.pool(),
        LayerSpec.conv(c3),                       # 4: tap, H/4
        LayerSpec.pool(),
        LayerSpec.conv(c3),
        LayerSpec.pool(3, 1, 1),
        LayerSpec.conv(c3),                       # fc6-style
        LayerSpec.conv(c3, kernel=1),             # 9: fc7-style tap, H/8
    )
    trunk = BackboneConfig(layers, in_channels=3, input_size=(image_size, image_size),
                           clip_length=clip_length, taps=(4, 9))
    extras = (LayerSpec.conv(c2, kernel=1), LayerSpec.conv(c3, kernel=3, stride=2, padding=1))
    s = image_size
    anchors = AnchorConfig(
        feature_sizes=((s // 4, s // 4), (s // 8, s // 8), (s // 16, s // 16)),
        scales=(0.12, 0.24, 0.45, 0.7),
        aspect_ratios=((1.0,), (1.0, 2.0, 0.5), (1.0, 2.0, 0.5)),
        extra_box=True,
    )
    return DetectorConfig(num_classes, trunk, extras, (1,), anchors)


def ssd300_config(num_classes: int = 24, clip_length: int = 8) -> DetectorConfig:
    """VGG-16 trunk with fc6/fc7 as convolutions and eight extra layers, 300x300 input."""
    C, P = LayerSpec.conv, LayerSpec.pool
    layers = (
        C(64), C(64), P(),
        C(128), C(128), P(),
        C(256), C(256), C(256), P(),
        C(512), C(512), C(512),          # 12: conv4_3
        P(),
        C(512), C(512), C(512),
        P(3, 1, 1),
        C(1024),                          # fc6
        C(1024, kernel=1),                # 19: fc7
    )
    trunk = BackboneConfig(layers, 3, (300, 300), clip_length, taps=(12, 19))
    extras = (
        C(256, 1), C(512, 3, 2, 1),
        C(128, 1), C(256, 3, 2, 1),
        C(128, 1), C(256, 3, 1, 0),
        C(128, 1), C(256, 3, 1, 0),
    )
    anchors = AnchorConfig(
        feature_sizes=((37, 37), (18, 18), (9, 9), (5, 5), (3, 3), (1, 1)),
        scales=(0.1, 0.2, 0.37, 0.54, 0.71, 0.88, 1.05),
        aspect_ratios=((1, 2, 0.5), (1, 2, 0.5, 3, 1 / 3), (1, 2, 0.5, 3, 1 / 3),
                       (1, 2, 0.5, 3, 1 / 3), (1, 2, 0.5), (1, 2, 0.5)),
    )
    return DetectorConfig(num_classes, trunk, extras, (1, 3, 5, 7), anchors)


@dataclass(frozen=True)
class RawPrediction:
    """Per-anchor offsets ``(A,4)`` and softmax scores ``(A,K+1)``; column 0 is background."""

    offsets: np.ndarray
    scores: np.ndarray
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.offsets.shape[0] != self.scores.shape[0] or self.offsets.shape[1:] != (4,):
            raise ValidationError("offsets and scores must cover the same anchors")

    def __len__(self) -> int:
        return len(self.offsets)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class StreamModel(nn.Module):
    """One detection stream with its own parameters.

    Conv weights live as plain parameter lists so the functional trunk in
    :mod:`backbone` can run them in either 2D or inflated 3D form.
    """

    def __init__(self, kind: StreamKind, config: DetectorConfig, seed: int = 0):
        super().__init__()
        self.kind = kind
        self.config = config
        self.trunk = bb.inflate_config(config.backbone) if kind.is_3d else config.backbone
        self.grid: AnchorGrid = generate_anchors(config.anchors)

        g = torch.Generator().manual_seed(seed)
        trunk2d = bb.init_weights(config.backbone, g)
        if kind.is_3d:
            trunk2d = bb.inflate_all(self.trunk, trunk2d, InflationMode(config.inflation_mode))
        self.trunk_w = nn.ParameterList()
        self.trunk_b = nn.ParameterList()
        self.set_trunk_weights(trunk2d)

        self.extra_w = nn.ParameterList()
        self.extra_b = nn.ParameterList()
        c = bb.layer_shapes(config.backbone)[-1][0]
        for layer in config.extras:
            w, b = _he(g, layer.out_channels, c, layer.kernel)
            self.extra_w.append(w)
            self.extra_b.append(b)
            c = layer.out_channels

        self.loc_w, self.loc_b = nn.ParameterList(), nn.ParameterList()
        self.conf_w, self.conf_b = nn.ParameterList(), nn.ParameterList()
        k1 = config.num_classes + 1
        for lvl, ch in enumerate(config.level_channels()):
            bpc = config.anchors.boxes_per_cell(lvl)
            w, b = _he(g, bpc * 4, ch, 3, gain=0.1)
            self.loc_w.append(w)
            self.loc_b.append(b)
            w, b = _he(g, bpc * k1, ch, 3, gain=0.1)
            self.conf_w.append(w)
            self.conf_b.append(b)

    @property
    def fingerprint(self) -> str:
        return self.config.anchors.fingerprint()

    @property
    def num_anchors(self) -> int:
        return len(self.grid)

    def set_trunk_weights(self, weights: Sequence[ConvWeights]) -> None:
        bb._check_weights(self.trunk, weights)
        self.trunk_w = nn.ParameterList(nn.Parameter(torch.as_tensor(np.array(w.weight, np.float32))) for w in weights)
        self.trunk_b = nn.ParameterList(nn.Parameter(torch.as_tensor(np.array(w.bias, np.float32))) for w in weights)

    def trunk_weights(self) -> list[ConvWeights]:
        return [ConvWeights(w.detach().numpy().copy(), b.detach().numpy().copy())
                for w, b in zip(self.trunk_w, self.trunk_b)]

    def level_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """2D feature maps feeding the heads, in level order."""
        last = len(self.trunk.layers) - 1
        taps = list(self.trunk.taps) + [last]
        outs = bb.run_layers(self.trunk, list(zip(self.trunk_w, self.trunk_b)), x, taps)
        if self.kind.is_3d:
            outs = [bb.temporal_pool_batch(o) for o in outs]
        feats, y = outs[:-1], outs[-1]
        for i, layer in enumerate(self.config.extras):
            y = F.relu(F.conv2d(y, self.extra_w[i], self.extra_b[i],
                                stride=layer.stride, padding=layer.padding))
            if i in self.config.extra_taps:
                feats.append(y)
        return feats

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(offsets (B,A,4), logits (B,A,K+1))`` in anchor-grid order."""
        feats = self.level_features(x)
        k1 = self.config.num_classes + 1
        locs, confs = [], []
        for lvl, f in enumerate(feats):
            b = f.shape[0]
            loc = F.conv2d(f, self.loc_w[lvl], self.loc_b[lvl], padding=1)
            conf = F.conv2d(f, self.conf_w[lvl], self.conf_b[lvl], padding=1)
            # (B, bpc*4, h, w) -> (B, h, w, bpc, 4): row-major cell order, then box index
            locs.append(loc.permute(0, 2, 3, 1).reshape(b, -1, 4))
            confs.append(conf.permute(0, 2, 3, 1).reshape(b, -1, k1))
        return torch.cat(locs, dim=1), torch.cat(confs, dim=1)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name.replace(".", "_"): p.detach().numpy() for name, p in self.named_parameters()}


def _he(g: torch.Generator, out_c: int, in_c: int, k: int, gain: float = 1.0):
    std = gain * np.sqrt(2.0 / (in_c * k * k))
    w = torch.randn((out_c, in_c, k, k), generator=g, dtype=torch.float64) * std
    return nn.Parameter(w.float()), nn.Parameter(torch.zeros(out_c))


def expected_layout(kind: StreamKind) -> Layout:
    return Layout.CNHW if kind.is_3d else Layout.CHW


def _batch_tensor(model: StreamModel, x: ClipTensor) -> torch.Tensor:
    layout = expected_layout(model.kind)
    if x.layout is not layout:
        raise ValidationError(f"{model.kind} stream expects {layout.value} input, got {x.layout.value}")
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(x.values), dtype=dtype)[None]


def predict(model: StreamModel, x: ClipTensor) -> RawPrediction:
    with torch.no_grad():
        loc, logits = model(_batch_tensor(model, x))
    loc = loc[0].double().numpy()
    logits = logits[0].double().numpy()
    return RawPrediction(loc, softmax(logits), logits)


def predict_batch(model: StreamModel, xs: np.ndarray, batch_size: int = 32) -> list[RawPrediction]:
    """Predict on a stacked input array ``(S, C, [N,] H, W)``."""
    out = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(xs), batch_size):
            loc, logits = model(torch.as_tensor(xs[i:i + batch_size], dtype=dtype))
            loc = loc.double().numpy()
            logits = logits.double().numpy()
            probs = softmax(logits)
            out.extend(RawPrediction(l, p, z) for l, p, z in zip(loc, probs, logits))
    return out


def detect_prediction(pred: RawPrediction, grid: AnchorGrid, conf_threshold: float = 0.01,
                      nms_iou: float = 0.45, top_k: int = 200) -> list[Detection]:
    """Decode, drop background, threshold, per-class NMS, global top-k."""
    if len(pred) != len(grid):
        raise ValidationError(f"prediction has {len(pred)} anchors, grid has {len(grid)}")
    boxes = decode_array(grid.flat, pred.offsets, grid.config.variances)
    valid = nondegenerate(boxes)
    ids = np.arange(len(grid))
    found_boxes, found_scores, found_ids, found_cls = [], [], [], []
    for col in range(1, pred.scores.shape[1]):
        scores = pred.scores[:, col]
        mask = valid & (scores > conf_threshold)
        if not mask.any():
            continue
        keep = nms_array(boxes[mask], scores[mask], nms_iou, top_k, ids[mask])
        found_boxes.append(boxes[mask][keep])
        found_scores.append(scores[mask][keep])
        found_ids.append(ids[mask][keep])
        found_cls.append(np.full(len(keep), col - 1))
    if not found_scores:
        return []
    boxes = np.concatenate(found_boxes)
    scores = np.concatenate(found_scores)
    aids = np.concatenate(found_ids)
    cls = np.concatenate(found_cls)
    order = ranking_order(scores, aids, boxes)[:top_k]
    return [Detection(BoundingBox(*boxes[i].tolist()), int(cls[i]), float(np.clip(scores[i], 0.0, 1.0)),
                      int(aids[i])) for i in order]


def detect(model: StreamModel, x: ClipTensor, conf_threshold: float = 0.01,
           nms_iou: float = 0.45, top_k: int = 200) -> list[Detection]:
    return detect_prediction(predict(model, x), model.grid, conf_threshold, nms_iou, top_k)


def _smooth_l1(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(d)
    small = a < 1.0
    return np.where(small, 0.5 * d * d, a - 0.5), np.where(small, d, np.sign(d))


def multibox_loss_arrays(offsets: np.ndarray, logits: np.ndarray, labels: np.ndarray,
                         loc_targets: np.ndarray, neg_pos_ratio: float = 3.0,
                         empty_negatives: Optional[int] = None):
    """Batched multibox loss with analytic gradients.

    Shapes: ``offsets``/``loc_targets`` ``(B,A,4)``, ``logits`` ``(B,A,K+1)``,
    ``labels`` ``(B,A)`` with 0 for background. Images without positives mine
    ``empty_negatives`` negatives (default ``neg_pos_ratio``).

    Returns ``(loss, grad_offsets, grad_logits)``.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if offsets.ndim == 2:
        loss, go, gl = multibox_loss_arrays(offsets[None], logits[None], labels[None],
                                            loc_targets[None], neg_pos_ratio, empty_negatives)
        return loss, go[0], gl[0]
    if empty_negatives is None:
        empty_negatives = int(neg_pos_ratio)
    B, A, K1 = logits.shape
    pos = labels > 0
    n_pos = int(pos.sum())
    norm = float(max(n_pos, 1))

    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(logp)

    selected = pos.copy()
    bg_loss = -logp[..., 0]
    for i in range(B):
        cand = np.flatnonzero(~pos[i])
        npos_i = int(pos[i].sum())
        k = int(neg_pos_ratio * npos_i) if npos_i > 0 else int(empty_negatives)
        k = min(k, len(cand))
        if k <= 0:
            continue
        # stable: highest loss first, lower anchor index on ties
        order = cand[np.lexsort((cand, -bg_loss[i, cand]))]
        selected[i, order[:k]] = True

    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, labels[..., None].astype(np.int64), 1.0, axis=-1)
    ce = -(onehot * logp).sum(axis=-1)
    conf_loss = ce[selected].sum()
    g_logits = np.where(selected[..., None], probs - onehot, 0.0) / norm

    diff = offsets - loc_targets
    sl1, dsl1 = _smooth_l1(diff)
    pos4 = pos[..., None]
    loc_loss = np.where(pos4, sl1, 0.0).sum()
    g_offsets = np.where(pos4, dsl1, 0.0) / norm

    return (loc_loss + conf_loss) / norm, g_offsets, g_logits


def multibox_loss(pred: RawPrediction, targets: MatchResult, neg_pos_ratio: float = 3.0,
                  empty_negatives: Optional[int] = None):
    """Loss for one prediction plus gradients w.r.t. its offsets and logits."""
    if pred.logits is None:
        raise ValidationError("multibox_loss needs the prediction's logits")
    if len(pred) != len(targets.labels):
        raise ValidationError("prediction and targets cover different grids")
    loss, g_off, g_log = multibox_loss_arrays(pred.offsets, pred.logits, targets.labels,
                                              targets.offsets, neg_pos_ratio, empty_negatives)
    return loss, {"offsets": g_off, "logits": g_log}


@dataclass(frozen=True)
class OptimizerConfig:
    optimizer: str = "sgd"  # sgd (with momentum) | adam
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    neg_pos_ratio: float = 3.0
    pos_iou: float = 0.5
    grad_clip: float = 10.0
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1


@dataclass
class TrainingSet:
    """Stacked stream inputs with matched targets."""

    inputs: np.ndarray
    labels: np.ndarray
    loc_targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def build(cls, grid: AnchorGrid, inputs: np.ndarray, gts: Sequence, pos_iou: float = 0.5) -> "TrainingSet":
        matches = [match_targets(grid, gt, pos_iou) for gt in gts]
        if isinstance(inputs, np.ndarray):
            inputs = np.ascontiguousarray(inputs, dtype=np.float32)
        return cls(inputs,
                   np.stack([m.labels for m in matches]) if matches else np.zeros((0, len(grid)), np.int64),
                   np.stack([m.offsets for m in matches]) if matches else np.zeros((0, len(grid), 4)))


def as_training_set(model: StreamModel, dataset, pos_iou: float) -> TrainingSet:
    if isinstance(dataset, TrainingSet):
        return dataset
    pairs = list(dataset)
    layout = expected_layout(model.kind)
    for clip, _ in pairs:
        if clip.layout is not layout:
            raise ValidationError(f"{model.kind} stream expects {layout.value} inputs")
    inputs = np.stack([clip.values for clip, _ in pairs])
    gts = [list(ann.instances) for _, ann in pairs]
    return TrainingSet.build(model.grid, inputs, gts, pos_iou)


def train(model: StreamModel, dataset, optimizer_cfg: OptimizerConfig = OptimizerConfig(),
          history: Optional[list] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> StreamModel:
    """Minimize the multibox loss with SGD (momentum) or Adam; deterministic given the seed.

    ``dataset`` is a :class:`TrainingSet` or an iterable of
    ``(ClipTensor, FrameAnnotation)`` pairs. Mean loss per epoch is appended
    to ``history`` when given.
    """
    cfg = optimizer_cfg
    data = as_training_set(model, dataset, cfg.pos_iou)
    rng = np.random.default_rng(cfg.seed)
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
    elif cfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        raise ValidationError(f"unknown optimizer {cfg.optimizer!r}")
    model.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_gamma ** sum(epoch >= m for m in cfg.lr_milestones)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x = torch.from_numpy(data.inputs[idx])
            loc, logits = model(x)
            loss, g_loc, g_logits = multibox_loss_arrays(
                loc.detach().double().numpy(), logits.detach().double().numpy(),
                data.labels[idx], data.loc_targets[idx], cfg.neg_pos_ratio)
            if not np.isfinite(loss):
                raise NumericalError(f"loss became non-finite at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            torch.autograd.backward([loc, logits], [torch.from_numpy(g_loc).to(loc.dtype),
                                                    torch.from_numpy(g_logits).to(logits.dtype)])
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(loss)
        mean = float(np.mean(losses)) if losses else 0.0
        log.info("%s epoch %d loss %.4f", model.kind, epoch, mean)
        if history is not None:
            history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    model.eval()
    return model
