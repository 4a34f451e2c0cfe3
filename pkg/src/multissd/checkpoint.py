"""Checkpoint directories: ``manifest.json`` plus one raw little-endian float32 file per tensor."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, ConvWeights
from .core import DataError, StreamKind, ValidationError
from .detector import DetectorConfig, StreamModel

FORMAT = "multissd-checkpoint"
VERSION = 1


def _write_tensors(root: Path, tensors: list[tuple[str, np.ndarray]]) -> list[dict]:
    entries = []
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4")
        fname = f"{name}.f32"
        (root / fname).write_bytes(data.tobytes())
        entries.append({"name": name, "file": fname, "shape": list(data.shape)})
    return entries


def _read_tensor(root: Path, entry: dict, expected_shape: Sequence[int]) -> np.ndarray:
    if list(entry["shape"]) != list(expected_shape):
        raise ValidationError(f"{entry['name']}: checkpoint shape {entry['shape']} != config shape {list(expected_shape)}")
    path = root / entry["file"]
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint tensor missing: {path}") from None
    n = int(np.prod(expected_shape))
    if len(raw) != 4 * n:
        raise DataError(f"{path}: expected {4 * n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(expected_shape).astype(np.float32)


def _read_manifest(root: Path) -> dict:
    try:
        m = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{root}: not a checkpoint (no manifest.json)") from None
    if m.get("format") != FORMAT or m.get("version") != VERSION:
        raise DataError(f"{root}: unsupported checkpoint {m.get('format')!r} v{m.get('version')!r}")
    return m


def _trunk_names(cfg: BackboneConfig) -> list[tuple[str, str]]:
    return [(f"trunk_{i:02d}_weight", f"trunk_{i:02d}_bias") for i in cfg.conv_indices()]


def save_backbone(cfg: BackboneConfig, weights: Sequence[ConvWeights], path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = []
    for (wn, bn), w in zip(_trunk_names(cfg), weights):
        tensors += [(wn, w.weight), (bn, w.bias)]
    manifest = {"format": FORMAT, "version": VERSION, "kind": "backbone",
                "config": cfg.to_dict(), "config_hash": cfg.digest(),
                "layers": [l["kind"] for l in cfg.to_dict()["layers"]],
                "tensors": _write_tensors(root, tensors)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_backbone(path, expected: BackboneConfig | None = None) -> tuple[BackboneConfig, list[ConvWeights]]:
    root = Path(path)
    m = _read_manifest(root)
    cfg = BackboneConfig.from_dict(m["config"])
    if expected is not None and expected.digest() != cfg.digest():
        raise ValidationError(f"{root}: backbone config hash {cfg.digest()} != expected {expected.digest()}")
    entries = {e["name"]: e for e in m["tensors"]}
    weights = []
    c = cfg.in_channels
    for i, (wn, bn) in zip(cfg.conv_indices(), _trunk_names(cfg)):
        layer = cfg.layers[i]
        shape = (layer.out_channels, c) + ((layer.t_kernel,) if cfg.inflated else ()) + (layer.kernel, layer.kernel)
        weights.append(ConvWeights(_read_tensor(root, entries[wn], shape),
                                   _read_tensor(root, entries[bn], (layer.out_channels,))))
        c = layer.out_channels
    return cfg, weights


def _model_names(model: StreamModel) -> list[tuple[str, torch.nn.Parameter]]:
    names = []
    for (wn, bn), w, b in zip(_trunk_names(model.trunk), model.trunk_w, model.trunk_b):
        names += [(wn, w), (bn, b)]
    for i, (w, b) in enumerate(zip(model.extra_w, model.extra_b)):
        names += [(f"extra_{i:02d}_weight", w), (f"extra_{i:02d}_bias", b)]
    for lvl in range(len(model.loc_w)):
        names += [(f"head_loc_{lvl:02d}_weight", model.loc_w[lvl]), (f"head_loc_{lvl:02d}_bias", model.loc_b[lvl]),
                  (f"head_conf_{lvl:02d}_weight", model.conf_w[lvl]), (f"head_conf_{lvl:02d}_bias", model.conf_b[lvl])]
    return names


def save_model(model: StreamModel, path, extra: dict | None = None) -> Path:
    """Write a stream checkpoint; tensor bytes depend only on the weights."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = [(n, p.detach().cpu().numpy()) for n, p in _model_names(model)]
    manifest = {"format": FORMAT, "version": VERSION, "kind": "stream",
                "stream": model.kind.name, "config": model.config.to_dict(),
                "config_hash": model.config.digest(), "anchor_fingerprint": model.fingerprint,
                "layers": [l.kind for l in model.trunk.layers],
                "tensors": _write_tensors(root, tensors), "extra": extra or {}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_model(path) -> StreamModel:
    root = Path(path)
    m = _read_manifest(root)
    if m.get("kind") != "stream":
        raise DataError(f"{root}: checkpoint holds a {m.get('kind')!r}, not a stream model")
    cfg = DetectorConfig.from_dict(m["config"])
    if cfg.digest() != m["config_hash"]:
        raise DataError(f"{root}: config hash mismatch")
    model = StreamModel(StreamKind.parse(m["stream"]), cfg)
    if model.fingerprint != m["anchor_fingerprint"]:
        raise DataError(f"{root}: anchor fingerprint mismatch")
    entries = {e["name"]: e for e in m["tensors"]}
    with torch.no_grad():
        for name, param in _model_names(model):
            if name not in entries:
                raise DataError(f"{root}: tensor {name} missing from manifest")
            param.copy_(torch.from_numpy(_read_tensor(root, entries[name], tuple(param.shape))))
    model.eval()
    return model
