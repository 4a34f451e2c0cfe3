import json

import numpy as np
import pytest
import torch

from multissd.backbone import init_weights
from multissd.checkpoint import load_backbone, load_model, save_backbone, save_model
from multissd.core import ClipTensor, DataError, Layout, StreamKind, ValidationError
from multissd.detector import StreamModel, predict, tiny_config


def test_model_round_trip_is_bitwise(tmp_path):
    cfg = tiny_config(2, 32, clip_length=2, width=4)
    m = StreamModel(StreamKind.parse("3dOF"), cfg, seed=3)
    save_model(m, tmp_path / "a")
    back = load_model(tmp_path / "a")
    assert back.kind == m.kind and back.fingerprint == m.fingerprint
    for p, q in zip(m.parameters(), back.parameters()):
        assert torch.equal(p.detach().float(), q.detach().float())
    x = ClipTensor(np.random.default_rng(0).random((3, 2, 32, 32)), Layout.CNHW)
    assert np.array_equal(predict(m, x).scores, predict(back, x).scores)
    save_model(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_backbone_round_trip_and_config_check(tmp_path):
    cfg = tiny_config(2, 32, width=4).backbone
    w = init_weights(cfg, torch.Generator().manual_seed(0))
    save_backbone(cfg, w, tmp_path)
    cfg2, w2 = load_backbone(tmp_path, expected=cfg)
    assert cfg2 == cfg
    for a, b in zip(w, w2):
        assert np.array_equal(a.weight.astype(np.float32), b.weight)
    with pytest.raises(ValidationError, match="hash"):
        load_backbone(tmp_path, expected=tiny_config(2, 32, width=8).backbone)


def test_corrupt_checkpoints_rejected(tmp_path):
    cfg = tiny_config(2, 32, clip_length=2, width=4)
    root = save_model(StreamModel(StreamKind.parse("2dRGB"), cfg), tmp_path / "m")
    manifest = json.loads((root / "manifest.json").read_text())
    entry = manifest["tensors"][0]
    (root / entry["file"]).write_bytes(b"\0" * 8)
    with pytest.raises(DataError, match="bytes"):
        load_model(root)
    entry["shape"] = [1]
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValidationError, match="shape"):
        load_model(root)
    with pytest.raises(DataError, match="not a checkpoint"):
        load_model(tmp_path / "nothing")
    manifest["config_hash"] = "0" * 64
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="hash"):
        load_model(root)
