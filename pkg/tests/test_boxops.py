import math

import numpy as np
import pytest

from multissd.boxops import (OffsetVector, decode_array, decode_offsets, encode_array,
                             encode_offsets, iou, iou_matrix, nms, nms_array)
from multissd.core import BoundingBox, Detection

from oracles import box_iou, brute_nms


def random_boxes(rng, n, lo=0.02, hi=0.5):
    xy = rng.uniform(0, 0.6, size=(n, 2))
    wh = rng.uniform(lo, hi, size=(n, 2))
    return np.clip(np.concatenate([xy, xy + wh], axis=1), 0, 1)


def test_iou_basic_cases():
    b = BoundingBox(0.1, 0.1, 0.4, 0.5)
    assert iou(b, b) == 1.0
    assert iou(b, BoundingBox(0.5, 0.5, 0.9, 0.9)) == 0.0
    # 0.01 overlap over 0.04 + 0.04 - 0.01 union
    got = iou(BoundingBox(0, 0, 0.2, 0.2), BoundingBox(0.1, 0.1, 0.3, 0.3))
    assert got == pytest.approx(1 / 7, abs=1e-12)


def test_iou_matrix_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 13), random_boxes(rng, 7)
    m = iou_matrix(a, b)
    for i in range(13):
        for j in range(7):
            assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-15)
    assert np.allclose(m, iou_matrix(b, a).T)
    assert (m >= 0).all() and (m <= 1).all()


def test_encode_identity_and_log_identity():
    a = BoundingBox(0.2, 0.2, 0.6, 0.5)
    assert encode_offsets(a, a).as_array().tolist() == [0.0, 0.0, 0.0, 0.0]
    cx, cy, w, h = 0.4, 0.35, 0.4 * math.e, 0.3
    wide = BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    off = encode_offsets(a, wide, variances=(1.0, 1.0))
    assert off.d_w == pytest.approx(1.0, abs=1e-12)
    assert off.d_cx == pytest.approx(0.0, abs=1e-12)


def test_decode_inverts_encode():
    rng = np.random.default_rng(1)
    anchors = random_boxes(rng, 500, 0.05, 0.4)
    targets = random_boxes(rng, 500, 0.05, 0.4)
    back = decode_array(anchors, encode_array(anchors, targets))
    assert np.abs(back - targets).max() < 1e-9


def test_decode_zero_offsets_and_clamp():
    a = BoundingBox(0.2, 0.2, 0.6, 0.5)
    assert decode_offsets(a, OffsetVector(0, 0, 0, 0)).as_tuple() == pytest.approx(a.as_tuple(), abs=1e-12)
    pushed = decode_offsets(BoundingBox(0.6, 0.6, 0.9, 0.9), OffsetVector(5.0, 0, 0, 0))
    assert pushed.x_max == 1.0
    assert decode_offsets(BoundingBox(0.8, 0.8, 0.9, 0.9), OffsetVector(50.0, 0, 0, 0)) is None


def test_nms_trivial_cases():
    box = BoundingBox(0.1, 0.1, 0.5, 0.5)
    one = [Detection(box, 0, 0.7)]
    assert nms(one) == one
    assert nms([]) == []
    dup = [Detection(box, 0, 0.8), Detection(box, 0, 0.9)]
    assert nms(dup, 0.5) == [dup[1]]
    with pytest.raises(ValueError):
        nms([Detection(box, 0, 0.8), Detection(box, 1, 0.9)])


@pytest.mark.parametrize("seed", range(100))
def test_nms_matches_pairwise_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 25))
    boxes = random_boxes(rng, n)
    scores = rng.permutation(n) / n + rng.uniform(0, 1e-3, n)  # distinct
    thr = float(rng.uniform(0.2, 0.7))
    top_k = int(rng.integers(1, n + 2))
    keep = nms_array(boxes, scores, thr, top_k)
    assert keep.tolist() == brute_nms(boxes, scores, thr, top_k)
    kept = set(keep.tolist())
    for i in kept:
        for j in kept:
            if i != j:
                assert box_iou(boxes[i], boxes[j]) <= thr


def test_nms_ties_break_on_anchor_id():
    box = np.array([[0.1, 0.1, 0.5, 0.5], [0.1, 0.1, 0.5, 0.5]])
    scores = np.array([0.6, 0.6])
    assert nms_array(box, scores, 0.5, 10, np.array([7, 3])).tolist() == [1]
    assert nms_array(box, scores, 0.5, 10, np.array([2, 3])).tolist() == [0]
