"""Reference implementations written independently of the library.

Everything here is deliberately slow and literal: explicit loop nests,
pairwise enumeration, recomputation from scratch. None of it imports the
code under test except plain value types.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------- geometry

def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


# ---------------------------------------------------------------- convolution

def conv2d(x, w, b, stride, pad):
    """Naive 6-loop 2D cross-correlation with zero padding. x (C,H,W), w (O,C,k,k)."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = float(b[o])
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            y = i * stride + di - pad
                            xx = j * stride + dj - pad
                            if 0 <= y < H and 0 <= xx < W:
                                acc += float(w[o, c, di, dj]) * float(x[c, y, xx])
                out[o, i, j] = acc
    return out


def conv3d(x, w, b, stride, pad, t_pad):
    """Naive 7-loop 3D cross-correlation; space zero padded, time padded by edge replication.

    x (C,N,H,W), w (O,C,T,k,k); temporal stride 1.
    """
    C, N, H, W = x.shape
    O, _, T, k, _ = w.shape
    No = N + 2 * t_pad - T + 1
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, No, Ho, Wo))
    for o in range(O):
        for n in range(No):
            for i in range(Ho):
                for j in range(Wo):
                    acc = float(b[o])
                    for c in range(C):
                        for dt in range(T):
                            tt = min(max(n + dt - t_pad, 0), N - 1)
                            for di in range(k):
                                for dj in range(k):
                                    y = i * stride + di - pad
                                    xx = j * stride + dj - pad
                                    if 0 <= y < H and 0 <= xx < W:
                                        acc += float(w[o, c, dt, di, dj]) * float(x[c, tt, y, xx])
                    out[o, n, i, j] = acc
    return out


def maxpool2d(x, k, s, p):
    C, H, W = x.shape
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    out = np.full((C, Ho, Wo), -np.inf)
    for c in range(C):
        for i in range(Ho):
            for j in range(Wo):
                for di in range(k):
                    for dj in range(k):
                        y, xx = i * s + di - p, j * s + dj - p
                        if 0 <= y < H and 0 <= xx < W:
                            out[c, i, j] = max(out[c, i, j], x[c, y, xx])
    return out


def maxpool3d(x, tk, ts, k, s, p):
    C, N, H, W = x.shape
    No = (N - tk) // ts + 1
    out = np.stack([maxpool2d(x[:, n], k, s, p) for n in range(N)], axis=1)
    res = np.full((C, No) + out.shape[2:], -np.inf)
    for n in range(No):
        for dt in range(tk):
            res[:, n] = np.maximum(res[:, n], out[:, n * ts + dt])
    return res


def naive_forward(layers, weights, x, taps, inflated):
    """Run a layer list with the loop-nest primitives. ``layers`` use the library LayerSpec fields."""
    found = {}
    it = iter(weights)
    for idx, l in enumerate(layers):
        if l.kind == "conv":
            w = next(it)
            if inflated:
                x = conv3d(x, w.weight, w.bias, l.stride, l.padding, l.t_padding)
            else:
                x = conv2d(x, w.weight, w.bias, l.stride, l.padding)
            if l.relu:
                x = np.maximum(x, 0.0)
        else:
            if inflated:
                x = maxpool3d(x, l.t_kernel, l.t_stride, l.kernel, l.stride, l.padding)
            else:
                x = maxpool2d(x, l.kernel, l.stride, l.padding)
        found[idx] = x
    return [found[t] for t in taps]


# ---------------------------------------------------------------- nms / matching

def brute_nms(boxes, scores, thr, top_k):
    """Pairwise-suppression reference: visit in (score desc, index) order, keep a box unless a
    previously kept box overlaps it by more than ``thr``."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
        if len(kept) == top_k:
            break
    return kept


def brute_match(anchors, gts, pos_iou):
    """Exhaustive IoU-table matcher returning the matched gt index per anchor (-1 background)."""
    A, G = len(anchors), len(gts)
    table = [[box_iou(anchors[a], gts[g][1]) for g in range(G)] for a in range(A)]
    matched = [-1] * A
    for a in range(A):
        best, bg = -1.0, -1
        for g in range(G):
            if table[a][g] > best:
                best, bg = table[a][g], g
        if G and best >= pos_iou:
            matched[a] = bg
    taken = set()
    for g in range(G):
        best, ba = -1.0, -1
        for a in range(A):
            if a in taken:
                continue
            if table[a][g] > best:
                best, ba = table[a][g], a
        taken.add(ba)
        matched[ba] = g
    return matched


# ---------------------------------------------------------------- average precision

def _greedy_tp_count(ranked, gts, overlap, alpha):
    """ranked: list of (group, item) in rank order; gts: group -> items. Fresh matching."""
    used = {g: set() for g in gts}
    tp = 0
    for group, item in ranked:
        cands = gts.get(group, [])
        best, bj = -1.0, -1
        for j, g in enumerate(cands):
            if j in used[group]:
                continue
            o = overlap(item, g)
            if o > best:
                best, bj = o, j
        if bj >= 0 and best > alpha:
            used[group].add(bj)
            tp += 1
    return tp


def sweep_ap(preds, gts, overlap, alpha):
    """Threshold-sweep AP: for every score threshold recompute the matching of the detections at
    or above it, then integrate the precision envelope over the recall steps.

    ``preds`` are (score, group, item) with distinct scores.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0 or not preds:
        return 0.0
    thresholds = sorted({p[0] for p in preds}, reverse=True)
    points = []
    for thr in thresholds:
        kept = sorted((p for p in preds if p[0] >= thr), key=lambda p: -p[0])
        tp = _greedy_tp_count([(g, it) for _, g, it in kept], gts, overlap, alpha)
        points.append((tp / n_gt, tp / len(kept)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points[k:])
            prev_r = r
    return ap


def st_iou(a, b) -> float:
    """a, b: dict frame -> box. Temporal IoU of spans times mean spatial IoU on shared frames."""
    sa, ea = min(a), max(a)
    sb, eb = min(b), max(b)
    inter = min(ea, eb) - max(sa, sb) + 1
    if inter <= 0:
        return 0.0
    union = max(ea, eb) - min(sa, sb) + 1
    shared = [t for t in a if t in b]
    if not shared:
        return 0.0
    return inter / union * sum(box_iou(a[t], b[t]) for t in shared) / len(shared)


# ---------------------------------------------------------------- linking

def exhaustive_link(tubes, dets, weight, link_iou):
    """Assignment reference for one frame.

    ``tubes``: list of (score, index, class, last_box); ``dets``: (class, box, score).
    Enumerates every injective partial assignment of admissible detections to
    tubes and returns the one that lexicographically maximizes the per-tube
    objective taken in claim order (descending score, then creation index),
    an unassigned tube counting as minus infinity and equal objectives
    preferring the lower detection index. Result: {tube position: det index}.
    """
    order = sorted(range(len(tubes)), key=lambda i: (-tubes[i][0], tubes[i][1]))

    def admissible(ti, dj):
        return dets[dj][0] == tubes[ti][2] and box_iou(tubes[ti][3], dets[dj][1]) >= link_iou

    options = [[None] + [j for j in range(len(dets)) if admissible(i, j)] for i in range(len(tubes))]
    best_key, best = None, None
    for combo in itertools.product(*options):
        picks = [c for c in combo if c is not None]
        if len(picks) != len(set(picks)):
            continue
        key = []
        for ti in order:
            j = combo[ti]
            if j is None:
                key.append((-math.inf, 0))
            else:
                key.append((dets[j][2] + weight * box_iou(tubes[ti][3], dets[j][1]), -j))
        key = tuple(key)
        if best_key is None or key > best_key:
            best_key, best = key, combo
    return {i: j for i, j in enumerate(best) if j is not None}


def mean(xs):
    return math.fsum(xs) / len(xs)
