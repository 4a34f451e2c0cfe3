"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; ``conftest.py`` prints them in the
terminal summary.
"""

import contextlib
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from multissd.anchors import AnchorConfig, generate_anchors, match_targets
from multissd.backbone import (BackboneConfig, InflationMode, LayerSpec, forward_2d, forward_3d, inflate_config,
                               inflation_error, layer_shapes, random_config, temporal_pool)
from multissd.boxops import nms_array
from multissd.checkpoint import load_model, save_model
from multissd.config import Config
from multissd.core import (ActionTube, BoundingBox, ClipTensor, Detection, Layout, StreamKind, TubeElement,
                           check_tube)
from multissd.data import (Dataset, SynthConfig, generate_synthetic, gt_by_frame, load_annotations,
                           read_detections, read_tubes, write_annotations, write_detections, write_tubes)
from multissd.detector import (OptimizerConfig, RawPrediction, StreamModel, TrainingSet, multibox_loss_arrays,
                               tiny_config, train)
from multissd.evaluation import frame_ap, video_ap
from multissd.flow import FileFlowProvider, SyntheticFlowProvider, write_flow_files
from multissd.fusion import late_fuse
from multissd.linking import ActiveTube, LinkParams, link_all, link_step

from oracles import box_iou, brute_match, brute_nms, exhaustive_link, naive_forward, st_iou, sweep_ap
from test_backbone import random_weights, small_config
from test_detector import _loss_instance
from test_evaluation import random_frame_instance, random_tube_instance

RESULTS: dict = {}


class _Record:
    detail = ""


@contextlib.contextmanager
def criterion(n, title):
    rec = _Record()
    t0 = time.perf_counter()
    try:
        yield rec
    except BaseException as e:
        RESULTS[n] = f"criterion {n:2d} FAIL  {title}: {rec.detail or type(e).__name__} ({e})".strip()
        raise
    RESULTS[n] = f"criterion {n:2d} PASS  {title}: {rec.detail} [{time.perf_counter() - t0:.1f}s]"


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_01_inflation_equivalence():
    with criterion(1, "inflation equivalence") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        errors, control = [], 0
        for _ in range(20):
            cfg = random_config(rng)
            w = random_weights(cfg, rng)
            frame = rng.standard_normal((cfg.in_channels,) + cfg.input_size)
            errors.append(inflation_error(cfg, w, frame))
            # unscaled copies must break the equivalence, or the check is vacuous
            control += inflation_error(cfg, w, frame, InflationMode.REPEAT) > 1e-3
        elapsed = time.perf_counter() - t0
        c.detail = (f"20 configs, max relative error {max(errors):.2e} (tol 1e-5), {elapsed:.1f}s; "
                    f"unscaled REPEAT control fails on {control}/20")
        assert max(errors) < 1e-5
        assert control >= 10
        assert elapsed < 60


def test_criterion_02_convolution_oracles():
    with criterion(2, "convolution oracles") as c:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(5000 + seed)
            three_d = seed % 2 == 1
            cfg = small_config(rng, (4, 7) if three_d else (5, 9))
            if three_d:
                cfg = inflate_config(cfg)
            w = random_weights(cfg, rng)
            if three_d:
                x = rng.standard_normal((cfg.in_channels, cfg.clip_length) + cfg.input_size)
                got = forward_3d(cfg, w, ClipTensor(x, Layout.CNHW))
            else:
                x = rng.standard_normal((cfg.in_channels,) + cfg.input_size)
                got = forward_2d(cfg, w, ClipTensor(x, Layout.CHW))
            ref = naive_forward(cfg.layers, w, x, cfg.taps, inflated=three_d)
            for g, r in zip(got, ref):
                assert g.shape == r.shape
                worst = max(worst, float(np.abs(g - r).max() / max(1.0, np.abs(r).max())))
        elapsed = time.perf_counter() - t0
        c.detail = f"50 instances (25 2D, 25 3D), max error {worst:.2e} (tol 1e-6), {elapsed:.1f}s"
        assert worst <= 1e-6
        assert elapsed < 120


def test_criterion_03_gradient_checks():
    with criterion(3, "multibox gradient checks") as c:
        worst, checked = 0.0, 0
        for seed in range(10):
            rng = np.random.default_rng(300 + seed)
            off, logits, labels, tgt = _loss_instance(rng, n_pos=int(rng.integers(1, 4)))
            _, g_off, g_log = multibox_loss_arrays(off, logits, labels, tgt)
            eps = 1e-6
            for arr, grad in ((off, g_off), (logits, g_log)):
                for idx in np.ndindex(arr.shape):
                    save = arr[idx]
                    arr[idx] = save + eps
                    up = multibox_loss_arrays(off, logits, labels, tgt)[0]
                    arr[idx] = save - eps
                    down = multibox_loss_arrays(off, logits, labels, tgt)[0]
                    arr[idx] = save
                    fd = (up - down) / (2 * eps)
                    worst = max(worst, abs(fd - grad[idx]) / max(1.0, abs(fd), abs(grad[idx])))
                    checked += 1
        c.detail = f"10 instances, {checked} coordinates, max relative error {worst:.2e} (tol 1e-3)"
        assert worst <= 1e-3


def _frame_class_preds(dets, gt, c):
    preds = [(d.score, k, d.box.as_tuple()) for k, ds in dets.items() for d in ds if d.class_id == c]
    gts = {}
    for k, inst in gt.items():
        boxes = [b.as_tuple() for cc, b in inst if cc == c]
        if boxes:
            gts[k] = boxes
    return preds, gts


def test_criterion_04_ap_oracles():
    with criterion(4, "AP oracle equivalence") as c:
        worst, n_frame, n_video, max_dets = 0.0, 0, 0, 0
        for seed in range(120):
            rng = np.random.default_rng(40_000 + seed)
            dets, gt = random_frame_instance(rng)
            max_dets = max(max_dets, sum(map(len, dets.values())))
            alpha = float(rng.choice([0.3, 0.5, 0.7]))
            for cls, ap in frame_ap(dets, gt, alpha).ap.items():
                worst = max(worst, abs(ap - sweep_ap(*_frame_class_preds(dets, gt, cls), box_iou, alpha)))
            n_frame += 1
        for seed in range(120):
            rng = np.random.default_rng(50_000 + seed)
            preds, gts = random_tube_instance(rng)
            max_dets = max(max_dets, len(preds))
            alpha = float(rng.choice([0.1, 0.2, 0.4]))
            (rep,) = video_ap(preds, gts, alphas=(alpha,))
            for cls, ap in rep.ap.items():
                pr = [(p.tube_score, p.video_id, tuple((e.frame_index, e.box.as_tuple()) for e in p.elements))
                      for p in preds if p.class_id == cls]
                gg = {}
                for g in gts:
                    if g.class_id == cls:
                        gg.setdefault(g.video_id, []).append(
                            tuple((e.frame_index, e.box.as_tuple()) for e in g.elements))
                worst = max(worst, abs(ap - sweep_ap(pr, gg, lambda a, b: st_iou(dict(a), dict(b)), alpha)))
            n_video += 1
        assert max_dets <= 50

        alphas = (0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)
        violations = 0
        for seed in range(200):
            rng = np.random.default_rng(60_000 + seed)
            dets, gt = random_frame_instance(rng)
            maps = [frame_ap(dets, gt, a).mean_ap for a in alphas]
            preds, gts = random_tube_instance(rng)
            vmaps = [r.mean_ap for r in video_ap(preds, gts, alphas=alphas)]
            for seq in (maps, vmaps):
                violations += sum(b > a + 1e-12 for a, b in zip(seq, seq[1:]))

        changed = 0
        transforms = (lambda s: s ** 3, lambda s: np.log(s) + 7, lambda s: 1 / (1 + np.exp(-8 * (s - 0.5))))
        for seed in range(50):
            rng = np.random.default_rng(70_000 + seed)
            dets, gt = random_frame_instance(rng)
            base = frame_ap(dets, gt).ap
            preds, gts = random_tube_instance(rng)
            vbase = [r.ap for r in video_ap(preds, gts)]
            for f in transforms:
                mapped = {k: [Detection(d.box, d.class_id, float(f(d.score))) for d in ds] for k, ds in dets.items()}
                changed += frame_ap(mapped, gt).ap != base
                mtubes = [ActionTube(p.video_id, p.class_id, p.elements, float(f(p.tube_score))) for p in preds]
                changed += [r.ap for r in video_ap(mtubes, gts)] != vbase
        c.detail = (f"{n_frame} frame + {n_video} video instances (<= {max_dets} detections), max |diff| "
                    f"{worst:.1e} (tol 1e-9); {violations} monotonicity violations; "
                    f"{changed} changes under increasing score maps")
        assert worst <= 1e-9 and n_frame >= 100 and n_video >= 100
        assert violations == 0
        assert changed == 0


def _pred(rng, a=40, k=3):
    logits = rng.standard_normal((a, k + 1))
    scores = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return RawPrediction(rng.standard_normal((a, 4)), scores)


def test_criterion_05_fusion_contracts():
    with criterion(5, "fusion contracts") as c:
        import itertools
        rng = np.random.default_rng(5)
        trials = 0
        for _ in range(20):
            app, *motions = [_pred(rng) for _ in range(4)]
            assert late_fuse(app, []) is app
            for k in (1, 2, 3):
                assert np.array_equal(late_fuse(app, [app] * k).scores, app.scores)
            fused = late_fuse(app, motions)
            assert np.abs(fused.offsets - app.offsets).max() <= 1e-12
            for perm in itertools.permutations(motions):
                assert np.array_equal(late_fuse(app, list(perm)).scores, fused.scores)
            trials += 1
        c.detail = f"{trials} random stream sets: identity, replicas, appearance offsets, permutations exact"


def test_criterion_06_nms_and_matching_oracles():
    with criterion(6, "NMS/matching oracles") as c:
        for seed in range(100):
            rng = np.random.default_rng(6000 + seed)
            n = int(rng.integers(1, 30))
            xy = rng.uniform(0, 0.6, (n, 2))
            boxes = np.clip(np.concatenate([xy, xy + rng.uniform(0.02, 0.5, (n, 2))], axis=1), 0, 1)
            scores = rng.permutation(n) / n + rng.uniform(0, 1e-3, n)
            thr, top_k = float(rng.uniform(0.2, 0.7)), int(rng.integers(1, n + 2))
            assert nms_array(boxes, scores, thr, top_k).tolist() == brute_nms(boxes, scores, thr, top_k)
        cfg = AnchorConfig(((4, 4), (2, 2)), (0.2, 0.45, 0.7), ((1.0, 2.0), (1.0, 0.5)))
        grid = generate_anchors(cfg)
        for seed in range(100):
            rng = np.random.default_rng(6500 + seed)
            gts = []
            for _ in range(int(rng.integers(1, 5))):
                x, y = rng.uniform(0, 0.6, 2)
                w, h = rng.uniform(0.1, 0.4, 2)
                gts.append((int(rng.integers(0, 3)), BoundingBox(x, y, min(x + w, 1.0), min(y + h, 1.0))))
            pos_iou = float(rng.uniform(0.3, 0.6))
            ref = brute_match(grid.flat.tolist(), [(k, b.as_tuple()) for k, b in gts], pos_iou)
            assert match_targets(grid, gts, pos_iou).matched_gt.tolist() == ref
        c.detail = "100 NMS + 100 matching instances identical to brute force"


def test_criterion_07_temporal_pooling():
    with criterion(7, "temporal pooling") as c:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal((3, int(rng.integers(1, 9)), 4, 5))
            y = rng.standard_normal(x.shape)
            a, b = rng.standard_normal(2)
            px = temporal_pool(ClipTensor(x, Layout.CNHW)).values
            py = temporal_pool(ClipTensor(y, Layout.CNHW)).values
            pxy = temporal_pool(ClipTensor(a * x + b * y, Layout.CNHW)).values
            worst = max(worst, np.abs(px - x.mean(axis=1)).max(), np.abs(pxy - (a * px + b * py)).max())
        one = rng.standard_normal((3, 1, 4, 5))
        assert np.array_equal(temporal_pool(ClipTensor(one, Layout.CNHW)).values, one[:, 0])
        layers = tuple(x for _ in range(5) for x in (LayerSpec.conv(2), LayerSpec.pool()))
        cfg = inflate_config(BackboneConfig(layers, 1, (64, 64), 8, ()))
        sizes = [8] + [s[1] for s, l in zip(layer_shapes(cfg), cfg.layers) if l.kind == "pool"]
        c.detail = f"mean/linearity max error {worst:.1e} (tol 1e-12), N=1 identity, sizes {sizes}"
        assert worst <= 1e-12
        assert sizes == [8, 4, 2, 1, 1, 1]


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    cfg = Config.load()
    generate_synthetic(cfg.synth_config(), root / "ds")
    return root, cfg


def test_criterion_08_three_d_beats_two_d(synthetic):
    from multissd.cli import run_ablation
    root, cfg = synthetic
    with criterion(8, "3D RGB vs 2D RGB on the motion-ambiguity pair") as c:
        t0 = time.perf_counter()
        ds = Dataset.open(root / "ds")
        synth = cfg.synth_config()
        pair = synth.ambiguous_classes()
        n_train, n_test = len(ds.split("train")), len(ds.split("test"))
        assert n_train >= 40 and n_test >= 10 and len(pair) == 2
        results = run_ablation(root / "ds", root / "ablation", cfg, ["2dRGB", "3dRGB", "2dRGB+3dRGB"],
                               seed=int(cfg.get("train", "seed")))
        fmap = {r.recipe: float(np.mean([r.frame.ap.get(k, 0.0) for k in pair])) for r in results}
        elapsed = time.perf_counter() - t0
        c.detail = (f"{n_train} train / {n_test} test videos; frame-mAP@0.5 3dRGB {fmap['3dRGB']:.3f} (>= 0.60), "
                    f"2dRGB {fmap['2dRGB']:.3f} (<= 0.40), 2dRGB+3dRGB {fmap['2dRGB+3dRGB']:.3f} (>= 2dRGB); "
                    f"{elapsed / 60:.1f} min")
        assert fmap["3dRGB"] >= 0.60
        assert fmap["2dRGB"] <= 0.40
        assert fmap["2dRGB+3dRGB"] >= fmap["2dRGB"]
        assert elapsed <= 30 * 60


def test_criterion_09_linking(synthetic):
    root, _ = synthetic
    with criterion(9, "linking") as c:
        from test_linking import rand_box
        nontrivial = 0
        for seed in range(100):
            rng = np.random.default_rng(9000 + seed)
            params = LinkParams(overlap_weight=float(rng.uniform(0, 2)), link_iou=float(rng.uniform(0, 0.4)))
            tubes = []
            for i in range(int(rng.integers(1, 6))):
                tb = ActiveTube("v", int(rng.integers(0, 2)), i)
                for k in range(int(rng.integers(1, 4))):
                    tb.add(k, Detection(rand_box(rng), tb.class_id, float(rng.choice([0.3, 0.5, rng.random()]))))
                tubes.append(tb)
            dets = []
            for _ in range(int(rng.integers(0, 7))):
                src = tubes[int(rng.integers(len(tubes)))]
                box = rand_box(rng, src.last_box) if rng.random() < 0.7 else rand_box(rng)
                dets.append(Detection(box, int(rng.integers(0, 2)), float(rng.random())))
            ref = exhaustive_link([(tb.tube_score, tb.index, tb.class_id, tb.last_box.as_tuple()) for tb in tubes],
                                  [(d.class_id, d.box.as_tuple(), d.score) for d in dets],
                                  params.overlap_weight, params.link_iou)
            before = [len(tb.frames) for tb in tubes]
            link_step(tubes, dets, 10, params, "v")
            got = {}
            for pos, tb in enumerate(tubes):
                if len(tb.frames) > before[pos]:
                    got[pos] = next(j for j, d in enumerate(dets) if d.box == tb.boxes[-1]
                                    and d.score == tb.scores[-1] and j not in got.values())
            assert got == ref
            nontrivial += bool(ref)
        ds = Dataset.open(root / "ds")
        recs = ds.split("test")
        gt = gt_by_frame(recs)
        perfect = {k: [Detection(b, cls, 1.0) for cls, b in inst] for k, inst in gt.items()}
        tubes = link_all(perfect, {r.video_id: r.num_frames for r in recs}, LinkParams())
        for t in tubes:
            check_tube(t)
        (rep,) = video_ap(tubes, [t for r in recs for t in r.gt_tubes()], alphas=(0.5,))
        c.detail = (f"100 assignments equal exhaustive search ({nontrivial} non-empty); {len(tubes)} tubes valid; "
                    f"perfect detections video-mAP@0.5 = {rep.mean_ap:.4f}")
        assert rep.mean_ap == 1.0


def _train_once(seed):
    cfg = tiny_config(2, 32, 2, 4)
    m = StreamModel(StreamKind.parse("3dRGB"), cfg, seed=seed)
    rng = np.random.default_rng(11)
    xs = rng.random((8, 3, 2, 32, 32)).astype(np.float32)
    data = TrainingSet.build(m.grid, xs, [[(i % 2, BoundingBox(0.2, 0.25, 0.6, 0.7))] for i in range(8)])
    train(m, data, OptimizerConfig(optimizer="adam", lr=1e-3, epochs=3, batch_size=4, seed=seed))
    return m


def test_criterion_10_reproducibility(tmp_path):
    with criterion(10, "reproducibility") as c:
        torch.set_num_threads(1)
        a = save_model(_train_once(4), tmp_path / "ckpt_a")
        b = save_model(_train_once(4), tmp_path / "ckpt_b")
        assert tree_digest(a) == tree_digest(b)
        loaded = load_model(a)
        save_model(loaded, tmp_path / "ckpt_c")
        assert tree_digest(tmp_path / "ckpt_c") == tree_digest(a)

        small = SynthConfig(frames_per_video=16, videos_per_class=2, test_videos_per_class=1, action_length=(5, 8))
        generate_synthetic(small, tmp_path / "d1")
        generate_synthetic(small, tmp_path / "d2")
        assert tree_digest(tmp_path / "d1") == tree_digest(tmp_path / "d2")

        recs = load_annotations(tmp_path / "d1" / "annotations.jsonl")
        write_annotations(recs, tmp_path / "d1" / "again.jsonl", relative_to=tmp_path / "d1")
        assert (tmp_path / "d1" / "again.jsonl").read_bytes() == (tmp_path / "d1" / "annotations.jsonl").read_bytes()

        rng = np.random.default_rng(10)
        dets = {}
        for i in range(2000):
            x, y = rng.uniform(0, 0.5, 2)
            dets.setdefault((f"v{i % 5}", i % 40), []).append(
                Detection(BoundingBox(x, y, x + rng.uniform(0.01, 0.5), y + rng.uniform(0.01, 0.5)),
                          int(rng.integers(0, 3)), float(rng.random())))
        write_detections(dets, tmp_path / "d.jsonl")
        back = read_detections(tmp_path / "d.jsonl")
        assert all([(d.box, d.class_id, d.score) for d in dets[k]] == [(d.box, d.class_id, d.score) for d in back[k]]
                   for k in dets)
        tubes = [ActionTube.build("v", 1, [TubeElement(t, BoundingBox(0.1, 0.2, 0.3 + t / 100, 0.5), rng.random())
                                           for t in range(3, 12)])]
        write_tubes(tubes, tmp_path / "t.jsonl")
        assert read_tubes(tmp_path / "t.jsonl") == tubes

        prov = SyntheticFlowProvider(tmp_path / "d1")
        rec = recs[0]
        write_flow_files(prov, rec.video_id, rec.num_frames, tmp_path / "flow")
        files = FileFlowProvider(tmp_path / "flow")
        assert all(np.array_equal(files.raw_flow(rec.video_id, t), prov.raw_flow(rec.video_id, t))
                   for t in range(1, rec.num_frames))
        c.detail = ("fixed-seed checkpoints bitwise identical; dataset byte-deterministic; annotations, "
                    "detections, tubes, checkpoints and flow files round-trip losslessly")
