"""``multissd`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Model hyperparameters come from the INI config
(``--config`` or ``$MULTISSD_CONFIG``); flags carry only paths, seeds and
stream combinations. ``--set section.key=value`` overrides single entries.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import report
from .backbone import ConvWeights, inflation_error, init_weights, random_config
from .checkpoint import load_model, save_model
from .config import Config
from .core import DataError, Modality, NumericalError, StreamKind, ValidationError
from .data import (Dataset, generate_synthetic, gt_by_frame, load_annotations, read_detections,
                   read_tubes, write_detections, write_tubes)
from .evaluation import frame_ap, video_ap
from .linking import link_all
from .pipeline import (ComboResult, evaluate_detections, fused_detections, load_videos,
                       stream_predictions, train_stream)
from .streams import Recipe

log = logging.getLogger("multissd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version
    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"multissd": pkg, "python": platform.python_version(),
            "numpy": np.__version__, "torch": torch.__version__}


def write_manifest(path: Path, args, cfg: Config, outputs: Sequence[str], extra: Optional[dict] = None) -> Path:
    """Run manifest: enough to reproduce a report (config text and hash, seed, versions)."""
    m = {"command": args.command, "argv": list(args.argv), "seed": args.seed,
         "config_hash": cfg.digest(), "config": cfg.text(), "versions": _versions(),
         "outputs": [str(o) for o in outputs]}
    if extra:
        m.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
    return path


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _seed(args, cfg: Config) -> int:
    return args.seed if args.seed is not None else int(cfg.get("train", "seed"))


def _records(args, dataset: Optional[Dataset] = None):
    if getattr(args, "annotations", None):
        return load_annotations(args.annotations)
    if dataset is None:
        dataset = Dataset.open(args.data)
    return dataset.split(args.split)


def _classes(records) -> list[int]:
    return sorted({c for r in records for a in r.annotations for c, _ in a.instances})


def _print_report(rep, prefix: str = "") -> None:
    level = "frame" if rep.level == "frame" else "video"
    print(f"{prefix}{level}-mAP@{rep.label}\t{rep.mean_ap:.4f}")
    for c in sorted(rep.ap):
        print(f"{prefix}  class {c + 1}\tAP {rep.ap[c]:.4f}\tgt {rep.num_gt.get(c, 0)}"
              f"\tdets {rep.num_detections.get(c, 0)}")


# ---------------------------------------------------------------- commands

def cmd_synth_data(args, cfg: Config) -> int:
    out = Path(args.out)
    synth = cfg.synth_config(seed=args.seed)
    records = generate_synthetic(synth, out)
    print(f"wrote {len(records)} videos to {out}")
    write_manifest(out / "run_manifest.json", args, cfg, [out], {"synth": synth.to_dict()})
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    kind = StreamKind.parse(args.stream)
    dataset = Dataset.open(args.data)
    records = dataset.split(args.split)
    det_cfg = cfg.detector_config(len(dataset.class_names), records[0].width if records else None)
    seed = _seed(args, cfg)
    videos = load_videos(dataset, records, kind.modality is Modality.FLOW, cfg.get("data", "flow_dir"))
    history: list = []
    model = train_stream(kind, det_cfg, videos, cfg.optimizer_config(seed), seed, history)
    out = Path(args.out)
    save_model(model, out, {"loss_history": history, "seed": seed})
    print(f"trained {kind.name}: final loss {history[-1] if history else float('nan'):.4f}")
    write_manifest(out / "run_manifest.json", args, cfg, [out], {"loss_history": history})
    return EXIT_OK


def _detect(args, cfg: Config, checkpoints: Sequence[str]) -> int:
    models = [load_model(p) for p in checkpoints]
    recipe = Recipe.parse("+".join(m.kind.name for m in models))
    if args.combination and str(Recipe.parse(args.combination)) != str(recipe):
        raise ValidationError(f"checkpoints give {recipe}, not {args.combination}")
    for m in models[1:]:
        if m.fingerprint != models[0].fingerprint:
            raise ValidationError(f"{m.kind.name} anchor grid differs from {models[0].kind.name}")
    dataset = Dataset.open(args.data)
    records = dataset.split(args.split)
    need_flow = any(k.modality is Modality.FLOW for k in recipe.streams)
    videos = load_videos(dataset, records, need_flow, cfg.get("data", "flow_dir"))
    preds = {m.kind: stream_predictions(m, videos) for m in models}
    dets = fused_detections(preds, recipe, models[0].grid, cfg.detect_params())
    out = Path(args.out)
    write_detections(dets, out)
    print(f"{recipe}: {sum(len(d) for d in dets.values())} detections on {len(dets)} frames -> {out}")
    write_manifest(_manifest_path(out), args, cfg, [out], {"combination": str(recipe)})
    return EXIT_OK


def cmd_detect(args, cfg: Config) -> int:
    return _detect(args, cfg, [args.checkpoint])


def cmd_fuse_detect(args, cfg: Config) -> int:
    return _detect(args, cfg, args.checkpoint)


def cmd_link(args, cfg: Config) -> int:
    records = _records(args)
    dets = read_detections(args.detections)
    tubes = link_all(dets, {r.video_id: r.num_frames for r in records}, cfg.link_params())
    out = Path(args.out)
    write_tubes(tubes, out)
    print(f"linked {len(tubes)} tubes -> {out}")
    write_manifest(_manifest_path(out), args, cfg, [out])
    return EXIT_OK


def cmd_eval_frames(args, cfg: Config) -> int:
    records = _records(args)
    dets = read_detections(args.detections)
    rep = frame_ap(dets, gt_by_frame(records), cfg.frame_alpha(), cfg.eleven_point(), _classes(records))
    _print_report(rep)
    return EXIT_OK


def cmd_eval_videos(args, cfg: Config) -> int:
    records = _records(args)
    tubes = read_tubes(args.tubes)
    gt = [t for r in records for t in r.gt_tubes()]
    for rep in video_ap(tubes, gt, cfg.video_alphas(), cfg.eleven_point(), _classes(records)):
        _print_report(rep)
    return EXIT_OK


def _train_worker(job: tuple) -> str:
    """Train one stream in a worker process and return its checkpoint path."""
    kind_name, data_root, cfg_text, seed, out = job
    import configparser
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(cfg_text)
    cfg = Config(parser)
    torch.set_num_threads(1)
    kind = StreamKind.parse(kind_name)
    dataset = Dataset.open(data_root)
    records = dataset.split("train")
    det_cfg = cfg.detector_config(len(dataset.class_names), records[0].width)
    videos = load_videos(dataset, records, kind.modality is Modality.FLOW, cfg.get("data", "flow_dir"))
    history: list = []
    model = train_stream(kind, det_cfg, videos, cfg.optimizer_config(seed), seed, history)
    save_model(model, out, {"loss_history": history, "seed": seed})
    return out


def run_ablation(data_root, out_dir, cfg: Config, combinations: Sequence[str], seed: int,
                 workers: int = 1, reuse: bool = False, split: str = "test") -> list[ComboResult]:
    """Train every stream a combination needs once, then fuse and evaluate each combination."""
    out_dir = Path(out_dir)
    recipes = [Recipe.parse(c) for c in combinations]
    kinds = sorted({k for r in recipes for k in r.streams}, key=lambda k: k.name)
    dataset = Dataset.open(data_root)
    jobs, paths = [], {}
    for k in kinds:
        path = out_dir / "models" / k.name
        paths[k] = path
        if reuse and (path / "manifest.json").exists():
            continue
        jobs.append((k.name, str(data_root), cfg.text(), seed, str(path)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_train_worker, jobs))
    else:
        for job in jobs:
            log.info("training %s", job[0])
            _train_worker(job)
    models = {k: load_model(paths[k]) for k in kinds}
    records = dataset.split(split)
    need_flow = any(k.modality is Modality.FLOW for k in kinds)
    videos = load_videos(dataset, records, need_flow, cfg.get("data", "flow_dir"))
    preds = {k: stream_predictions(m, videos) for k, m in models.items()}
    grid = next(iter(models.values())).grid
    classes = _classes(records)
    results = []
    for r in recipes:
        dets = fused_detections(preds, r, grid, cfg.detect_params())
        frame, video, _ = evaluate_detections(dets, records, cfg.link_params(), cfg.frame_alpha(),
                                              cfg.video_alphas(), classes)
        results.append(ComboResult(str(r), frame, video))
    return results


def cmd_ablate(args, cfg: Config) -> int:
    combos = [c.strip() for c in args.combinations.split(",")] if args.combinations else cfg.combinations()
    workers = args.workers if args.workers is not None else int(cfg.get("ablate", "workers"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args, cfg)
    results = run_ablation(args.data, out, cfg, combos, seed, workers, args.reuse,
                           cfg.get("ablate", "split"))
    names = Dataset.open(args.data).class_names
    table = report.write_table(results, out / "ablation.tsv", names)
    figs = [report.plot_ablation(results, out / "ablation.png"),
            report.plot_class_delta(results, names, out / "class_delta.png")]
    print(table.read_text(), end="")
    write_manifest(out / "run_manifest.json", args, cfg, [table, *figs], {"combinations": combos})
    return EXIT_OK


def cmd_inflate_check(args, cfg: Config) -> int:
    trials = args.trials if args.trials is not None else int(cfg.get("inflate_check", "trials"))
    seed = args.seed if args.seed is not None else int(cfg.get("inflate_check", "seed"))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        c2d = random_config(rng)
        w = init_weights(c2d, torch.Generator().manual_seed(int(rng.integers(2**31))))
        w = [ConvWeights(x.weight, rng.standard_normal(x.bias.shape).astype(np.float32)) for x in w]
        frame = rng.standard_normal((c2d.in_channels,) + tuple(c2d.input_size))
        worst = max(worst, inflation_error(c2d, w, frame))
    print(f"inflate-check: {trials} configs, max relative error {worst:.3e}")
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps({"trials": trials, "max_relative_error": worst}) + "\n")
        write_manifest(_manifest_path(out), args, cfg, [out])
    if not worst < args.tolerance:
        raise NumericalError(f"inflation error {worst:.3e} exceeds {args.tolerance:g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file (default: $MULTISSD_CONFIG or built-in)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry")
    common.add_argument("--seed", type=int, help="seed for data generation or training")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="multissd", description="Multi-stream SSD action detection at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    def gt_args(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--data", help="dataset directory")
        g.add_argument("--annotations", help="annotation file (all videos it lists)")
        sp.add_argument("--split", default="test")

    sp = add("synth-data", cmd_synth_data, "generate the synthetic motion dataset")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train one stream")
    sp.add_argument("--data", required=True)
    sp.add_argument("--stream", required=True, help="2dRGB, 2dOF, 3dRGB or 3dOF")
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True, help="checkpoint directory")

    for name, fn, many in (("detect", cmd_detect, False), ("fuse-detect", cmd_fuse_detect, True)):
        sp = add(name, fn, "per-frame detections" + (" from fused streams" if many else ""))
        sp.add_argument("--data", required=True)
        if many:
            sp.add_argument("--checkpoint", action="append", required=True,
                            help="stream checkpoint; repeat, appearance stream first")
        else:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--combination", help="expected combination, e.g. 2dRGB+3dOF")
        sp.add_argument("--split", default="test")
        sp.add_argument("--out", required=True)

    sp = add("link", cmd_link, "link detections into tubes")
    gt_args(sp)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval-frames", cmd_eval_frames, "frame-level mAP")
    gt_args(sp)
    sp.add_argument("--detections", required=True)

    sp = add("eval-videos", cmd_eval_videos, "video-level mAP")
    gt_args(sp)
    sp.add_argument("--tubes", required=True)

    sp = add("ablate", cmd_ablate, "train the needed streams, then evaluate each combination")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--combinations", help="comma-separated list overriding [ablate] combinations")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--reuse", action="store_true", help="reuse checkpoints already in OUT/models")

    sp = add("inflate-check", cmd_inflate_check, "check 2D/3D inflation equivalence")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = Config.load(args.config, _overrides(args.set))
        return args.func(args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
