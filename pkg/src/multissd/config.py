"""Flat INI configuration with one section per module.

Unknown sections or keys are schema violations. List-valued keys are
comma-separated; class definitions are ``name:shape:motion`` triples.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from pathlib import Path
from typing import Optional

from .core import ValidationError
from .data import ClassSpec, SynthConfig
from .detector import DetectorConfig, OptimizerConfig, ssd300_config, tiny_config
from .linking import LinkParams
from .pipeline import DetectParams

ENV_VAR = "MULTISSD_CONFIG"

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "classes": "move-left:square:translate-left, move-right:square:translate-right",
        "frames_per_video": "32",
        "videos_per_class": "20",
        "test_videos_per_class": "5",
        "image_size": "64",
        "noise": "0.03",
        "speed": "2.0",
        "object_size": "12, 16",
        "action_length": "8, 12",
        "flow_bound": "8.0",
        "seed": "0",
        "flow_dir": "",
    },
    "model": {
        "preset": "tiny",
        "width": "16",
        "clip_length": "8",
        "inflation_mode": "repeat_scaled",
    },
    "train": {
        "optimizer": "adam",
        "lr": "0.001",
        "momentum": "0.9",
        "weight_decay": "0.0005",
        "epochs": "6",
        "batch_size": "16",
        "neg_pos_ratio": "3",
        "pos_iou": "0.5",
        "grad_clip": "10.0",
        "seed": "0",
    },
    "detect": {
        "conf_threshold": "0.01",
        "nms_iou": "0.45",
        "top_k": "200",
    },
    "link": {
        "overlap_weight": "1.0",
        "link_iou": "0.1",
        "max_misses": "5",
        "min_length": "8",
        "min_score": "0.1",  # keeps low-confidence idle-frame boxes out of tubes
    },
    "eval": {
        "frame_alpha": "0.5",
        "video_alphas": "0.2, 0.5, 0.5:0.95",
        "eleven_point": "false",
    },
    "ablate": {
        "combinations": ("2dRGB, 2dOF, 3dRGB, 3dOF, "
                         "2dRGB+2dOF, 3dRGB+2dOF, 2dRGB+3dRGB, 3dRGB+3dOF, 2dRGB+3dOF, "
                         "2dRGB+3dRGB+2dOF, 2dRGB+3dRGB+3dOF, 3dRGB+3dOF+2dRGB+2dOF, 2dRGB+2dOF+3dRGB+3dOF"),
        "split": "test",
        "workers": "1",
    },
    "inflate_check": {
        "trials": "20",
        "seed": "0",
    },
}


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


class Config:
    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "Config":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_dict(DEFAULTS)
        path = path or os.environ.get(ENV_VAR)
        if path:
            user = configparser.ConfigParser(interpolation=None)
            try:
                with open(path) as fh:
                    user.read_file(fh)
            except FileNotFoundError:
                raise ValidationError(f"config file not found: {path}") from None
            except configparser.Error as e:
                raise ValidationError(f"cannot parse config {path}: {e}") from None
            for section in user.sections():
                if section not in DEFAULTS:
                    raise ValidationError(f"{path}: unknown config section [{section}]")
                for key, value in user.items(section, raw=True):
                    if key not in DEFAULTS[section]:
                        raise ValidationError(f"{path}: unknown key {key!r} in [{section}]")
                    parser.set(section, key, value)
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ValidationError(f"unknown config override {dotted!r}")
            parser.set(section, key, str(value))
        cfg = cls(parser)
        cfg.validate()
        return cfg

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def _num(self, section: str, key: str, kind=float):
        raw = self.get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ValidationError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None

    def _bool(self, section: str, key: str) -> bool:
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ValidationError(f"[{section}] {key} must be a boolean") from None

    def validate(self) -> None:
        self.synth_config()
        self.optimizer_config()
        self.detect_params()
        self.link_params()
        self.combinations()
        if self.get("model", "preset") not in ("tiny", "ssd300"):
            raise ValidationError(f"[model] preset must be tiny or ssd300, got {self.get('model', 'preset')!r}")

    def text(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def synth_config(self, seed: Optional[int] = None) -> SynthConfig:
        classes = []
        for item in self.get("data", "classes").split(","):
            parts = [p.strip() for p in item.split(":")]
            if len(parts) != 3:
                raise ValidationError(f"[data] classes entry {item.strip()!r} must be name:shape:motion")
            classes.append(ClassSpec(*parts))
        lo, hi = (int(v) for v in _floats(self.get("data", "action_length")))
        return SynthConfig(
            classes=tuple(classes),
            frames_per_video=self._num("data", "frames_per_video", int),
            videos_per_class=self._num("data", "videos_per_class", int),
            test_videos_per_class=self._num("data", "test_videos_per_class", int),
            image_size=self._num("data", "image_size", int),
            noise=self._num("data", "noise"),
            seed=self._num("data", "seed", int) if seed is None else seed,
            speed=self._num("data", "speed"),
            object_size=_floats(self.get("data", "object_size")),
            action_length=(lo, hi),
            flow_bound=self._num("data", "flow_bound"),
        )

    def detector_config(self, num_classes: int, image_size: Optional[int] = None) -> DetectorConfig:
        preset = self.get("model", "preset")
        clip = self._num("model", "clip_length", int)
        if preset == "ssd300":
            cfg = ssd300_config(num_classes, clip)
        else:
            size = image_size or self._num("data", "image_size", int)
            cfg = tiny_config(num_classes, size, clip, self._num("model", "width", int))
        from dataclasses import replace
        return replace(cfg, inflation_mode=self.get("model", "inflation_mode"))

    def optimizer_config(self, seed: Optional[int] = None) -> OptimizerConfig:
        s = "train"
        return OptimizerConfig(
            optimizer=self.get(s, "optimizer"),
            lr=self._num(s, "lr"),
            momentum=self._num(s, "momentum"),
            weight_decay=self._num(s, "weight_decay"),
            epochs=self._num(s, "epochs", int),
            batch_size=self._num(s, "batch_size", int),
            seed=self._num(s, "seed", int) if seed is None else seed,
            neg_pos_ratio=self._num(s, "neg_pos_ratio"),
            pos_iou=self._num(s, "pos_iou"),
            grad_clip=self._num(s, "grad_clip"),
        )

    def detect_params(self) -> DetectParams:
        p = DetectParams(self._num("detect", "conf_threshold"), self._num("detect", "nms_iou"),
                         self._num("detect", "top_k", int))
        if not (0 < p.conf_threshold <= 1 and 0 < p.nms_iou < 1):
            raise ValidationError("[detect] thresholds must lie in (0,1)")
        return p

    def link_params(self) -> LinkParams:
        return LinkParams(self._num("link", "overlap_weight"), self._num("link", "link_iou"),
                          self._num("link", "max_misses", int), self._num("link", "min_length", int),
                          self._num("link", "min_score"))

    def frame_alpha(self) -> float:
        return self._num("eval", "frame_alpha")

    def video_alphas(self) -> list:
        out = []
        for item in self.get("eval", "video_alphas").split(","):
            item = item.strip()
            out.append(item if ":" in item else float(item))
        return out

    def eleven_point(self) -> bool:
        return self._bool("eval", "eleven_point")

    def combinations(self) -> list[str]:
        from .streams import Recipe
        combos = [c.strip() for c in self.get("ablate", "combinations").split(",") if c.strip()]
        for c in combos:
            Recipe.parse(c)
        return combos


def write_default_config(path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    with open(Path(path), "w") as fh:
        parser.write(fh)
