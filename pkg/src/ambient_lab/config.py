"""Experiment configuration: a typed, nested JSON document.

Only the output directory may be overridden from the environment
(``AMBIENT_LAB_OUT``).  The digest covers the sections that define what a
trained model *means* (data, corruption, schedule, model) and is stable
under key reordering.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict

from .corruption import CorruptionProcess
from .errors import ConfigurationError
from .oracle import distribution_from_dict
from .schedule import NoiseSchedule

DIGEST_SECTIONS = ("data", "corruption", "schedule", "model")

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {"family": "gmm", "canonical": True, "num_train": 20000},
    "corruption": {"kind": "random_inpainting", "p": 0.5, "delta": 0.1,
                   "block_size": 0, "image_shape": None, "m": 0},
    "schedule": {"sigma_min": 0.01, "sigma_max": 5.0, "num_steps": 64},
    "model": {"hidden": [256, 256, 256], "sigma_data": 0.5},
    "optimizer": {"lr": 1e-3, "batch_size": 128, "steps": 20000, "clip_max_norm": 1.0,
                  "lr_schedule": "cosine", "lr_floor": 0.01,
                  "log_every": 500, "checkpoint_every": 0},
    "training": {"objective": "ambient", "eval_sigmas": [0.05, 0.2, 1.0],
                 "eval_size": 1000, "eval_seed": 12345},
    "sampler": {"kind": "fixed_mask", "restorer": "model", "guidance_weight": 5e-4,
                "num_guidance_masks": 4, "num_samples": 5000},
    "restore": {"mask_p": 0.5, "sigma": 0.05, "num_cases": 1000, "peak": 2.0},
    "eval": {"num_projections": 128},
    "seeds": {"data": 0, "train": 0, "sample": 0},
    "output": {"dir": "runs/default"},
}

_FREE_FORM = {"data"}  # distribution parameters vary by family


class ExperimentConfig:
    """Full run specification; sections are plain dicts."""

    def __init__(self, sections: Dict[str, Dict[str, Any]] | None = None):
        merged = copy.deepcopy(DEFAULTS)
        for name, body in (sections or {}).items():
            if name not in DEFAULTS:
                raise ConfigurationError(f"unknown config section {name!r}")
            if not isinstance(body, dict):
                raise ConfigurationError(f"section {name!r} must be a mapping")
            for key, value in body.items():
                if name not in _FREE_FORM and key not in DEFAULTS[name]:
                    raise ConfigurationError(f"unknown key {name}.{key}")
                merged[name][key] = value
        self.sections = merged
        self.validate()

    def __getitem__(self, name):
        return self.sections[name]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.sections == other.sections

    # -- text form --------------------------------------------------------

    def to_text(self) -> str:
        return json.dumps(self.sections, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a mapping of sections")
        return cls(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        cfg = cls.from_text(Path(path).read_text())
        env_out = os.environ.get("AMBIENT_LAB_OUT")
        if env_out:
            cfg.sections["output"]["dir"] = env_out
        return cfg

    def save(self, path):
        Path(path).write_text(self.to_text())

    def digest(self) -> str:
        core = {k: self.sections[k] for k in DIGEST_SECTIONS}
        blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def override(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with ``section.key`` replaced."""
        name, _, key = dotted.partition(".")
        sections = copy.deepcopy(self.sections)
        if name not in sections or (name not in _FREE_FORM and key not in sections[name]):
            raise ConfigurationError(f"unknown config key {dotted!r}")
        sections[name][key] = value
        return ExperimentConfig(sections)

    # -- builders ---------------------------------------------------------

    def validate(self):
        try:
            self.process()
            self.schedule()
            self.distribution()
            self.train_settings()
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid config: {exc}") from None
        if self["training"]["objective"] not in ("ambient", "naive", "clean"):
            raise ConfigurationError("training.objective must be ambient, naive or clean")
        if self["sampler"]["kind"] not in ("fixed_mask", "reconstruction_guidance"):
            raise ConfigurationError("sampler.kind must be fixed_mask or reconstruction_guidance")
        if self["sampler"]["restorer"] not in ("model", "oracle"):
            raise ConfigurationError("sampler.restorer must be model or oracle")

    def distribution(self):
        return distribution_from_dict(self["data"])

    def process(self) -> CorruptionProcess:
        c = self["corruption"]
        n = self.distribution().n
        shape = tuple(c["image_shape"]) if c.get("image_shape") else None
        return CorruptionProcess(kind=c["kind"], n=n, p=float(c["p"]), delta=c["delta"],
                                 block_size=int(c["block_size"]), image_shape=shape, m=int(c["m"]))

    def schedule(self) -> NoiseSchedule:
        s = self["schedule"]
        return NoiseSchedule(float(s["sigma_min"]), float(s["sigma_max"]), int(s["num_steps"]))

    def train_settings(self):
        from .training import TrainSettings
        o, t = self["optimizer"], self["training"]
        return TrainSettings(objective=t["objective"], steps=int(o["steps"]),
                             batch_size=int(o["batch_size"]), lr=float(o["lr"]),
                             clip_max_norm=float(o["clip_max_norm"]),
                             lr_schedule=o["lr_schedule"], lr_floor=float(o["lr_floor"]),
                             log_every=int(o["log_every"]),
                             checkpoint_every=int(o["checkpoint_every"]),
                             seed=int(self["seeds"]["train"]),
                             hidden=tuple(self["model"]["hidden"]),
                             sigma_data=float(self["model"]["sigma_data"]))
