"""Run configuration: YAML key/value files, presets, config hashing.

A config file is a plain YAML mapping. It may name a ``preset`` whose values
it then overrides key by key. The config hash covers every parameter that can
affect results (paths are excluded, so the same experiment in two directories
hashes identically) and is stamped into every artifact for staleness checks.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .artifacts import canonical_json
from .attacks import AttackConfig
from .training import TrainConfig

ENV_STAGE_DIR = "LATENTGUARD_STAGE_DIR"

_MNIST_ADV = {"method": "pgd", "epsilon": 0.3, "step_size": 0.075,
              "iterations": 10, "restarts": 1, "init_noise_sigma": 0.15}

PRESETS: dict[str, dict] = {
    # Desk-scale pipeline: a dataset subset sized so every stage finishes on a
    # multicore CPU within a couple of hours while preserving every mechanism.
    "desk": {
        "dataset": "mnist",
        "model": {"family": "mnist", "num_classes": 10},
        "train": {"epochs": 5, "batch_size": 128, "lr": 1e-3, "n_train": 10000,
                  "adv_mode": "pgd", "adv": dict(_MNIST_ADV)},
        "encoders": {"layers": [1, 2, 3], "latent_dim": 10, "hidden": 128,
                     "epochs": 5, "batch_size": 64, "lr": 1e-3, "margin": 1.0,
                     "adv": dict(_MNIST_ADV)},
        "index": {"batch_size": 256},
        "calibrate": {"k": 10, "percentile": 0.98, "mode": "aggregate",
                      "calibration_size": 750},
        "evaluate": {"n_eval": 2000},
        "attacks": [
            {"name": "fgsm", "method": "fgsm", "epsilon": 0.3},
            {"name": "pgd", "method": "pgd", "epsilon": 0.3, "step_size": 0.01,
             "iterations": 100, "restarts": 5, "init_noise_sigma": 0.15},
            {"name": "cw", "method": "cw", "iterations": 500, "step_size": 0.01,
             "cw_weight": 1.0},
            {"name": "adaptive", "method": "adaptive", "epsilon": 0.3,
             "step_size": 0.01, "iterations": 100, "restarts": 1,
             "init_noise_sigma": 0.15, "alpha1": 0.01,
             "alpha2_values": [0, 1, 5, 10, 15, 25], "n_samples": 1000},
        ],
    },
    # Same pipeline shrunk for a single-core CPU budget (roughly an hour).
    "mini": {
        "dataset": "mnist",
        "model": {"family": "mnist", "num_classes": 10},
        "train": {"epochs": 6, "batch_size": 128, "lr": 1e-3, "n_train": 4000,
                  "adv_mode": "pgd", "adv": dict(_MNIST_ADV)},
        "encoders": {"layers": [1, 2, 3], "latent_dim": 10, "hidden": 128,
                     "epochs": 3, "batch_size": 64, "lr": 1e-3, "margin": 1.0,
                     "adv": dict(_MNIST_ADV)},
        "index": {"batch_size": 256},
        "calibrate": {"k": 10, "percentile": 0.98, "mode": "aggregate",
                      "calibration_size": 750},
        "evaluate": {"n_eval": 1000},
        "attacks": [
            {"name": "fgsm", "method": "fgsm", "epsilon": 0.3},
            {"name": "pgd", "method": "pgd", "epsilon": 0.3, "step_size": 0.01,
             "iterations": 100, "restarts": 5, "init_noise_sigma": 0.15},
            {"name": "cw", "method": "cw", "iterations": 500, "step_size": 0.01,
             "cw_weight": 1.0},
            {"name": "adaptive", "method": "adaptive", "epsilon": 0.3,
             "step_size": 0.01, "iterations": 60, "restarts": 1,
             "init_noise_sigma": 0.15, "alpha1": 0.01,
             "alpha2_values": [0, 1, 5, 10, 15, 25], "n_samples": 300},
        ],
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    dataset: str
    data_dir: str
    stage_dir: str
    seed: int = 0
    model: dict = field(default_factory=lambda: {"family": "mnist", "num_classes": 10})
    train: dict = field(default_factory=dict)
    encoders: dict = field(default_factory=dict)
    index: dict = field(default_factory=dict)
    calibrate: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        hashed = {
            "dataset": self.dataset, "seed": self.seed, "model": self.model,
            "train": self.train, "encoders": self.encoders, "index": self.index,
            "calibrate": self.calibrate, "evaluate": self.evaluate,
            "attacks": self.attacks,
        }
        return hashlib.sha256(canonical_json(hashed).encode()).hexdigest()[:16]

    def attack_entries(self, name: str | None = None) -> list[dict]:
        entries = self.attacks
        if name is not None:
            entries = [a for a in entries if a.get("name") == name]
            if not entries:
                raise KeyError(f"no attack named {name!r} in config")
        return entries

    def attack_config(self, entry: dict) -> AttackConfig:
        keys = ("method", "epsilon", "step_size", "iterations", "restarts",
                "cw_weight", "alpha1", "alpha2", "init_noise_sigma")
        return AttackConfig(**{k: entry[k] for k in keys if k in entry}).validate()

    def train_config(self) -> TrainConfig:
        t = self.train
        adv = AttackConfig(**t["adv"]).validate() if t.get("adv") else None
        return TrainConfig(
            epochs=t.get("epochs", 5), batch_size=t.get("batch_size", 128),
            lr=t.get("lr", 1e-3), adv=adv, adv_mode=t.get("adv_mode", "pgd"),
            fgsm_mix_weight=t.get("fgsm_mix_weight", 0.5),
        ).validate()

    def encoder_train_config(self) -> TrainConfig:
        e = self.encoders
        adv = AttackConfig(**e["adv"]).validate() if e.get("adv") else None
        return TrainConfig(
            epochs=e.get("epochs", 5), batch_size=e.get("batch_size", 64),
            lr=e.get("lr", 1e-3), adv=adv,
            adv_mode=e.get("adv_mode", "pgd" if adv else "none"),
            margin=e.get("margin", 1.0),
            pairs_per_epoch=e.get("pairs_per_epoch"),
        ).validate()


def make_config(raw: dict, *, seed: int | None = None, dataset: str | None = None,
                stage_dir: str | None = None) -> RunConfig:
    """Resolve a raw mapping (plus preset and overrides) into a RunConfig."""
    raw = dict(raw)
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        raw = _deep_merge(PRESETS[preset], raw)
    if dataset is not None:
        raw["dataset"] = dataset
    if seed is not None:
        raw["seed"] = seed
    if stage_dir is not None:
        raw["stage_dir"] = stage_dir
    env_dir = os.environ.get(ENV_STAGE_DIR)
    if env_dir and stage_dir is None:
        raw["stage_dir"] = env_dir
    missing = [k for k in ("dataset", "stage_dir") if not raw.get(k)]
    if missing:
        raise ValueError(f"config is missing required keys: {missing}")
    raw.setdefault("data_dir", str(Path(raw["stage_dir"]) / "data"))
    fields = ("dataset", "data_dir", "stage_dir", "seed", "model", "train",
              "encoders", "index", "calibrate", "evaluate", "attacks")
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    return RunConfig(**{k: raw[k] for k in fields if k in raw})


def load_config(path: str | Path, *, seed: int | None = None,
                dataset: str | None = None, stage_dir: str | None = None) -> RunConfig:
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return make_config(raw, seed=seed, dataset=dataset, stage_dir=stage_dir)


def preset_config(name: str, *, stage_dir: str, seed: int = 0,
                  overrides: dict | None = None) -> RunConfig:
    raw = {"preset": name, "stage_dir": stage_dir}
    if overrides:
        raw = _deep_merge(raw, overrides)
        raw["preset"] = name
    return make_config(raw, seed=seed)
