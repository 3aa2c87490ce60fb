"""Experiment configuration: one JSON document plus ``--set`` overrides.

Unknown keys are rejected so typos fail loudly before any compute happens.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .protocol import ALGORITHMS, WEIGHTINGS, FedConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/default",
    "diagnostic_cadence": 1,
    "dataset": {
        "kind": "synthetic",  # "synthetic" or "csv"
        "csv_path": None,
        "manifest_path": None,
        "domains": 4,
        "classes": 7,
        "samples_per_domain": 1200,
        "input_dim": 16,
        "domain_shift": 2.0,
        "class_separation": 1.25,
        "noise_scale": 1.0,
    },
    "bench": {
        "participating_per_domain": 20,
        "new_per_domain": 10,
        "beta": 0.3,
        "fractions": [0.6, 0.2, 0.05, 0.15],
    },
    "model": {
        "hidden": [32],
        "activation": "relu",
        "blocks": "per_layer",  # "per_layer" or "single"
    },
    "fed": {
        "rounds": 40,
        "participation_fraction": 1.0,
        "local_epochs": 5,
        "batch_size": 16,
        "lr_bases": 0.05,
        "lr_logits": 0.1,
        "weight_decay": 1e-4,
        "momentum": 0.9,
        "temperature": 0.1,
        "num_bases": 4,
        "use_major": True,
        "warm_start_fraction": 0.3,
        "aggregation_weighting": None,
        "algorithm": "fedbasis",
    },
    "personalization": {
        "epochs": 20,
        "classifier_mode": "trained",
        "lr_logits": 1.0,
        "lr_grid": [0.005, 0.01, 0.05],
        "local_size": "M",
        "local_size_fractions": {"S": 0.5, "M": 1.0, "L": 1.0},
        "max_train_samples": None,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and not key.endswith("_fractions"):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings need no quoting on the command line


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply repeatable ``--set dotted.key=value`` flags."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        target = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(target.get(part), dict):
                raise ConfigError(f"unknown config key {key!r}")
            target = target[part]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[parts[-1]] = _parse_override_value(raw)
    return doc


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated view over the merged configuration document."""

    doc: dict

    @classmethod
    def load(
        cls,
        config_path: str | Path | None = None,
        overrides: list[str] | None = None,
        seed: int | None = None,
        out_dir: str | None = None,
    ) -> "ExperimentConfig":
        user_doc: dict = {}
        if config_path is not None:
            try:
                user_doc = json.loads(Path(config_path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {config_path}")
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file is not valid JSON: {err}")
            if not isinstance(user_doc, dict):
                raise ConfigError("config document must be a JSON object")
        doc = _merge(DEFAULTS, user_doc)
        doc = apply_overrides(doc, overrides or [])
        if seed is not None:
            doc["seed"] = seed
        if out_dir is not None:
            doc["out_dir"] = out_dir
        cfg = cls(doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        d = self.doc
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if int(d["diagnostic_cadence"]) < 1:
            raise ConfigError("diagnostic_cadence must be >= 1")
        ds = d["dataset"]
        if ds["kind"] not in ("synthetic", "csv"):
            raise ConfigError("dataset.kind must be 'synthetic' or 'csv'")
        if ds["kind"] == "csv" and not ds["csv_path"]:
            raise ConfigError("dataset.kind 'csv' requires dataset.csv_path")
        model = d["model"]
        if model["blocks"] not in ("per_layer", "single"):
            raise ConfigError("model.blocks must be 'per_layer' or 'single'")
        fed = d["fed"]
        if fed["algorithm"] not in ALGORITHMS:
            raise ConfigError(f"fed.algorithm must be one of {ALGORITHMS}")
        if fed["aggregation_weighting"] not in (None, *WEIGHTINGS):
            raise ConfigError(
                f"fed.aggregation_weighting must be null or one of {WEIGHTINGS}"
            )
        pers = d["personalization"]
        if pers["classifier_mode"] not in ("frozen", "trained"):
            raise ConfigError(
                "personalization.classifier_mode must be 'frozen' or 'trained'"
            )
        if pers["local_size"] not in pers["local_size_fractions"]:
            raise ConfigError(
                f"personalization.local_size {pers['local_size']!r} has no entry "
                "in local_size_fractions"
            )
        if pers["epochs"] < 0:
            raise ConfigError("personalization.epochs must be >= 0")

    # Convenience accessors -------------------------------------------------

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.doc["out_dir"])

    @property
    def dataset(self) -> dict:
        return self.doc["dataset"]

    @property
    def bench(self) -> dict:
        return self.doc["bench"]

    @property
    def model(self) -> dict:
        return self.doc["model"]

    @property
    def personalization(self) -> dict:
        return self.doc["personalization"]

    @property
    def diagnostic_cadence(self) -> int:
        return int(self.doc["diagnostic_cadence"])

    def fed_config(self, num_clients: int) -> FedConfig:
        f = self.doc["fed"]
        return FedConfig(
            rounds=int(f["rounds"]),
            num_clients=num_clients,
            participation_fraction=float(f["participation_fraction"]),
            local_epochs=int(f["local_epochs"]),
            batch_size=int(f["batch_size"]),
            lr_bases=float(f["lr_bases"]),
            lr_logits=float(f["lr_logits"]),
            weight_decay=float(f["weight_decay"]),
            momentum=float(f["momentum"]),
            temperature=float(f["temperature"]),
            num_bases=int(f["num_bases"]),
            use_major=bool(f["use_major"]),
            warm_start_fraction=float(f["warm_start_fraction"]),
            aggregation_weighting=f["aggregation_weighting"],
            algorithm=f["algorithm"],
            seed=int(self.doc["seed"]),
        )
