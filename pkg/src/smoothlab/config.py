"""JSON run configuration: preset id plus per-section overrides.

Layout::

    {"preset": "flatten",
     "energy": {...EnergyParams fields...},
     "gd": {...GdConfig...}, "irls": {...IrlsConfig...}, "train": {...TrainConfig...}}

Every section is optional. Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .apps import normalize_preset_id, resolve_preset
from .energy import EnergyParams
from .solvers import GdConfig, IrlsConfig
from .trainer import TrainConfig

SECTIONS = {"energy": EnergyParams, "gd": GdConfig, "irls": IrlsConfig, "train": TrainConfig}


TOY_CROP = 64


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "flatten"
    energy: dict = field(default_factory=dict)
    gd: GdConfig = field(default_factory=GdConfig)
    irls: IrlsConfig = field(default_factory=IrlsConfig)
    train: dict = field(default_factory=dict)

    def energy_params(self) -> EnergyParams:
        """Preset values first, then explicit energy overrides on top."""
        params, _ = resolve_preset(self.preset)
        try:
            return params.replace(**self.energy)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"energy: {exc}") from exc

    def train_config(self, **overrides) -> TrainConfig:
        merged = {"preset": self.preset, **self.train}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        if "crop" not in merged and merged.get("network", "TOY8") == "TOY8":
            merged["crop"] = TOY_CROP
        try:
            return TrainConfig(**merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def resolved(self) -> dict:
        return {
            "preset": self.preset,
            "energy": self.energy_params().to_dict(),
            "gd": asdict(self.gd),
            "irls": asdict(self.irls),
            "train": asdict(self.train_config()),
        }

    def dumps(self) -> str:
        def fix(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v

        doc = self.resolved()
        doc["energy"] = {k: fix(v) for k, v in doc["energy"].items()}
        return json.dumps(doc, indent=2, sort_keys=True)


def _check_keys(section: str, doc, cls) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown key (allowed: {', '.join(sorted(names))})")
    out = {}
    for key, value in doc.items():
        # "inf" is accepted for the thresholds since JSON has no infinity literal
        if isinstance(value, str) and value.lower() in ("inf", "+inf", "infinity"):
            value = math.inf
        out[key] = value
    return out


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key != "preset" and key not in SECTIONS:
            raise ConfigError(f"{key}: unknown key (allowed: preset, {', '.join(SECTIONS)})")
    try:
        preset = normalize_preset_id(doc.get("preset", "flatten"))
    except ValueError as exc:
        raise ConfigError(f"preset: {exc}") from exc
    cfg = RunConfig(preset=preset)
    energy = _check_keys("energy", doc.get("energy", {}), EnergyParams)
    cfg.energy = energy
    cfg.energy_params()
    cfg.gd = _build("gd", GdConfig, _check_keys("gd", doc.get("gd", {}), GdConfig))
    cfg.irls = _build("irls", IrlsConfig, _check_keys("irls", doc.get("irls", {}), IrlsConfig))
    cfg.train = _check_keys("train", doc.get("train", {}), TrainConfig)
    if "preset" in cfg.train:
        raise ConfigError("train.preset: set the preset at the top level")
    cfg.train_config()
    return cfg


def load_config(path=None, preset: str | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if preset is not None:
        doc = dict(doc)
        doc["preset"] = preset
    return parse_config(doc)
