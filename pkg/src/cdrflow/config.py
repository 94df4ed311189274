"""Run configuration files.

A configuration is a JSON object with these optional sections::

    {
      "loop_class": "H3",
      "validity": {"eta1": 3.71, "eta2": 3.88, "eps1": 6.5, "eps2": 8.5},
      "model":    {"n_max": 16, "cnn_hidden": 128, ...},
      "train":    {"epochs": 200, "batch_size": 64, "constraint_weights": [10, 50, 1], ...},
      "embed":    {"lambda1": 50, "lambda2": 100, ...},
      "data":     {"count": 500, "lengths": [8, 10, 12], "ratios": [8, 1, 1],
                   "ingest": [{"file": "x.pdb", "chain": "H", "start": 95, "end": 102}]},
      "metrics":  {"lm_order": 3, "lm_alpha": 0.1}
    }

``validity`` entries override the preset of ``loop_class``. Unknown keys
are rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .constraints import ConstraintWeights
from .embed3d import EmbedConfig
from .exceptions import ContractError
from .flow import FlowConfig
from .geometry import VALIDITY_PRESETS, ValiditySpec
from .training import TrainConfig

SECTIONS = ("loop_class", "validity", "model", "train", "embed", "data", "metrics")


@dataclass
class DataConfig:
    count: int = 200
    lengths: tuple = (8,)
    ratios: tuple = (8, 1, 1)
    ingest: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.lengths = tuple(int(n) for n in self.lengths)
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.count < 1 or not self.lengths or min(self.lengths) < 2:
            raise ContractError("data.count must be >= 1 and every length >= 2")
        for entry in self.ingest:
            missing = {"file", "chain", "start", "end"} - set(entry)
            if missing:
                raise ContractError(f"ingest entry {entry} lacks {sorted(missing)}")


@dataclass
class MetricsConfig:
    lm_order: int = 3
    lm_alpha: float = 0.1


@dataclass
class RunConfig:
    loop_class: str = "H3"
    validity: ValiditySpec = None
    model: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.loop_class.upper() not in VALIDITY_PRESETS:
            raise ContractError(f"unknown loop class {self.loop_class!r}")
        self.loop_class = self.loop_class.upper()
        if self.validity is None:
            self.validity = ValiditySpec.for_class(self.loop_class)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every component seed set to ``seed``."""
        out = copy.deepcopy(self)
        out.model = replace(out.model, seed=seed)
        out.train.seed = seed
        out.embed = replace(out.embed, seed=seed)
        out.data.seed = seed
        return out

    def to_dict(self) -> dict:
        return {
            "loop_class": self.loop_class,
            "validity": self.validity.to_dict(),
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "embed": asdict(self.embed),
            "data": asdict(self.data),
            "metrics": asdict(self.metrics),
        }


def _build(cls, values, section):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ContractError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ContractError(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ContractError(f"bad {section!r} section: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ContractError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ContractError(f"unknown configuration sections: {unknown}")
    loop_class = str(raw.get("loop_class", "H3"))
    validity = raw.get("validity")
    if validity is not None and not isinstance(validity, dict):
        raise ContractError("'validity' must be an object")
    unknown = sorted(set(validity or {}) - {"eta1", "eta2", "eps1", "eps2"})
    if unknown:
        raise ContractError(f"unknown keys in 'validity': {unknown}")
    train = dict(raw.get("train") or {})
    if "constraint_weights" in train:
        w = train["constraint_weights"]
        try:
            train["constraint_weights"] = ConstraintWeights(**w) if isinstance(w, dict) else ConstraintWeights(*w)
        except TypeError as exc:
            raise ContractError(f"bad constraint_weights: {exc}") from None
    return RunConfig(
        loop_class=loop_class,
        validity=ValiditySpec.for_class(loop_class, **(validity or {})),
        model=_build(FlowConfig, raw.get("model"), "model"),
        train=_build(TrainConfig, train, "train"),
        embed=_build(EmbedConfig, raw.get("embed"), "embed"),
        data=_build(DataConfig, raw.get("data"), "data"),
        metrics=_build(MetricsConfig, raw.get("metrics"), "metrics"),
    )


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ContractError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(raw)


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Copy of ``raw`` with dotted keys (``"embed.lambda1"``) replaced."""
    out = copy.deepcopy(raw)
    for key, value in overrides.items():
        parts = key.split(".")
        if parts[0] not in SECTIONS:
            raise ContractError(f"grid key {key!r} does not name a configuration section")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ContractError(f"grid key {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return out
