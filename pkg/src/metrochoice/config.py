"""Pipeline configuration: one JSON file, every knob with a default.

Unknown keys are collected during loading; in strict mode they are fatal.
Secrets never live here, only the name of the environment variable that
holds the API key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .choices import DecisionRule, DelayPeriod
from .synth import WorldConfig

DEFAULT_SEED = 7


class ConfigError(Exception):
    pass


def _take(raw: dict, known: dict[str, Any], section: str, unknown: list[str]) -> dict[str, Any]:
    out = {}
    for key, value in raw.items():
        if key in known:
            out[key] = value
        else:
            unknown.append(f"{section}.{key}" if section else key)
    return out


@dataclass
class NetworkParams:
    hop_runtime_minutes: float = 2.5
    access_time_minutes: float = 5.0
    transfer_penalty_minutes: float = 4.0


@dataclass
class IngestParams:
    max_trip_duration_minutes: float = 240.0
    weekday_filter: bool = True


@dataclass
class MiningParams:
    day_threshold: int = 20
    od_day_threshold: int = 10
    eps_minutes: float = 45.0
    min_pts: int = 5


@dataclass
class ImpactParams:
    window_pad_minutes: float = 10.0


@dataclass
class ChoiceParams:
    slack_minutes: float = 60.0
    morning_peak: tuple[int, int] = (420, 570)
    evening_peak: tuple[int, int] = (1020, 1170)


@dataclass
class PredictorParams:
    backends: tuple[str, ...] = ("mock", "majority", "rf", "gbt")
    batch_size: int = 10
    temperature: float = 0.0
    retry_budget: int = 2
    max_in_flight: int = 4
    api_key_env: str = "DELAYPTC_API_KEY"
    endpoint: str = ""
    model: str = ""
    timeout_seconds: float = 60.0
    n_trees: int = 50
    max_depth: int = 8
    boost_depth: int = 3
    learning_rate: float = 0.1
    mock_rule: DecisionRule = field(default_factory=DecisionRule)


@dataclass
class EvalParams:
    split: str = "stratified"  # or "leave-one-event-out"
    test_fraction: float = 0.3
    holdout_event: int | None = None


@dataclass
class PathsConfig:
    """Input artifact locations; empty entries resolve inside output_dir."""

    network: str = ""
    calendar: str = ""
    afc: str = ""
    delay_table: str = ""
    narratives: str = ""


@dataclass
class PipelineConfig:
    seed: int = DEFAULT_SEED
    strict: bool = False
    output_dir: str = "out"
    paths: PathsConfig = field(default_factory=PathsConfig)
    network: NetworkParams = field(default_factory=NetworkParams)
    ingest: IngestParams = field(default_factory=IngestParams)
    mining: MiningParams = field(default_factory=MiningParams)
    impact: ImpactParams = field(default_factory=ImpactParams)
    choice: ChoiceParams = field(default_factory=ChoiceParams)
    predictor: PredictorParams = field(default_factory=PredictorParams)
    eval: EvalParams = field(default_factory=EvalParams)
    synth: WorldConfig | None = None
    unknown_keys: list[str] = field(default_factory=list)

    def resolve(self, name: str) -> Path:
        """Resolve an input artifact path, defaulting into output_dir."""
        configured = getattr(self.paths, name, "")
        if configured:
            return Path(configured)
        default_names = {
            "network": "network.json",
            "calendar": "calendar.csv",
            "afc": "afc.csv",
            "delay_table": "delay_table.csv",
            "narratives": "narratives.txt",
        }
        return Path(self.output_dir) / default_names[name]

    def artifact(self, filename: str) -> Path:
        return Path(self.output_dir) / filename


def _simple_section(cls, raw: dict, section: str, unknown: list[str]):
    fields = {f: None for f in cls.__dataclass_fields__}
    taken = _take(raw, fields, section, unknown)
    obj = cls()
    for key, value in taken.items():
        current = getattr(obj, key)
        if isinstance(current, tuple) and not isinstance(value, tuple):
            value = tuple(value)
        setattr(obj, key, value)
    return obj


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Load a pipeline config, or defaults when no path is given."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if overrides:
        raw = {**raw, **overrides}
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> PipelineConfig:
    unknown: list[str] = []
    cfg = PipelineConfig()
    top_known = {
        "seed",
        "strict",
        "output_dir",
        "paths",
        "network",
        "ingest",
        "mining",
        "impact",
        "choice",
        "predictor",
        "eval",
        "synth",
    }
    for key in raw:
        if key not in top_known:
            unknown.append(key)
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "strict" in raw:
        cfg.strict = bool(raw["strict"])
    if "output_dir" in raw:
        cfg.output_dir = str(raw["output_dir"])
    if "paths" in raw:
        cfg.paths = _simple_section(PathsConfig, raw["paths"], "paths", unknown)
    if "network" in raw:
        cfg.network = _simple_section(NetworkParams, raw["network"], "network", unknown)
    if "ingest" in raw:
        cfg.ingest = _simple_section(IngestParams, raw["ingest"], "ingest", unknown)
    if "mining" in raw:
        cfg.mining = _simple_section(MiningParams, raw["mining"], "mining", unknown)
    if "impact" in raw:
        cfg.impact = _simple_section(ImpactParams, raw["impact"], "impact", unknown)
    if "choice" in raw:
        cfg.choice = _simple_section(ChoiceParams, raw["choice"], "choice", unknown)
    if "predictor" in raw:
        pred_raw = dict(raw["predictor"])
        rule_raw = pred_raw.pop("mock_rule", None)
        cfg.predictor = _simple_section(PredictorParams, pred_raw, "predictor", unknown)
        if rule_raw is not None:
            cfg.predictor.mock_rule = DecisionRule(
                required_period=DelayPeriod(rule_raw.get("required_period", "MorningPeak")),
                p3_below=float(rule_raw.get("p3_below", 6.0)),
                require_not_started=bool(rule_raw.get("require_not_started", True)),
            )
    if "eval" in raw:
        cfg.eval = _simple_section(EvalParams, raw["eval"], "eval", unknown)
    if "synth" in raw and raw["synth"] is not None:
        known = set(WorldConfig.__dataclass_fields__)
        for key in raw["synth"]:
            if key not in known:
                unknown.append(f"synth.{key}")
        cfg.synth = WorldConfig.from_dict({k: v for k, v in raw["synth"].items() if k in known})
    cfg.unknown_keys = unknown
    return cfg
