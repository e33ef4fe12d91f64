"""Pipeline configuration: a JSON document checked against a shipped schema."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .decode import DecodeConfig
from .encode import EncodeConfig
from .errors import ConfigError
from .fixtures import FixtureSpec
from .model import ToyConfig, get_geometry
from .prefill import PrefillConfig

BASELINES = ("mustdrop", "none", "random_drop", "fastv_like", "encoder_only")


def load_schema(name: str) -> dict:
    return json.loads(resources.files("tokendrop").joinpath("schemas").joinpath(name).read_text())


def _default_prefill() -> PrefillConfig:
    return PrefillConfig(gamma=0.01)


@dataclass(frozen=True)
class PipelineConfig:
    """``seed`` drives weight synthesis and the random baseline; fixture
    seeds come from ``fixtures.first_seed``."""

    model: ToyConfig = field(default_factory=ToyConfig)
    encode: EncodeConfig = field(default_factory=EncodeConfig)
    prefill: PrefillConfig = field(default_factory=_default_prefill)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    fixtures: FixtureSpec = field(default_factory=FixtureSpec)
    geometry: str = "llava-1.5-7b"
    seed: int = 0
    baseline: str = "mustdrop"

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        get_geometry(self.geometry)
        self.encode.resolved_key_layer(self.model.encoder_layers)
        if self.encode.window_k > max(self.model.grid_side, 1) and self.model.grid_side > 1:
            raise ConfigError("window_k larger than the patch grid")
        self.prefill.validate_depth(self.model.lm_layers)
        self.decode.validate_depth(self.model.lm_layers)
        if self.baseline in ("random_drop", "fastv_like") and not self.prefill.prune_layers:
            raise ConfigError(f"baseline {self.baseline} needs at least one prune layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prefill"]["prune_layers"] = list(self.prefill.prune_layers)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        try:
            jsonschema.validate(data, load_schema("config.schema.json"))
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        parts = {"model": ToyConfig, "encode": EncodeConfig, "decode": DecodeConfig, "fixtures": FixtureSpec}
        kwargs = {k: v for k, v in data.items() if k not in parts and k != "prefill"}
        for key, typ in parts.items():
            if key in data:
                kwargs[key] = typ(**data[key])
        if "prefill" in data:
            p = dict(data["prefill"])
            if "prune_layers" in p:
                p["prune_layers"] = tuple(p["prune_layers"])
            if p.get("gamma") is None and p.get("budget") is None:
                p["gamma"] = _default_prefill().gamma
            kwargs["prefill"] = PrefillConfig(**p)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_json(Path(path).read_text())


def config_keys() -> list[str]:
    return [f.name for f in fields(PipelineConfig)]
