"""Pipeline configuration: strict, versioned JSON.

Unknown keys are errors. One top-level seed feeds every seeded component;
components draw from independent named streams, so sharing it is safe.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from molgeom.decoder import DecoderConfig
from molgeom.deepencoder import EncoderConfig
from molgeom.e3fp import E3fpConfig
from molgeom.errors import SchemaError, ShapeError
from molgeom.projector import ProjectorConfig

CONFIG_VERSION = 1
FUSION_MODES = ("cross_attention", "concat", "no3d")
DECODE_MODES = ("greedy", "sample")


@dataclass(frozen=True)
class DecodeConfig:
    prompt: tuple[int, ...] = ()
    t_max: int = 8
    stop_id: int | None = None
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(i) for i in self.prompt))
        if self.t_max < 1:
            raise SchemaError("decode.t_max must be >= 1")
        if not self.temperature > 0:
            raise SchemaError("decode.temperature must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    e3fp: E3fpConfig = field(default_factory=E3fpConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    d_s: int = 64
    l_max: int = 64
    seed: int = 0
    fusion_mode: str = "cross_attention"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise SchemaError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.d_s < 1 or self.l_max < 1:
            raise SchemaError("d_s and l_max must be >= 1")
        if self.seed < 0:
            raise SchemaError("seed must be non-negative")
        if self.projector.d_v != 2 * self.encoder.d:
            raise ShapeError(f"projector.d_v={self.projector.d_v} must equal 2 * encoder.d={2 * self.encoder.d}")
        if self.projector.d_s != self.d_s:
            raise ShapeError(f"projector.d_s={self.projector.d_s} must equal d_s={self.d_s}")
        if self.decoder.d_h != self.projector.d_h:
            raise ShapeError(f"decoder.d_h={self.decoder.d_h} must equal projector.d_h={self.projector.d_h}")
        bad = [i for i in self.decode.prompt if not 0 <= i < self.decoder.vocab_size]
        if bad:
            raise SchemaError(f"prompt ids {bad} outside decoder vocabulary")
        # propagate the single seed
        for name in ("encoder", "projector", "decoder"):
            sub = getattr(self, name)
            if sub.seed != self.seed:
                object.__setattr__(self, name, dataclasses.replace(sub, seed=self.seed))

    def with_overrides(self, seed: int | None = None, fusion_mode: str | None = None) -> PipelineConfig:
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if fusion_mode is not None:
            changes["fusion_mode"] = fusion_mode
        return dataclasses.replace(self, **changes) if changes else self

    @classmethod
    def desk(cls) -> PipelineConfig:
        return cls()

    @classmethod
    def full(cls) -> PipelineConfig:
        return cls(
            encoder=EncoderConfig.full(),
            projector=ProjectorConfig.full(d_s=64),
            decoder=DecoderConfig(vocab_size=32, d_h=4096, heads=32),
        )

    def to_dict(self) -> dict:
        doc = {"version": CONFIG_VERSION}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                value = {k: v for k, v in dataclasses.asdict(value).items() if k != "seed"}
                if "prompt" in value:
                    value["prompt"] = list(value["prompt"])
            doc[f.name] = value
        return doc

    @classmethod
    def from_dict(cls, doc) -> PipelineConfig:
        if not isinstance(doc, dict):
            raise SchemaError("config must be a JSON object")
        doc = dict(doc)
        version = doc.pop("version", None)
        if version != CONFIG_VERSION:
            raise SchemaError(f"config version must be {CONFIG_VERSION}, got {version!r}")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise SchemaError(f"unknown config keys: {unknown}")
        kwargs = {}
        for name, value in doc.items():
            sub_type = _SECTIONS.get(name)
            kwargs[name] = _section(name, sub_type, value) if sub_type else value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise SchemaError(f"bad config value: {exc}") from None

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc)


_SECTIONS = {
    "e3fp": E3fpConfig,
    "encoder": EncoderConfig,
    "projector": ProjectorConfig,
    "decoder": DecoderConfig,
    "decode": DecodeConfig,
}


def _section(name: str, kind, value):
    if not isinstance(value, dict):
        raise SchemaError(f"config section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(kind)} - {"seed"}
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise SchemaError(f"unknown keys in {name!r}: {unknown}")
    try:
        return kind(**value)
    except TypeError as exc:
        raise SchemaError(f"bad value in {name!r}: {exc}") from None
