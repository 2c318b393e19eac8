"""
key=value configuration files

Keys are `section.field`; each section is one settings dataclass. Blank
lines and lines starting with '#' are ignored. Values are coerced to the
type of the field's default.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, replace

from .detect import DetectorParams
from .enhance import EnhanceConfig
from .errors import ConfigError
from .evaluate import EvalConfig
from .gcn import LARGE_DIMS, GcnDims
from .graph import GraphConfig
from .propose import SUMMARY_STATS, ProposalConfig
from .simulate import SimConfig
from .track import PipelineConfig
from .training import TrainingConfig

log = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class Settings:
    sim: SimConfig = SimConfig()
    detector: DetectorParams = DetectorParams()
    proposal: ProposalConfig = ProposalConfig()
    graph: GraphConfig = GraphConfig()
    gcn: GcnDims = GcnDims()
    train: TrainingConfig = TrainingConfig()
    track: PipelineConfig = PipelineConfig()
    enhance: EnhanceConfig = EnhanceConfig()
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        if self.gcn.feature_dim != self.proposal.descriptor_dim:
            raise ConfigError(
                "gcn.feature_dim",
                f"{self.gcn.feature_dim} does not match the proposal descriptor size {self.proposal.descriptor_dim}")

    def pipeline(self) -> PipelineConfig:
        return replace(self.track, detector=self.detector, proposal=self.proposal, graph=self.graph)


SECTIONS = tuple(f.name for f in dataclasses.fields(Settings))


def _scalar_fields(obj) -> dict:
    """Fields settable from a config file: everything except nested settings"""
    return {f.name: f for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text!r} ({exc})") from None
    return text


def parse_lines(lines, source: str = "<config>") -> dict:
    """key=value lines -> {key: raw value}; later lines win"""
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def apply_values(settings: Settings, values: dict) -> Settings:
    """New Settings with the given `section.field` values applied"""
    updates = {}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(key, "unknown configuration key")
        current = getattr(settings, section)
        fields = _scalar_fields(current)
        if name not in fields:
            raise ConfigError(key, "unknown configuration key")
        updates.setdefault(section, {})[name] = _coerce(key, raw, getattr(current, name))

    sections = {}
    for section, changes in updates.items():
        try:
            sections[section] = replace(getattr(settings, section), **changes)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(section, str(exc)) from None
    return replace(settings, **sections)


def load_settings(path=None, overrides=(), seed=None) -> Settings:
    """
    Defaults, then the config file, then `--set` overrides, then `--seed`

    The `gcn.preset=large` key selects the large layer sizes before any
    explicit gcn.* value is applied.
    """
    values = {}
    if path is not None:
        with open(path) as f:
            values.update(parse_lines(f, str(path)))
    values.update(parse_lines(overrides, "--set"))
    if seed is not None:
        values["sim.seed"] = str(seed)
        values["train.seed"] = str(seed)

    settings = Settings()
    preset = values.pop("gcn.preset", None)
    if preset is not None:
        if preset == "large":
            dims = LARGE_DIMS
        elif preset == "desk":
            dims = GcnDims()
        else:
            raise ConfigError("gcn.preset", f"must be 'desk' or 'large', got {preset!r}")
        settings = replace(settings, gcn=dims, proposal=_proposal_for(dims))
    settings = apply_values(settings, values)
    log.debug("resolved %d config values", len(values))
    return settings


def _proposal_for(dims: GcnDims) -> ProposalConfig:
    """Descriptor grid whose size matches the tracking-head input"""
    grid = dims.feature_dim - SUMMARY_STATS
    width = 8 if grid % 8 == 0 else 4
    return ProposalConfig(length_bins=grid // width, width_bins=width)


def to_lines(settings: Settings) -> list:
    """Resolved settings as key=value lines in section order"""
    lines = []
    for section in SECTIONS:
        obj = getattr(settings, section)
        for name in _scalar_fields(obj):
            value = getattr(obj, name)
            if isinstance(value, tuple):
                value = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{section}.{name}={value}")
    return lines


def dumps(settings: Settings) -> str:
    return "\n".join(to_lines(settings)) + "\n"
