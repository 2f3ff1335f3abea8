"""Pipeline configuration: nested dataclasses loaded from a single JSON file.

Unknown keys are rejected at every level.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .imaging import InvalidInputError, ScaleConfig
from .report import NormalRanges
from .segmentation import Rect, VesselnessBackend


class ConfigError(InvalidInputError):
    pass


@dataclass
class PreprocessConfig:
    p_low: float = 1.0
    p_high: float = 99.0


@dataclass
class SegmentationConfig:
    backend: str = "vesselness"  # or "external" (requires --mask)
    scales: tuple[float, ...] = (2.0, 3.0, 4.0, 5.0)
    beta: float = 0.5
    c: float = 0.1
    threshold: float = 0.25

    def vesselness(self) -> VesselnessBackend:
        return VesselnessBackend(tuple(self.scales), self.beta, self.c, self.threshold)


@dataclass
class InstanceConfig:
    min_area: float | None = None  # None: 80 px scaled from 1024x768
    max_area: float | None = None  # None: 20000 px scaled from 1024x768
    min_contrast: float = 0.02
    min_spur: float = 8.0


@dataclass
class AnalysisConfig:
    tau_tortuous: float = 1.7
    min_clear: int = 3
    match_dilation: int = 5
    counting_region: tuple[int, int, int, int] | None = None  # top, left, bottom, right

    def region(self, shape) -> Rect:
        if self.counting_region is None:
            return Rect.central_band(shape, 0.8)
        return Rect(*self.counting_region)


@dataclass
class FlowConfig:
    n_corners: int = 40
    search_radius: int = 12
    n_theta: int = 180
    k_sigma: float = 4.0
    nms_theta_deg: float = 10.0
    nms_rho: int = 9
    min_line_fraction: float = 0.5
    merge_frames: float = 3.0
    merge_speed_rel: float = 0.15


@dataclass
class PipelineConfig:
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    instances: InstanceConfig = field(default_factory=InstanceConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    ranges: NormalRanges = field(default_factory=NormalRanges)
    flow: FlowConfig = field(default_factory=FlowConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        cfg = _build(cls, data, "config")
        _validate(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"no such config file: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _validate(cfg: PipelineConfig) -> None:
    if cfg.segmentation.backend not in ("vesselness", "external"):
        raise ConfigError("segmentation.backend must be 'vesselness' or 'external'")
    try:
        cfg.segmentation.vesselness()
    except InvalidInputError as exc:
        raise ConfigError(f"segmentation: {exc}") from exc
    if not cfg.analysis.tau_tortuous > 1:
        raise ConfigError("analysis.tau_tortuous must be > 1")
    if cfg.analysis.min_clear < 1:
        raise ConfigError("analysis.min_clear must be >= 1")
    if cfg.analysis.counting_region is not None and len(cfg.analysis.counting_region) != 4:
        raise ConfigError("analysis.counting_region must be [top, left, bottom, right]")
    if cfg.flow.n_corners < 8 or cfg.flow.search_radius < 1 or cfg.flow.n_theta < 2 or cfg.flow.k_sigma <= 0:
        raise ConfigError("flow: need n_corners >= 8, search_radius >= 1, n_theta >= 2, k_sigma > 0")
    if not 0 <= cfg.preprocess.p_low < cfg.preprocess.p_high <= 100:
        raise ConfigError("preprocess: need 0 <= p_low < p_high <= 100")
