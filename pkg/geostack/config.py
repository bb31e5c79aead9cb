"""Strict JSON run configuration.

A run file has the sections ``model``, ``data``, ``train``, ``analysis`` and
``paths``. Absent keys take the dataclass defaults; unknown keys and values of
the wrong type are rejected with a ConfigError naming the offending field.
"""
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import ENCODERS
from .exceptions import ConfigError, FileError
from .models import ModelConfig
from .synthdata import LEVELS, DataConfig
from .training import TrainConfig


@dataclass(frozen=True)
class AnalysisConfig:
    encoder: str = "geometry"
    depths: tuple[float, ...] = (0.5, 0.75, 1.0)
    # inclusive patch rectangle (r0, c0, r1, c1)
    roi: tuple[int, int, int, int] = (1, 1, 1, 1)
    scene_seed: int = 0
    view: int = 0


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs"
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def toy(cls) -> "RunConfig":
        # 1e-5 is a fine-tuning rate; randomly initialized toy weights need more in 300 steps
        return cls(train=TrainConfig(peak_lr=3e-3))

    def clean(self) -> "RunConfig":
        self.clean_model()
        self.clean_data()
        self.train.validate()
        self.clean_analysis()
        return self

    def clean_model(self):
        self.model.validate()
        if self.model.vision.merge < 1:
            raise ConfigError("merge size must be positive", field="model.vision.merge")

    def clean_data(self):
        data = self.data
        if len(data.task_mix) != len(LEVELS) or any(w < 0 for w in data.task_mix) or sum(data.task_mix) <= 0:
            raise ConfigError(f"task_mix needs {len(LEVELS)} non-negative weights ({', '.join(LEVELS)})", field="data.task_mix")
        k_min, k_max = data.frame_bounds
        if not 1 <= k_min <= k_max:
            raise ConfigError(f"invalid frame bounds [{k_min}, {k_max}]", field="data.frame_bounds")
        if k_max > self.model.geometry.max_views:
            raise ConfigError(f"up to {k_max} frames but the geometry encoder takes {self.model.geometry.max_views} views", field="data.frame_bounds")
        if data.resize_side not in ("short", "long"):
            raise ConfigError(f"resize_side must be 'short' or 'long', got {data.resize_side!r}", field="data.resize_side")
        if data.eval_count < 1:
            raise ConfigError("eval_count must be positive", field="data.eval_count")

    def clean_analysis(self):
        analysis = self.analysis
        if analysis.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {', '.join(ENCODERS)}", field="analysis.encoder")
        if not analysis.depths or any(not 0 < d <= 1 for d in analysis.depths):
            raise ConfigError(f"depths must lie in (0, 1], got {list(analysis.depths)}", field="analysis.depths")
        r0, c0, r1, c1 = analysis.roi
        if r0 < 0 or c0 < 0 or r1 < r0 or c1 < c0:
            raise ConfigError(f"ROI {list(analysis.roi)} is empty", field="analysis.roi")
        if not 0 <= analysis.view < self.data.frame_bounds[0]:
            raise ConfigError(f"view {analysis.view} is not below the minimum clip length {self.data.frame_bounds[0]}", field="analysis.view")

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "").clean()


def _to_plain(value):
    if isinstance(value, dict):
        return {key: _to_plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(item) for item in value]
    return value


def _error(path: str, reason: str, detail: str = "") -> ConfigError:
    message = ConfigError.error_messages[reason] + (f" ({detail})" if detail else "")
    return ConfigError(message, field=path or "<root>", reason=reason)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise _error(path, "invalid_type", f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise _error(f"{path}.{key}" if path else key, "unknown_key")
    values = {}
    for name in names & set(data):
        values[name] = _coerce(data[name], hints[name], f"{path}.{name}" if path else name)
    return cls(**values)


def _coerce(value, hint, path: str):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        (inner,) = [option for option in options if option is not type(None)]
        return _coerce(value, inner, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise _error(path, "invalid_type", f"expected a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(item, args[0], f"{path}[{i}]") for i, item in enumerate(value))
        if len(value) != len(args):
            raise _error(path, "invalid_value", f"expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(item, arg, f"{path}[{i}]") for i, (item, arg) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise _error(path, "invalid_type", "expected true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _error(path, "invalid_type", f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _error(path, "invalid_type", f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise _error(path, "invalid_type", f"expected a string, got {value!r}")
        return value
    raise _error(path, "invalid_type", f"unsupported field type {hint}")


def emit_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"not valid JSON: {e}", reason="invalid_type")
    return RunConfig.from_dict(data)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise FileError(f"cannot read config {path}: {e}")
    return parse_config(text)


def dump_config(cfg: RunConfig, path):
    path = Path(path)
    try:
        path.write_text(emit_config(cfg))
    except OSError as e:
        raise FileError(f"cannot write config {path}: {e}")


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
