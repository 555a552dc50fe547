"""Run configuration: a JSON file mapped onto nested dataclasses.

Unknown keys are rejected with the line they appear on. Flag overrides are
applied after loading. ``RunConfig.echo()`` is embedded in every artifact.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .array_signal import ArrayGeometry, ScanGrid
from .dataset import REFERENCE_SNRS
from .network import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    start: float = -30.0
    stop: float = 30.0
    step: float = 1.0

    def build(self) -> ScanGrid:
        return ScanGrid(self.start, self.stop, self.step)


@dataclass
class ArrayConfig:
    n_elements: int = 10
    spacing: float = 0.5

    def build(self) -> ArrayGeometry:
        return ArrayGeometry.ula(self.n_elements, self.spacing)


@dataclass
class DatasetConfig:
    train_count: int = 100_000
    val_per_snr: int = 1000
    snr_levels_db: list = field(default_factory=lambda: list(REFERENCE_SNRS))
    k_min: int = 1
    k_max: int = 3
    amplitude_min: float = 0.5
    amplitude_max: float = 1.0


@dataclass
class EvalConfig:
    estimators: list = field(default_factory=lambda: ["dbf", "iaa"])
    geometries: list = field(default_factory=lambda: ["ula", "sla"])
    sparsity: float = 0.3
    snr_levels_db: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    trials: int = 5000
    hit_snr_db: float = 40.0
    delta_thetas: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 20.0])
    timing_trials: int = 5000
    iaa_iters: int = 15
    workers: int = 1
    showcase_angles: list = field(default_factory=lambda: [0.0, 7.0])
    showcase_slas: int = 3


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    array: ArrayConfig = field(default_factory=ArrayConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def echo(self) -> dict:
        # the output location does not affect results; leaving it out keeps artifacts relocatable
        d = self.to_dict()
        del d["out"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> "RunConfig":
        try:
            self.grid.build()
            self.array.build()
            TrainConfig(**asdict(self.train))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d, e = self.dataset, self.eval
        if d.train_count < 1 or d.val_per_snr < 1 or not d.snr_levels_db:
            raise ConfigError("dataset needs train_count >= 1, val_per_snr >= 1 and SNR levels")
        if not 1 <= d.k_min <= d.k_max <= 3:
            raise ConfigError(f"k range [{d.k_min}, {d.k_max}] outside [1, 3]")
        if not 0 < d.amplitude_min <= d.amplitude_max <= 1:
            raise ConfigError("amplitudes must satisfy 0 < min <= max <= 1")
        if e.trials < 1 or e.timing_trials < 1 or e.workers < 1 or e.iaa_iters < 1:
            raise ConfigError("trials, timing_trials, workers and iaa_iters must be >= 1")
        if not set(e.geometries) <= {"ula", "sla"}:
            raise ConfigError(f"unknown geometry policy in {e.geometries}")
        if not 0 <= e.sparsity < 1:
            raise ConfigError("eval sparsity must lie in [0, 1)")
        if any(dt <= 0 for dt in e.delta_thetas):
            raise ConfigError("delta_thetas must be positive")
        return self


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _build(cls, data, text: str, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            line = _line_of(text, key)
            where = f"line {line}: " if line else ""
            raise ConfigError(f"{where}unknown key {path + key!r}; allowed: {sorted(known)}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, text, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.msg}") from exc
    return _build(RunConfig, data, text, "").validate()


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def with_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Apply command-line flags (``None`` means not given); flags win over the file."""
    try:
        return _apply(cfg, flags).validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _apply(cfg: RunConfig, flags: dict) -> RunConfig:
    train = cfg.train
    dataset = cfg.dataset
    ev = cfg.eval
    top = {}
    if flags.get("seed") is not None:
        top["seed"] = flags["seed"]
        train = replace(train, seed=flags["seed"])
    if flags.get("out") is not None:
        top["out"] = flags["out"]
    if flags.get("count") is not None:
        dataset = replace(dataset, train_count=flags["count"])
    for flag, name in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "learning_rate"),
                       ("max_sparsity", "max_sparsity"), ("model", "model"),
                       ("precision", "precision")):
        if flags.get(flag) is not None:
            train = replace(train, **{name: flags[flag]})
    if flags.get("trials") is not None:
        ev = replace(ev, trials=flags["trials"], timing_trials=min(ev.timing_trials, flags["trials"]))
    if flags.get("snr") is not None:
        ev = replace(ev, snr_levels_db=list(flags["snr"]))
    if flags.get("estimators") is not None:
        ev = replace(ev, estimators=list(flags["estimators"]))
    return replace(cfg, train=train, dataset=dataset, eval=ev, **top)
