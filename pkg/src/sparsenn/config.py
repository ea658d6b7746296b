"""Experiment configuration: one TOML file, validated strictly before any run.

Schema (every table optional except ``network``)::

    seed = 0                      # drives init, batching and the train/test split
    out = "runs/basic"            # output directory, relative to the config file

    [dataset]   kind = "idx" | "amat" | "synth", path, labels, test_path,
                test_labels, train_size, n, dim, classes
    [network]   layer_sizes, rank, predictor_layers (default: every hidden layer)
    [train]     learning_rate, l1_lambda, epochs, batch_size, predictor_mode,
                l1_penalize_all, full_path_delta
    [arch]      any ArchConfig field
    [energy]    any EnergyConfig field (pJ per event, clock period)
    [simulate]  samples, calibration_samples, modes
    [sweep]     "table.key" = [values...]  (cartesian product)

Unknown keys anywhere are an error.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .arch import ArchConfig
from .data import load_amat, load_idx, synth
from .model import Mode, NetworkSpec
from .sim.report import EnergyConfig
from .train import HyperParams, PredictorMode


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synth"
    path: Optional[str] = None
    labels: Optional[str] = None
    test_path: Optional[str] = None
    test_labels: Optional[str] = None
    train_size: Optional[int] = None
    # synthetic generator
    n: int = 1000
    dim: int = 64
    classes: int = 10

    def __post_init__(self):
        if self.kind not in ("idx", "amat", "synth"):
            raise ValueError(f"dataset.kind must be idx, amat or synth, got {self.kind!r}")
        if self.kind != "synth" and not self.path:
            raise ValueError(f"dataset.path is required for kind {self.kind!r}")
        if self.kind == "idx" and not self.labels:
            raise ValueError("dataset.labels is required for idx data")
        if self.kind == "idx" and self.test_path and not self.test_labels:
            raise ValueError("dataset.test_labels is required with dataset.test_path")
        if self.train_size is not None and self.train_size < 1:
            raise ValueError("dataset.train_size must be positive")

    def files(self) -> List[str]:
        return [p for p in (self.path, self.labels, self.test_path, self.test_labels) if p]


@dataclass
class SimulateConfig:
    samples: int = 10
    calibration_samples: int = 500
    modes: List[str] = field(default_factory=lambda: ["uv_off", "uv_on"])

    def __post_init__(self):
        if self.samples < 1 or self.calibration_samples < 1:
            raise ValueError("simulate.samples and simulate.calibration_samples must be positive")
        self.modes = [Mode(m).value for m in self.modes]


_TABLES = ("dataset", "network", "train", "arch", "energy", "simulate", "sweep")
_TOP = ("seed", "out") + _TABLES
_NETWORK_KEYS = ("layer_sizes", "rank", "predictor_layers")


@dataclass
class ExperimentConfig:
    network: NetworkSpec
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: HyperParams = field(default_factory=HyperParams)
    arch: ArchConfig = field(default_factory=ArchConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    sweep: Dict[str, list] = field(default_factory=dict)
    out: str = "runs/default"
    seed: int = 0
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def to_dict(self) -> dict:
        """Canonical form used for hashing; paths stay as written."""
        train = asdict(self.train)
        train["predictor_mode"] = self.train.predictor_mode.value
        return {
            "seed": self.seed,
            "out": self.out,
            "dataset": asdict(self.dataset),
            "network": self.network.to_dict(),
            "train": train,
            "arch": asdict(self.arch),
            "energy": asdict(self.energy),
            "simulate": asdict(self.simulate),
            "sweep": self.sweep,
        }

    def hash(self) -> str:
        """Identity of the experiment; where its files go is not part of it."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: Optional[int] = None, predictor_mode: Optional[str] = None,
                       out: Optional[str] = None) -> ExperimentConfig:
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if predictor_mode is not None:
            raw.setdefault("train", {})["predictor_mode"] = predictor_mode
        cfg = config_from_dict(raw, self.base_dir)
        if out is not None:
            cfg.out = str(Path(out).resolve())
        return cfg

    def sweep_points(self) -> List[Dict[str, Any]]:
        if not self.sweep:
            return []
        keys = sorted(self.sweep)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.sweep[k] for k in keys))]

    def with_params(self, params: Dict[str, Any]) -> ExperimentConfig:
        raw = copy.deepcopy(self.raw)
        raw.pop("sweep", None)
        for key, value in params.items():
            table, name = key.split(".", 1)
            raw.setdefault(table, {})[name] = value
        cfg = config_from_dict(raw, self.base_dir)
        cfg.out = self.out
        return cfg


def _build(cls, table: dict, section: str, exclude: tuple = ()):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def config_from_dict(raw: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_TOP))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = raw.get("out", "runs/default")
    if not isinstance(out, str):
        raise ConfigError("out must be a string")

    net = raw.get("network")
    if not isinstance(net, dict):
        raise ConfigError("a [network] table with layer_sizes is required")
    bad = sorted(set(net) - set(_NETWORK_KEYS))
    if bad:
        raise ConfigError(f"unknown key(s) in [network]: {', '.join(bad)}")
    try:
        sizes = [int(s) for s in net["layer_sizes"]]
        rank = int(net.get("rank", 0))
        if "predictor_layers" in net:
            spec = NetworkSpec(tuple(sizes), rank, frozenset(net["predictor_layers"]))
        else:
            spec = NetworkSpec.with_predictors(sizes, rank)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"[network] {exc}") from None

    train_tbl = dict(raw.get("train", {}))
    if "seed" in train_tbl:
        raise ConfigError("unknown key(s) in [train]: seed (use the top-level seed)")
    train_tbl["seed"] = seed
    hyper = _build(HyperParams, train_tbl, "train")
    if hyper.predictor_mode != PredictorMode.NONE and not spec.predictor_layers:
        raise ConfigError(f"predictor_mode {hyper.predictor_mode.value!r} needs network.rank > 0")

    sweep = raw.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigError("[sweep] must be a table")
    for key, values in sweep.items():
        table = key.split(".", 1)[0]
        if "." not in key or table not in _TABLES[:-1]:
            raise ConfigError(f"sweep key {key!r} must look like 'table.field'")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep values for {key!r} must be a non-empty list")

    cfg = ExperimentConfig(
        network=spec,
        dataset=_build(DatasetConfig, raw.get("dataset", {}), "dataset"),
        train=hyper,
        arch=_build(ArchConfig, raw.get("arch", {}), "arch"),
        energy=_build(EnergyConfig, raw.get("energy", {}), "energy"),
        simulate=_build(SimulateConfig, raw.get("simulate", {}), "simulate"),
        sweep=sweep,
        out=out,
        seed=seed,
        base_dir=Path(base_dir),
        raw=copy.deepcopy(raw),
    )
    # a sweep point may not name a field that does not exist
    for point in cfg.sweep_points()[:1]:
        cfg.with_params(point)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.resolve().parent)


def load_datasets(cfg: ExperimentConfig) -> tuple:
    """``(train, test)`` per the dataset table; single files are split by ``train_size``."""
    d = cfg.dataset
    test = None
    if d.kind == "synth":
        full = synth(cfg.seed, n=d.n, d=d.dim, classes=d.classes)
    else:
        for p in d.files():
            if not cfg.resolve(p).exists():
                raise ConfigError(f"dataset file not found: {cfg.resolve(p)}")
        if d.kind == "idx":
            full = load_idx(cfg.resolve(d.path), cfg.resolve(d.labels))
            if d.test_path:
                test = load_idx(cfg.resolve(d.test_path), cfg.resolve(d.test_labels))
        else:
            full = load_amat(cfg.resolve(d.path))
            if d.test_path:
                test = load_amat(cfg.resolve(d.test_path))
    for ds in (full, test):
        if ds is not None and ds.dim != cfg.network.layer_sizes[0]:
            raise ConfigError(f"input dimension {ds.dim} != network input size {cfg.network.layer_sizes[0]}")
    if test is not None:
        return full, test
    n_train = d.train_size if d.train_size is not None else (4 * len(full)) // 5
    if not 0 < n_train < len(full):
        raise ConfigError(f"dataset.train_size {n_train} must be within (0, {len(full)})")
    return full.split_at(n_train, seed=cfg.seed)


def data_digest(cfg: ExperimentConfig) -> Dict[str, str]:
    out = {}
    for p in cfg.dataset.files():
        h = hashlib.sha256(cfg.resolve(p).read_bytes()).hexdigest()
        out[p] = h
    return out
