"""JSON run configuration with strict key checking and materialized defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import NEIGHBORHOODS, SynthSpec
from .model import ModelVariant
from .objective import LambdaPolicy
from .trainer import TrainConfig

DEFAULT_LAMBDA_GRID = [0.0, 0.1, 0.5, 1.0, "cyclical"]


class ConfigError(ValueError):
    pass


def _build(cls, raw: Any, where: str, drop: tuple[str, ...] = ()):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - set(drop)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DataSection:
    manifest: str | None = None
    synthetic: SynthSpec | None = None
    seed: int = 0
    neighborhood: str = "chain"
    connectivity: int = 8

    def __post_init__(self):
        if self.neighborhood not in NEIGHBORHOODS:
            raise ValueError(f"neighborhood must be one of {sorted(NEIGHBORHOODS)}")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class ObjectiveSection:
    # a number in [0, 1] or "cyclical"
    lam: float | str = "cyclical"
    cycles: int = 5
    ramp: float = 0.8
    pos_weight: float | str | None = "auto"
    train_samples: int = 1

    def __post_init__(self):
        self.lam = parse_lambda(self.lam)
        if isinstance(self.pos_weight, str) and self.pos_weight != "auto":
            raise ValueError('pos_weight must be a number, null or "auto"')
        self.policy()

    def policy(self, lam=None) -> LambdaPolicy:
        lam = self.lam if lam is None else lam
        if lam == "cyclical":
            return LambdaPolicy.cyclical(cycles=self.cycles, ramp=self.ramp)
        return LambdaPolicy.constant(float(lam))


@dataclass
class TrainSection:
    epochs: int = 100
    base_lr: float = 1e-4
    warmup_start_factor: float = 0.1
    warmup_total_iters: int = 10
    batch_size: int = 8


@dataclass
class EvalSection:
    S_predict: int = 16
    threshold: float = 0.5
    eval_seed: int = 12345

    def __post_init__(self):
        if self.S_predict < 1:
            raise ValueError("S_predict must be >= 1")


@dataclass
class AblationSection:
    variants: list[dict] = field(default_factory=lambda: [
        {"bag_transform": "ABMIL", "posterior": "DiagGaussian"}])
    lambdas: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))

    def __post_init__(self):
        if not self.variants or not self.lambdas:
            raise ValueError("ablation grid must be non-empty")
        self.lambdas = [parse_lambda(x) for x in self.lambdas]
        if len(set(self.lambdas)) != len(self.lambdas):
            raise ValueError(f"duplicate lambda values in {self.lambdas}")
        keys = [json.dumps(v, sort_keys=True) for v in self.variants]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate variants in the ablation grid")


def parse_lambda(x) -> float | str:
    if x == "cyclical":
        return "cyclical"
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValueError(f'lambda must be a number in [0, 1] or "cyclical", got {x!r}')
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"lambda {x} outside [0, 1]")
    return float(x)


@dataclass
class RunConfig:
    data: DataSection
    model: dict
    objective: ObjectiveSection
    train: TrainSection
    eval: EvalSection
    ablation: AblationSection
    out_dir: str = "runs/default"
    seeds: list[int] = field(default_factory=lambda: [0])

    def variant(self, n_features: int, overrides: dict | None = None) -> ModelVariant:
        """Model variant for this run; ``P`` comes from the data unless set explicitly."""
        spec = {**self.model, **(overrides or {})}
        if spec.get("P") is None:
            spec["P"] = n_features
        elif spec["P"] != n_features:
            raise ConfigError(f"model.P={spec['P']} but the data has {n_features} features")
        return _build(ModelVariant, spec, "model")

    def train_config(self) -> TrainConfig:
        t, o, e = self.train, self.objective, self.eval
        return TrainConfig(epochs=t.epochs, base_lr=t.base_lr,
                           warmup_start_factor=t.warmup_start_factor,
                           warmup_total_iters=t.warmup_total_iters, batch_size=t.batch_size,
                           S_predict=e.S_predict, train_samples=o.train_samples,
                           eval_seed=e.eval_seed, threshold=e.threshold,
                           pos_weight=o.pos_weight)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["objective"]["lambda"] = out["objective"].pop("lam")
        return out


TOP_KEYS = {"data", "model", "objective", "train", "eval", "ablation", "out_dir", "seeds"}


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")

    data_raw = dict(raw.get("data") or {})
    synth = data_raw.pop("synthetic", None)
    data = _build(DataSection, data_raw, "data")
    if synth is not None:
        data.synthetic = _build(SynthSpec, synth, "data.synthetic")
        try:
            data.synthetic.validate()
        except ValueError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc
    if (data.manifest is None) == (data.synthetic is None):
        raise ConfigError("data: give exactly one of 'manifest' or 'synthetic'")
    if data.synthetic is not None and data.synthetic.geometry != data.neighborhood:
        raise ConfigError(f"data: neighborhood {data.neighborhood!r} does not match synthetic "
                          f"geometry {data.synthetic.geometry!r}")

    model = dict(raw.get("model") or {})
    known = {f.name for f in dataclasses.fields(ModelVariant)}
    bad = sorted(set(model) - known)
    if bad:
        raise ConfigError(f"model: unknown key(s) {', '.join(bad)}")
    full = {f.name: f.default for f in dataclasses.fields(ModelVariant)}
    full["P"] = None  # inferred from the data unless given
    full.update(model)
    model = full
    # validate everything except P, which may be inferred later
    _build(ModelVariant, {**model, "P": model["P"] or 1}, "model")

    obj_raw = dict(raw.get("objective") or {})
    if "lambda" in obj_raw:
        obj_raw["lam"] = obj_raw.pop("lambda")
    elif "lam" in obj_raw:
        raise ConfigError("objective: unknown key(s) lam")
    objective = _build(ObjectiveSection, obj_raw, "objective")
    train = _build(TrainSection, raw.get("train"), "train")
    evals = _build(EvalSection, raw.get("eval"), "eval")
    ablation = _build(AblationSection, raw.get("ablation"), "ablation")
    for k, v in enumerate(ablation.variants):
        if not isinstance(v, dict):
            raise ConfigError(f"ablation.variants[{k}]: expected an object")
        bad = sorted(set(v) - known)
        if bad:
            raise ConfigError(f"ablation.variants[{k}]: unknown key(s) {', '.join(bad)}")
        _build(ModelVariant, {**model, **v, "P": model["P"] or 1}, f"ablation.variants[{k}]")

    out_dir = raw.get("out_dir", "runs/default")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a non-empty string")
    seeds = raw.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    cfg = RunConfig(data, model, objective, train, evals, ablation, out_dir, list(seeds))
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = parse_config(raw)
    # relative manifest paths resolve against the config file's directory
    if cfg.data.manifest is not None and not Path(cfg.data.manifest).is_absolute():
        cfg.data.manifest = str((path.parent / cfg.data.manifest).resolve())
    return cfg
