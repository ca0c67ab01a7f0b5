"""Declarative run configuration.

A single YAML file is the source of truth for an experiment: environment,
architecture, training budgets, planner budget, and evaluation protocol.
Unknown keys are hard errors (with the offending line number), so typos
cannot silently fall back to defaults. The resolved config hashes to the
run-directory name, which makes reruns land on the same artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .planner import PlanConfig
from .worldmodel import ModelConfig

ENV_IDS = ("pointmaze", "wall", "pushbox")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class ArchConfig:
    n_tokens: int = 64
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    loc_layers: int = 3
    loc_width: int = 48
    loc_heads: int = 4
    loc_head_out: int = 4
    pred_layers: int = 4
    dense_layers: int = 4
    tau: float = 0.5
    k_min: int = 8
    history: int = 3


@dataclass
class TrainBlock:
    episodes: int = 200
    steps: int = 20
    epochs: int = 30
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    data_seed: int = 0
    heldout_frac: float = 0.15


@dataclass
class PlannerBlock:
    horizon: int = 5
    iterations: int = 10
    samples: int = 64
    elites: int = 8
    sigma0: float = 0.5
    mask_mode: str = "sparse"
    max_steps: int = 20
    seed: int = 0


@dataclass
class EvalBlock:
    episodes: int = 100
    rollout_steps: int = 5
    pixel_threshold: float = 16.0 / 255.0
    closed_loop_episodes: int = 25
    scan_range: float = 0.5
    scan_grid: int = 9
    scan_pairs: int = 10
    bench_batch: int = 32
    bench_reps: int = 7
    pca_max_samples: int = 20000
    seed: int = 0


@dataclass
class RunConfig:
    env: str = "pointmaze"
    encoder_seed: int = 0
    model_seed: int = 1
    out_root: str = "runs"
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainBlock = field(default_factory=TrainBlock)
    planner: PlannerBlock = field(default_factory=PlannerBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    def validate(self):
        if self.env not in ENV_IDS:
            raise ConfigError(f"unknown env '{self.env}' (choose from {ENV_IDS})")
        try:
            self.model_config().validate()
        except ValueError as e:
            raise ConfigError(f"arch: {e}") from e
        try:
            self.plan_config().validate()
        except ValueError as e:
            raise ConfigError(f"planner: {e}") from e
        tb, ev = self.training, self.eval
        if tb.episodes < 1 or tb.steps < 1 or tb.epochs < 1 or tb.batch < 1:
            raise ConfigError("training: episodes/steps/epochs/batch must be positive")
        if not 0.0 < tb.heldout_frac < 1.0:
            raise ConfigError("training: heldout_frac must lie in (0, 1)")
        if ev.episodes < 1 or ev.rollout_steps < 1 or ev.scan_grid < 3:
            raise ConfigError("eval: episodes/rollout_steps positive, scan_grid >= 3")
        if ev.scan_grid % 2 == 0:
            raise ConfigError("eval: scan_grid must be odd (centered scans)")
        return self

    def model_config(self):
        return ModelConfig(**dataclasses.asdict(self.arch))

    def plan_config(self, **overrides):
        p = self.planner
        kw = dict(horizon=p.horizon, iterations=p.iterations, samples=p.samples,
                  elites=p.elites, sigma0=p.sigma0, mask_mode=p.mask_mode, seed=p.seed)
        kw.update(overrides)
        return PlanConfig(**kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def run_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self):
        return Path(self.out_root) / self.run_hash()


_BLOCKS = {"arch": ArchConfig, "training": TrainBlock, "planner": PlannerBlock, "eval": EvalBlock}
_SCALARS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name not in _BLOCKS}


def _node_items(node):
    """(key, value-node, line) triples of a YAML mapping node."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"line {node.start_mark.line + 1}: expected a mapping")
    out = []
    for k, v in node.value:
        out.append((k.value, v, k.start_mark.line + 1))
    return out


def _coerce(value, target_type, name, line):
    if target_type is float and isinstance(value, int):
        return float(value)
    if target_type is int and isinstance(value, bool):
        raise ConfigError(f"line {line}: '{name}' must be {target_type.__name__}")
    if not isinstance(value, target_type):
        raise ConfigError(
            f"line {line}: '{name}' must be {target_type.__name__}, got {type(value).__name__}")
    return value


def _fill_block(cls, node):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, vnode, line in _node_items(node):
        if key not in fields:
            raise ConfigError(f"line {line}: unknown key '{key}' in {cls.__name__}")
        value = yaml.safe_load(yaml.serialize(vnode))
        kwargs[key] = _coerce(value, type(getattr(cls(), key)), key, line)
    return cls(**kwargs)


def load_config(path):
    """Parse + validate a YAML run config; unknown keys are errors that
    name the line."""
    text = Path(path).read_text()
    return parse_config(text)


def parse_config(text):
    root = yaml.compose(text)
    if root is None:
        return RunConfig().validate()
    kwargs = {}
    for key, vnode, line in _node_items(root):
        if key in _BLOCKS:
            kwargs[key] = _fill_block(_BLOCKS[key], vnode)
        elif key in _SCALARS:
            value = yaml.safe_load(yaml.serialize(vnode))
            default = getattr(RunConfig(), key)
            kwargs[key] = _coerce(value, type(default), key, line)
        else:
            raise ConfigError(f"line {line}: unknown top-level key '{key}'")
    return RunConfig(**kwargs).validate()


def save_config(cfg, path):
    """Serialize the resolved config (deterministic key order)."""
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
