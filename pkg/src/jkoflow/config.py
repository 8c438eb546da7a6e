"""Experiment configuration: a YAML file validated into :class:`FlowConfig`.

Validation errors are reported with the line and column of the offending key
in the source file. See README.md for the full key tree.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, \
    model_validator

from .errors import ConfigError
from .jko import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LrStage(_Strict):
    start: PositiveInt = 1  # first JKO step (1-based, inclusive)
    end: Optional[PositiveInt] = None  # last step, inclusive; open-ended when omitted
    lr: PositiveFloat


class TrainSection(_Strict):
    iters: PositiveInt = 500
    batch: PositiveInt = 512
    width: PositiveInt = 64
    layers: PositiveInt = 2
    alpha: PositiveFloat = 0.01
    init: Literal["identity", "warm", "auto"] = "auto"
    pool: int = Field(16384, ge=0)
    lr_schedule: list[LrStage] = Field(default_factory=lambda: [LrStage(lr=5e-3)])
    pretrain_iters: PositiveInt = 3000

    def lr_for(self, step: int) -> float:
        lr = self.lr_schedule[0].lr
        for stage in self.lr_schedule:
            if stage.start <= step and (stage.end is None or step <= stage.end):
                lr = stage.lr
        return lr

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(iters=self.iters, lr=self.lr_for(1), batch=self.batch, width=self.width,
                           layers=self.layers, alpha=self.alpha, init=self.init, pool=self.pool,
                           pretrain_iters=self.pretrain_iters)


class EvalSection(_Strict):
    n_samples: int = Field(10_000, ge=100)
    times: list[PositiveFloat] = Field(default_factory=list)
    em_particles: list[PositiveInt] = Field(default_factory=list)
    em_dt: PositiveFloat = 1e-3


class StationarySection(_Strict):
    components: PositiveInt = 5
    spread: PositiveFloat = 10.0
    initial_var: PositiveFloat = 16.0


class BlrSection(_Strict):
    dataset: str
    test_fraction: float = Field(0.2, gt=0, lt=1)
    minibatch: Optional[PositiveInt] = None
    eval_samples: PositiveInt = 4096
    initial_std: PositiveFloat = 1.0


class MhSection(_Strict):
    burn_in: int = Field(1000, ge=0)
    thinning: PositiveInt = 2
    draws_per_chain: PositiveInt = 8
    n_chains: PositiveInt = 1024


class FilterSection(_Strict):
    sigma: PositiveFloat = 1.0
    t_final: PositiveFloat = 5.0
    obs_interval: PositiveFloat = 0.5
    n_obs: int = Field(9, ge=0)
    pool: PositiveInt = 8192
    grid_lo: float = -5.0
    grid_hi: float = 5.0
    grid_n: PositiveInt = 2000
    mh: MhSection = Field(default_factory=MhSection)


class FlowConfig(_Strict):
    experiment: Literal["stationary", "ou", "blr", "filter", "custom"]
    seed: int = 0
    dim: PositiveInt = 1
    inv_beta: float = Field(1.0, ge=0)
    h: PositiveFloat = 0.1
    steps: int = Field(10, ge=0)
    output_dir: str = "runs/default"
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    potential: Optional[dict] = None
    initial: Optional[dict] = None
    stationary: StationarySection = Field(default_factory=StationarySection)
    blr: Optional[BlrSection] = None
    filter: FilterSection = Field(default_factory=FilterSection)

    @model_validator(mode="after")
    def _check_kind(self):
        if self.experiment == "blr" and self.blr is None:
            raise ValueError("experiment 'blr' needs a 'blr' section")
        if self.experiment == "custom" and self.potential is None:
            raise ValueError("experiment 'custom' needs a 'potential' section")
        if self.experiment == "filter" and self.dim != 1:
            raise ValueError("the filtering experiment is one-dimensional")
        return self

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(), sort_keys=True).encode()).hexdigest()


def _node_at(node, loc, want_key: bool = False):
    """Walk a composed YAML node along a pydantic error location; returns the deepest match.

    With ``want_key`` the key node of the last mapping entry is returned, so
    unknown keys are reported where the key is written.
    """
    for i, key in enumerate(loc):
        if isinstance(node, yaml.MappingNode):
            pair = next(((k, v) for k, v in node.value if k.value == key), None)
            if pair is None:
                return node
            if want_key and i == len(loc) - 1:
                return pair[0]
            node = pair[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            return node
    return node


def parse_config(text: str, source: str = "<string>") -> FlowConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1:1: top level must be a mapping")
    try:
        return FlowConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            node = _node_at(root, err["loc"], want_key=err["type"] == "extra_forbidden")
            mark = node.start_mark
            path = ".".join(str(p) for p in err["loc"]) or "<root>"
            msgs.append(f"{source}:{mark.line + 1}:{mark.column + 1}: {path}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None


def load_config(path) -> FlowConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
