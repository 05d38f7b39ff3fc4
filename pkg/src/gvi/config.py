"""Experiment configuration: one JSON document per experiment.

A config names a scheme, an environment, coefficient settings, an error
model, a budget and a seed list. ``variants`` fan one config out into
several labelled curves (a sweep, or a scheme comparison) by applying
dotted-key overrides to the base. Serialized configs carry a
``parameter_sources`` block marking every setting as ``published`` (a
value reported for the original experiments) or ``chosen`` (filled in
here); the block is informational and ignored when parsing.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from gvi.exceptions import ConfigError

TABULAR_SCHEMES = ("mdvi", "gvi_explicit", "gvi_stable", "averaged")
DEEP_SCHEMES = ("dgvi", "mdqn")
TABULAR_ENVS = ("maze", "random_mdp", "two_state")
DEEP_ENVS = ("cartpole", "discrete_pendulum")

# deep runs need alpha2 > gamma (see gvi.deep.dgvi.DeepConfig); filled in when
# a deep config leaves schedule.alpha2 unset
DEEP_ALPHA2 = 0.999

# informational blocks written by config_to_dict and ignored on parsing
_INFO_KEYS = ("parameter_sources", "parameter_sources_by_variant")

Scheme = Literal["mdvi", "gvi_explicit", "gvi_stable", "averaged", "dgvi", "mdqn"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvConfig(_Section):
    kind: Literal["maze", "random_mdp", "two_state", "cartpole", "discrete_pendulum"] = "maze"
    gamma: float = Field(0.99, gt=0, lt=1)
    # maze
    width: int = Field(5, ge=1)
    height: int = Field(5, ge=1)
    wall_density: float = Field(0.2, ge=0, lt=1)
    success_prob: float = Field(0.9, gt=0, le=1)
    slip_prob: float = Field(0.1, ge=0, lt=1)
    goal_reward: float = 1.0
    horizon: int = Field(25, ge=1)
    maze_seed: int | None = None  # None: each run seed also seeds its maze layout
    # random_mdp
    num_states: int = Field(10, ge=1)
    num_actions: int = Field(3, ge=1)
    # two_state
    big_k: int = Field(100, ge=2)


class ScheduleConfig(_Section):
    alpha1: float = Field(2.0, ge=0)
    alpha2: float = Field(0.9, gt=0, le=1)
    lambda_init: float = Field(10.0, gt=0)
    lambda_const: float = Field(10.0, gt=0)


class ErrorConfig(_Section):
    kind: Literal["none", "periodic_uniform", "gaussian"] = "periodic_uniform"
    period: int = Field(100, ge=1)
    scale: float | None = Field(None, ge=0)
    application_mode: Literal["scalar_broadcast", "per_entry"] = "scalar_broadcast"


class TabularConfig(_Section):
    iterations: int = Field(2000, ge=1)
    log_floor: float | None = -50.0


class DeepSection(_Section):
    total_steps: int = Field(50_000, ge=1)
    buffer_capacity: int = Field(50_000, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_starts: int = Field(1_000, ge=0)
    lr: float = Field(1e-4, gt=0)
    hidden: tuple[int, ...] = (256, 256)
    nu: float = Field(0.05, gt=0, le=1)
    nu_slow: float = Field(0.005, gt=0, le=1)
    log_floor: float | None = -1.0
    eval_every: int = Field(300, ge=1)
    eval_episodes: int = Field(10, ge=1)
    exploration: Literal["softmax", "epsilon_greedy"] = "softmax"
    epsilon: float = Field(0.05, ge=0, le=1)
    target_network: bool = False
    polyak: float = Field(0.005, gt=0, le=1)
    dtype: Literal["float32", "float64"] = "float32"
    checkpoint_every: int | None = Field(None, ge=1)


class Variant(_Section):
    label: str = Field(min_length=1)
    overrides: dict[str, Any] = Field(default_factory=dict)

    @field_validator("label")
    @classmethod
    def _plain_label(cls, v: str) -> str:
        if any(c in v for c in "/\\") or v in (".", ".."):
            raise ValueError(f"label {v!r} must be usable as a directory name")
        return v


class ExperimentConfig(_Section):
    name: str = "experiment"
    scheme: Scheme = "gvi_explicit"
    env: EnvConfig = EnvConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    errors: ErrorConfig = ErrorConfig()
    tabular: TabularConfig = TabularConfig()
    deep: DeepSection = DeepSection()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs"
    variants: tuple[Variant, ...] = ()

    @model_validator(mode="before")
    @classmethod
    def _deep_alpha2(cls, data):
        if not isinstance(data, dict) or data.get("scheme") not in DEEP_SCHEMES:
            return data
        sched = data.get("schedule", {})
        if isinstance(sched, ScheduleConfig):
            if "alpha2" not in sched.model_fields_set:
                sched = sched.model_copy(update={"alpha2": DEEP_ALPHA2})
        elif isinstance(sched, dict) and "alpha2" not in sched:
            sched = {**sched, "alpha2": DEEP_ALPHA2}
        return {**data, "schedule": sched}

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("seed list is empty; give at least one seed")
        if len(set(v)) != len(v):
            raise ValueError(f"seed list has duplicates: {list(v)}")
        return v

    @model_validator(mode="after")
    def _compatible(self):
        if self.scheme in TABULAR_SCHEMES and self.env.kind not in TABULAR_ENVS:
            raise ValueError(f"scheme {self.scheme!r} needs a tabular environment {TABULAR_ENVS}, "
                             f"got {self.env.kind!r}")
        if self.scheme in DEEP_SCHEMES and self.env.kind not in DEEP_ENVS:
            raise ValueError(f"scheme {self.scheme!r} needs a control task {DEEP_ENVS}, got {self.env.kind!r}")
        if abs(self.env.success_prob + self.env.slip_prob - 1.0) > 1e-12:
            raise ValueError("env.success_prob + env.slip_prob must equal 1")
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            raise ValueError(f"variant labels must be unique, got {labels}")
        return self

    @property
    def is_deep(self) -> bool:
        return self.scheme in DEEP_SCHEMES


# --- parsing, overrides, serialization ------------------------------------------------


def _raise(err: ValidationError, where: str) -> None:
    msgs = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        msgs.append(f"{loc}: {e['msg']}")
    raise ConfigError(f"invalid {where}: " + "; ".join(msgs)) from None


def parse_config(data: dict, where: str = "config") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"invalid {where}: expected a JSON object at the top level")
    data = {k: v for k, v in data.items() if k not in _INFO_KEYS}
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as err:
        _raise(err, where)
    for variant in cfg.variants:
        expand_variant(cfg, variant)  # fail early on bad variant overrides
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err.msg} at line {err.lineno})") from None
    return parse_config(data, str(path))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        child = node.get(part)
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {'.'.join(parts[: i + 1])!r} is not a section")
        node = child
    if parts[-1] not in node:
        raise ConfigError(f"override {key!r}: unknown setting {parts[-1]!r}")
    node[parts[-1]] = value


def with_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key=value`` strings (or a dict of dotted keys) and revalidate.

    Values are parsed as JSON when possible, so ``seeds=[1,2]`` and
    ``deep.log_floor=null`` work; anything else is taken as a string.
    """
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = []
        for text in overrides:
            key, sep, value = text.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"override {text!r} is not of the form key=value")
            items.append((key.strip(), _parse_value(value.strip())))
    data = cfg.model_dump(mode="json")
    for key, value in items:
        _set_dotted(data, key, value)
    return parse_config(data, "config after overrides")


def expand_variant(cfg: ExperimentConfig, variant: Variant) -> ExperimentConfig:
    if "variants" in variant.overrides or any(k.startswith("variants.") for k in variant.overrides):
        raise ConfigError(f"variant {variant.label!r} may not override the variant list")
    base = cfg.model_copy(update={"variants": ()})
    try:
        return with_overrides(base, variant.overrides)
    except ConfigError as err:
        raise ConfigError(f"variant {variant.label!r}: {err}") from None


def expand(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """(label, config) pairs to run; a config without variants runs as itself."""
    if not cfg.variants:
        return [(cfg.scheme, cfg)]
    return [(v.label, expand_variant(cfg, v)) for v in cfg.variants]


# values reported for the original experiments; anything else is marked chosen
_PUBLISHED = {
    "env.width": 5,
    "env.height": 5,
    "env.success_prob": 0.9,
    "env.slip_prob": 0.1,
    "env.goal_reward": 1.0,
    "env.horizon": 25,
    "errors.kind": "periodic_uniform",
    "errors.period": 100,
    "schedule.alpha1": 2.0,
    "schedule.alpha2": 0.9,
    "deep.lr": 1e-4,
    "deep.batch_size": 32,
    "deep.hidden": [256, 256],
    "deep.buffer_capacity": 1_000_000,
    "deep.eval_every": 300,
    "deep.eval_episodes": 10,
    "deep.target_network": False,
}
_TABULAR_KEYS = ("env", "schedule", "errors", "tabular")
_DEEP_KEYS = ("env", "schedule", "deep")
_MAZE_ONLY = {"width", "height", "wall_density", "success_prob", "slip_prob", "goal_reward", "horizon", "maze_seed"}
_ENV_FIELDS = {
    "maze": _MAZE_ONLY | {"gamma"},
    "random_mdp": {"num_states", "num_actions", "gamma"},
    "two_state": {"big_k", "gamma"},
    "cartpole": set(),
    "discrete_pendulum": set(),
}


def _source(cfg: ExperimentConfig, key: str, value) -> str:
    if key == "schedule.lambda_const":
        published = (30.0, 50.0) if cfg.scheme == "mdvi" else (10.0,)
        return "published" if value in published else "chosen"
    if key == "env.gamma":
        return "published" if cfg.is_deep and value == 0.99 else "chosen"
    if key == "seeds":
        return "published" if len(value) == 5 else "chosen"
    if key in ("schedule.alpha1", "schedule.alpha2") and cfg.is_deep:
        return "chosen"  # only the tabular values were reported
    if key in _PUBLISHED:
        return "published" if value == _PUBLISHED[key] else "chosen"
    return "chosen"


def parameter_sources(cfg: ExperimentConfig) -> dict[str, str]:
    """Setting -> 'published' | 'chosen' for every setting the scheme uses."""
    data = cfg.model_dump(mode="json")
    out = {}
    for section in (_DEEP_KEYS if cfg.is_deep else _TABULAR_KEYS):
        for field, value in data[section].items():
            if section == "env" and field not in _ENV_FIELDS[cfg.env.kind]:
                continue
            if section == "schedule":
                used = {"mdvi": ("lambda_const",), "mdqn": ("lambda_const",)}.get(
                    cfg.scheme, ("alpha1", "alpha2", "lambda_init"))
                if field not in used:
                    continue
            if section == "errors" and cfg.errors.kind == "none" and field != "kind":
                continue
            out[f"{section}.{field}"] = _source(cfg, f"{section}.{field}", value)
    out["seeds"] = _source(cfg, "seeds", data["seeds"])
    return out


def config_to_dict(cfg: ExperimentConfig) -> dict:
    data = cfg.model_dump(mode="json")
    data["parameter_sources"] = parameter_sources(cfg)
    if cfg.variants:
        data["parameter_sources_by_variant"] = {
            label: parameter_sources(v) for label, v in expand(cfg)}
    return data


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


# --- presets ---------------------------------------------------------------------------


# a broadcast shock moves every action value of a state equally and leaves the
# softmax policies untouched, so the maze comparisons use per-entry shocks
_MAZE_ERRORS = ErrorConfig(kind="periodic_uniform", period=100, application_mode="per_entry")


def _preset_maze_comparison() -> ExperimentConfig:
    return ExperimentConfig(
        name="maze-comparison",
        scheme="gvi_explicit",
        errors=_MAZE_ERRORS,
        variants=(
            Variant(label="gvi"),
            Variant(label="mdvi_lambda30", overrides={"scheme": "mdvi", "schedule.lambda_const": 30.0}),
            Variant(label="mdvi_lambda50", overrides={"scheme": "mdvi", "schedule.lambda_const": 50.0}),
        ),
    )


def _preset_alpha_sweep(field: str, values) -> ExperimentConfig:
    return ExperimentConfig(
        name=f"{field}-sweep",
        scheme="gvi_explicit",
        errors=_MAZE_ERRORS,
        variants=tuple(Variant(label=f"{field}_{v:g}", overrides={f"schedule.{field}": v}) for v in values),
    )


def _preset_deep(name: str, task: str) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        scheme="dgvi",
        env=EnvConfig(kind=task),
        variants=(Variant(label="dgvi"), Variant(label="mdqn_lambda10", overrides={"scheme": "mdqn"})),
    )


PRESETS = {
    "maze-comparison": _preset_maze_comparison,
    "alpha1-sweep": lambda: _preset_alpha_sweep("alpha1", (0.5, 1.0, 2.0, 4.0)),
    "alpha2-sweep": lambda: _preset_alpha_sweep("alpha2", (0.5, 0.7, 0.9, 0.99)),
    "deep-cartpole": lambda: _preset_deep("deep-cartpole", "cartpole"),
    "deep-pendulum": lambda: _preset_deep("deep-pendulum", "discrete_pendulum"),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
