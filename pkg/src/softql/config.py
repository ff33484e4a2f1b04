"""Run configuration files.

A config is a YAML document with a ``version`` key and three sections::

    version: 1
    train:   {...TrainConfig fields...}
    env:     {name: multigoal, ...MultiGoalEnv fields...}
    run:     {output_dir: ..., eval_rollouts: ..., log_wall_clock: ...}

Unknown keys and ill-typed values are rejected with the offending line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import TrainConfig
from .envs import MultiGoalEnv
from .errors import InvalidInputError

CONFIG_VERSION = 1
ENV_FIELDS = ("goal_weight", "goal_sigma", "action_cost", "capture_radius", "horizon", "reset_jitter",
              "goals")
RUN_FIELDS = {"output_dir": str, "eval_rollouts": int, "log_wall_clock": bool}


class ConfigError(InvalidInputError):
    def __init__(self, message, line=None, source=None):
        where = f"{source or '<config>'}:{line}: " if line else f"{source or '<config>'}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class EnvConfig:
    name: str = "multigoal"
    goal_weight: float = 10.0
    goal_sigma: float = 1.0
    action_cost: float = 0.01
    capture_radius: float = 0.5
    horizon: int = 20
    reset_jitter: float = 0.1
    goals: tuple = ((5.0, 0.0), (-5.0, 0.0), (0.0, 5.0), (0.0, -5.0))

    def make(self) -> MultiGoalEnv:
        if self.name != "multigoal":
            raise InvalidInputError(f"unknown environment {self.name!r}")
        return MultiGoalEnv(**{k: getattr(self, k) for k in ENV_FIELDS})


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    output_dir: str = "runs/default"
    eval_rollouts: int = 100
    log_wall_clock: bool = False

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train["hidden_sizes"] = list(train["hidden_sizes"])
        env = dataclasses.asdict(self.env)
        env["goals"] = [list(g) for g in env["goals"]]
        return {"version": CONFIG_VERSION, "train": train, "env": env,
                "run": {"output_dir": self.output_dir, "eval_rollouts": self.eval_rollouts,
                        "log_wall_clock": self.log_wall_clock}}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _coerce(value, default, key, line, source):
    """Check ``value`` against the type of ``default``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}", line, source)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", line, source)
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-3 as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", line, source)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", line, source)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}", line, source)
        if key == "goals":
            if not all(isinstance(g, list) and len(g) == 2 and all(isinstance(c, (int, float)) for c in g)
                       for g in value):
                raise ConfigError("goals: expected a list of [x, y] pairs", line, source)
            return tuple(tuple(float(c) for c in g) for g in value)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of integers", line, source)
        return tuple(value)
    raise ConfigError(f"{key}: unsupported field type", line, source)


def _mapping_lines(node):
    return {k.value: (v, k.start_mark.line + 1) for k, v in node.value}


def parse_config(text: str, source=None) -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from exc
    if root is None or not isinstance(root, yaml.MappingNode):
        raise ConfigError("config must be a mapping", 1, source)
    top = _mapping_lines(root)
    for key, (_, line) in top.items():
        if key not in ("version", "train", "env", "run"):
            raise ConfigError(f"unknown key {key!r}", line, source)
    if "version" not in data:
        raise ConfigError("missing 'version'", 1, source)
    if data["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data['version']!r}", top["version"][1], source)

    def section(name):
        if name not in data or data[name] is None:
            return {}, {}
        node, line = top[name]
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"section {name!r} must be a mapping", line, source)
        return data[name], {k: ln for k, (_, ln) in _mapping_lines(node).items()}

    train_defaults = TrainConfig()
    values, lines = section("train")
    train_kwargs = {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown train key {key!r}", lines[key], source)
        train_kwargs[key] = _coerce(value, getattr(train_defaults, key), key, lines[key], source)
    try:
        train = TrainConfig(**train_kwargs)
    except InvalidInputError as exc:
        # validation messages lead with the field name
        raise ConfigError(str(exc), lines.get(str(exc).split()[0]), source) from exc

    env_defaults = EnvConfig()
    values, lines = section("env")
    env_kwargs = {}
    for key, value in values.items():
        if key not in {f.name for f in dataclasses.fields(EnvConfig)}:
            raise ConfigError(f"unknown env key {key!r}", lines[key], source)
        env_kwargs[key] = _coerce(value, getattr(env_defaults, key), key, lines[key], source)
    env = EnvConfig(**env_kwargs)
    if env.name != "multigoal":
        raise ConfigError(f"unknown environment {env.name!r}", lines.get("name"), source)

    values, lines = section("run")
    run_kwargs = {}
    for key, value in values.items():
        if key not in RUN_FIELDS:
            raise ConfigError(f"unknown run key {key!r}", lines[key], source)
        default = getattr(RunConfig(), key)
        run_kwargs[key] = _coerce(value, default, key, lines[key], source)
    if run_kwargs.get("eval_rollouts", 0) < 0:
        raise ConfigError("eval_rollouts must be non-negative", lines.get("eval_rollouts"), source)
    return RunConfig(train=train, env=env, **run_kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file not found", None, str(path))
    return parse_config(path.read_text(), source=str(path))
