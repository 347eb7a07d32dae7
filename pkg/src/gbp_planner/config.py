"""Scenario configuration: dataclasses, the ``.cfg`` file format and dotted overrides.

A scenario file is INI-style text with one section per config group::

    [scenario]
    kind = circle
    seed = 3

    [circle]
    n_robots = 10

Values are Python literals (numbers, lists, ``true``/``false``) or bare strings.
Overrides use ``section.key=value`` with the same value syntax.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .factors import FactorParams

KINDS = ("circle", "circle_with_obstacles", "junction", "custom")
HORIZON_MODES = ("stationary", "moving")
WINDOW_MODES = ("relative", "shrinking")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass
class FactorConfig:
    sigma_p: float = 1e-15
    sigma_d: float = 1.0
    sigma_o: float = 0.005
    sigma_r: float = 0.005
    epsilon: float = 0.2
    obstacle_margin: float = 0.0

    def params(self, robot_radius: float, comm_radius: float) -> FactorParams:
        return FactorParams(self.sigma_p, self.sigma_d, self.sigma_o, self.sigma_r,
                            robot_radius, self.epsilon, comm_radius, self.obstacle_margin)


@dataclass
class CommConfig:
    r_c: float = 50.0
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]", "comm.gamma")
        if not self.r_c > 0:
            raise ConfigError("r_c must be positive", "comm.r_c")


@dataclass
class CircleConfig:
    n_robots: int = 10
    radius: float = 50.0
    initial_speed: float = 15.0
    radius_min: float = 2.0
    radius_max: float = 3.0
    start_jitter: float = 0.1      # lateral start offset bound; exact antipodes never swerve


@dataclass
class JunctionConfig:
    channel_width: float = 16.0
    q_in: float = 2.0
    speed: float = 15.0
    arm_length: float = 60.0
    wall_thickness: float = 2.0
    robot_radius: float = 2.0
    measure_window: int = 300


@dataclass
class CustomConfig:
    # Each robot: {"start": [x, y, vx, vy], "goal": [x, y, vx, vy], "radius": r}
    robots: list = field(default_factory=list)
    polygons: list = field(default_factory=list)
    bounds: list = field(default_factory=lambda: [-100.0, -100.0, 100.0, 100.0])


@dataclass
class ScenarioConfig:
    kind: str = "circle"
    seed: int = 0
    dt: float = 0.1
    K: int = 10
    horizon: float = 0.0           # 0 selects the scenario default
    horizon_mode: str = ""         # "" selects the scenario default
    window: str = ""               # relative | shrinking; "" follows the horizon mode
    window_floor: float = 2.0      # shrinking windows stop here, seconds
    max_speed: float = 0.0         # 0 selects the scenario's initial speed
    m_i: int = 50
    m_r: int = 10
    damping: float = 0.4
    max_ticks: int = 600
    sdf_cell: float = 0.5
    factors: FactorConfig = field(default_factory=FactorConfig)
    comm: CommConfig = field(default_factory=CommConfig)
    circle: CircleConfig = field(default_factory=CircleConfig)
    junction: JunctionConfig = field(default_factory=JunctionConfig)
    custom: CustomConfig = field(default_factory=CustomConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}", "scenario.kind")
        if self.horizon_mode and self.horizon_mode not in HORIZON_MODES:
            raise ConfigError(f"unknown horizon mode {self.horizon_mode!r}", "scenario.horizon_mode")
        if self.window and self.window not in WINDOW_MODES:
            raise ConfigError(f"unknown window mode {self.window!r}", "scenario.window")
        for name in ("dt", "sdf_cell", "window_floor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", f"scenario.{name}")
        if self.K < 2:
            raise ConfigError("K must be at least 2", "scenario.K")
        if self.m_i < 0 or self.m_r < 0:
            raise ConfigError("iteration counts must be non-negative", "scenario.m_i")
        if not 0.0 <= self.damping < 1.0:
            raise ConfigError("damping must lie in [0, 1)", "scenario.damping")
        if self.kind in ("circle", "circle_with_obstacles") and self.circle.n_robots < 1:
            raise ConfigError("n_robots must be at least 1", "circle.n_robots")

    # Resolved scenario defaults ------------------------------------------------
    @property
    def effective_horizon(self) -> float:
        if self.horizon > 0:
            return self.horizon
        if self.kind in ("circle", "circle_with_obstacles"):
            # Time to come to rest across the diameter under constant deceleration.
            return 2.0 * (2.0 * self.circle.radius) / self.circle.initial_speed
        return 2.0

    @property
    def effective_horizon_mode(self) -> str:
        if self.horizon_mode:
            return self.horizon_mode
        return "moving" if self.kind == "junction" else "stationary"

    @property
    def effective_window(self) -> str:
        """A goal-anchored horizon counts down to its arrival time; a moving one stays relative."""
        if self.window:
            return self.window
        return "shrinking" if self.effective_horizon_mode == "stationary" else "relative"

    @property
    def effective_max_speed(self) -> float:
        if self.max_speed > 0:
            return self.max_speed
        if self.kind == "junction":
            return self.junction.speed
        return self.circle.initial_speed


SECTIONS = {
    "scenario": None,
    "factors": "factors",
    "comm": "comm",
    "circle": "circle",
    "junction": "junction",
    "custom": "custom",
}


def _field_types(cls) -> dict[str, Any]:
    hints = {}
    for f in dataclasses.fields(cls):
        hints[f.name] = f.type
    return hints


def _coerce(raw: Any, type_name: str, key: str, line: int | None):
    type_name = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", str(type_name))
    try:
        if type_name == "bool":
            if isinstance(raw, str):
                low = raw.strip().lower()
                if low in ("true", "yes", "1", "on"):
                    return True
                if low in ("false", "no", "0", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if type_name == "int":
            value = _literal(raw)
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(raw)
            return value
        if type_name == "float":
            value = _literal(raw)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(raw)
            return float(value)
        if type_name == "str":
            value = _literal(raw)
            return value if isinstance(value, str) else str(raw).strip()
        if type_name == "list":
            value = _literal(raw)
            if not isinstance(value, (list, tuple)):
                raise ValueError(raw)
            return list(value)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"cannot parse value {raw!r} as {type_name}", key, line) from exc
    raise ConfigError(f"unsupported field type {type_name}", key, line)


def _literal(raw: Any):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[(.+)\]$", stripped)
        if header:
            section = header.group(1).strip()
            continue
        match = re.match(r"^([A-Za-z_][\w]*)\s*[=:]", stripped)
        if match and section is not None:
            lines.setdefault((section, match.group(1)), number)
    return lines


def _section_lines(text: str) -> dict[str, int]:
    out = {}
    for number, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"^\[(.+)\]$", line.strip())
        if header:
            out.setdefault(header.group(1).strip(), number)
    return out


def _assign(cfg: ScenarioConfig, section: str, key: str, raw: Any, line: int | None) -> None:
    dotted = f"{section}.{key}"
    if section not in SECTIONS:
        raise ConfigError(f"unknown section '{section}'", dotted, line)
    attr = SECTIONS[section]
    target = cfg if attr is None else getattr(cfg, attr)
    types = _field_types(type(target))
    if key not in types or (attr is None and key in SECTIONS.values()):
        raise ConfigError("unknown key", dotted, line)
    setattr(target, key, _coerce(raw, types[key], dotted, line))


def _validate(cfg: ScenarioConfig) -> ScenarioConfig:
    # Re-run dataclass validation after field-wise assignment.
    cfg.comm.__post_init__()
    cfg.__post_init__()
    return cfg


def parse_config(text: str, overrides: list[str] | tuple[str, ...] = ()) -> ScenarioConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed scenario file: {exc.message if hasattr(exc, 'message') else exc}",
                          getattr(exc, "option", None), getattr(exc, "lineno", None)) from exc
    key_lines = _key_lines(text)
    section_lines = _section_lines(text)
    cfg = ScenarioConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '{section}'", section, section_lines.get(section))
        for key, raw in parser.items(section):
            _assign(cfg, section, key, raw, key_lines.get((section, key)))
    for item in overrides:
        apply_override(cfg, item)
    return _validate(cfg)


def apply_override(cfg: ScenarioConfig, item: str) -> ScenarioConfig:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split("=", 1)
    dotted = dotted.strip()
    if "." not in dotted:
        raise ConfigError("override keys are dotted (section.key)", dotted)
    section, key = dotted.split(".", 1)
    _assign(cfg, section, key, raw, None)
    return _validate(cfg)


# Per-kind parameter changes applied by ``builtin_config`` on top of the dataclass defaults.
BUILTIN_OVERRIDES = {
    # walls line both sides of every lane, so the obstacle factor reaches 1 m past contact
    "junction": ["factors.sigma_d=0.5", "factors.obstacle_margin=1.0"],
}


def builtin_config(kind: str, overrides=()) -> ScenarioConfig:
    """The reference setup for a scenario kind (the junction uses a tighter dynamics noise and an obstacle margin)."""
    if kind not in KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r}", "scenario.kind")
    return parse_config(f"[scenario]\nkind = {kind}\n", BUILTIN_OVERRIDES.get(kind, []) + list(overrides))


def load_config(path: str | Path, overrides=()) -> ScenarioConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out = {"scenario": {}}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = dataclasses.asdict(value)
        else:
            out["scenario"][f.name] = value
    return out


def config_to_text(cfg: ScenarioConfig) -> str:
    """Serialize every effective field so that ``parse_config`` round-trips exactly."""
    lines = []
    for section, values in config_to_dict(cfg).items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {value!r}" if not isinstance(value, bool) else f"{key} = {str(value).lower()}")
        lines.append("")
    return "\n".join(lines)


def config_from_dict(data: dict) -> ScenarioConfig:
    cfg = ScenarioConfig()
    for section, values in data.items():
        for key, value in values.items():
            _assign(cfg, section, key, value, None)
    return _validate(cfg)
