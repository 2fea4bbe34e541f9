"""Run configuration: presets, flat ``key = value`` files and typed option parsing.

Resolution order is preset defaults, then the config file, then command-line
flags. Keys the command does not know are rejected rather than ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .spin import PhysicalParams, QuadrupoleTensor, SpinQuantum

__all__ = [
    "ConfigError",
    "Option",
    "RunConfig",
    "PRESETS",
    "read_config_file",
    "resolve",
    "parse_float_list",
    "parse_int_list",
    "parse_q",
]


class ConfigError(ValueError):
    pass


def parse_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ConfigError(f"not a number: {s!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"not a finite number: {s!r}")
    return v


def parse_int(s: str) -> int:
    try:
        return int(str(s).strip())
    except ValueError:
        raise ConfigError(f"not an integer: {s!r}") from None


def parse_seed(s: str) -> int:
    v = parse_int(s)
    if not 0 <= v < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {v}")
    return v


def parse_bool(s: str) -> bool:
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _tokens(s: str) -> list[str]:
    return [t for t in str(s).replace(",", " ").split() if t]


def parse_float_list(s: str) -> list[float]:
    """``"0.3 1.0"``, ``"0.3, 1.0"`` or an inclusive range ``"0.85..1.0:0.05"``."""
    s = str(s).strip()
    if ".." in s and not s.startswith("."):
        span, _, step = s.partition(":")
        lo, _, hi = span.partition("..")
        a, b = parse_float(lo), parse_float(hi)
        d = parse_float(step) if step else 1.0
        if d <= 0 or b < a:
            raise ConfigError(f"invalid range {s!r}")
        n = int(math.floor((b - a) / d + 1e-9))
        return [round(a + k * d, 12) for k in range(n + 1)]
    values = [parse_float(t) for t in _tokens(s)]
    if not values:
        raise ConfigError("empty list")
    return values


def parse_int_list(s: str) -> list[int]:
    """``"1 2 3"``, ``"1,2,3"`` or an inclusive range ``"1..10"``."""
    s = str(s).strip()
    if ".." in s:
        lo, _, hi = s.partition("..")
        a, b = parse_int(lo), parse_int(hi)
        if b < a:
            raise ConfigError(f"invalid range {s!r}")
        return list(range(a, b + 1))
    values = [parse_int(t) for t in _tokens(s)]
    if not values:
        raise ConfigError("empty list")
    return values


def parse_q(s: str) -> str | list[float]:
    """``zero``, ``preset`` or the five components ``qxx qyy qyz qxz qxy`` in kHz."""
    t = _tokens(s)
    if len(t) == 1 and t[0].lower() in ("zero", "preset"):
        return t[0].lower()
    if len(t) != 5:
        raise ConfigError(f"q must be 'zero', 'preset' or five numbers (qxx qyy qyz qxz qxy), got {s!r}")
    return [parse_float(x) for x in t]


def choice(*allowed: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        t = str(s).strip().lower()
        if t not in allowed:
            raise ConfigError(f"expected one of {', '.join(allowed)}, got {s!r}")
        return t

    return parse


def parse_spin(s: str) -> float:
    t = str(s).strip()
    try:
        if "/" in t:
            num, den = t.split("/")
            v = int(num) / int(den)
        else:
            v = float(t)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"invalid spin {s!r}") from None
    if v < 0.5 or abs(2 * v - round(2 * v)) > 1e-12:
        raise ConfigError(f"spin must be a positive half-integer or integer, got {s!r}")
    return v


def text(s: str) -> str:
    return str(s).strip()


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[str], Any]
    help: str
    nargs: str | None = None
    aliases: tuple[str, ...] = ()


PRESETS: dict[str, dict[str, Any]] = {
    "sb123": dict(
        spin=3.5, b0_tesla=1.395, gamma_n_khz_per_tesla=5.55e3, gamma_e_khz_per_tesla=2.802e7,
        hyperfine_khz=9.75e4, theta_deg=0.0, q="preset", kappa=4.47,
    ),
    "ge73": dict(
        spin=4.5, b0_tesla=1.0, gamma_n_khz_per_tesla=-1.4852e3, gamma_e_khz_per_tesla=2.802e7,
        hyperfine_khz=350.0, theta_deg=0.0, q="preset", kappa=1.0,
    ),
}

PRESET_TENSORS = {"sb123": QuadrupoleTensor.sb123, "ge73": QuadrupoleTensor.ge73_placeholder}


@dataclass
class RunConfig:
    """Resolved settings of one command invocation."""

    command: str
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    @property
    def output_dir(self) -> Path:
        return Path(self["output_dir"])

    @property
    def formats(self) -> tuple[str, ...]:
        f = self["format"]
        return ("csv", "json") if f == "both" else (f,)

    def spin_quantum(self) -> SpinQuantum:
        return SpinQuantum(int(round(2 * self["spin"])) + 1)

    def physical(self, b0: float | None = None) -> PhysicalParams:
        return PhysicalParams(
            b0=self["b0_tesla"] if b0 is None else b0,
            gamma_n=self["gamma_n_khz_per_tesla"],
            gamma_e=self["gamma_e_khz_per_tesla"],
            hyperfine=self["hyperfine_khz"],
            theta=float(np.deg2rad(self["theta_deg"])),
        )

    def tensor(self, key: str = "q") -> QuadrupoleTensor:
        q = self[key]
        if q == "zero":
            return QuadrupoleTensor.zero()
        if q == "preset":
            return PRESET_TENSORS[self["preset"]]()
        return QuadrupoleTensor.from_params(q)


def read_config_file(path: Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys use ``_`` or ``-``."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve(
    command: str,
    options: Mapping[str, Option],
    defaults: Mapping[str, Any],
    file_values: Mapping[str, str],
    flag_values: Mapping[str, Any],
) -> RunConfig:
    """Merge preset defaults, config file and flags for one command.

    ``flag_values`` holds raw strings (or lists of strings for multi-value
    flags) for flags given on the command line only.
    """
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        raise ConfigError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")

    def parsed(key: str, raw: Any) -> Any:
        if isinstance(raw, (list, tuple)):
            raw = " ".join(str(r) for r in raw)
        try:
            return options[key].parse(raw)
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    preset_raw = flag_values.get("preset", file_values.get("preset", "sb123"))
    preset = parsed("preset", preset_raw)
    values: dict[str, Any] = {k: v for k, v in PRESETS[preset].items() if k in options}
    values.update(defaults)
    values["preset"] = preset
    for source in (file_values, flag_values):
        for key, raw in source.items():
            values[key] = parsed(key, raw)
    missing = sorted(k for k in options if k not in values)
    if missing:
        raise ConfigError(f"missing required setting(s) for '{command}': {', '.join(missing)}")
    return RunConfig(command, {k: values[k] for k in sorted(values)})
