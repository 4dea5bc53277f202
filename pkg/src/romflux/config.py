"""Sectioned ``key = value`` case configuration.

Example::

    # desk case
    [mesh]
    nx = 24
    ny = 24
    nz = 24

    [physics]
    nu = 1e-4
    lid_velocity = 1 0 0

    [closure]
    architecture = lstm

Every key has a default, so an empty file is valid.  Unknown sections or
keys, duplicated keys and out-of-range values raise :class:`ConfigError`
with the offending line number.  ``#`` and ``;`` start comments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["ConfigError", "CaseConfig", "parse_config", "parse_config_text", "SCHEMA"]


class ConfigError(ValueError):
    pass


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _vec3(s):
    parts = s.replace(",", " ").split()
    if len(parts) != 3:
        raise ValueError(f"expected three numbers, got {s!r}")
    return tuple(float(p) for p in parts)


def _int_list(s):
    vals = [int(p) for p in s.replace(",", " ").split()]
    if not vals:
        raise ValueError("expected at least one integer")
    return tuple(vals)


def _choice(*options):
    def parse(s):
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return v
    return parse


def _text(s):
    if not s:
        raise ValueError("empty value")
    return s


# section -> key -> (parser, default, check, rule text)
SCHEMA = {
    "mesh": {
        "nx": (_int, 24, lambda v: v >= 2, "cell counts must be >= 2"),
        "ny": (_int, 24, lambda v: v >= 2, "cell counts must be >= 2"),
        "nz": (_int, 24, lambda v: v >= 2, "cell counts must be >= 2"),
        "lx": (_float, 1.0, lambda v: v > 0, "lengths must be > 0"),
        "ly": (_float, 1.0, lambda v: v > 0, "lengths must be > 0"),
        "lz": (_float, 1.0, lambda v: v > 0, "lengths must be > 0"),
    },
    "physics": {
        "nu": (_float, 1e-4, lambda v: v >= 0, "nu must be >= 0"),
        "C_s": (_float, 0.2, lambda v: v > 0, "C_s must be > 0"),
        "Pr_t": (_float, 0.9, lambda v: v > 0, "Pr_t must be > 0"),
        "lid_velocity": (_vec3, (1.0, 0.0, 0.0), None, ""),
        "turbulence": (_bool, True, None, ""),
    },
    "time": {
        "dt": (_float, 1e-2, lambda v: v > 0, "dt must be > 0"),
        "n_steps": (_int, 600, lambda v: v >= 0, "n_steps must be >= 0"),
        "spinup_steps": (_int, 200, lambda v: v >= 0, "spinup_steps must be >= 0"),
        "snapshot_stride": (_int, 2, lambda v: v >= 1, "snapshot_stride must be >= 1"),
        "ppe_tol": (_float, 1e-10, lambda v: v > 0, "ppe_tol must be > 0"),
        "ref_cell": (_int, 0, lambda v: v >= 0, "ref_cell must be >= 0"),
        "p_ref": (_float, 0.0, None, ""),
    },
    "rom": {
        "N_u": (_int, 10, lambda v: v >= 1, "mode counts must be >= 1"),
        "N_p": (_int, 10, lambda v: v >= 1, "mode counts must be >= 1"),
        "N_nut": (_int, 10, lambda v: v >= 1, "mode counts must be >= 1"),
        "mode_counts": (_int_list, (2, 4, 6, 8, 10), lambda v: min(v) >= 1,
                        "mode counts must be >= 1"),
    },
    "closure": {
        "architecture": (_choice("mlp", "lstm"), "lstm", None, ""),
        "lookback": (_int, 15, lambda v: v >= 1, "lookback must be >= 1"),
        "epochs": (_int, 1200, lambda v: v >= 0, "epochs must be >= 0"),
        "batch": (_int, 64, lambda v: v >= 1, "batch must be >= 1"),
        "learning_rate": (_float, None, lambda v: v >= 0, "learning_rate must be >= 0"),
        "seed": (_int, 0, lambda v: v >= 0, "seed must be >= 0"),
        "split_fraction": (_float, 0.8, lambda v: 0 < v < 1, "split_fraction must lie in (0, 1)"),
    },
    "paths": {
        "case_dir": (_text, ".", None, ""),
    },
}


@dataclass
class CaseConfig:
    """Parsed configuration: ``values[section][key]`` plus source line numbers."""

    values: dict
    lines: dict = field(default_factory=dict)
    source: Path | None = None

    def __getitem__(self, section):
        return self.values[section]

    @property
    def case_dir(self) -> Path:
        p = Path(self.values["paths"]["case_dir"])
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    def learning_rate(self, architecture: str) -> float:
        from .closure import HYPERPARAMETERS
        lr = self.values["closure"]["learning_rate"]
        return HYPERPARAMETERS[architecture]["lr"] if lr is None else lr


def parse_config_text(text: str, source: str = "<config>") -> CaseConfig:
    values = {sec: {k: entry[1] for k, entry in keys.items()} for sec, keys in SCHEMA.items()}
    lines: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]; "
                                  f"known sections: {', '.join(SCHEMA)}")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any [section]")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]; "
                              f"known keys: {', '.join(SCHEMA[section])}")
        if (section, key) in lines:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} in [{section}] "
                              f"(first set on line {lines[section, key]})")
        parse, _, check, rule = SCHEMA[section][key]
        try:
            v = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {section}.{key}: {exc}") from None
        if check is not None and not check(v):
            raise ConfigError(f"{source}:{lineno}: {section}.{key} = {value}: {rule}")
        values[section][key] = v
        lines[section, key] = lineno
    cfg = CaseConfig(values, lines)
    _cross_check(cfg, source)
    return cfg


def _where(cfg, source, section, key):
    line = cfg.lines.get((section, key))
    return f"{source}:{line}" if line else f"{source} (default {section}.{key})"


def _cross_check(cfg, source):
    m = cfg["mesh"]
    n_cells = m["nx"] * m["ny"] * m["nz"]
    if cfg["time"]["ref_cell"] >= n_cells:
        raise ConfigError(f"{_where(cfg, source, 'time', 'ref_cell')}: ref_cell must be "
                          f"< {n_cells} cells")


def parse_config(path) -> CaseConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not valid UTF-8 ({exc})") from None
    cfg = parse_config_text(text, str(path))
    cfg.source = path
    return cfg
