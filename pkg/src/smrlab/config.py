"""Experiment configuration: INI files with typed, validated sections.

Every key is declared in :data:`SCHEMA`; unknown sections or keys and values
that fail to parse raise :class:`ConfigError` naming the line and field.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

KINDS = ("simulate", "verify-transform", "parabolicity", "smr-norms", "picard", "tent", "sweep")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise ValueError("must be >= 0")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise ValueError("must be > 0")
    return v


SCHEMA = {
    "experiment": {
        "kind": (_choice(*KINDS), None),
    },
    "problem": {
        "d": (_choice("1", "2", "3"), "1"),
        "n": (_positive_int, "32"),
        "period": (_positive_float, repr(2 * math.pi)),
        "N": (_positive_int, "1"),
        "m": (_choice("1", "2", "3"), "1"),
        "a": (float, "1.0"),
        "a_time": (_choice("constant", "sinusoid", "piecewise"), "constant"),
        "a_space": (_choice("uniform", "smooth", "jump", "divfree"), "uniform"),
        "a_time_amplitude": (_nonneg_float, "0.0"),
        "a_space_amplitude": (_nonneg_float, "0.0"),
        "form": (_choice("nondivergence", "divergence"), "nondivergence"),
        "shift": (float, "0.0"),
        "sigma": (float, "0.0"),
        "J": (_positive_int, "1"),
        "g_amplitude": (float, "0.0"),
        "mode": (int, "1"),
        "u0_amplitude": (float, "1.0"),
        "F": (_choice("zero", "linear", "sine", "polynomial"), "zero"),
        "F_lam": (float, "0.0"),
        "F_mu": (float, "0.0"),
        "F_c": (float, "0.1"),
        "F_radius": (_positive_float, "1.0"),
        "G": (_choice("zero", "linear"), "zero"),
        "G_lam": (float, "0.0"),
    },
    "numerics": {
        "M": (_positive_int, "256"),
        "T": (_positive_float, "1.0"),
        "refinements": (_positive_int, "3"),
        "seeds": (_positive_int, "16"),
        "base_seed": (int, "0"),
        "stride": (_positive_int, "1"),
        "tol": (_positive_float, "1e-10"),
        "max_iter": (_positive_int, "60"),
        "probes": (_positive_int, "8"),
    },
    "norm": {
        "p": (_positive_float, "2.0"),
        "q": (_positive_float, "2.0"),
        "alpha": (_nonneg_float, "0.0"),
        "theta": (_floats, "0.0, 0.2, 0.4"),
        "beta_gap": (_positive_float, "0.05"),
        "lambdas": (_floats, "0.0, 0.25, 0.5, 0.75, 1.0"),
    },
    "tent": {
        "t_min": (_positive_float, "0.015625"),
        "t_max": (_positive_float, "8.0"),
        "substeps": (_positive_int, "2"),
        "ps": (_floats, "2.0"),
        "sigmas": (_floats, "0.0"),
        "stochastic": (_choice("no", "yes"), "no"),
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.line = line
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    problem: dict = field(repr=False)
    numerics: dict = field(repr=False)
    norm: dict = field(repr=False)
    tent: dict = field(repr=False)
    digest: str = ""

    def __getitem__(self, key: str):
        section, _, name = key.partition(".")
        return getattr(self, section)[name]


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and "=" in line:
            if line.split("=", 1)[0].strip() == key:
                return no
    return None


def canonical_text(values: dict) -> str:
    """Stable rendering of the parsed values (basis of the config digest)."""
    lines = []
    for section in sorted(values):
        lines.append(f"[{section}]")
        for key in sorted(values[section]):
            lines.append(f"{key} = {values[section][key]!r}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, kind: str | None = None) -> ExperimentConfig:
    """Parse and validate; ``kind`` from the command line must agree with the file."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section))
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", _line_of(text, section, key), f"{section}.{key}")
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            raw = parser.get(section, key, fallback=None) if parser.has_section(section) else None
            if raw is None:
                if section == "experiment" and key == "kind" and kind is not None:
                    raw = kind
                elif default is None:
                    raise ConfigError("missing required key", None, f"{section}.{key}")
                else:
                    raw = default
            try:
                values[section][key] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value {raw.strip()!r} ({exc})",
                                  _line_of(text, section, key), f"{section}.{key}") from None
    file_kind = values["experiment"]["kind"]
    if kind is not None and file_kind != kind:
        raise ConfigError(f"command asks for {kind!r} but the file declares {file_kind!r}",
                          _line_of(text, "experiment", "kind"), "experiment.kind")
    prob = values["problem"]
    for key in ("d", "m"):
        prob[key] = int(prob[key])
    if prob["period"] <= 0:
        raise ConfigError("period must be positive", _line_of(text, "problem", "period"),
                          "problem.period")
    if values["tent"]["t_min"] >= values["tent"]["t_max"]:
        raise ConfigError("t_min must be below t_max", _line_of(text, "tent", "t_min"), "tent.t_min")
    digest = hashlib.sha256(canonical_text(values).encode()).hexdigest()
    return ExperimentConfig(file_kind, prob, values["numerics"], values["norm"], values["tent"],
                            digest)


def load_config(path, kind: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, kind)
