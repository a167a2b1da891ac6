"""Run configuration: line-oriented `key = value` files with [section] headers.

Every key is documented in SCHEMA with its default; unknown keys are hard
errors (no silent typos), missing keys take the documented default. The
fully resolved configuration is echoed into each run directory so results
reproduce from the directory alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .data import (
    RegimeSwitchingSpec,
    format_floats,
    format_matrix,
    parse_floats,
    parse_matrix,
    transition_from_dwell,
)
from .training import TrainConfig


class ConfigError(ValueError):
    """Unparseable, unknown, or inconsistent configuration input."""


@dataclass
class Field:
    kind: str          # int | float | bool | str | floats | matrix
    default: Any
    doc: str
    choices: tuple = ()


SCHEMA: dict[str, dict[str, Field]] = {
    "model": {
        "tasks": Field("int", 2, "number of tasks sharing the encoder"),
        "blocks": Field("int", 2, "stacked task-adaptive blocks"),
        "basis": Field("int", 8, "activation basis count (piecewise hinges)"),
        "hidden": Field("int", 64, "shared encoder hidden width"),
        "aux_hidden": Field("int", 16, "hidden width of the basis/coordinate LSTMs"),
        "spd_layers": Field("int", 1, "BiMap/ReEig pairs per metric network"),
        "encoder": Field("str", "lstm", "shared encoder kind",
                         choices=("lstm", "attention")),
    },
    "train": {
        "lambda": Field("float", 0.01, "functional-regularizer weight"),
        "lr_phi": Field("float", 1e-3, "model learning rate (Adam)"),
        "lr_theta": Field("float", 1e-3, "metric-network ascent rate"),
        "theta_period": Field("int", 1,
                              "metric update every N batches (0 = never)"),
        "epochs": Field("int", 5, "training epochs"),
        "batch_size": Field("int", 32, "sequences per batch"),
        "seed": Field("int", 0, "master seed (init + batch order)"),
        "spd_init": Field("str", "gram", "initial metric at slot 0",
                          choices=("gram", "identity")),
        "detach_metric": Field("bool", False,
                               "treat metrics as constants in the model loss"),
        "record_wall_time": Field("bool", False,
                                  "write real wall_ms into metrics.csv "
                                  "(breaks byte-reproducibility)"),
        "checkpoint_interval": Field("int", 0,
                                     "extra checkpoint every N epochs (0 = final only)"),
    },
    "data": {
        "input_dim": Field("int", 8, "input feature width"),
        "seq_len": Field("int", 40, "time slots per sequence"),
        "classes": Field("int", 3, "label classes per task"),
        "train_sequences": Field("int", 500, "training sequences"),
        "test_sequences": Field("int", 200, "held-out sequences"),
        "regime_rhos": Field("floats", [0.05, 0.95],
                             "label coupling per hidden regime "
                             "(sequences start in regime 0)"),
        "regime_dwell": Field("floats", [10.0, 10.0],
                              "expected dwell time per regime (slots)"),
        "transition_matrix": Field("matrix", None,
                                   "explicit regime transition rows "
                                   "(semicolon-separated); overrides regime_dwell"),
        "gaussian_scale": Field("float", 2.0, "class-mean separation scale"),
        "data_seed": Field("int", -1,
                           "dataset seed (-1 = train seed + 1000; "
                           "test split uses data_seed + 1)"),
    },
    "run": {
        "out": Field("str", "run_out", "output directory"),
    },
}


def _parse_value(field: Field, raw: str, where: str):
    raw = raw.strip()
    try:
        if field.kind == "int":
            return int(raw)
        if field.kind == "float":
            return float(raw)
        if field.kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if field.kind == "floats":
            return parse_floats(raw)
        if field.kind == "matrix":
            return None if raw == "" else parse_matrix(raw)
        if field.choices and raw not in field.choices:
            raise ValueError(f"must be one of {field.choices}")
        return raw
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from err


def parse_config_text(text: str, source: str = "<config>") -> dict[tuple[str, str], Any]:
    """Parse file content to {(section, key): value}; unknown keys are errors."""
    values: dict[tuple[str, str], Any] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key '{section}.{key}'")
        if (section, key) in values:
            raise ConfigError(f"{where}: duplicate key '{section}.{key}'")
        values[(section, key)] = _parse_value(SCHEMA[section][key], raw, where)
    return values


def parse_config_file(path) -> dict[tuple[str, str], Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read(), source=str(path))
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def apply_override(values: dict, spec: str) -> None:
    """`--override [section.]key=value`; bare keys must be unique."""
    if "=" not in spec:
        raise ConfigError(f"override must look like key=value, got {spec!r}")
    key, _, raw = spec.partition("=")
    key = key.strip()
    if "." in key:
        section, key = key.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"override: unknown key '{section}.{key}'")
    else:
        homes = [s for s in SCHEMA if key in SCHEMA[s]]
        if not homes:
            raise ConfigError(f"override: unknown key {key!r}")
        if len(homes) > 1:
            raise ConfigError(
                f"override: {key!r} is ambiguous across sections {homes}; "
                "qualify as section.key")
        section = homes[0]
    values[(section, key)] = _parse_value(SCHEMA[section][key], raw,
                                          f"--override {spec}")


@dataclass
class RunSetup:
    train: TrainConfig
    data_spec: RegimeSwitchingSpec   # both splits slice one draw of this spec
    train_sequences: int
    test_sequences: int
    checkpoint_interval: int
    out_dir: str
    resolved: dict[tuple[str, str], Any]


def resolve(values: dict[tuple[str, str], Any] | None = None,
            overrides: tuple[str, ...] = (), seed: int | None = None,
            out: str | None = None) -> RunSetup:
    merged: dict[tuple[str, str], Any] = {
        (section, key): field.default
        for section, fields in SCHEMA.items()
        for key, field in fields.items()
    }
    merged.update(values or {})
    for spec in overrides:
        apply_override(merged, spec)
    if seed is not None:
        merged[("train", "seed")] = int(seed)
    if out is not None:
        merged[("run", "out")] = str(out)

    def get(section, key):
        return merged[(section, key)]

    if (get("model", "encoder") == "attention"
            and get("data", "input_dim") != get("model", "hidden")):
        raise ConfigError(
            "encoder = attention requires data.input_dim == model.hidden "
            f"(square projections); got {get('data', 'input_dim')} != "
            f"{get('model', 'hidden')}")

    rhos = np.asarray(get("data", "regime_rhos"), dtype=np.float64)
    transition = get("data", "transition_matrix")
    if transition is None:
        dwell = get("data", "regime_dwell")
        if len(dwell) != rhos.size:
            raise ConfigError(
                f"regime_dwell has {len(dwell)} entries but regime_rhos has {rhos.size}")
        transition = transition_from_dwell(dwell)
    else:
        transition = np.asarray(transition, dtype=np.float64)
        merged[("data", "transition_matrix")] = transition

    train_seed = get("train", "seed")
    data_seed = get("data", "data_seed")
    if data_seed == -1:
        data_seed = train_seed + 1000

    try:
        train_cfg = TrainConfig(
            tasks=get("model", "tasks"),
            blocks=get("model", "blocks"),
            basis=get("model", "basis"),
            seq_len=get("data", "seq_len"),
            hidden=get("model", "hidden"),
            aux_hidden=get("model", "aux_hidden"),
            spd_layers=get("model", "spd_layers"),
            reg_lambda=get("train", "lambda"),
            lr_phi=get("train", "lr_phi"),
            lr_theta=get("train", "lr_theta"),
            theta_period=get("train", "theta_period"),
            epochs=get("train", "epochs"),
            batch_size=get("train", "batch_size"),
            seed=train_seed,
            spd_init=get("train", "spd_init"),
            encoder=get("model", "encoder"),
            detach_metric=get("train", "detach_metric"),
            record_wall_time=get("train", "record_wall_time"),
        )
        base_spec = RegimeSwitchingSpec(
            tasks=get("model", "tasks"),
            input_dim=get("data", "input_dim"),
            seq_len=get("data", "seq_len"),
            classes=get("data", "classes"),
            transition=transition,
            rhos=rhos,
            gaussian_scale=get("data", "gaussian_scale"),
            seed=data_seed,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err

    merged[("data", "data_seed")] = data_seed
    return RunSetup(
        train=train_cfg,
        data_spec=base_spec,
        train_sequences=get("data", "train_sequences"),
        test_sequences=get("data", "test_sequences"),
        checkpoint_interval=get("train", "checkpoint_interval"),
        out_dir=get("run", "out"),
        resolved=merged,
    )


def _format_value(field: Field, value) -> str:
    if field.kind == "floats":
        return format_floats(value)
    if field.kind == "matrix":
        return "" if value is None else format_matrix(value)
    if field.kind == "bool":
        return "true" if value else "false"
    if field.kind == "float":
        return repr(float(value))
    return str(value)


def render_resolved(setup: RunSetup) -> str:
    """Config text with every key explicit; parses back to the same run."""
    lines = []
    for section, fields in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, field in fields.items():
            lines.append(f"{key} = {_format_value(field, setup.resolved[(section, key)])}")
        lines.append("")
    return "\n".join(lines)


def render_documented_default() -> str:
    """Fully commented default config (doubles as key documentation)."""
    lines = ["# Every key with its default; unknown keys are rejected.", ""]
    for section, fields in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, field in fields.items():
            lines.append(f"# {field.doc}")
            if field.choices:
                lines.append(f"# choices: {', '.join(field.choices)}")
            lines.append(f"{key} = {_format_value(field, field.default)}")
        lines.append("")
    return "\n".join(lines)
