"""Text config files: one `dotted.path = value` per line, plus CLI overrides.

Every TrainConfig field (including the nested guidance/augment/vit blocks) is
addressable; unknown keys are rejected. A dumped config reparses to an equal
TrainConfig.
"""

from __future__ import annotations

import dataclasses
from typing import get_args, get_origin

from .errors import ConfigError
from .trainer import TrainConfig


def _is_dataclass_field(tp) -> bool:
    return dataclasses.is_dataclass(tp)


def _parse_scalar(text: str, tp):
    text = text.strip()
    if tp is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        try:
            return int(text)
        except ValueError as e:
            raise ConfigError(f"not an integer: {text!r}") from e
    if tp is float:
        try:
            return float(text)
        except ValueError as e:
            raise ConfigError(f"not a float: {text!r}") from e
    if tp is str:
        return text
    origin = get_origin(tp)
    if origin is tuple:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            elem_types = [args[0]] * len(parts)
        else:
            if len(parts) != len(args):
                raise ConfigError(f"expected {len(args)} comma-separated values, got {text!r}")
            elem_types = args
        return tuple(_parse_scalar(p, t) for p, t in zip(parts, elem_types))
    raise ConfigError(f"unsupported config field type: {tp}")


def _resolve(cfg, dotted: str):
    """Walk to (owner dataclass, field) for a dotted path; raise on unknowns."""
    parts = dotted.split(".")
    obj = cfg
    for i, part in enumerate(parts):
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if part not in fields:
            raise ConfigError(f"unknown config key: {dotted!r} (no field {part!r})")
        f = fields[part]
        if i == len(parts) - 1:
            if _is_dataclass_field(f.type) or dataclasses.is_dataclass(getattr(obj, part)):
                raise ConfigError(f"{dotted!r} names a section, not a value")
            return obj, f
        obj = getattr(obj, part)
        if not dataclasses.is_dataclass(obj):
            raise ConfigError(f"unknown config key: {dotted!r}")
    raise ConfigError(f"empty config key")


_TYPE_BY_NAME = {"int": int, "float": float, "str": str, "bool": bool}


def _field_type(owner, f: dataclasses.Field):
    tp = f.type
    if isinstance(tp, str):
        # from __future__ annotations stores strings; evaluate common cases
        import typing
        ns = {"tuple": tuple, "Tuple": typing.Tuple, **_TYPE_BY_NAME}
        try:
            tp = eval(tp, ns)  # noqa: S307 - controlled namespace
        except Exception as e:
            raise ConfigError(f"cannot interpret type of field {f.name!r}: {tp}") from e
    return tp


def set_by_path(cfg: TrainConfig, dotted: str, raw_value: str,
                validate: bool = True):
    owner, f = _resolve(cfg, dotted)
    value = _parse_scalar(raw_value, _field_type(owner, f))
    setattr(owner, f.name, value)
    if validate and hasattr(owner, "__post_init__"):
        owner.__post_init__()


def validate_config(cfg):
    """Re-run every dataclass validation hook, leaves first, so cross-field
    constraints see the final values regardless of assignment order."""
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            validate_config(v)
    if hasattr(cfg, "__post_init__"):
        cfg.__post_init__()


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        set_by_path(cfg, key.strip(), value, validate=False)
    validate_config(cfg)
    return cfg


def _dump_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_dump_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: TrainConfig) -> str:
    lines = []

    def walk(obj, prefix=""):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            path = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                walk(v, f"{path}.")
            else:
                lines.append(f"{path} = {_dump_value(v)}")

    walk(cfg)
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override must look like key=value, got {ov!r}")
        key, _, value = ov.partition("=")
        set_by_path(cfg, key.strip(), value, validate=False)
    validate_config(cfg)
    return cfg
