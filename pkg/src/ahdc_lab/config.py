"""Experiment configuration: YAML/JSON loading, environment interpolation, strict schema."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import types
import typing
from pathlib import Path
from typing import TYPE_CHECKING, Any, Union

import yaml

from ahdc_lab.models import (
    BRANCH_STRUCTURES,
    DATA_SOURCES,
    OW_PAIRINGS,
    PATCH_SIZES,
    RAMP_UNITS,
    WHICH_CHOICES,
    ExperimentConfig,
)

if TYPE_CHECKING:
    JSONPrimitive = None | bool | int | float | str
    JSONValue = JSONPrimitive | "JSONList" | "JSONObject"
    JSONList = list[JSONValue]
    JSONObject = dict[str, JSONValue]
    JSONType = JSONList | JSONObject
else:
    JSONPrimitive = Any
    JSONValue = Any
    JSONList = Any
    JSONObject = Any
    JSONType = Any

ENV_VAR_PATTERN = re.compile(r"\$\{(\w+)}")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
#: Total downsampling of the discriminator before its last batch norm.
DISCRIMINATOR_STRIDE = 32

#: CLI ablation flag -> (section, field, value)
ABLATIONS: dict[str, tuple[str, str, object]] = {
    "single_net": ("hdc", "single_net", True),
    "no_global_branch": ("hdc", "use_global_branch", False),
    "no_skip_connections": ("nets", "use_skip_connections", False),
    "no_reconstruction": ("bai", "use_reconstruction", False),
    "supervised_only": ("hdc", "supervised_only", True),
    "combined_objective": ("hdc", "combined_objective", True),
    "no_ow": ("hdc", "lambda_ow", 0.0),
    "consistency_unlabelled_only": ("hdc", "consistency_unlabelled_only", True),
    "asymmetric_inter": ("hdc", "symmetric_inter", False),
}


def _interpolate_env_vars(value: str) -> str:
    """Replace ${ENV_VAR} patterns with environment variable values."""

    def replacer(match: re.Match) -> str:
        var_name = match.group(1)
        env_val = os.environ.get(var_name, "")
        if not env_val:
            raise ValueError(f"Environment variable '{var_name}' is not set")
        return env_val

    return ENV_VAR_PATTERN.sub(replacer, value)


def _interpolate_recursive(obj: JSONPrimitive | JSONType) -> JSONPrimitive | JSONType:
    """Recursively interpolate env vars in strings within dicts/lists."""
    if isinstance(obj, str):
        return _interpolate_env_vars(obj)
    if isinstance(obj, dict):
        return {k: _interpolate_recursive(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_interpolate_recursive(item) for item in obj]
    return obj


def _resolve_path(path_str: str, base_dir: Path) -> Path:
    """Resolve a path relative to base_dir if not absolute.

    Leading ``~`` is expanded to the user's home directory before resolution.
    """
    p = Path(path_str).expanduser()
    if not p.is_absolute():
        return base_dir / p
    return p


# ---------------------------------------------------------------------------
# Strict dataclass parsing
# ---------------------------------------------------------------------------


def _coerce(tp: Any, value: JSONValue, key: str, base_dir: Path) -> Any:
    origin = typing.get_origin(tp)

    if origin in (Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, key, base_dir)

    if dataclasses.is_dataclass(tp):
        return _parse_section(tp, value, key, base_dir)

    if tp is Path:
        if not isinstance(value, str):
            raise ValueError(f"'{key}' must be a path string, got {value!r}")
        return _resolve_path(value, base_dir)

    if tp is bool:
        if not isinstance(value, bool):
            raise ValueError(f"'{key}' must be true or false, got {value!r}")
        return value

    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"'{key}' must be an integer, got {value!r}")
        return value

    if tp is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ValueError(f"'{key}' must be a number, got {value!r}")
        return float(value)

    if tp is str:
        if not isinstance(value, str):
            raise ValueError(f"'{key}' must be a string, got {value!r}")
        return value

    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list | tuple) or len(value) != len(args):
            raise ValueError(f"'{key}' must be a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(a, v, f"{key}[{i}]", base_dir) for i, (a, v) in enumerate(zip(args, value, strict=True)))

    if origin is list:
        (item_type,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ValueError(f"'{key}' must be a list, got {value!r}")
        return [_coerce(item_type, v, f"{key}[{i}]", base_dir) for i, v in enumerate(value)]

    raise TypeError(f"Unsupported config field type for '{key}': {tp!r}")


def _parse_section(cls: type, data: JSONValue, path: str, base_dir: Path) -> Any:
    """Build dataclass *cls* from *data*, rejecting keys it does not declare."""
    if not isinstance(data, dict):
        raise ValueError(f"'{path or 'config'}' must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    prefix = f"{path}." if path else ""
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"Unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {name: _coerce(hints[name], value, prefix + name, base_dir) for name, value in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ValueError(f"{path or 'config'}: {e}") from e


# ---------------------------------------------------------------------------
# Range checks
# ---------------------------------------------------------------------------


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def _check_choice(key: str, value: object, choices: tuple) -> None:
    _require(value in choices, f"'{key}' must be one of {', '.join(map(str, choices))}; got {value!r}")


def _check_label_ratio(key: str, value: float) -> None:
    _require(0.0 < value <= 1.0, f"'{key}' must be in (0, 1], got {value}")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check value ranges and cross-field constraints.

    Raises:
        ValueError: Naming the first offending key.
    """
    _check_choice("logging.level", cfg.logging.level.upper(), LOG_LEVELS)

    data = cfg.data
    _check_choice("data.source", data.source, DATA_SOURCES)
    if data.source == "manifests":
        _require(
            data.manifest_a is not None and data.manifest_b is not None,
            "'data.manifest_a' and 'data.manifest_b' are required when data.source is 'manifests'",
        )
    _check_label_ratio("data.label_ratio", data.label_ratio)
    _require(0.0 <= data.label_ratio_b <= 1.0, f"'data.label_ratio_b' must be in [0, 1], got {data.label_ratio_b}")
    _require(1 <= data.max_lobes <= 3, f"'data.max_lobes' must be in 1..3, got {data.max_lobes}")
    for key in ("n_a", "n_b"):
        _require(getattr(data, key) >= 1, f"'data.{key}' must be >= 1, got {getattr(data, key)}")
    for key in ("n_test_a", "n_test_b", "n_pairs"):
        _require(getattr(data, key) >= 0, f"'data.{key}' must be >= 0, got {getattr(data, key)}")
    low, high = data.radius_range
    _require(0 < low <= high < 0.5, f"'data.radius_range' must lie within (0, 0.5) with min <= max, got {low, high}")
    _require(data.wobble_amp >= 0, f"'data.wobble_amp' must be >= 0, got {data.wobble_amp}")

    nets = cfg.nets
    _check_choice("nets.patch_size", nets.patch_size, PATCH_SIZES)
    _check_choice("nets.branch_structure", nets.branch_structure, BRANCH_STRUCTURES)
    for key in ("levels", "feature_levels"):
        _require(getattr(nets, key) >= 2, f"'nets.{key}' must be >= 2, got {getattr(nets, key)}")
    for key in ("levels", "feature_levels"):
        factor = 2 ** getattr(nets, key)
        _require(
            data.image_size % factor == 0,
            f"'data.image_size' ({data.image_size}) must be divisible by 2^nets.{key} = {factor}",
        )
        # Single-sample inference normalises the bottleneck over its own pixels.
        _require(
            data.image_size // factor >= 2,
            f"'data.image_size' ({data.image_size}) must be at least 2^(nets.{key} + 1) = {2 * factor}",
        )
    _require(
        data.image_size % nets.patch_size == 0,
        f"'data.image_size' ({data.image_size}) must be divisible by 'nets.patch_size' ({nets.patch_size})",
    )
    model_dim = nets.patch_size * nets.patch_size * nets.feature_channels
    _require(
        model_dim % nets.heads == 0,
        f"'nets.heads' ({nets.heads}) must divide the token width {model_dim}",
    )

    bai = cfg.bai
    _require(bai.epochs >= 0, f"'bai.epochs' must be >= 0, got {bai.epochs}")
    _require(bai.batch_size >= 1, f"'bai.batch_size' must be >= 1, got {bai.batch_size}")
    # The discriminator's last normalised map is ceil(image_size / DISCRIMINATOR_STRIDE) pixels wide.
    _require(
        bai.batch_size >= 2 or data.image_size > DISCRIMINATOR_STRIDE,
        f"'bai.batch_size' must be >= 2 when 'data.image_size' <= {DISCRIMINATOR_STRIDE}",
    )
    _require(bai.lr_g > 0 and bai.lr_t > 0, "'bai.lr_g' and 'bai.lr_t' must be > 0")
    _require(0 < bai.lr_decay <= 1, f"'bai.lr_decay' must be in (0, 1], got {bai.lr_decay}")
    _require(bai.d_steps >= 1 and bai.g_steps >= 1, "'bai.d_steps' and 'bai.g_steps' must be >= 1")
    _require(bai.checkpoint_every >= 1, f"'bai.checkpoint_every' must be >= 1, got {bai.checkpoint_every}")
    if bai.decay_every_steps is not None:
        _require(bai.decay_every_steps >= 1, f"'bai.decay_every_steps' must be >= 1, got {bai.decay_every_steps}")

    hdc = cfg.hdc
    _require(hdc.epochs >= 0, f"'hdc.epochs' must be >= 0, got {hdc.epochs}")
    _require(hdc.batch_size >= 1, f"'hdc.batch_size' must be >= 1, got {hdc.batch_size}")
    _require(hdc.labelled_batch_size >= 1, f"'hdc.labelled_batch_size' must be >= 1, got {hdc.labelled_batch_size}")
    _require(hdc.lr > 0, f"'hdc.lr' must be > 0, got {hdc.lr}")
    _require(0 < hdc.lr_decay <= 1, f"'hdc.lr_decay' must be in (0, 1], got {hdc.lr_decay}")
    for key in ("lambda_super", "lambda_inter", "lambda_ow"):
        _require(getattr(hdc, key) >= 0, f"'hdc.{key}' must be >= 0, got {getattr(hdc, key)}")
    if hdc.t_max is not None:
        _require(hdc.t_max >= 1, f"'hdc.t_max' must be >= 1, got {hdc.t_max}")
    _check_choice("hdc.ramp_unit", hdc.ramp_unit, RAMP_UNITS)
    _check_choice("hdc.ow_pairing", hdc.ow_pairing, OW_PAIRINGS)
    _require(hdc.rotation_degrees >= 0, f"'hdc.rotation_degrees' must be >= 0, got {hdc.rotation_degrees}")
    _require(hdc.checkpoint_every >= 1, f"'hdc.checkpoint_every' must be >= 1, got {hdc.checkpoint_every}")

    _check_choice("eval.which", cfg.eval.which, WHICH_CHOICES)
    _require(cfg.eval.probe_size >= 1, f"'eval.probe_size' must be >= 1, got {cfg.eval.probe_size}")

    study = cfg.study
    for key in ("label_ratios", "patch_sizes", "lambda_ows", "seeds"):
        _require(len(getattr(study, key)) > 0, f"'study.{key}' must not be empty")
    for i, r in enumerate(study.label_ratios):
        _check_label_ratio(f"study.label_ratios[{i}]", r)
    for i, p in enumerate(study.patch_sizes):
        _check_choice(f"study.patch_sizes[{i}]", p, PATCH_SIZES)
    for i, w in enumerate(study.lambda_ows):
        _require(w >= 0, f"'study.lambda_ows[{i}]' must be >= 0, got {w}")
    return cfg


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def config_from_dict(data: JSONObject, base_dir: str | Path = ".") -> ExperimentConfig:
    """Parse and validate an already-loaded config mapping.

    Relative paths resolve against *base_dir*.
    """
    base = Path(base_dir).resolve()
    data = _interpolate_recursive(data)
    cfg = _parse_section(ExperimentConfig, data, "", base)
    if "output_dir" not in data:
        cfg.output_dir = _resolve_path(str(cfg.output_dir), base)
    return validate_config(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    """Load and validate an experiment config file (YAML or JSON).

    Raises:
        FileNotFoundError: If the config file doesn't exist.
        ValueError: If the config is invalid.
    """
    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path) as f:
        raw = yaml.safe_load(f)

    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError("Config file must be a YAML mapping")

    return config_from_dict(raw, config_path.parent)


def apply_overrides(
    cfg: ExperimentConfig,
    *,
    seed: int | None = None,
    output_dir: str | Path | None = None,
    ablations: typing.Iterable[str] = (),
) -> ExperimentConfig:
    """Return a copy of *cfg* with CLI overrides applied and re-validated."""
    sections: dict[str, dict[str, object]] = {}
    for flag in ablations:
        if flag not in ABLATIONS:
            raise ValueError(f"Unknown ablation '{flag}'")
        section, name, value = ABLATIONS[flag]
        sections.setdefault(section, {})[name] = value

    top: dict[str, object] = {
        section: dataclasses.replace(getattr(cfg, section), **changes) for section, changes in sections.items()
    }
    if seed is not None:
        top["seed"] = seed
    if output_dir is not None:
        top["output_dir"] = Path(output_dir).expanduser().resolve()
    return validate_config(dataclasses.replace(cfg, **top))


def _jsonable(obj: object) -> JSONValue:
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list | tuple):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def config_to_dict(cfg: ExperimentConfig) -> JSONObject:
    return _jsonable(cfg)


def resolve_config(cfg: ExperimentConfig) -> str:
    """Canonical JSON with every default materialised and keys sorted."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def run_id(cfg: ExperimentConfig) -> str:
    """First 12 hex characters of the SHA-256 of :func:`resolve_config`."""
    return hashlib.sha256(resolve_config(cfg).encode()).hexdigest()[:12]
