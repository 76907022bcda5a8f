"""Run configuration: flat-section key/value files with dotted overrides.

Format example:

    # comment
    [model]
    preset = improved
    base_channels = 48

    [schedule]
    preset = improved
    total_iters = 300000

Resolution order: built-in defaults, then the section preset (if any), then
explicit file keys, then --override key=value flags. Unknown sections or keys
are rejected. The fully resolved config is echoed into the output directory so
a run can be reproduced from its artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .augment import AugmentConfig
from .losses import LossConfig
from .model import NAMED_CONFIGS, ModelConfig
from .trainer import NAMED_SCHEDULES, TrainSchedule


class ConfigError(ValueError):
    """Malformed config text, unknown key, or invalid value."""


def _parse_int_list(s):
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _parse_ladder(s):
    rungs = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(f"ladder rung {part!r} must be start:patch:batch")
        rungs.append(tuple(int(b) for b in bits))
    return tuple(rungs)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(":".join(str(v) for v in rung) for rung in value)
        return ", ".join(str(v) for v in value)
    return str(value)


_PARSERS = {
    "int": int,
    "float": float,
    "str": str.strip,
    "bool": lambda s: {"true": True, "false": False, "1": True, "0": False}[s.strip().lower()],
    "int_list": _parse_int_list,
    "ladder": _parse_ladder,
}

# section -> key -> (type, default)
SCHEMA = {
    "model": {
        "preset": ("str", "baseline"),
        "base_channels": ("int", None),
        "enc_blocks": ("int_list", None),
        "dec_blocks": ("int_list", None),
        "heads": ("int_list", None),
        "refinement_blocks": ("int", None),
        "gamma": ("float", None),
    },
    "loss": {
        "lambda_freq": ("float", 0.1),
    },
    "schedule": {
        "preset": ("str", "paper8gpu"),
        "total_iters": ("int", None),
        "lr_start": ("float", None),
        "lr_end": ("float", None),
        "ladder": ("ladder", None),
    },
    "train": {
        "val_interval": ("int", 1000),
        "checkpoint_interval": ("int", 1000),
        "grad_clip": ("float", 0.0),
        "stop_at_psnr": ("float", 0.0),
        "augment": ("bool", False),
    },
    "augment": {
        "p_hflip": ("float", 0.5),
        "p_vflip": ("float", 0.5),
        "p_extra": ("float", 0.3),
        "brightness": ("float", 0.2),
        "contrast": ("float", 0.2),
        "saturation": ("float", 0.2),
        "hue": ("float", 0.05),
        "blur_sigma_min": ("float", 0.1),
        "blur_sigma_max": ("float", 1.0),
        "blur_kernel": ("int", 5),
        "perspective_scale": ("float", 0.1),
    },
    "data": {
        "root": ("str", ""),
        "layout": ("str", "parallel-dirs"),
        "val_root": ("str", ""),
        "val_layout": ("str", "parallel-dirs"),
    },
}


def parse_config_text(text, source="<config>"):
    """Parse sections/keys into {section: {key: raw string}}; strict schema."""
    out = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside any [section]")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {section}.{key}")
        out[section][key] = value
    return out


def parse_override(spec):
    """'section.key=value' -> (section, key, value), schema-checked."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must be section.key=value")
    dotted, value = spec.split("=", 1)
    if "." not in dotted:
        raise ConfigError(f"override key {dotted!r} must be dotted section.key")
    section, key = dotted.strip().split(".", 1)
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown override key {section}.{key}")
    return section, key.strip(), value.strip()


@dataclass
class RunSettings:
    """Fully resolved configuration of one run."""

    model: ModelConfig
    loss: LossConfig
    schedule: TrainSchedule
    augment: AugmentConfig
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)  # section -> key -> typed value

    def echo(self):
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_fmt(self.resolved[section][key])}")
            lines.append("")
        return "\n".join(lines)


def _typed(section, key, raw):
    kind = SCHEMA[section][key][0]
    try:
        return _PARSERS[kind](raw)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc


def resolve(file_text="", overrides=(), source="<config>"):
    """Merge defaults, presets, file keys and overrides into RunSettings."""
    raw = parse_config_text(file_text, source) if file_text else {}
    for spec in overrides:
        section, key, value = parse_override(spec)
        raw.setdefault(section, {})[key] = value

    typed = {}
    for s in SCHEMA:
        typed[s] = {}
        for k, (_, default) in SCHEMA[s].items():
            rawv = raw.get(s, {}).get(k)
            typed[s][k] = _typed(s, k, rawv) if rawv is not None else default

    # model: preset then explicit field overrides
    preset_name = typed["model"]["preset"] or "baseline"
    if preset_name not in NAMED_CONFIGS:
        raise ConfigError(
            f"unknown model preset {preset_name!r}; known: {sorted(NAMED_CONFIGS)}"
        )
    base = NAMED_CONFIGS[preset_name]
    model_kwargs = {}
    for key in ("base_channels", "enc_blocks", "dec_blocks", "heads",
                "refinement_blocks", "gamma"):
        if typed["model"][key] is not None:
            model_kwargs[key] = typed["model"][key]
    try:
        model_cfg = ModelConfig(
            base_channels=model_kwargs.get("base_channels", base.base_channels),
            enc_blocks=model_kwargs.get("enc_blocks", base.enc_blocks),
            dec_blocks=model_kwargs.get("dec_blocks", base.dec_blocks),
            heads=model_kwargs.get("heads", base.heads),
            refinement_blocks=model_kwargs.get("refinement_blocks", base.refinement_blocks),
            gamma=model_kwargs.get("gamma", base.gamma),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc

    # schedule: preset then explicit fields
    sched_name = typed["schedule"]["preset"] or "paper8gpu"
    if sched_name not in NAMED_SCHEDULES:
        raise ConfigError(
            f"unknown schedule preset {sched_name!r}; known: {sorted(NAMED_SCHEDULES)}"
        )
    sbase = NAMED_SCHEDULES[sched_name]

    def _or(key, fallback):
        v = typed["schedule"][key]
        return v if v is not None else fallback

    try:
        schedule = TrainSchedule(
            total_iters=_or("total_iters", sbase.total_iters),
            lr_start=_or("lr_start", sbase.lr_start),
            lr_end=_or("lr_end", sbase.lr_end),
            ladder=_or("ladder", sbase.ladder),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc

    try:
        loss_cfg = LossConfig(lambda_freq=typed["loss"]["lambda_freq"])
        augment_cfg = AugmentConfig(**{k: typed["augment"][k] for k in SCHEMA["augment"]})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    resolved = {
        "model": {
            "preset": preset_name,
            "base_channels": model_cfg.base_channels,
            "enc_blocks": model_cfg.enc_blocks,
            "dec_blocks": model_cfg.dec_blocks,
            "heads": model_cfg.heads,
            "refinement_blocks": model_cfg.refinement_blocks,
            "gamma": model_cfg.gamma,
        },
        "loss": {"lambda_freq": loss_cfg.lambda_freq},
        "schedule": {
            "preset": sched_name,
            "total_iters": schedule.total_iters,
            "lr_start": schedule.lr_start,
            "lr_end": schedule.lr_end,
            "ladder": schedule.ladder,
        },
        "train": dict(typed["train"]),
        "augment": {k: getattr(augment_cfg, k) for k in SCHEMA["augment"]},
        "data": dict(typed["data"]),
    }
    return RunSettings(
        model=model_cfg,
        loss=loss_cfg,
        schedule=schedule,
        augment=augment_cfg,
        train=dict(typed["train"]),
        data=dict(typed["data"]),
        resolved=resolved,
    )
