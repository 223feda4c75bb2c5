"""Flat key=value run configuration.

One dotted key per line, `#` comments and blank lines ignored:

    model.channels=32
    model.dilations=1,2,4,8,16
    train.use_seg=true
    data.rainy_dir=/data/rain/rainy

Every key has a default; unknown keys and malformed values are rejected with
the offending key named. `resolve()` turns the flat mapping into the typed
configs the library consumes, `format_config` writes the canonical form back
out, and `config_hash` fingerprints a resolved run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .attention import AttentionKind
from .errors import ConfigError
from .losses import DEFAULT_TAPS, LossWeights
from .network import ModelConfig
from .segmentation import EncoderKind, SegConfig
from .trainer import TrainConfig, TrainToggles


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(p) for p in s.split(",")) if s else ()


def _parse_float_list(s: str) -> tuple[float, ...]:
    s = s.strip()
    return tuple(float(p) for p in s.split(",")) if s else ()


def _parse_str(s: str) -> str:
    return s.strip()


def _parse_opt_int(s: str) -> int | None:
    s = s.strip()
    return int(s) if s else None


_PARSERS = {
    "int": int, "float": float, "bool": _parse_bool, "str": _parse_str,
    "ints": _parse_int_list, "floats": _parse_float_list,
    "opt_int": _parse_opt_int,
}

# key -> (type name, default as canonical string)
SCHEMA: dict[str, tuple[str, str]] = {
    "model.channels": ("int", "32"),
    "model.kernel": ("int", "3"),
    "model.dilations": ("ints", "1,2,4,8,16"),
    "model.stages": ("int", "6"),
    "model.attention": ("str", "cra"),
    "model.reduction": ("int", "16"),
    "model.block_repeats": ("int", "2"),
    "seg.num_classes": ("int", "21"),
    "seg.decoder_init_std": ("float", "0.05"),
    "seg.encoder": ("str", "seeded_random"),
    "seg.encoder_weights": ("str", ""),
    "loss.lambda_ssim": ("float", "1.0"),
    "loss.lambda_seg": ("float", "0.1"),
    "loss.lambda_pcl": ("float", "0.1"),
    "loss.lambda_lpisl": ("float", "0.1"),
    "loss.omega": ("floats", "0.25,0.5,1.0"),
    "loss.taps": ("ints", "2,4,7"),
    "loss.extractor": ("str", "seeded_random"),
    "loss.vgg_weights": ("str", ""),
    "loss.extractor_widths": ("ints", ""),
    "loss.lpisl_resize": ("int", "256"),
    "train.epochs": ("int", "100"),
    "train.batch_size": ("int", "12"),
    "train.base_lr": ("float", "0.001"),
    "train.decay_epochs": ("ints", "30,50,80"),
    "train.decay_factor": ("float", "0.2"),
    "train.seed": ("int", "0"),
    "train.use_seg": ("bool", "true"),
    "train.use_pcl": ("bool", "true"),
    "train.use_lpisl": ("bool", "true"),
    "train.use_dilation": ("bool", "true"),
    "train.use_decay": ("bool", "true"),
    "data.rainy_dir": ("str", ""),
    "data.clean_dir": ("str", ""),
    "data.manifest": ("str", ""),
    "data.crop": ("opt_int", "100"),
    "out_dir": ("str", "runs/default"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Flat text to a fully-populated {key: typed value} mapping."""
    values = {key: _PARSERS[kind](default) for key, (kind, default) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key: {key}")
        kind, _default = SCHEMA[key]
        try:
            values[key] = _PARSERS[kind](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def parse_config_file(path) -> dict[str, object]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"), source=str(path))


def default_config() -> dict[str, object]:
    return parse_config_text("")


def format_config(values: dict[str, object]) -> str:
    """Canonical serialization: sorted keys, comma-joined lists, lowercase bools."""
    lines = []
    for key in sorted(SCHEMA):
        v = values[key]
        if v is None:
            txt = ""
        elif isinstance(v, bool):
            txt = "true" if v else "false"
        elif isinstance(v, tuple):
            txt = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            txt = repr(v)
        else:
            txt = str(v)
        lines.append(f"{key}={txt}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict[str, object]) -> str:
    return hashlib.sha256(format_config(values).encode("utf-8")).hexdigest()


@dataclass
class RunConfig:
    """Typed view of a flat config, ready to hand to the library."""
    model: ModelConfig
    seg: SegConfig
    weights: LossWeights
    taps: tuple[int, ...]
    extractor_mode: str
    extractor_widths: tuple[int, ...] | None
    vgg_weights: str | None
    lpisl_resize: int
    train: TrainConfig
    rainy_dir: str
    clean_dir: str
    manifest: str | None
    crop: int | None
    out_dir: str
    flat: dict[str, object]


def resolve(values: dict[str, object]) -> RunConfig:
    try:
        model = ModelConfig(
            channels=values["model.channels"], kernel=values["model.kernel"],
            dilations=values["model.dilations"], stages=values["model.stages"],
            attention=AttentionKind(values["model.attention"]),
            reduction=values["model.reduction"],
            block_repeats=values["model.block_repeats"])
        seg = SegConfig(
            num_classes=values["seg.num_classes"],
            decoder_init_std=values["seg.decoder_init_std"],
            encoder=EncoderKind(values["seg.encoder"]),
            encoder_weights=values["seg.encoder_weights"] or None)
        weights = LossWeights(
            lambda_ssim=values["loss.lambda_ssim"], lambda_seg=values["loss.lambda_seg"],
            lambda_pcl=values["loss.lambda_pcl"], lambda_lpisl=values["loss.lambda_lpisl"],
            omega=values["loss.omega"])
        toggles = TrainToggles(
            use_seg=values["train.use_seg"], use_pcl=values["train.use_pcl"],
            use_lpisl=values["train.use_lpisl"], use_dilation=values["train.use_dilation"],
            use_decay=values["train.use_decay"])
        train_cfg = TrainConfig(
            epochs=values["train.epochs"], batch_size=values["train.batch_size"],
            base_lr=values["train.base_lr"], decay_epochs=values["train.decay_epochs"],
            decay_factor=values["train.decay_factor"], seed=values["train.seed"],
            toggles=toggles)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if values["loss.lpisl_resize"] < 1:
        raise ConfigError(f"loss.lpisl_resize must be >= 1, got {values['loss.lpisl_resize']}")
    if values["data.crop"] is not None and values["data.crop"] < 1:
        raise ConfigError(f"data.crop must be >= 1, got {values['data.crop']}")
    return RunConfig(
        model=model, seg=seg, weights=weights,
        taps=values["loss.taps"],
        extractor_mode=values["loss.extractor"],
        extractor_widths=values["loss.extractor_widths"] or None,
        vgg_weights=values["loss.vgg_weights"] or None,
        lpisl_resize=values["loss.lpisl_resize"],
        train=train_cfg,
        rainy_dir=values["data.rainy_dir"], clean_dir=values["data.clean_dir"],
        manifest=values["data.manifest"] or None,
        crop=values["data.crop"], out_dir=values["out_dir"],
        flat=dict(values))


ABLATION_STEPS = ("M1", "M2", "M3", "M4", "M5", "Ours")


def ablation_matrix(base: dict[str, object] | None = None) -> list[tuple[str, dict[str, object]]]:
    """Cumulative ablation ladder: attention is always on; each step enables
    one more ingredient (segmentation loss, PCL, dilation, decay, LPISL)."""
    base = dict(base) if base is not None else default_config()
    ladder = [
        ("M1", {}),
        ("M2", {"train.use_seg": True}),
        ("M3", {"train.use_seg": True, "train.use_pcl": True}),
        ("M4", {"train.use_seg": True, "train.use_pcl": True, "train.use_dilation": True}),
        ("M5", {"train.use_seg": True, "train.use_pcl": True, "train.use_dilation": True,
                "train.use_decay": True}),
        ("Ours", {"train.use_seg": True, "train.use_pcl": True, "train.use_dilation": True,
                  "train.use_decay": True, "train.use_lpisl": True}),
    ]
    configs = []
    for name, enabled in ladder:
        values = dict(base)
        for k in ("train.use_seg", "train.use_pcl", "train.use_lpisl",
                  "train.use_dilation", "train.use_decay"):
            values[k] = enabled.get(k, False)
        configs.append((name, values))
    return configs
