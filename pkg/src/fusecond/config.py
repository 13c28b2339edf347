"""Run configuration: flat namespaced key=value text, strictly validated.

Example::

    # paths are relative to the config file
    global.image = global.fus3
    local.1.image = part.fus3
    local.1.mask  = part.mask
    sampler.steps = 25
    seed = 7

Unknown keys are rejected. Paths resolve relative to the config file's
directory.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .alignment import AlignmentConfig, RefineParams
from .encoder import EncoderConfig
from .errors import ConfigError
from .flow import FlowModelConfig, SamplerConfig
from . import patch_grid
from . import rng

MODES = ("full", "inpaint", "no_mcfm_ablation")


@dataclass(frozen=True)
class LocalSourceConfig:
    name: str  # "local.<k>"
    image_path: Path
    mask_path: Path


@dataclass(frozen=True)
class PipelineConfig:
    global_image_path: Path
    locals: tuple[LocalSourceConfig, ...]
    patch_size: int = patch_grid.DEFAULT_PATCH_SIZE
    coverage_threshold: float = patch_grid.DEFAULT_COVERAGE_THRESHOLD
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    flow: FlowModelConfig = field(default_factory=FlowModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    enhancement_enabled: bool = True
    beta: float = 1.0
    lambda_overrides: dict = field(default_factory=dict)  # source name -> strength
    mode: str = "full"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "inpaint" and not self.locals:
            raise ConfigError("at least one local source is required")
        if self.mode == "inpaint" and not self.locals:
            raise ConfigError("inpaint mode requires at least one local source")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Re-derives all stage seeds from a new master seed."""
        return replace(
            self,
            seed=seed,
            encoder=replace(self.encoder, seed=rng.derive_seed(seed, "encoder")),
            flow=replace(self.flow, seed=rng.derive_seed(seed, "flow")),
            sampler=replace(self.sampler, noise_seed=rng.derive_seed(seed, "noise")),
        )


_INT = re.compile(r"^[+-]?\d+$")

_SIMPLE_KEYS = {
    "global.image",
    "image.patch_size",
    "mask.coverage_threshold",
    "encoder.token_dim",
    "encoder.depth",
    "encoder.heads",
    "encoder.registers",
    "flow.latent_dim",
    "flow.heads",
    "flow.blocks",
    "flow.structure_grid",
    "flow.grid_size",
    "flow.max_active",
    "sampler.steps",
    "sampler.capture_step",
    "align.threshold",
    "align.reverse_threshold",
    "align.heads",
    "align.block",
    "refine.enabled",
    "refine.k",
    "refine.fill",
    "refine.clear",
    "enhance.enabled",
    "enhance.beta",
    "seed",
    "mode",
    "threads",
}
_LOCAL_KEY = re.compile(r"^local\.(\d+)\.(image|mask)$")
_LAMBDA_KEY = re.compile(r"^lambda\.(global|local\.\d+)$")


def parse_config_text(text: str, base_dir: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in _SIMPLE_KEYS and not _LOCAL_KEY.match(key) and not _LAMBDA_KEY.match(key):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _get_int(values, key, default):
    if key not in values:
        return default
    if not _INT.match(values[key]):
        raise ConfigError(f"{key}: expected integer, got {values[key]!r}")
    return int(values[key])


def _get_float(values, key, default):
    if key not in values:
        return default
    try:
        return float(values[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected number, got {values[key]!r}") from exc


def _get_bool(values, key, default):
    if key not in values:
        return default
    token = values[key].lower()
    if token in ("true", "1", "yes"):
        return True
    if token in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected boolean, got {values[key]!r}")


def _resolve_path(base_dir: Path, value: str, key: str) -> Path:
    path = Path(value)
    if not path.is_absolute():
        path = base_dir / path
    if not path.is_file():
        raise ConfigError(f"{key}: file not found: {path}")
    return path


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(encoding="utf-8"), path.parent)
    return build_config(values, path.parent)


def build_config(values: dict[str, str], base_dir: Path) -> PipelineConfig:
    if "global.image" not in values:
        raise ConfigError("missing required key global.image")

    local_numbers = sorted(
        {int(m.group(1)) for key in values if (m := _LOCAL_KEY.match(key))}
    )
    locals_: list[LocalSourceConfig] = []
    for num in local_numbers:
        img_key, mask_key = f"local.{num}.image", f"local.{num}.mask"
        if img_key not in values or mask_key not in values:
            raise ConfigError(f"local.{num}: both image and mask are required")
        locals_.append(
            LocalSourceConfig(
                name=f"local.{num}",
                image_path=_resolve_path(base_dir, values[img_key], img_key),
                mask_path=_resolve_path(base_dir, values[mask_key], mask_key),
            )
        )

    lambda_overrides = {}
    for key, value in values.items():
        if m := _LAMBDA_KEY.match(key):
            try:
                lambda_overrides[m.group(1)] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected number") from exc

    seed = _get_int(values, "seed", 0)
    reverse = _get_float(values, "align.reverse_threshold", None)
    max_active = _get_int(values, "flow.max_active", None)

    cfg = PipelineConfig(
        global_image_path=_resolve_path(base_dir, values["global.image"], "global.image"),
        locals=tuple(locals_),
        patch_size=_get_int(values, "image.patch_size", patch_grid.DEFAULT_PATCH_SIZE),
        coverage_threshold=_get_float(
            values, "mask.coverage_threshold", patch_grid.DEFAULT_COVERAGE_THRESHOLD
        ),
        encoder=EncoderConfig(
            token_dim=_get_int(values, "encoder.token_dim", 32),
            depth=_get_int(values, "encoder.depth", 2),
            head_count=_get_int(values, "encoder.heads", 4),
            register_count=_get_int(values, "encoder.registers", 4),
        ),
        flow=FlowModelConfig(
            latent_dim=_get_int(values, "flow.latent_dim", 32),
            token_dim=_get_int(values, "encoder.token_dim", 32),
            head_count=_get_int(values, "flow.heads", 4),
            block_count=_get_int(values, "flow.blocks", 2),
            structure_grid=_get_int(values, "flow.structure_grid", 4),
            grid_size=_get_int(values, "flow.grid_size", 16),
            max_active=max_active,
        ),
        sampler=SamplerConfig(
            step_count=_get_int(values, "sampler.steps", 25),
            capture_step=_get_int(values, "sampler.capture_step", 0),
        ),
        alignment=AlignmentConfig(
            score_threshold=_get_float(values, "align.threshold", 0.55),
            reverse_threshold=reverse,
            head_count=_get_int(values, "align.heads", 3),
            block_index=_get_int(values, "align.block", 0),
            refine=RefineParams(
                enabled=_get_bool(values, "refine.enabled", True),
                k=_get_int(values, "refine.k", 16),
                fill_frac=_get_float(values, "refine.fill", 0.6),
                clear_frac=_get_float(values, "refine.clear", 0.4),
            ),
        ),
        enhancement_enabled=_get_bool(values, "enhance.enabled", True),
        beta=_get_float(values, "enhance.beta", 1.0),
        lambda_overrides=lambda_overrides,
        mode=values.get("mode", "full"),
        seed=seed,
        threads=_get_int(values, "threads", 1),
    )
    return cfg.with_seed(seed)


def manifest_entries(cfg: PipelineConfig) -> dict[str, str]:
    """Flat resolved-parameter map written to the run manifest."""
    out = {
        "global.image": str(cfg.global_image_path),
        "image.patch_size": str(cfg.patch_size),
        "mask.coverage_threshold": repr(cfg.coverage_threshold),
        "encoder.token_dim": str(cfg.encoder.token_dim),
        "encoder.depth": str(cfg.encoder.depth),
        "encoder.heads": str(cfg.encoder.head_count),
        "encoder.registers": str(cfg.encoder.register_count),
        "encoder.seed": str(cfg.encoder.seed),
        "flow.latent_dim": str(cfg.flow.latent_dim),
        "flow.heads": str(cfg.flow.head_count),
        "flow.blocks": str(cfg.flow.block_count),
        "flow.structure_grid": str(cfg.flow.structure_grid),
        "flow.grid_size": str(cfg.flow.grid_size),
        "flow.max_active": str(cfg.flow.max_active),
        "flow.seed": str(cfg.flow.seed),
        "sampler.steps": str(cfg.sampler.step_count),
        "sampler.capture_step": str(cfg.sampler.capture_step),
        "sampler.noise_seed": str(cfg.sampler.noise_seed),
        "align.threshold": repr(cfg.alignment.score_threshold),
        "align.reverse_threshold": repr(cfg.alignment.effective_reverse_threshold),
        "align.heads": str(cfg.alignment.head_count),
        "align.block": str(cfg.alignment.block_index),
        "refine.enabled": str(cfg.alignment.refine.enabled).lower(),
        "refine.k": str(cfg.alignment.refine.k),
        "refine.fill": repr(cfg.alignment.refine.fill_frac),
        "refine.clear": repr(cfg.alignment.refine.clear_frac),
        "enhance.enabled": str(cfg.enhancement_enabled).lower(),
        "enhance.beta": repr(cfg.beta),
        "mode": cfg.mode,
        "seed": str(cfg.seed),
    }
    for loc in cfg.locals:
        out[f"{loc.name}.image"] = str(loc.image_path)
        out[f"{loc.name}.mask"] = str(loc.mask_path)
    for name, value in sorted(cfg.lambda_overrides.items()):
        out[f"lambda.{name}"] = repr(value)
    return out
