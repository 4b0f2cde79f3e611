"""Run configuration and its flat ``section.key = value`` text format."""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 48
    patch: int = 16
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    fusion_after_block: int = 0
    gate_init: float = -2.0
    gate_bypass: bool = False
    fusion_zero_init: bool = True
    use_geometry: bool = True
    use_adapter: bool = True
    geo_mode: str = "oracle"
    geo_seed: int = 1234
    geo_channels: int = 16
    geo_scale: int = 4
    side_channels: int = 128
    adapter_depth: int = 2
    adapter_width: int = 32
    decoder_layers: int = 2
    decoder_dim: int = 128
    ief_iterations: int = 3
    kqir_steps: int = 2
    kqir_shared: bool = True
    d_q: int = 64
    kqir_heads: int = 4
    kqir_hidden: int = 256
    deep_supervision: bool = True
    v_count: int = 120
    template_seed: int = 7

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def geo_hw(self) -> tuple[int, int]:
        hp, wp = self.grid
        return hp * self.geo_scale, wp * self.geo_scale


@dataclass
class LossConfig:
    lambda_2d: float = 1.0
    lambda_3d_joint: float = 5.0
    lambda_bone: float = 1.0
    lambda_vert: float = 0.1
    lambda_global: float = 0.1
    lambda_pose: float = 0.1
    lambda_betas: float = 0.01
    lambda_shape: float = 0.05
    intermediate_weight: float = 0.5


@dataclass
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000
    batch_size: int = 16


@dataclass
class DataConfig:
    samples: int = 16
    root_angle: float = 0.5
    pose_angle: float = 0.35
    beta_std: float = 0.15
    cam_scale: float = 8.0
    cam_jitter: float = 0.1
    image_noise: float = 0.0
    joint2d_noise: float = 0.0
    mask_uv_rate: float = 0.0
    mask_xyz_rate: float = 0.0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    # -- flat key access ----------------------------------------------------
    def items(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in fields(value):
                    yield f"{f.name}.{sub.name}", getattr(value, sub.name)
            else:
                yield f.name, value

    def set(self, key: str, value) -> None:
        section, _, name = key.rpartition(".")
        target = getattr(self, section) if section else self
        if section and not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown config section {section!r}")
        known = {f.name: f for f in fields(target)} if dataclasses.is_dataclass(target) else {}
        if not hasattr(target, name) or name not in known or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(key, value, type(current)))

    def copy(self) -> "Config":
        return parse(dumps(self))

    def validate(self) -> None:
        m = self.model
        if m.image_h % m.patch or m.image_w % m.patch:
            raise ConfigError(f"image {m.image_h}x{m.image_w} not divisible by patch {m.patch}")
        if m.geo_mode not in ("oracle", "frozen-random"):
            raise ConfigError(f"model.geo_mode must be oracle or frozen-random, got {m.geo_mode!r}")
        if not 0 <= m.fusion_after_block <= m.depth:
            raise ConfigError(f"model.fusion_after_block must lie in [0, {m.depth}]")
        if m.kqir_steps < 0 or m.ief_iterations < 0:
            raise ConfigError("iteration counts must be non-negative")


def _coerce(key: str, value, kind: type):
    if isinstance(value, str) and kind is not str:
        text = value.strip()
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            value = ast.literal_eval(text)
        except (ValueError, SyntaxError):
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if kind is str:
        return str(value).strip().strip('"').strip("'")
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return kind(value)


def parse(text: str, base: Config | None = None) -> Config:
    cfg = base.copy() if base is not None else Config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def dumps(cfg: Config) -> str:
    lines = []
    for key, value in cfg.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = f'"{value}"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def load(path: str | Path, overrides: dict | None = None) -> Config:
    cfg = parse(Path(path).read_text())
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    cfg.validate()
    return cfg


def full_scale_preset() -> Config:
    """Full-size constants (ViT-L-like trunk); valid but far too heavy for this engine."""
    cfg = Config()
    m = cfg.model
    m.image_h, m.image_w, m.patch = 256, 192, 16
    m.dim, m.depth, m.heads = 1280, 32, 16
    m.decoder_layers, m.ief_iterations, m.kqir_steps = 6, 3, 2
    m.v_count = 778
    cfg.optim.lr, cfg.optim.epochs, cfg.optim.batch_size = 2e-5, 60, 64
    return cfg
