from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


VARIANT_FLAGS = {
    # variant: (visual prompt enabled, shared prompts enabled)
    "coop_text_only": (False, False),
    "coop_plus_visual": (True, False),
    "coop_plus_shared": (False, True),
    "mmpt_full": (True, True),
}


@dataclass(frozen=True)
class MMPTConfig:
    n_attributes: int = 8
    n_objects: int = 10
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    prompt_patch_size: int = 8
    d_v: int = 32
    d_l: int = 24
    d_s: int = 16
    d_joint: int = 16
    h_v: int = 3
    h_a: int = 3
    h_o: int = 3
    h_s: int = 2
    prompt_len: int = 6
    n_ctx: int = 4
    n_fixed: int = 4
    heads_v: int = 4
    heads_l: int = 4
    mlp_ratio: int = 4
    tau: float = 0.01
    use_visual_prompt: bool = True
    use_shared_prompts: bool = True
    per_layer_projectors: bool = False
    phi_mode: str = "single"  # "single" p x p region, or "all_patches"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("n_attributes", "n_objects", "image_size", "patch_size", "channels", "prompt_patch_size",
                    "d_v", "d_l", "d_s", "d_joint", "h_v", "h_a", "h_o", "heads_v", "heads_l", "mlp_ratio")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("h_s", "prompt_len", "n_ctx", "n_fixed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        depth = min(self.h_v, self.h_a, self.h_o)
        if self.h_s > depth:
            raise ConfigError(f"h_s={self.h_s} exceeds the shallowest branch depth {depth}")
        if self.use_shared_prompts and self.prompt_len > 0 and self.h_s < 1:
            raise ConfigError("h_s must be at least 1 when shared prompts are enabled")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.prompt_patch_size > self.image_size:
            raise ConfigError("prompt_patch_size is larger than the image")
        if self.d_v % self.heads_v or self.d_l % self.heads_l:
            raise ConfigError("head counts must divide the branch widths")
        if self.phi_mode not in ("single", "all_patches"):
            raise ConfigError(f"phi_mode must be 'single' or 'all_patches', got {self.phi_mode!r}")
        if self.phi_mode == "all_patches" and self.prompt_patch_size != self.patch_size:
            raise ConfigError("phi_mode='all_patches' needs prompt_patch_size == patch_size")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def shared_active(self) -> bool:
        return self.use_shared_prompts and self.prompt_len > 0 and self.h_s > 0

    def replace(self, **changes) -> "MMPTConfig":
        return dataclasses.replace(self, **changes)

    def with_variant(self, variant: str) -> "MMPTConfig":
        try:
            visual, shared = VARIANT_FLAGS[variant]
        except KeyError:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANT_FLAGS)}") from None
        return self.replace(use_visual_prompt=visual, use_shared_prompts=shared)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict, where: str = "model") -> "MMPTConfig":
        return cls(**_check_keys(cls, d, where))


def full_scale_config(**overrides) -> MMPTConfig:
    """Full-size settings: ViT-B/16 widths and 12 layers per branch."""
    base = dict(
        image_size=224, patch_size=16, prompt_patch_size=16,
        d_v=768, d_l=512, d_s=128, d_joint=512,
        h_v=12, h_a=12, h_o=12, h_s=9,
        prompt_len=6, n_ctx=4, heads_v=12, heads_l=8,
        n_attributes=16, n_objects=12,
    )
    base.update(overrides)
    return MMPTConfig(**base)


def toy_config(**overrides) -> MMPTConfig:
    return MMPTConfig(**overrides)


FULL_SCALE_TRAINING = {"lr": 5e-5, "batch_size": 48}


def _check_keys(cls, d: dict, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(where + '.' + k for k in unknown)}")
    return dict(d)


@dataclass(frozen=True)
class DataConfig:
    space_file: str | None = None
    n_per_seen_train: int = 8
    n_per_pair_eval: int = 4
    seed: int = 0
    image_shift: float = 2.0
    scale_jitter: float = 0.1
    outline: bool = False

    def __post_init__(self):
        if self.n_per_seen_train <= 0 or self.n_per_pair_eval <= 0:
            raise ConfigError("data: sample counts must be positive")


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 1500
    partition: str = "toy-full"
    placement: str = "random"  # visual prompt position during training: random or center

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("training.lr must be positive")
        if self.batch_size <= 0:
            raise ConfigError("training.batch_size must be positive")
        if self.steps < 0:
            raise ConfigError("training.steps must be non-negative")
        if self.partition not in ("toy-full", "prompt-tune", "frozen"):
            raise ConfigError(f"training.partition {self.partition!r} is not one of toy-full, prompt-tune, frozen")
        if self.placement not in ("random", "center"):
            raise ConfigError(f"training.placement {self.placement!r} is not one of random, center")


@dataclass(frozen=True)
class EvalConfig:
    eval_every: int = 500
    split: str = "test"

    def __post_init__(self):
        if self.eval_every <= 0:
            raise ConfigError("eval.eval_every must be positive")
        if self.split not in ("val", "test"):
            raise ConfigError("eval.split must be 'val' or 'test'")


@dataclass(frozen=True)
class ExperimentConfig:
    model: MMPTConfig = field(default_factory=MMPTConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variant: str = "mmpt_full"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANT_FLAGS:
            raise ConfigError(f"variant: {self.variant!r} is not one of {sorted(VARIANT_FLAGS)}")

    def resolved_model(self) -> MMPTConfig:
        """Model config with the variant flags and the experiment seed applied."""
        return self.model.with_variant(self.variant).replace(seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = _check_keys(cls, d, "config")
        sections = {"model": MMPTConfig, "data": DataConfig, "training": TrainingConfig, "eval": EvalConfig}
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                section_cls = sections[key]
                try:
                    kwargs[key] = section_cls(**_check_keys(section_cls, value, key))
                except TypeError as e:
                    raise ConfigError(f"{key}: {e}") from None
            else:
                kwargs[key] = value
        return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return ExperimentConfig.from_dict(raw)
