from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError, DivisibilityError


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the MaxViT classifier."""

    num_classes: int = 2
    in_channels: int = 3
    stem_channels: int = 64
    stage_blocks: list = field(default_factory=lambda: [2, 2, 5, 2])
    stage_channels: list = field(default_factory=lambda: [64, 128, 256, 512])
    window_size: int = 7
    grid_size: int = 7
    mbconv_expansion: int = 4
    se_reduction: float = 0.25
    head_dim: int = 32
    mlp_ratio: int = 4
    dropout_rate: float = 0.0
    input_size: int = 224
    arch: str = "maxvit"

    def __post_init__(self):
        self.stage_blocks = [int(b) for b in self.stage_blocks]
        self.stage_channels = [int(c) for c in self.stage_channels]

    def validate(self) -> "ModelConfig":
        if self.arch != "maxvit":
            raise ConfigError(f"ModelConfig describes arch 'maxvit', got {self.arch!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.stage_blocks) != len(self.stage_channels) or not self.stage_blocks:
            raise ConfigError("stage_blocks and stage_channels must be non-empty and of equal length")
        if min(self.stage_blocks) < 1:
            raise ConfigError("every stage needs at least one block")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        stem_side = self.input_size // 2
        if self.input_size % 2:
            raise DivisibilityError(f"input size {self.input_size} is odd")
        side = stem_side
        for s, ch in enumerate(self.stage_channels):
            if side % 2:
                raise DivisibilityError(f"stage {s}: input side {side} not divisible by 2")
            side //= 2
            for name, p in (("window", self.window_size), ("grid", self.grid_size)):
                if side % p:
                    raise DivisibilityError(f"stage {s}: feature map side {side} not divisible by {name} size {p}")
            if ch % self.head_dim:
                raise ConfigError(f"stage {s}: {ch} channels not divisible by head_dim {self.head_dim}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**doc)


PRESETS = {
    "tiny": dict(stem_channels=64, stage_blocks=[2, 2, 5, 2], stage_channels=[64, 128, 256, 512],
                 window_size=7, grid_size=7, head_dim=32, input_size=224),
    # head_dim 8: the 16-channel stage cannot be split into 32-wide heads
    "nano": dict(stem_channels=16, stage_blocks=[1, 1], stage_channels=[16, 32],
                 window_size=7, grid_size=7, head_dim=8, input_size=56),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides}).validate()
