"""Small convolutional comparator for paired-AUC tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
from torch import nn

from ..errors import ConfigError, ShapeMismatch
from ..model.maxvit import ForwardOutput, _check_finite
from ..model.layers import init_weights


@dataclass
class BaselineConfig:
    num_classes: int = 2
    in_channels: int = 3
    channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    dropout_rate: float = 0.0
    input_size: int = 56
    arch: str = "baseline_cnn"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]

    def validate(self) -> "BaselineConfig":
        if self.arch != "baseline_cnn":
            raise ConfigError(f"BaselineConfig describes arch 'baseline_cnn', got {self.arch!r}")
        if len(self.channels) != 4:
            raise ConfigError("the baseline has exactly four convolutional layers")
        if self.num_classes < 2 or not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("invalid num_classes or dropout_rate")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "BaselineConfig":
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown baseline config key(s): {', '.join(unknown)}")
        return cls(**doc)


class BaselineCNN(nn.Module):
    """Four stride-2 conv/BN/GELU layers, global average pool, linear head."""

    def __init__(self, config: BaselineConfig):
        super().__init__()
        self.config = config.validate()
        layers, cin = [], config.in_channels
        for c in config.channels:
            layers.append(nn.Sequential(nn.Conv2d(cin, c, 3, stride=2, padding=1, bias=False),
                                        nn.BatchNorm2d(c), nn.GELU()))
            cin = c
        self.layers = nn.ModuleList(layers)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.classifier = nn.Linear(cin, config.num_classes)
        init_weights(self)

    @property
    def embedding_dim(self) -> int:
        return self.config.channels[-1]

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"expected N x {self.config.in_channels} x H x W input, got {tuple(x.shape)}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            _check_finite(x, f"conv{i}")
        emb = x.mean(dim=(2, 3))
        logits = self.classifier(self.dropout(emb))
        _check_finite(logits, "head")
        return ForwardOutput(logits, emb)
