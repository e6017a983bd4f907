from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import GraphStateMissing, NonFiniteActivation
from .config import ModelConfig
from .layers import MaxViTBlock, init_weights


@dataclass
class ForwardOutput:
    logits: torch.Tensor        # N x num_classes
    embedding: torch.Tensor     # N x D, pooled final-stage features


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteActivation(f"non-finite activation after {name}", stage=name)


class Stem(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        return self.conv2(self.act(self.bn(self.conv1(x))))


class Head(nn.Module):
    """LayerNorm, hidden layer with tanh, dropout, linear classifier."""

    def __init__(self, dim, num_classes, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.hidden = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(dim, num_classes)

    def forward(self, emb):
        return self.classifier(self.dropout(torch.tanh(self.hidden(self.norm(emb)))))


class MaxViT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.stem = Stem(config.in_channels, config.stem_channels)
        stages, cin = [], config.stem_channels
        for n_blocks, cout in zip(config.stage_blocks, config.stage_channels):
            blocks = []
            for b in range(n_blocks):
                blocks.append(MaxViTBlock(cin if b == 0 else cout, cout, 2 if b == 0 else 1, config))
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.head = Head(cin, config.num_classes, config.dropout_rate)
        init_weights(self)

    @property
    def embedding_dim(self) -> int:
        return self.config.stage_channels[-1]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        _check_finite(x, "stem")
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                x = block(x)
                _check_finite(x, f"stage{s}.block{b}")
        return x.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        emb = self.features(x)
        logits = self.head(emb)
        _check_finite(logits, "head")
        return ForwardOutput(logits, emb)


def build_model(config: ModelConfig) -> MaxViT:
    return MaxViT(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: nn.Module, batch, mode: str = "eval", generator: torch.Generator | None = None) -> ForwardOutput:
    """Run ``model`` in train or eval mode.

    In train mode a ``generator`` seeds the dropout stream so that two calls
    with equally seeded generators give identical outputs.
    """
    model.train(mode == "train")
    if not torch.is_tensor(batch):
        batch = torch.as_tensor(batch)
    batch = batch.to(next(model.parameters()).dtype)
    if mode == "train" and generator is not None:
        seed = int(torch.randint(0, 2**62, (1,), generator=generator))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return model(batch)
    return model(batch)


def backward(model: nn.Module, output: ForwardOutput, loss_gradient: torch.Tensor, inputs: torch.Tensor | None = None):
    """Reverse-mode gradients of ``<logits, loss_gradient>``.

    Returns ``{name: grad}`` for every parameter, plus ``"__input__"`` when
    ``inputs`` (which must require grad) is supplied.
    """
    if output.logits.grad_fn is None:
        raise GraphStateMissing("forward state was not recorded (no autograd graph on the logits)")
    params = dict(model.named_parameters())
    targets = list(params.values()) + ([inputs] if inputs is not None else [])
    grads = torch.autograd.grad(output.logits, targets, grad_outputs=loss_gradient, allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = torch.zeros_like(p) if g is None else g
    if inputs is not None:
        out["__input__"] = grads[-1] if grads[-1] is not None else torch.zeros_like(inputs)
    return out
