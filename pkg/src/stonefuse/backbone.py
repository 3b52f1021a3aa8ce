"""Staged CNN feature extractors, classifier head and channel-attention gates."""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18, resnet50

from .errors import ConfigError, ShapeError


class StagedBackbone(nn.Module):
    """A stem followed by named stages, global-average pooled to an embedding."""

    def __init__(self, architecture_id: str, stem: nn.Module, stages: "OrderedDict[str, nn.Module]", channels: dict[str, int]):
        super().__init__()
        self.architecture_id = architecture_id
        self.stem = stem
        self.stages = nn.ModuleDict(stages)
        self.stage_channels = dict(channels)
        self.stage_names = list(stages)
        self.embedding_dim = channels[self.stage_names[-1]]

    def forward_features(self, x: torch.Tensor, gates: dict[str, nn.Module] | None = None):
        """Return ``({stage: feature map}, pooled embedding)``.

        ``gates`` maps a stage name to a module applied to that stage's output
        before it feeds the next stage.
        """
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        feats = {}
        h = self.stem(x)
        for name in self.stage_names:
            h = self.stages[name](h)
            if gates is not None and name in gates:
                h = gates[name](h)
            feats[name] = h
        emb = torch.flatten(F.adaptive_avg_pool2d(h, 1), 1)
        return feats, emb

    def forward(self, x):
        return self.forward_features(x)[1]


def _torchvision_backbone(arch_id: str, factory: Callable, channels: tuple[int, ...]) -> StagedBackbone:
    net = factory(weights=None)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    names = ["layer1", "layer2", "layer3", "layer4"]
    stages = OrderedDict((n, getattr(net, n)) for n in names)
    return StagedBackbone(arch_id, stem, stages, dict(zip(names, channels)))


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + idt)


def _tiny_backbone(width: int = 16) -> StagedBackbone:
    # Small residual net for CPU runs; same stage naming as the ResNets.
    stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True))
    chans = [width, width * 2, width * 4, width * 8]
    stages = OrderedDict()
    cin = width
    for i, c in enumerate(chans):
        stages[f"layer{i + 1}"] = _BasicBlock(cin, c, 1 if i == 0 else 2)
        cin = c
    return StagedBackbone("tiny", stem, stages, {f"layer{i + 1}": c for i, c in enumerate(chans)})


BACKBONES: dict[str, Callable[[], StagedBackbone]] = {
    "resnet50": lambda: _torchvision_backbone("resnet50", resnet50, (256, 512, 1024, 2048)),
    "resnet18": lambda: _torchvision_backbone("resnet18", resnet18, (64, 128, 256, 512)),
    "tiny": _tiny_backbone,
}


def register_backbone(arch_id: str, factory: Callable[[], StagedBackbone]) -> None:
    BACKBONES[arch_id] = factory


def build_backbone(architecture_id: str = "resnet50") -> StagedBackbone:
    try:
        factory = BACKBONES[architecture_id]
    except KeyError:
        raise ConfigError(f"unknown architecture {architecture_id!r}; known: {sorted(BACKBONES)}") from None
    return factory()


def torchvision_key_map(state: dict) -> dict:
    """Rename torchvision ResNet state-dict keys to the staged layout, dropping ``fc``."""
    out = {}
    for k, v in state.items():
        if k.startswith("fc."):
            continue
        if k.startswith("conv1."):
            k = "stem.0." + k[len("conv1."):]
        elif k.startswith("bn1."):
            k = "stem.1." + k[len("bn1."):]
        elif k.startswith("layer"):
            k = "stages." + k
        out[k] = v
    return out


class ClassifierHead(nn.Module):
    """Dropout followed by one fully connected layer."""

    def __init__(self, input_dim: int, num_classes: int, dropout: float = 0.2):
        super().__init__()
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.dropout_p = dropout
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(input_dim, num_classes)

    def describe(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "layers": [{"type": "dropout", "p": self.dropout_p}, {"type": "linear", "out": self.num_classes}],
        }

    def forward(self, emb):
        if emb.shape[-1] != self.input_dim:
            raise ShapeError(f"embedding length {emb.shape[-1]} != head input_dim {self.input_dim}")
        return self.fc(self.dropout(emb))


class AttentionGate(nn.Module):
    """Squeeze-excitation channel gate: avgpool, bottleneck MLP, sigmoid."""

    def __init__(self, channels: int, reduction_ratio: int = 16):
        super().__init__()
        self.channels = channels
        self.reduction_ratio = reduction_ratio
        hidden = max(1, channels // reduction_ratio)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate_values(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.dim() != 4 or fmap.shape[1] != self.channels:
            raise ShapeError(f"gate expects {self.channels} channels, got shape {tuple(fmap.shape)}")
        s = fmap.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, fmap):
        return fmap * self.gate_values(fmap)[:, :, None, None]

    @torch.no_grad()
    def pin_open(self) -> None:
        # sigmoid(100) rounds to exactly 1.0 in float32 and float64
        self.fc2.weight.zero_()
        self.fc2.bias.fill_(100.0)


def apply_attention(gate: AttentionGate, fmap: torch.Tensor) -> torch.Tensor:
    return gate(fmap)


def forward_features(model: StagedBackbone, batch, patch_size: int | None = None):
    """Inference-mode stage maps and embedding for a batch of patches."""
    x = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch, dtype=torch.float32)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) batch, got {tuple(x.shape)}")
    if patch_size is not None and tuple(x.shape[2:]) != (patch_size, patch_size):
        raise ShapeError(f"expected {patch_size}x{patch_size} patches, got {tuple(x.shape[2:])}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model.forward_features(x)
    finally:
        model.train(was_training)


def classify(head: ClassifierHead, embedding) -> torch.Tensor:
    """Softmax class probabilities for one embedding or a batch of them."""
    emb = torch.as_tensor(embedding, dtype=next(head.parameters()).dtype)
    if emb.shape[-1] != head.input_dim:
        raise ShapeError(f"embedding length {emb.shape[-1]} != head input_dim {head.input_dim}")
    was_training = head.training
    head.eval()
    try:
        with torch.no_grad():
            return torch.softmax(head(emb), dim=-1)
    finally:
        head.train(was_training)


class SingleViewModel(nn.Module):
    def __init__(self, backbone: StagedBackbone, num_classes: int, class_names=None, dropout: float = 0.2):
        super().__init__()
        self.backbone = backbone
        self.head = ClassifierHead(backbone.embedding_dim, num_classes, dropout)
        self.class_names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
        if len(self.class_names) != num_classes:
            raise ConfigError("class_names length differs from num_classes")

    @property
    def architecture_id(self) -> str:
        return self.backbone.architecture_id

    def embed(self, x):
        return self.backbone.forward_features(x)[1]

    def forward(self, x):
        return self.head(self.embed(x))

    def reset_head(self, class_names, dropout: float | None = None) -> None:
        p = self.head.dropout_p if dropout is None else dropout
        self.head = ClassifierHead(self.backbone.embedding_dim, len(class_names), p)
        self.class_names = list(class_names)
