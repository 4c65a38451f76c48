"""Shared-backbone models with independent heads.

A backbone maps images to a dict with ``"out"`` (final feature map) and
``"low"`` (an earlier, higher-resolution map). Concrete architectures are
picked by name from :data:`BACKBONES`.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "toy_cnn"
    width: int = 16
    proj_dim: int = 128
    proj_hidden: int = 256
    seg_head: str = "conv"
    pretrained: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_bn(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ToyCNN(nn.Module):
    """Five 3x3 conv layers, output stride 4."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.stem = nn.Sequential(_conv_bn(3, width), _conv_bn(width, 2 * width, 2))
        self.body = nn.Sequential(_conv_bn(2 * width, 2 * width), _conv_bn(2 * width, 4 * width, 2), _conv_bn(4 * width, 4 * width))
        self.low_channels = 2 * width
        self.out_channels = 4 * width

    def forward(self, x):
        low = self.stem(x)
        return {"low": low, "out": self.body(low)}


class TorchvisionResNet(nn.Module):
    """torchvision ResNet trunk; ``out`` is layer4 (stride 32), ``low`` layer1."""

    def __init__(self, name: str):
        super().__init__()
        import torchvision

        net = getattr(torchvision.models, name)(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.low_channels = 64 if name in ("resnet18", "resnet34") else 256
        self.out_channels = net.fc.in_features

    def forward(self, x):
        low = self.layer1(self.stem(x))
        return {"low": low, "out": self.layer4(self.layer3(self.layer2(low)))}


BACKBONES = {
    "toy_cnn": lambda spec: ToyCNN(spec.width),
    "resnet18": lambda spec: TorchvisionResNet("resnet18"),
    "resnet50": lambda spec: TorchvisionResNet("resnet50"),
    "resnet101": lambda spec: TorchvisionResNet("resnet101"),
}


def build_backbone(spec: ModelSpec) -> nn.Module:
    try:
        net = BACKBONES[spec.backbone](spec)
    except KeyError:
        raise ValueError(f"unknown backbone {spec.backbone!r}; choose from {sorted(BACKBONES)}") from None
    if spec.pretrained:
        state = torch.load(spec.pretrained, map_location="cpu", weights_only=True)
        missing, unexpected = net.load_state_dict(state, strict=False)
        logger.info("loaded backbone weights from %s (%d missing, %d unexpected keys)", spec.pretrained, len(missing), len(unexpected))
    return net


class MLPHead(nn.Sequential):
    def __init__(self, cin, hidden, cout):
        super().__init__(nn.Linear(cin, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, cout))


class ClassifierModel(nn.Module):
    """Backbone plus classification head and two projection heads (s and u streams)."""

    def __init__(self, spec: ModelSpec, num_classes: int):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.backbone = build_backbone(spec)
        c = self.backbone.out_channels
        self.cls_head = nn.Linear(c, num_classes)
        self.proj_s = MLPHead(c, spec.proj_hidden, spec.proj_dim)
        self.proj_u = MLPHead(c, spec.proj_hidden, spec.proj_dim)

    def features(self, x):
        return F.adaptive_avg_pool2d(self.backbone(x)["out"], 1).flatten(1)

    def forward(self, x):
        return self.cls_head(self.features(x))

    def param_groups(self) -> dict:
        return {
            "backbone": list(self.backbone.parameters()),
            "cls_head": list(self.cls_head.parameters()),
            "proj_s": list(self.proj_s.parameters()),
            "proj_u": list(self.proj_u.parameters()),
        }


class ConvHead(nn.Module):
    def __init__(self, cin, cout, low_channels=None):
        super().__init__()
        self.body = nn.Sequential(_conv_bn(cin, cin), nn.Conv2d(cin, cout, 1))

    def forward(self, feats):
        return self.body(feats["out"])


class DeepLabV3PlusHead(nn.Module):
    """ASPP on the final map, fused with the low-level map at its resolution."""

    def __init__(self, cin, cout, low_channels, rates=(6, 12, 18), aspp_channels=256):
        super().__init__()
        from torchvision.models.segmentation.deeplabv3 import ASPP

        self.aspp = ASPP(cin, list(rates), aspp_channels)
        self.reduce = nn.Sequential(nn.Conv2d(low_channels, 48, 1, bias=False), nn.BatchNorm2d(48), nn.ReLU(inplace=True))
        self.fuse = nn.Sequential(_conv_bn(aspp_channels + 48, aspp_channels), _conv_bn(aspp_channels, aspp_channels), nn.Conv2d(aspp_channels, cout, 1))

    def forward(self, feats):
        low = self.reduce(feats["low"])
        high = F.interpolate(self.aspp(feats["out"]), size=low.shape[-2:], mode="bilinear", align_corners=False)
        return self.fuse(torch.cat([high, low], 1))


SEG_HEADS = {"conv": ConvHead, "deeplabv3plus": DeepLabV3PlusHead}


class SegmenterModel(nn.Module):
    """Backbone with a segmentation head and a contrastive projection head.

    ``forward`` returns full-resolution logits; ``forward_both`` also returns
    the ``proj_dim``-channel contrastive map at the head's native resolution.
    """

    def __init__(self, spec: ModelSpec, num_classes: int):
        super().__init__()
        if spec.seg_head not in SEG_HEADS:
            raise ValueError(f"unknown seg head {spec.seg_head!r}; choose from {sorted(SEG_HEADS)}")
        self.spec = spec
        self.num_classes = num_classes
        self.backbone = build_backbone(spec)
        head = SEG_HEADS[spec.seg_head]
        c, low = self.backbone.out_channels, self.backbone.low_channels
        self.seg_head = head(c, num_classes, low)
        self.contrast_head = head(c, spec.proj_dim, low)

    def features(self, x):
        return self.backbone(x)["out"]

    def forward_both(self, x, with_logits=True, with_proj=True):
        feats = self.backbone(x)
        logits = proj = None
        if with_logits:
            logits = F.interpolate(self.seg_head(feats), size=x.shape[-2:], mode="bilinear", align_corners=False)
        if with_proj:
            proj = self.contrast_head(feats)
        return logits, proj

    def forward(self, x):
        return self.forward_both(x, with_proj=False)[0]

    def reset_seg_head(self):
        for m in self.seg_head.modules():
            if hasattr(m, "reset_parameters") and m is not self.seg_head:
                m.reset_parameters()

    def param_groups(self) -> dict:
        return {
            "backbone": list(self.backbone.parameters()),
            "seg_head": list(self.seg_head.parameters()),
            "contrast_head": list(self.contrast_head.parameters()),
        }


def build_model(task: str, spec: ModelSpec, num_classes: int) -> nn.Module:
    if task == "classify":
        return ClassifierModel(spec, num_classes)
    if task == "segment":
        return SegmenterModel(spec, num_classes)
    raise ValueError(f"unknown task {task!r}")
