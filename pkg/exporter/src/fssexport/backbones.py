"""Model-zoo backbones cut at a named stage.

Each entry maps a (backbone, layer) pair to a feature extractor. Pretrained
weights are used when they can be fetched; otherwise the same architecture
is initialized from a fixed seed so exports stay deterministic offline. The
active policy is reported so callers can tell which weights produced a job.
"""

from __future__ import annotations

import sys

import torch
from torch import nn
from torchvision import models

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneError(ValueError):
    """Unknown backbone/layer, or a weights policy that cannot be satisfied."""


def _resnet_tap(ctor, weights_enum, layer: str, weights: str, seed: int):
    taps = {"layer2": 5, "layer3": 6, "layer4": 7}  # children index (exclusive)
    if layer not in taps:
        raise BackboneError(f"unknown layer {layer!r}; choose from {sorted(taps)}")
    model = _instantiate(ctor, weights_enum, weights, seed)
    children = list(model.children())  # conv1,bn1,relu,maxpool,layer1..4,...
    return nn.Sequential(*children[:taps[layer] + 1])


def _vgg_tap(ctor, weights_enum, layer: str, weights: str, seed: int):
    taps = {"conv4": 23, "conv5": 30}  # features[:n], post-ReLU of the stage
    if layer not in taps:
        raise BackboneError(f"unknown layer {layer!r}; choose from {sorted(taps)}")
    model = _instantiate(ctor, weights_enum, weights, seed)
    return model.features[:taps[layer]]


def _instantiate(ctor, weights_enum, weights: str, seed: int):
    if weights == "seeded":
        torch.manual_seed(seed)
        return ctor(weights=None)
    try:
        return ctor(weights=weights_enum)
    except Exception as exc:
        if weights == "pretrained":
            raise BackboneError(
                f"pretrained weights unavailable: {exc}") from exc
        print(f"fssexport: pretrained weights unavailable ({exc}); "
              f"falling back to seeded initialization (seed {seed})",
              file=sys.stderr)
        torch.manual_seed(seed)
        return ctor(weights=None)


_ZOO = {
    "resnet50": (lambda **kw: models.resnet50(**kw),
                 models.ResNet50_Weights.IMAGENET1K_V2, _resnet_tap),
    "resnet18": (lambda **kw: models.resnet18(**kw),
                 models.ResNet18_Weights.IMAGENET1K_V1, _resnet_tap),
    "vgg16": (lambda **kw: models.vgg16(**kw),
              models.VGG16_Weights.IMAGENET1K_V1, _vgg_tap),
}


def available() -> list[str]:
    return sorted(_ZOO)


def build(backbone: str, layer: str, weights: str = "auto",
          seed: int = 0) -> nn.Module:
    """Feature extractor for the named zoo backbone cut at `layer`.

    `weights`: "auto" (pretrained if fetchable, else seeded), "pretrained"
    (fail if unavailable), or "seeded" (always the fixed-seed init).
    """
    if backbone not in _ZOO:
        raise BackboneError(f"unknown backbone {backbone!r}; "
                            f"choose from {available()}")
    if weights not in ("auto", "pretrained", "seeded"):
        raise BackboneError(f"unknown weights policy {weights!r}")
    ctor, weights_enum, tap = _ZOO[backbone]
    extractor = tap(ctor, weights_enum, layer, weights, seed)
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)
    return extractor
