"""Desk-scale convolutional feature extractor and external-feature ingestion.

The built-in backbone is three 3x3 stride-2 convolutions (3 -> 16 -> 32 -> C
channels, ReLU after the first two), so a 64x64 image yields a C x 8 x 8
feature map. Externally exported features can replace it entirely: a
FeatureProvider serves precomputed maps from a manifest directory and keeps
one identity-initialized 1x1 channel projection as its learnable last layer.
"""

from __future__ import annotations

import enum
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tensors import Rng, read_feature_file, read_mask_file


class TrainScope(enum.Enum):
    ALL = "all"
    LAST_LAYER_ONLY = "last_layer_only"
    NONE = "none"


class ExternalFeatureError(ValueError):
    """Raised when a manifest or its feature files are inconsistent."""


def _glorot_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(size=shape) * 2.0 - 1.0) * s


class ConvBackbone:
    """Seeded three-layer convolutional extractor with a trainability gate."""

    def __init__(self, seed: int, out_channels: int = 32):
        rng = Rng(seed).child("backbone-init")
        plan = [(3, 16), (16, 32), (32, out_channels)]
        self.out_channels = out_channels
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for cin, cout in plan:
            fan_in, fan_out = cin * 9, cout * 9
            w = _glorot_uniform(rng, (cout, cin, 3, 3), fan_in, fan_out)
            self.weights.append(ad.parameter(w))
            self.biases.append(ad.parameter(np.zeros(cout)))
        self.scope = TrainScope.ALL

    def extract(self, img) -> Tensor:
        img = ad.as_tensor(img)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"expected a 3xHxW image, got shape {img.shape}")
        _, h, w = img.shape
        if h % 8 or w % 8:
            raise ValueError(f"image dims {h}x{w} must be divisible by 8")
        x = img
        for i, (wt, bt) in enumerate(zip(self.weights, self.biases)):
            x = ad.conv2d(x, wt, bt, stride=2, padding=1)
            if i < 2:
                x = ad.relu(x)
        return x

    def set_trainable(self, scope: TrainScope) -> None:
        self.scope = scope

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"backbone.w{i}"] = w
            out[f"backbone.b{i}"] = b
        return out

    def trainable_tensors(self) -> dict[str, Tensor]:
        if self.scope is TrainScope.NONE:
            return {}
        if self.scope is TrainScope.LAST_LAYER_ONLY:
            return {"backbone.w3": self.weights[2], "backbone.b3": self.biases[2]}
        return self.tensors()


def _read_manifest(directory: Path) -> list[dict]:
    path = directory / "manifest.json"
    if not path.exists():
        raise ExternalFeatureError(f"no manifest.json in {directory}")
    entries = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ExternalFeatureError("manifest must be a JSON array")
    for entry in entries:
        for key in ("id", "feature_path", "mask_path"):
            if key not in entry:
                raise ExternalFeatureError(f"manifest entry missing key {key!r}: {entry}")
    return entries


class FeatureProvider:
    """Precomputed features keyed by id, with a trainable 1x1 projection.

    The projection starts as the exact identity, so a fresh provider feeds
    downstream transforms bit-identically to the raw stored features.
    """

    def __init__(self, directory):
        directory = Path(directory)
        self._features: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}
        shape = None
        shape_id = None
        for entry in _read_manifest(directory):
            eid = entry["id"]
            fmap = read_feature_file(directory / entry["feature_path"])
            mask = read_mask_file(directory / entry["mask_path"])
            if shape is None:
                shape, shape_id = fmap.values.shape, eid
            elif fmap.values.shape != shape:
                raise ExternalFeatureError(
                    f"feature shape {fmap.values.shape} for id {eid!r} does not match "
                    f"{shape} from id {shape_id!r}"
                )
            if mask.values.shape != shape[1:]:
                raise ExternalFeatureError(
                    f"mask shape {mask.values.shape} for id {eid!r} does not match "
                    f"feature grid {shape[1:]}"
                )
            self._features[eid] = fmap.values
            self._masks[eid] = mask.values
        if not self._features:
            raise ExternalFeatureError(f"manifest in {directory} lists no entries")
        self.out_channels = shape[0]
        self.projection = ad.parameter(np.eye(self.out_channels))
        self.scope = TrainScope.ALL

    @property
    def ids(self) -> list[str]:
        return sorted(self._features)

    def raw_feature(self, eid: str) -> np.ndarray:
        if eid not in self._features:
            raise ExternalFeatureError(f"id {eid!r} not present in manifest")
        return self._features[eid]

    def mask(self, eid: str) -> np.ndarray:
        if eid not in self._masks:
            raise ExternalFeatureError(f"id {eid!r} not present in manifest")
        return self._masks[eid]

    def extract(self, eid: str) -> Tensor:
        raw = self.raw_feature(eid)
        c, h, w = raw.shape
        flat = ad.matmul(self.projection, Tensor(raw.reshape(c, h * w)))
        return flat.reshape(c, h, w)

    def set_trainable(self, scope: TrainScope) -> None:
        self.scope = scope

    def tensors(self) -> dict[str, Tensor]:
        return {"backbone.projection": self.projection}

    def trainable_tensors(self) -> dict[str, Tensor]:
        if self.scope is TrainScope.NONE:
            return {}
        return self.tensors()
