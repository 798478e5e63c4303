"""Feature backbones.

Two families:

  grid        built in, fully offline and deterministic: the crop is resized
              to the working resolution, split into an 8x8 cell grid, and the
              per-cell channel means (plus a global mean block) form the
              feature. The pooling flag has no effect here.
  hub:<name>  any torch.hub DINOv2 entry point (e.g. hub:dinov2_vits14).
              Needs torch plus network or cached weights; pooling selects the
              CLS token or the patch-token mean.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import BridgeError

GRID_CELLS = 8


def grid_features(crop: Image.Image, resolution: int) -> np.ndarray:
    """Deterministic pixel-statistics feature, 3 * 8 * 8 + 3 dims, unit norm."""
    resized = crop.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    pixels = np.asarray(resized, dtype=np.float64) / 255.0
    cell = resolution // GRID_CELLS
    trimmed = pixels[: cell * GRID_CELLS, : cell * GRID_CELLS]
    cells = trimmed.reshape(GRID_CELLS, cell, GRID_CELLS, cell, 3).mean(axis=(1, 3))
    feature = np.concatenate([cells.reshape(-1), pixels.mean(axis=(0, 1))])
    feature = feature - feature.mean()
    norm = np.linalg.norm(feature)
    if norm == 0.0:  # perfectly uniform crop: fall back to a fixed direction
        feature = np.zeros_like(feature)
        feature[0] = 1.0
        return feature
    return feature / norm


class GridBackbone:
    name = "grid"

    def __init__(self, resolution: int):
        if resolution < GRID_CELLS:
            raise BridgeError("BadConfig", f"resolution must be >= {GRID_CELLS}, got {resolution}")
        self.resolution = resolution
        self.dim = 3 * GRID_CELLS * GRID_CELLS + 3

    def extract(self, crops: list[Image.Image]) -> np.ndarray:
        return np.stack([grid_features(c, self.resolution) for c in crops]) if crops else np.zeros((0, self.dim))


class HubBackbone:
    """torch.hub vision transformer; CLS token or patch-mean pooling."""

    def __init__(self, entry: str, resolution: int, pooling: str):
        self.resolution = resolution
        self.pooling = pooling
        try:
            import torch  # noqa: F401  deferred; the bridge works without torch
            import torch.hub
        except ImportError as exc:
            raise BridgeError("BackboneLoadFailure", f"torch is not installed ({exc})")
        try:
            self._torch = __import__("torch")
            self.model = self._torch.hub.load("facebookresearch/dinov2", entry)
            self.model.eval()
        except Exception as exc:
            raise BridgeError("BackboneLoadFailure", f"could not load hub model {entry!r}: {exc}")
        self.dim = int(getattr(self.model, "embed_dim", 0)) or None
        self.name = f"hub:{entry}"

    def extract(self, crops: list[Image.Image]) -> np.ndarray:
        torch = self._torch
        batch = []
        for crop in crops:
            resized = crop.convert("RGB").resize((self.resolution, self.resolution), Image.BICUBIC)
            arr = np.asarray(resized, dtype=np.float32) / 255.0
            arr = (arr - np.array([0.485, 0.456, 0.406], dtype=np.float32)) / np.array(
                [0.229, 0.224, 0.225], dtype=np.float32
            )
            batch.append(arr.transpose(2, 0, 1))
        with torch.no_grad():
            tokens = self.model.forward_features(torch.from_numpy(np.stack(batch)))
        if self.pooling == "cls":
            feats = tokens["x_norm_clstoken"]
        else:
            feats = tokens["x_norm_patchtokens"].mean(dim=1)
        feats = feats.cpu().numpy().astype(np.float64)
        return feats / np.linalg.norm(feats, axis=1, keepdims=True)


def load_backbone(name: str, resolution: int, pooling: str):
    if pooling not in ("cls", "mean"):
        raise BridgeError("BadConfig", f"pooling must be 'cls' or 'mean', got {pooling!r}")
    if name == "grid":
        return GridBackbone(resolution)
    if name.startswith("hub:"):
        return HubBackbone(name.split(":", 1)[1], resolution, pooling)
    raise BridgeError("BadBackbone", f"unknown backbone {name!r} (use 'grid' or 'hub:<entry>')")
