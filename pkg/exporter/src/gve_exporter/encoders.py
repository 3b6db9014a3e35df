"""Encoder registry and loaders.

An encoder takes a float batch (N, 3, S, S) with values in [0, 1] and
returns dense patch features (N, C, g, g). Normalization statistics live
inside each implementation. Loading the real weights needs the optional
``encoders`` extra (torch + transformers) and either network access to
the model hub or a local model directory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    input_size: int  # square resize applied before encoding
    channels: int
    grid: int  # spatial size of the output feature map

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.grid, self.grid)


ENCODER_SPECS = {
    "dinov2-large": EncoderSpec("dinov2-large", input_size=518, channels=1024, grid=37),
    "medsam": EncoderSpec("medsam", input_size=1024, channels=256, grid=64),
}

# torchvision/ImageNet statistics used by the DINOv2 release
_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
# SAM statistics, defined on [0, 255] pixel values
_SAM_MEAN = np.array([123.675, 116.28, 103.53], dtype=np.float32)
_SAM_STD = np.array([58.395, 57.12, 57.375], dtype=np.float32)


def _require_torch():
    try:
        import torch
    except ImportError as exc:  # pragma: no cover - environment-dependent
        raise RuntimeError(
            "running a real encoder needs the 'encoders' extra "
            "(pip install gve-exporter[encoders])"
        ) from exc
    return torch


class Dinov2LargeEncoder:
    """Final-layer patch tokens of DINOv2 ViT-L/14 (class token dropped)."""

    def __init__(self, model_id: str = "facebook/dinov2-large", device: str = "cpu"):
        torch = _require_torch()
        from transformers import AutoModel

        self.spec = ENCODER_SPECS["dinov2-large"]
        self.device = device
        self._torch = torch
        self._model = AutoModel.from_pretrained(model_id).to(device).eval()

    def features(self, batch: np.ndarray) -> np.ndarray:
        torch = self._torch
        spec = self.spec
        x = (batch.astype(np.float32) - _IMAGENET_MEAN[:, None, None]) / _IMAGENET_STD[
            :, None, None
        ]
        with torch.no_grad():
            out = self._model(pixel_values=torch.from_numpy(x).to(self.device))
        tokens = out.last_hidden_state[:, -spec.grid * spec.grid :, :]
        maps = tokens.reshape(-1, spec.grid, spec.grid, spec.channels)
        return maps.permute(0, 3, 1, 2).cpu().numpy().astype(np.float32)


class MedSamEncoder:
    """Image-encoder embedding of MedSAM (a SAM ViT-B fine-tuned variant)."""

    def __init__(self, model_id: str = "wanglab/medsam-vit-base", device: str = "cpu"):
        torch = _require_torch()
        from transformers import SamModel

        self.spec = ENCODER_SPECS["medsam"]
        self.device = device
        self._torch = torch
        self._model = SamModel.from_pretrained(model_id).to(device).eval()

    def features(self, batch: np.ndarray) -> np.ndarray:
        torch = self._torch
        x = (batch.astype(np.float32) * 255.0 - _SAM_MEAN[:, None, None]) / _SAM_STD[
            :, None, None
        ]
        with torch.no_grad():
            emb = self._model.get_image_embeddings(torch.from_numpy(x).to(self.device))
        return emb.cpu().numpy().astype(np.float32)


def load_encoder(name: str, device: str = "cpu", model_id: str | None = None):
    """Instantiate a registered encoder (downloads weights if needed)."""
    if name == "dinov2-large":
        return Dinov2LargeEncoder(model_id or "facebook/dinov2-large", device)
    if name == "medsam":
        return MedSamEncoder(model_id or "wanglab/medsam-vit-base", device)
    raise ValueError(f"unknown encoder {name!r}; choose from {sorted(ENCODER_SPECS)}")
