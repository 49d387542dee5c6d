"""Layout generator: spatial attention mask from a text and an image embedding.

Encoder: affine ``in_width -> 512 -> 1024`` with ReLU, reshaped to (256, 2, 2).
Decoder: five stride-2 transposed convolutions (2 -> 64 pixels) with ReLU
between stages and a final sigmoid. The raw 64x64 map is bilinearly resized to
the working image resolution, then optionally multiplied by a foreground mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .embedding import as_vector, save_png
from .errors import BackendUnavailableError, DimensionMismatchError
from .weights_io import read_blocks, read_header, write_weights

DEFAULT_IN_WIDTH = 1536
RAW_SIZE = 64
_CHANNELS = (256, 128, 64, 32, 16, 1)


class _LayoutNet(nn.Module):
    def __init__(self, in_width: int):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Linear(in_width, 512), nn.ReLU(), nn.Linear(512, 1024), nn.ReLU()
        )
        stages = []
        for i, (c_in, c_out) in enumerate(zip(_CHANNELS[:-1], _CHANNELS[1:])):
            stages.append(nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=1))
            stages.append(nn.ReLU() if i < len(_CHANNELS) - 2 else nn.Sigmoid())
        self.decoder = nn.Sequential(*stages)

    def forward(self, x):
        z = self.encoder(x).view(-1, 256, 2, 2)
        return self.decoder(z)


class LayoutWeights:
    """Seeded layout-generator parameters plus the text expander they pair with."""

    def __init__(self, in_width: int = DEFAULT_IN_WIDTH, seed: int = 0, net: _LayoutNet | None = None):
        self.in_width, self.seed = in_width, seed
        if net is None:
            torch.manual_seed(seed)
            net = _LayoutNet(in_width)
        self.net = net.double().eval()
        self._expanders: dict[tuple[int, int], np.ndarray] = {}

    @classmethod
    def zeros(cls, in_width: int = DEFAULT_IN_WIDTH) -> "LayoutWeights":
        w = cls(in_width)
        with torch.no_grad():
            for p in w.net.parameters():
                p.zero_()
        return w

    def expander(self, n_in: int, n_out: int) -> np.ndarray:
        """Fixed seeded linear map widening the text embedding to fill ``in_width``."""
        key = (n_in, n_out)
        if key not in self._expanders:
            rng = np.random.default_rng((self.seed, n_in, n_out))
            m = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
            m[:n_in] = np.eye(n_in)[: min(n_in, n_out)]
            self._expanders[key] = m
        return self._expanders[key]

    def layout_input(self, e_text, e_target) -> np.ndarray:
        t, v = as_vector(e_text), as_vector(e_target)
        total = t.size + v.size
        if total > self.in_width:
            raise DimensionMismatchError(
                f"concatenated input has width {total}, weights expect {self.in_width}"
            )
        if total < self.in_width:
            t = self.expander(t.size, self.in_width - v.size) @ t
        return np.concatenate([t, v])

    def raw(self, e_text, e_target) -> np.ndarray:
        x = torch.from_numpy(self.layout_input(e_text, e_target)[None, :])
        with torch.no_grad():
            return self.net(x)[0, 0].numpy().copy()

    def _named_blocks(self):
        return list(self.net.state_dict().items())

    def save(self, path):
        blocks = [t.detach().numpy() for _, t in self._named_blocks()]
        return write_weights(path, "layout", self.in_width, RAW_SIZE, self.seed, blocks)

    @classmethod
    def load(cls, path) -> "LayoutWeights":
        mode, in_width, _, seed = read_header(path)
        if mode != "layout":
            raise ValueError(f"{path} holds {mode} weights, not a layout generator")
        w = cls(in_width, seed)
        names = w._named_blocks()
        arrays = read_blocks(path, [tuple(t.shape) for _, t in names])
        w.net.load_state_dict({k: torch.from_numpy(a) for (k, _), a in zip(names, arrays)})
        return w


@dataclass(frozen=True, eq=False)
class LayoutMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or min(v.shape) < 1:
            raise DimensionMismatchError("a mask is a non-empty H x W array")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def save_png(self, path):
        return save_png(self.values, path)


def resize_bilinear(raw: np.ndarray, height: int, width: int) -> np.ndarray:
    if raw.shape == (height, width):
        return raw.copy()
    t = torch.from_numpy(np.ascontiguousarray(raw))[None, None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def generate_mask(e_text, e_target, w: LayoutWeights, height: int = RAW_SIZE,
                  width: int = RAW_SIZE) -> LayoutMask:
    raw = w.raw(e_text, e_target)
    return LayoutMask(np.clip(resize_bilinear(raw, height, width), 0.0, 1.0))


def refine_with_segmentation(A: LayoutMask, fg: LayoutMask) -> LayoutMask:
    if A.shape != fg.shape:
        raise DimensionMismatchError(f"mask shapes differ: {A.shape} vs {fg.shape}")
    return LayoutMask(A.values * fg.values)


def mask_mean(A: LayoutMask) -> float:
    return float(np.mean(A.values))


# ---------------------------------------------------------------------------
# segmentation backends
# ---------------------------------------------------------------------------


class BoxSegmenter:
    """Toy foreground: a centred box covering ``fraction`` of each side."""

    def __init__(self, fraction: float = 0.75):
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        self.fraction = fraction

    def __call__(self, image) -> LayoutMask:
        h, w = np.asarray(image).shape[:2]
        mask = np.zeros((h, w))
        bh, bw = max(1, round(h * self.fraction)), max(1, round(w * self.fraction))
        top, left = (h - bh) // 2, (w - bw) // 2
        mask[top : top + bh, left : left + bw] = 1.0
        return LayoutMask(mask)


class DeepLabSegmenter:
    """Foreground probability (1 - P(background)) from torchvision's DeepLabv3."""

    def __init__(self, device: str = "cpu"):
        self.device = device
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                from torchvision.models.segmentation import DeepLabV3_ResNet50_Weights, deeplabv3_resnet50

                self._weights = DeepLabV3_ResNet50_Weights.DEFAULT
                self._model = deeplabv3_resnet50(weights=self._weights).to(self.device).eval()
            except Exception as exc:
                raise BackendUnavailableError(f"cannot load DeepLabv3: {exc}") from exc

    def __call__(self, image) -> LayoutMask:
        self._load()
        x = torch.from_numpy(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)
        x = self._weights.transforms()(x)[None].to(self.device)
        with torch.no_grad():
            probs = self._model(x)["out"].softmax(dim=1)[0, 0]
        fg = 1.0 - probs.double().cpu().numpy()
        h, w = np.asarray(image).shape[:2]
        return LayoutMask(np.clip(resize_bilinear(fg, h, w), 0.0, 1.0))


def make_segmenter(backend: str, **kwargs):
    if backend == "toy":
        return BoxSegmenter(**kwargs)
    if backend == "reference":
        return DeepLabSegmenter(**kwargs)
    raise BackendUnavailableError(f"unknown segmentation backend {backend!r}")
