"""Joint image-text embedding space: vectors, images, and embedder backends.

Two backends share one interface. ``ToyEmbedder`` is a fixed seeded linear map
from 32x32 grayscale-downsampled pixels to a small vector plus a hash-seeded
text embedder; it needs no weights and is what the tests run against.
``ReferenceEmbedder`` wraps a pretrained CLIP model and is loaded lazily.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatchError,
    EmbedderUnavailableError,
    EmptyInputError,
    ZeroVectorError,
)

REFERENCE_DIM = 512
TOY_DIM = 64
TOY_GRID = 32


@dataclass(frozen=True, eq=False)
class Embedding:
    """A finite real vector tagged with the id of the embedder that produced it."""

    values: np.ndarray
    space_id: str = "anonymous"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise EmptyInputError("embedding must have at least one entry")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.space_id == other.space_id and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.space_id, self.values.tobytes()))

    def with_values(self, values) -> "Embedding":
        return Embedding(values, self.space_id)

    def to_bytes(self) -> bytes:
        return embedding_to_bytes(self)


def as_vector(e) -> np.ndarray:
    """Float64 view of an Embedding or array-like."""
    if isinstance(e, Embedding):
        return e.values
    return np.asarray(e, dtype=np.float64).reshape(-1)


def cosine(a, b) -> float:
    """Cosine similarity, computed in float64 and clipped to [-1, 1]."""
    va, vb = as_vector(a), as_vector(b)
    if va.shape != vb.shape:
        raise DimensionMismatchError(f"length mismatch: {va.size} vs {vb.size}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine is undefined for a zero vector")
    return float(np.clip(np.dot(va / na, vb / nb), -1.0, 1.0))


def cosine_grad(a, b) -> np.ndarray:
    """Gradient of cosine(a, b) with respect to ``a``."""
    va, vb = as_vector(a), as_vector(b)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine is undefined for a zero vector")
    c = np.dot(va, vb) / (na * nb)
    return vb / (na * nb) - c * va / na**2


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def check_image(x) -> np.ndarray:
    """Validate an H x W x 3 image with values in [0, 1]; returns a float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatchError(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatchError("image height and width must be >= 1")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def to_uint8(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(x, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(x)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")
    return path


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def png_bytes(x) -> bytes:
    buf = io.BytesIO()
    arr = to_uint8(x)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


@lru_cache(maxsize=64)
def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear area-averaging resampler along one axis, shape (n_out, n_in).

    Each output cell averages the input span it covers, with fractional
    weights at the span edges. Rows sum to one.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j = int(np.floor(lo))
        while j < n_in and j < hi:
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] += overlap
            j += 1
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


# --------------------------------------------------------------------------
# embedding records
# --------------------------------------------------------------------------

_RECORD_HEADER = struct.Struct("<I12s")


def _space_hash(space_id: str) -> bytes:
    return hashlib.sha256(space_id.encode("utf-8")).digest()[:12]


def embedding_to_bytes(e: Embedding) -> bytes:
    """16-byte header (uint32 d, 96-bit space-id hash) then d little-endian float32."""
    header = _RECORD_HEADER.pack(len(e), _space_hash(e.space_id))
    return header + e.values.astype("<f4").tobytes()


def embedding_from_bytes(data: bytes, space_id: str | None = None) -> Embedding:
    if len(data) < _RECORD_HEADER.size:
        raise ValueError("record shorter than its header")
    d, digest = _RECORD_HEADER.unpack_from(data)
    body = data[_RECORD_HEADER.size :]
    if len(body) != 4 * d:
        raise DimensionMismatchError(f"header declares d={d} but body holds {len(body) // 4} floats")
    if space_id is None:
        space_id = "hash:" + digest.hex()
    elif _space_hash(space_id) != digest:
        raise ValueError(f"record was not produced in space {space_id!r}")
    return Embedding(np.frombuffer(body, dtype="<f4").astype(np.float64), space_id)


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------


class Embedder:
    """Common front door: validates inputs and the backend's output width."""

    dim: int
    space_id: str

    def embed_image(self, image) -> Embedding:
        x = check_image(image)
        out = np.asarray(self._embed_image(x), dtype=np.float64).reshape(-1)
        if out.size != self.dim:
            raise DimensionMismatchError(f"backend produced {out.size} values, declared d={self.dim}")
        return Embedding(out, self.space_id)

    def embed_text(self, text: str) -> Embedding:
        if not isinstance(text, str) or not text.strip():
            raise EmptyInputError("text must be a non-empty string")
        out = np.asarray(self._embed_text(text), dtype=np.float64).reshape(-1)
        if out.size != self.dim:
            raise DimensionMismatchError(f"backend produced {out.size} values, declared d={self.dim}")
        return Embedding(out, self.space_id)

    def _embed_image(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError


def text_seed(text: str, seed: int = 0) -> int:
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(eq=False)
class ToyEmbedder(Embedder):
    """Seeded linear embedder: ``e = W @ gray32(x) + b``.

    ``gray32`` area-resamples each channel to 32x32 and averages the channels.
    Text maps to a unit vector drawn from a generator seeded by a hash of the
    string, so the same text always lands on the same direction.
    """

    dim: int = TOY_DIM
    seed: int = 0
    weight_scale: float = 0.02
    bias_scale: float = 0.02
    grid: int = TOY_GRID
    weights: np.ndarray = field(init=False, repr=False)
    bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        n_pix = self.grid * self.grid
        w = rng.standard_normal((self.dim, n_pix)) * self.weight_scale
        # mid-gray maps near the origin, so the bias also carries a centring term
        b = rng.standard_normal(self.dim) * self.bias_scale - 0.5 * w.sum(axis=1)
        w.setflags(write=False)
        b.setflags(write=False)
        self.weights, self.bias = w, b
        self._pinv = None

    @property
    def space_id(self) -> str:
        return f"toy-linear-d{self.dim}-s{self.seed}"

    def features(self, x: np.ndarray) -> np.ndarray:
        ry = area_matrix(x.shape[0], self.grid)
        rx = area_matrix(x.shape[1], self.grid)
        gray = x.mean(axis=2)
        return (ry @ gray @ rx.T).reshape(-1)

    def _embed_image(self, x):
        return self.weights @ self.features(x) + self.bias

    def _embed_text(self, text):
        rng = np.random.default_rng(text_seed(text, self.seed))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def feature_pinv(self) -> np.ndarray:
        """Right inverse of the weight matrix, shape (grid*grid, dim)."""
        if self._pinv is None:
            p = np.linalg.pinv(self.weights)
            p.setflags(write=False)
            self._pinv = p
        return self._pinv

    def image_from_features(self, q: np.ndarray, height: int, width: int) -> np.ndarray:
        """Minimum-norm image (unclamped, 3 equal channels) whose ``features`` equal ``q``."""
        ry = np.linalg.pinv(area_matrix(height, self.grid))
        rx = np.linalg.pinv(area_matrix(width, self.grid))
        plane = ry @ np.asarray(q).reshape(self.grid, self.grid) @ rx.T
        return np.repeat(plane[:, :, None], 3, axis=2)


class ReferenceEmbedder(Embedder):
    """Pretrained CLIP ViT-B/32 through ``transformers``; weights load on first use."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu",
                 local_files_only: bool = False):
        self.model_name = model_name
        self.device = device
        self.local_files_only = local_files_only
        self.dim = REFERENCE_DIM
        self.space_id = f"clip:{model_name}"
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is not None:
            return
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor

            self._model = CLIPModel.from_pretrained(
                self.model_name, local_files_only=self.local_files_only
            ).to(self.device).eval()
            self._processor = CLIPProcessor.from_pretrained(
                self.model_name, local_files_only=self.local_files_only
            )
        except Exception as exc:  # missing package, weights or network
            raise EmbedderUnavailableError(f"cannot load {self.model_name}: {exc}") from exc

    def _embed_image(self, x):
        import torch

        self._load()
        inputs = self._processor(images=Image.fromarray(to_uint8(x)), return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self._model.get_image_features(**inputs)
        return out[0].double().cpu().numpy()

    def _embed_text(self, text):
        import torch

        self._load()
        inputs = self._processor(text=[text], return_tensors="pt", padding=True).to(self.device)
        with torch.no_grad():
            out = self._model.get_text_features(**inputs)
        return out[0].double().cpu().numpy()


def make_embedder(backend: str | None, **kwargs) -> Embedder:
    if backend == "toy":
        return ToyEmbedder(**kwargs)
    if backend == "reference":
        return ReferenceEmbedder(**kwargs)
    raise EmbedderUnavailableError(f"no embedder backend configured (got {backend!r})")
