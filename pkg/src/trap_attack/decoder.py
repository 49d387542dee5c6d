"""Decoding a modulated embedding back into an image.

``ToyDecoder`` computes ``clamp(x_init + strength * G(e_mod), 0, 1)`` where
``G`` is linear: an optional input map to the embedding width, the right
inverse of the toy embedder's weights, and the minimum-norm upsampling to the
image grid. The decoded image therefore moves the toy embedding by roughly
``strength * e_mod`` and the whole map is differentiable in ``e_mod``.

``StableDiffusionDecoder`` injects the embedding, repeated over the prompt
tokens, into an image-to-image diffusion pipeline.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .embedding import ToyEmbedder, area_matrix, as_vector, check_image
from .errors import BackendUnavailableError, DimensionMismatchError, InvalidSettingsError


@dataclass(frozen=True)
class DecoderSettings:
    strength: float = 0.5
    cfg: float = 7.5
    seed: int = 0
    steps: int = 30

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise InvalidSettingsError(f"strength {self.strength} outside [0, 1]")
        if not self.cfg > 0:
            raise InvalidSettingsError(f"cfg must be positive, got {self.cfg}")
        if self.steps < 1:
            raise InvalidSettingsError("steps must be >= 1")

    def to_dict(self):
        return {"strength": self.strength, "cfg": self.cfg, "seed": self.seed, "steps": self.steps}


@dataclass(frozen=True, eq=False)
class PromptEmbeddingSequence:
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("a prompt sequence needs at least one token row")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("prompt sequence rows must be finite")

    @property
    def token_count(self) -> int:
        return self.data.shape[0]

    @property
    def token_dim(self) -> int:
        return self.data.shape[1]


def projection_matrix(d: int, token_dim: int, seed: int = 0) -> np.ndarray:
    """Fixed seeded linear map from width ``d`` to ``token_dim`` (token_dim x d)."""
    rng = np.random.default_rng((seed, d, token_dim))
    return rng.standard_normal((token_dim, d)) / np.sqrt(d)


def pad_projection(d: int, token_dim: int) -> np.ndarray:
    """Identity-extended projection: copy the first coordinates, zero the rest."""
    return np.eye(token_dim, d)


def project_embedding(e_mod, token_count: int = 77, token_dim: int | None = None,
                      projection=None, seed: int = 0) -> PromptEmbeddingSequence:
    v = as_vector(e_mod)
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding must be finite")
    token_dim = v.size if token_dim is None else token_dim
    if v.size == token_dim and projection is None:
        row = v
    else:
        p = projection_matrix(v.size, token_dim, seed) if projection is None else np.asarray(projection)
        if p.shape != (token_dim, v.size):
            raise DimensionMismatchError(f"projection shape {p.shape} != ({token_dim}, {v.size})")
        row = p @ v
    return PromptEmbeddingSequence(np.tile(row, (token_count, 1)))


class ToyDecoder:
    """Deterministic, differentiable stand-in for the diffusion decoder.

    Embeddings as wide as the toy embedder go straight to its right inverse;
    wider ones (decomposer branch space) pass through ``input_map`` first.
    ``cfg``, ``steps`` and ``e_text`` do not affect the output.
    """

    differentiable = True

    def __init__(self, embedder: ToyEmbedder, input_map: np.ndarray | None = None):
        self.embedder = embedder
        self.input_map = None if input_map is None else np.asarray(input_map, dtype=np.float64)
        if self.input_map is not None and self.input_map.shape[0] != embedder.dim:
            raise DimensionMismatchError("input map must produce embedder-width vectors")
        self._plans: dict[int, np.ndarray] = {}
        self._upsamplers: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _feature_map(self, width: int) -> np.ndarray:
        if width not in self._plans:
            pinv = self.embedder.feature_pinv()
            if self.input_map is not None and width == self.input_map.shape[1]:
                self._plans[width] = pinv @ self.input_map
            elif width == self.embedder.dim:
                self._plans[width] = pinv
            else:
                raise DimensionMismatchError(f"toy decoder cannot read an embedding of width {width}")
        return self._plans[width]

    def _upsampler(self, height: int, width: int):
        key = (height, width)
        if key not in self._upsamplers:
            g = self.embedder.grid
            self._upsamplers[key] = (np.linalg.pinv(area_matrix(height, g)),
                                     np.linalg.pinv(area_matrix(width, g)))
        return self._upsamplers[key]

    def generate(self, e_mod, height: int, width: int) -> np.ndarray:
        """The unclamped image-space offset G(e_mod), shape (H, W, 3)."""
        v = as_vector(e_mod)
        q = (self._feature_map(v.size) @ v).reshape(self.embedder.grid, self.embedder.grid)
        ry, rx = self._upsampler(height, width)
        plane = ry @ q @ rx.T
        return np.repeat(plane[:, :, None], 3, axis=2)

    def _pre_clamp(self, e_mod, x_init, s: DecoderSettings):
        x0 = check_image(x_init)
        return x0 + s.strength * self.generate(e_mod, x0.shape[0], x0.shape[1])

    def decode(self, e_mod, e_text, x_init, s: DecoderSettings) -> np.ndarray:
        if s.strength == 0.0:
            return check_image(x_init).copy()
        return np.clip(self._pre_clamp(e_mod, x_init, s), 0.0, 1.0)

    def vjp(self, e_mod, x_init, s: DecoderSettings, g_image: np.ndarray) -> np.ndarray:
        """Pull an image-space gradient at the decoded image back to ``e_mod``.

        Pixels pinned by the clamp pass no gradient.
        """
        v = as_vector(e_mod)
        if s.strength == 0.0:
            return np.zeros(v.size)
        pre = self._pre_clamp(v, x_init, s)
        g = np.where((pre > 0.0) & (pre < 1.0), g_image, 0.0).sum(axis=2)
        ry, rx = self._upsampler(pre.shape[0], pre.shape[1])
        gq = (ry.T @ g @ rx).reshape(-1)
        return s.strength * (self._feature_map(v.size).T @ gq)


class StableDiffusionDecoder:
    """Image-to-image Stable Diffusion with the embedding injected as prompt tokens."""

    differentiable = False

    def __init__(self, model_name: str = "stabilityai/stable-diffusion-2-1-base", device: str = "cpu",
                 token_count: int = 77, parallelism: int = 1, projection_seed: int = 0):
        self.model_name, self.device = model_name, device
        self.token_count = token_count
        self.projection_seed = projection_seed
        self._pipe = None
        self._permits = threading.Semaphore(parallelism)

    def _load(self):
        if self._pipe is None:
            try:
                from diffusers import StableDiffusionImg2ImgPipeline

                self._pipe = StableDiffusionImg2ImgPipeline.from_pretrained(self.model_name).to(self.device)
            except Exception as exc:
                raise BackendUnavailableError(f"cannot load {self.model_name}: {exc}") from exc

    def decode(self, e_mod, e_text, x_init, s: DecoderSettings) -> np.ndarray:
        import torch
        from PIL import Image

        from .embedding import to_uint8

        x0 = check_image(x_init)
        with self._permits:
            self._load()
            token_dim = self._pipe.text_encoder.config.hidden_size
            seq = project_embedding(e_mod, self.token_count, token_dim, seed=self.projection_seed)
            embeds = torch.from_numpy(seq.data[None].astype(np.float32)).to(self.device)
            gen = torch.Generator(device=self.device).manual_seed(s.seed)
            out = self._pipe(
                prompt_embeds=embeds,
                image=Image.fromarray(to_uint8(x0)),
                strength=s.strength,
                guidance_scale=s.cfg,
                num_inference_steps=s.steps,
                generator=gen,
                output_type="np",
            ).images[0]
        out = np.asarray(out, dtype=np.float64)
        if out.shape[:2] != x0.shape[:2]:
            from .layout import resize_bilinear

            out = np.stack([resize_bilinear(out[:, :, c], *x0.shape[:2]) for c in range(3)], axis=2)
        return np.clip(out, 0.0, 1.0)
