"""Assembly of the backends an attack needs: embedder, decomposer, layout, decoder, metric."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import StableDiffusionDecoder, ToyDecoder
from .decomposer import DEFAULT_HIDDEN, DecomposerWeights, lift_matrix
from .embedding import Embedder, ToyEmbedder, as_vector, make_embedder
from .errors import BackendUnavailableError
from .layout import (
    DEFAULT_IN_WIDTH,
    BoxSegmenter,
    LayoutMask,
    LayoutWeights,
    generate_mask,
    make_segmenter,
    refine_with_segmentation,
)
from .losses import make_perceptual


@dataclass
class Stack:
    embedder: Embedder
    decoder: object
    perceptual: object
    layout: LayoutWeights
    segmenter: object
    decomposer_mode: str = "analytic"
    hidden: int = DEFAULT_HIDDEN
    decomposer_seed: int = 0
    learned_decomposer: DecomposerWeights | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def decomposer_for(self, e_text) -> DecomposerWeights:
        """Analytic decomposer conditioned on ``e_text``, or the fixed learned weights."""
        if self.decomposer_mode == "learned":
            if self.learned_decomposer is None:
                raise BackendUnavailableError("learned decomposer mode needs a weights file")
            return self.learned_decomposer
        u = as_vector(e_text)
        key = ("dec", u.tobytes())
        if key not in self._cache:
            lift = self._lift(u.size)
            self._cache[key] = DecomposerWeights("analytic", u.size, self.hidden, self.decomposer_seed,
                                                 prompt=u, lift=lift)
        return self._cache[key]

    def _lift(self, d: int) -> np.ndarray:
        key = ("lift", d)
        if key not in self._cache:
            self._cache[key] = lift_matrix(d, self.hidden, self.decomposer_seed)
        return self._cache[key]

    def layout_mask(self, e_text, e_target, image) -> LayoutMask:
        h, w = np.asarray(image).shape[:2]
        A = generate_mask(e_text, e_target, self.layout, h, w)
        return refine_with_segmentation(A, self.segmenter(image))


def build_stack(backend: str = "toy", *, embedder_seed: int = 0, embed_dim: int | None = None,
                hidden: int = DEFAULT_HIDDEN, decomposer_seed: int = 0, decomposer_mode: str = "analytic",
                decomposer_weights: str | None = None, layout_seed: int = 0,
                layout_in_width: int = DEFAULT_IN_WIDTH, layout_weights: str | None = None,
                box_fraction: float = 0.75, decoder_parallelism: int = 1, device: str = "cpu") -> Stack:
    """Build a full toy or reference stack from flat settings."""
    learned = DecomposerWeights.load(decomposer_weights) if decomposer_weights else None
    layout = LayoutWeights.load(layout_weights) if layout_weights else LayoutWeights(layout_in_width, layout_seed)
    if backend == "toy":
        kwargs = {"seed": embedder_seed}
        if embed_dim:
            kwargs["dim"] = embed_dim
        embedder = ToyEmbedder(**kwargs)
        input_map = (learned.pullback_matrix() if decomposer_mode == "learned" and learned is not None
                     else lift_matrix(embedder.dim, hidden, decomposer_seed).T)
        decoder = ToyDecoder(embedder, input_map=input_map)
        segmenter = BoxSegmenter(box_fraction)
        perceptual = make_perceptual("toy")
    elif backend == "reference":
        embedder = make_embedder("reference", device=device)
        decoder = StableDiffusionDecoder(device=device, parallelism=decoder_parallelism)
        segmenter = make_segmenter("reference", device=device)
        perceptual = make_perceptual("reference")
    else:
        raise BackendUnavailableError(f"unknown backend {backend!r}")
    return Stack(embedder, decoder, perceptual, layout, segmenter, decomposer_mode, hidden,
                 decomposer_seed, learned)
