"""Composite attack objective: perceptual, semantic and distinctive-feature terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .decomposer import Decomposition, DecomposerWeights
from .embedding import as_vector, check_image, cosine, cosine_grad
from .errors import BackendUnavailableError, DimensionMismatchError

_LOW = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
_BAND = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if not any(vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    lpips: float
    sem: float
    dist: float
    total: float
    gradient_wrt_e_adv: np.ndarray

    def record(self, step: int, **extra) -> dict:
        return {"step": step, "lpips": self.lpips, "sem": self.sem, "dist": self.dist,
                "total": self.total, **extra}


# ---------------------------------------------------------------------------
# perceptual backends
# ---------------------------------------------------------------------------


class FilteredMSE:
    """Toy perceptual distance: mean squared difference after a fixed filter bank.

    The bank is a [1 2 1] binomial low-pass and a 4-neighbour Laplacian band,
    applied per channel with zero padding. The low-pass operator is injective
    under zero padding, so the distance is zero only for identical images.
    """

    differentiable = True

    def _filters(self, d):
        low = ndimage.correlate(d, _LOW[:, :, None], mode="constant", cval=0.0)
        band = ndimage.correlate(d, _BAND[:, :, None], mode="constant", cval=0.0)
        return low, band

    def __call__(self, x1, x2) -> float:
        d = _paired(x1, x2)
        low, band = self._filters(d)
        return float((np.sum(low**2) + np.sum(band**2)) / d.size)

    def grad(self, x1, x2) -> np.ndarray:
        """Gradient with respect to ``x1``; both kernels are symmetric so they are self-adjoint."""
        d = _paired(x1, x2)
        low, band = self._filters(d)
        back_low, _ = self._filters(low)
        _, back_band = self._filters(band)
        return 2.0 * (back_low + back_band) / d.size


class ReferenceLPIPS:
    """The learned LPIPS metric (AlexNet trunk) from the ``lpips`` package."""

    differentiable = False

    def __init__(self, net: str = "alex", device: str = "cpu"):
        self.net, self.device = net, device
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                import lpips

                self._model = lpips.LPIPS(net=self.net, verbose=False).to(self.device).eval()
            except Exception as exc:
                raise BackendUnavailableError(f"LPIPS backend unavailable: {exc}") from exc

    def __call__(self, x1, x2) -> float:
        import torch

        _paired(x1, x2)
        self._load()

        def prep(x):
            t = torch.from_numpy(np.asarray(x, dtype=np.float32)).permute(2, 0, 1)[None]
            return (t * 2 - 1).to(self.device)

        a, b = prep(x1), prep(x2)
        with torch.no_grad():
            # averaged over both orders: the network is not exactly symmetric in float arithmetic
            v = 0.5 * (float(self._model(a, b).item()) + float(self._model(b, a).item()))
        return max(v, 0.0)


def make_perceptual(backend: str | None):
    if backend == "toy":
        return FilteredMSE()
    if backend == "reference":
        return ReferenceLPIPS()
    raise BackendUnavailableError(f"no perceptual backend configured (got {backend!r})")


def _paired(x1, x2) -> np.ndarray:
    a, b = check_image(x1), check_image(x2)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a - b


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def lpips_loss(x1, x2, perceptual=None) -> float:
    if perceptual is None:
        raise BackendUnavailableError("no perceptual backend configured")
    return perceptual(x1, x2)


def semantic_loss(e_adv, e_text) -> float:
    return 1.0 - cosine(e_adv, e_text)


def semantic_grad(e_adv, e_text) -> np.ndarray:
    return -cosine_grad(e_adv, e_text)


def dist_loss(dec_adv: Decomposition, dec_target: Decomposition) -> float:
    a, b = dec_adv.e_dist, dec_target.e_dist
    if a.shape != b.shape:
        raise DimensionMismatchError("distinctive branches differ in length")
    diff = a - b
    return float(np.dot(diff, diff))


def dist_grad(e_adv, dec_adv: Decomposition, dec_target: Decomposition,
              decomposer: DecomposerWeights) -> np.ndarray:
    return decomposer.vjp(e_adv, g_dist=2.0 * (dec_adv.e_dist - dec_target.e_dist))


def total_loss(e_adv, e_text, x_cand, x_target, dec_adv: Decomposition, dec_target: Decomposition,
               w: LossWeights, perceptual=None, decomposer: DecomposerWeights | None = None,
               candidate_vjp=None) -> LossBreakdown:
    """Weighted sum of the three terms and its gradient with respect to ``e_adv``.

    ``candidate_vjp`` maps an image-space gradient at ``x_cand`` back to
    ``e_adv``; without it (or with a non-differentiable perceptual backend) the
    perceptual term contributes to the value only. The distinctive term needs
    ``decomposer`` for its gradient.
    """
    e = as_vector(e_adv)
    lp = lpips_loss(x_cand, x_target, perceptual) if w.lambda1 > 0 or perceptual is not None else 0.0
    sem = semantic_loss(e, e_text)
    dist = dist_loss(dec_adv, dec_target)
    total = w.lambda1 * lp + w.lambda2 * sem + w.lambda3 * dist

    grad = w.lambda2 * semantic_grad(e, e_text)
    if w.lambda3 > 0 and decomposer is not None:
        grad = grad + w.lambda3 * dist_grad(e, dec_adv, dec_target, decomposer)
    if w.lambda1 > 0 and candidate_vjp is not None and getattr(perceptual, "differentiable", False):
        grad = grad + w.lambda1 * candidate_vjp(perceptual.grad(x_cand, x_target))
    return LossBreakdown(lp, sem, dist, total, grad)
