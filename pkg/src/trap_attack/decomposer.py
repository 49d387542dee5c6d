"""Siamese semantic decomposer: split an embedding into common and distinctive parts.

The common branch holds what is aligned with the conditioning prompt, the
distinctive branch what is orthogonal to it. Both live in a wider space of
width ``h``; ``pullback`` maps a branch back to the embedding space.

Analytic mode (the default) is an exact projection lifted by a fixed map with
orthonormal columns, so the two pullbacks always sum back to the input.
Learned mode runs two small MLP branches trained by ``train_decomposer``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .embedding import as_vector
from .errors import DimensionMismatchError, EmptyInputError, ZeroVectorError
from .weights_io import read_blocks, read_header, write_weights

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = 1024


@dataclass(frozen=True, eq=False)
class Decomposition:
    e_com: np.ndarray
    e_dist: np.ndarray

    def __post_init__(self):
        if self.e_com.shape != self.e_dist.shape:
            raise DimensionMismatchError("branches must have the same length")


def lift_matrix(d: int, h: int, seed: int) -> np.ndarray:
    """Seeded h x d matrix with orthonormal columns; its transpose is a left inverse."""
    if h < d:
        raise DimensionMismatchError(f"branch width h={h} must be >= d={d}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((h, d)))
    return q * np.sign(np.diag(r))


class _Branch(nn.Sequential):
    def __init__(self, d, h):
        super().__init__(nn.Linear(d, h), nn.BatchNorm1d(h), nn.ReLU(), nn.Linear(h, h))


class _LearnedNet(nn.Module):
    def __init__(self, d, h):
        super().__init__()
        self.common = _Branch(d, h)
        self.distinct = _Branch(d, h)
        self.pullback = nn.Linear(h, d, bias=False)


def _net_blocks(net: nn.Module) -> list[tuple[str, torch.Tensor]]:
    # parameters and normalisation statistics, in declaration order
    return [(k, v) for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")]


class DecomposerWeights:
    """Parameters of the decomposer in either ``analytic`` or ``learned`` mode."""

    def __init__(self, mode: str, d: int, h: int = DEFAULT_HIDDEN, seed: int = 0,
                 prompt=None, lift=None, net: _LearnedNet | None = None):
        if mode not in ("analytic", "learned"):
            raise ValueError(f"unknown decomposer mode {mode!r}")
        self.mode, self.d, self.h, self.seed = mode, d, h, seed
        if mode == "analytic":
            u = as_vector(prompt)
            if u.size != d:
                raise DimensionMismatchError(f"prompt has length {u.size}, expected {d}")
            n = np.linalg.norm(u)
            if n == 0:
                raise ZeroVectorError("conditioning prompt embedding is zero")
            self.direction = u / n
            self.lift = lift_matrix(d, h, seed) if lift is None else np.asarray(lift, dtype=np.float64)
            if self.lift.shape != (h, d):
                raise DimensionMismatchError("lift matrix shape does not match (h, d)")
            self.net = None
        else:
            if net is None:
                torch.manual_seed(seed)
                net = _LearnedNet(d, h).double()
            self.net = net.double().eval()
            self.direction = None
            self.lift = None

    @classmethod
    def analytic(cls, prompt, h: int = DEFAULT_HIDDEN, seed: int = 0) -> "DecomposerWeights":
        u = as_vector(prompt)
        return cls("analytic", u.size, h, seed, prompt=u)

    @classmethod
    def learned(cls, d: int, h: int = DEFAULT_HIDDEN, seed: int = 0) -> "DecomposerWeights":
        return cls("learned", d, h, seed)

    # -- forward -----------------------------------------------------------

    def _check(self, e) -> np.ndarray:
        v = as_vector(e)
        if v.size != self.d:
            raise DimensionMismatchError(f"embedding length {v.size} != decomposer d={self.d}")
        return v

    def decompose(self, e) -> Decomposition:
        v = self._check(e)
        if self.mode == "analytic":
            along = np.dot(v, self.direction) * self.direction
            return Decomposition(self.lift @ along, self.lift @ (v - along))
        with torch.no_grad():
            x = torch.from_numpy(v[None, :].copy())
            return Decomposition(self.net.common(x)[0].numpy().copy(), self.net.distinct(x)[0].numpy().copy())

    def pullback(self, branch) -> np.ndarray:
        b = np.asarray(branch, dtype=np.float64)
        if b.shape[-1] != self.h:
            raise DimensionMismatchError(f"branch length {b.shape[-1]} != h={self.h}")
        if self.mode == "analytic":
            return b @ self.lift
        with torch.no_grad():
            return self.net.pullback(torch.from_numpy(b)).numpy()

    def pullback_matrix(self) -> np.ndarray:
        """The d x h linear map used by ``pullback``."""
        if self.mode == "analytic":
            return self.lift.T
        return self.net.pullback.weight.detach().numpy().copy()

    # -- vector-Jacobian products -----------------------------------------

    def vjp(self, e, g_com=None, g_dist=None) -> np.ndarray:
        """Gradient wrt ``e`` of ``<g_com, e_com(e)> + <g_dist, e_dist(e)>``."""
        v = self._check(e)
        out = np.zeros(self.d)
        if self.mode == "analytic":
            u = self.direction
            if g_com is not None:
                back = self.lift.T @ g_com
                out += np.dot(u, back) * u
            if g_dist is not None:
                back = self.lift.T @ g_dist
                out += back - np.dot(u, back) * u
            return out
        x = torch.from_numpy(v[None, :].copy()).requires_grad_(True)
        total = 0
        if g_com is not None:
            total = total + (self.net.common(x)[0] * torch.from_numpy(np.asarray(g_com, dtype=np.float64))).sum()
        if g_dist is not None:
            total = total + (self.net.distinct(x)[0] * torch.from_numpy(np.asarray(g_dist, dtype=np.float64))).sum()
        if not torch.is_tensor(total):
            return out
        total.backward()
        return x.grad[0].numpy().copy()

    # -- persistence ------------------------------------------------------

    def _blocks(self):
        if self.mode == "analytic":
            return [self.direction, self.lift]
        return [t.detach().cpu().numpy() for _, t in _net_blocks(self.net)]

    def save(self, path):
        return write_weights(path, self.mode, self.d, self.h, self.seed, self._blocks())

    @classmethod
    def load(cls, path) -> "DecomposerWeights":
        mode, d, h, seed = read_header(path)
        if mode == "analytic":
            u, lift = read_blocks(path, [(d,), (h, d)])
            return cls("analytic", d, h, seed, prompt=u, lift=lift)
        if mode != "learned":
            raise ValueError(f"{path} holds {mode} weights, not a decomposer")
        net = _LearnedNet(d, h).double()
        names = _net_blocks(net)
        arrays = read_blocks(path, [tuple(t.shape) for _, t in names])
        state = net.state_dict()
        for (k, _), arr in zip(names, arrays):
            state[k] = torch.from_numpy(arr).to(state[k].dtype)
        net.load_state_dict(state)
        return cls("learned", d, h, seed, net=net)

    def copy(self) -> "DecomposerWeights":
        if self.mode == "analytic":
            return DecomposerWeights("analytic", self.d, self.h, self.seed, prompt=self.direction,
                                     lift=self.lift.copy())
        net = _LearnedNet(self.d, self.h).double()
        net.load_state_dict(self.net.state_dict())
        return DecomposerWeights("learned", self.d, self.h, self.seed, net=net)

    def parameters_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=np.float64).ravel() for b in self._blocks()])


def decompose(e, w: DecomposerWeights) -> Decomposition:
    return w.decompose(e)


# ---------------------------------------------------------------------------
# training (learned mode)
# ---------------------------------------------------------------------------


def _objective(net: _LearnedNet, img: torch.Tensor, txt: torch.Tensor) -> torch.Tensor:
    com = net.pullback(net.common(img))
    dist = net.pullback(net.distinct(img))
    align = nn.functional.cosine_similarity(com, txt, dim=1, eps=1e-12)
    leak = nn.functional.cosine_similarity(dist, txt, dim=1, eps=1e-12).abs()
    recon = ((com + dist - img) ** 2).sum(dim=1)
    return (-align + leak + recon).mean()


def _freeze_statistics(net: _LearnedNet, img: torch.Tensor):
    """Set normalisation running statistics to the exact corpus statistics."""
    bns = [m for m in net.modules() if isinstance(m, nn.BatchNorm1d)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 1.0
    net.train()
    with torch.no_grad():
        net.common(img)
        net.distinct(img)
    for m, mom in zip(bns, saved):
        m.momentum = mom


@dataclass
class TrainingResult:
    weights: DecomposerWeights
    losses: list[float] = field(default_factory=list)
    distinct_norms: list[float] = field(default_factory=list)


def train_decomposer(corpus, epochs: int, seed: int = 0, h: int = DEFAULT_HIDDEN,
                     learning_rate: float = 1e-4, init: DecomposerWeights | None = None) -> TrainingResult:
    """Full-batch Adam on the alignment / orthogonality / reconstruction objective.

    ``corpus`` is a sequence of (image embedding, prompt embedding) pairs.
    ``losses[k]`` is the objective before update ``k``, with one extra entry
    after the final update; ``distinct_norms`` tracks the mean pulled-back
    distinctive norm at the same points.
    """
    pairs = list(corpus)
    if not pairs:
        raise EmptyInputError("training corpus is empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    img = torch.from_numpy(np.stack([as_vector(a) for a, _ in pairs]))
    txt = torch.from_numpy(np.stack([as_vector(b) for _, b in pairs]))
    d = img.shape[1]
    weights = (init.copy() if init is not None else DecomposerWeights.learned(d, h, seed))
    if weights.mode != "learned" or weights.d != d:
        raise DimensionMismatchError("initial weights must be learned-mode with matching d")
    net = weights.net
    torch.manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    batch_stats = img.shape[0] > 1
    result = TrainingResult(weights)

    def measure():
        # the objective as optimised: batch statistics when the batch allows them
        net.train(batch_stats)
        with torch.no_grad():
            loss = _objective(net, img, txt).item()
            norm = net.pullback(net.distinct(img)).norm(dim=1).mean().item()
        result.losses.append(loss)
        result.distinct_norms.append(norm)

    for epoch in range(epochs):
        measure()
        if learning_rate == 0:
            continue
        net.train(batch_stats)
        opt.zero_grad()
        loss = _objective(net, img, txt)
        loss.backward()
        opt.step()
        log.debug("epoch %d loss %.6f", epoch, loss.item())
    measure()
    if batch_stats:
        _freeze_statistics(net, img)
    net.eval()
    return result
