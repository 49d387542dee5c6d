"""Comparison attacks: SPSA, bandit with gradient priors, and a single unoptimised decode.

SPSA and the bandit attack are zeroth-order: they only query a scoring oracle
and keep the image inside an L-infinity ball around the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderSettings
from .embedding import check_image, cosine
from .errors import OracleError
from .harness import hash_seed, instruction_for, run_trials, selection_task
from .stack import Stack


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float = 8 / 255
    query_budget: int = 2000
    step_size: float = 1 / 255
    spsa_c: float = 0.01
    samples_per_step: int = 8
    update: str = "sign"
    # bandit-specific
    exploration: float = 1.0
    fd_eta: float = 0.1
    prior_lr: float = 100.0
    tile_size: int = 4

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.query_budget < 0:
            raise ValueError("query budget must be non-negative")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")
        if self.update not in ("sign", "gradient"):
            raise ValueError("update must be 'sign' or 'gradient'")


class CountingOracle:
    """Wraps a scoring callable and counts every query made through it."""

    def __init__(self, fn, mode: str = "surrogate"):
        self.fn, self.mode = fn, mode
        self.queries = 0

    def __call__(self, x) -> float:
        self.queries += 1
        try:
            value = float(self.fn(x))
        except Exception as exc:
            raise OracleError(f"oracle failed on query {self.queries}: {exc}") from exc
        if not np.isfinite(value):
            raise OracleError(f"oracle returned {value} on query {self.queries}")
        return value


def surrogate_oracle(embedder, prompt: str) -> CountingOracle:
    """Cosine similarity between the image embedding and the prompt embedding."""
    target = embedder.embed_text(prompt).values
    return CountingOracle(lambda x: cosine(embedder.embed_image(x), target), "surrogate")


def agent_frequency_oracle(agent, competitors, prompt: str, n: int, trials: int, seed: int = 0,
                           height: int = 512) -> CountingOracle:
    """Empirical selection frequency over ``trials`` agent trials per query."""
    instruction = instruction_for(selection_task(prompt), n)
    calls = [0]

    def score(x):
        calls[0] += 1
        return run_trials(x, competitors, agent, trials, n, seed=hash_seed(seed, calls[0]),
                          instruction=instruction, height=height).p_adv

    return CountingOracle(score, "agent-frequency")


def _project(x, x_target, eps):
    return np.clip(np.clip(x, x_target - eps, x_target + eps), 0.0, 1.0)


def _as_counting(oracle) -> CountingOracle:
    return oracle if isinstance(oracle, CountingOracle) else CountingOracle(oracle)


def spsa_gradient(f, x, c: float, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``samples`` two-sided Rademacher estimates of the gradient of ``f`` at ``x``."""
    g = np.zeros_like(x)
    for _ in range(samples):
        delta = rng.integers(0, 2, size=x.shape) * 2.0 - 1.0
        up = f(np.clip(x + c * delta, 0.0, 1.0))
        down = f(np.clip(x - c * delta, 0.0, 1.0))
        g += (up - down) / (2 * c) * delta
    return g / samples


def spsa_attack(x_target, oracle, b: PerturbationBudget, seed: int = 0, trace: list | None = None) -> np.ndarray:
    """Ascend the oracle score with two-sided SPSA gradient estimates.

    Each step averages ``samples_per_step`` Rademacher estimates
    ``(f(x + c d) - f(x - c d)) / (2c) * d`` and moves by ``step_size`` times
    either the estimate or its sign, then projects back into the epsilon ball.
    Probe points are clipped to the valid pixel range before querying.
    """
    x0 = check_image(x_target)
    f = _as_counting(oracle)
    rng = np.random.default_rng(seed)
    x = x0.copy()
    per_step = 2 * b.samples_per_step
    step = 0
    while f.queries + per_step <= b.query_budget:
        g = spsa_gradient(f, x, b.spsa_c, b.samples_per_step, rng)
        move = np.sign(g) if b.update == "sign" else g
        x = _project(x + b.step_size * move, x0, b.epsilon)
        step += 1
        if trace is not None:
            trace.append({"kind": "spsa", "step": step, "queries": f.queries})
    return x


def _upsample(prior, shape, tile):
    up = np.repeat(np.repeat(prior, tile, axis=0), tile, axis=1)
    return up[: shape[0], : shape[1]]


_EG_FLOOR = 1e-3


def _eg_step(v, g, lr):
    """Exponentiated-gradient update keeping the prior inside (-1, 1)."""
    real = np.clip((v + 1.0) / 2.0, _EG_FLOOR, 1.0 - _EG_FLOOR)
    pos = real * np.exp(np.clip(lr * g, -50, 50))
    neg = (1.0 - real) * np.exp(np.clip(-lr * g, -50, 50))
    bound = 1.0 - 2 * _EG_FLOOR
    return np.clip(2.0 * pos / (pos + neg) - 1.0, -bound, bound)


def bandit_attack(x_target, oracle, b: PerturbationBudget, seed: int = 0, trace: list | None = None) -> np.ndarray:
    """L-infinity bandit attack with a time-dependent, tiled gradient prior.

    Two queries per step probe the prior perturbed by ``+/- exploration * u``;
    their difference is a directional derivative that updates the prior by an
    exponentiated-gradient step. The image then moves by ``step_size`` along
    the sign of the upsampled prior.
    """
    x0 = check_image(x_target)
    f = _as_counting(oracle)
    rng = np.random.default_rng(seed)
    x = x0.copy()
    tile = max(1, b.tile_size)
    prior_shape = (-(-x0.shape[0] // tile), -(-x0.shape[1] // tile), x0.shape[2])
    prior = np.zeros(prior_shape)
    step = 0
    while f.queries + 2 <= b.query_budget:
        u = rng.standard_normal(prior_shape)
        q1, q2 = prior + b.exploration * u, prior - b.exploration * u
        d1 = _upsample(q1 / max(np.linalg.norm(q1), 1e-12), x.shape, tile)
        d2 = _upsample(q2 / max(np.linalg.norm(q2), 1e-12), x.shape, tile)
        l1 = f(np.clip(x + b.fd_eta * d1, 0.0, 1.0))
        l2 = f(np.clip(x + b.fd_eta * d2, 0.0, 1.0))
        est = (l1 - l2) / (b.fd_eta * b.exploration)
        prior = _eg_step(prior, est * u, b.prior_lr)
        x = _project(x + b.step_size * np.sign(_upsample(prior, x.shape, tile)), x0, b.epsilon)
        step += 1
        if trace is not None:
            trace.append({"kind": "bandit", "step": step, "queries": f.queries})
    return x


def unoptimized_diffusion(x_target, prompt: str, s: DecoderSettings, stack: Stack) -> np.ndarray:
    """Decode the target's own common branch once, at full mask weight."""
    x = check_image(x_target)
    e_target = stack.embedder.embed_image(x).values
    e_text = stack.embedder.embed_text(prompt).values
    dec = stack.decomposer_for(e_text).decompose(e_target)
    return stack.decoder.decode(dec.e_com, e_text, x, s)
