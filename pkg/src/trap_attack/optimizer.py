"""The outer/inner optimisation loop that turns a target image into an adversarial one.

Each outer iteration restarts the embedding from the target's, runs ``T``
adaptive-moment steps on the composite loss while decoding a candidate at
every step, then scores the last candidate against the agent with ``R``
randomized trials. The best-scoring candidate is kept and the loop stops as
soon as its score reaches the threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decoder import DecoderSettings
from .decomposer import Decomposition, DecomposerWeights
from .embedding import as_vector, check_image, save_png
from .errors import AgentUnavailableError
from .harness import DEFAULT_HEIGHT, SelectionEstimate, hash_seed, instruction_for, run_trials, selection_task
from .layout import LayoutMask, mask_mean
from .losses import LossBreakdown, LossWeights, total_loss
from .stack import Stack

log = logging.getLogger(__name__)

STRENGTH_RANGE = (0.3, 0.8)
CFG_RANGE = (2.0, 12.0)
INITIAL_SETTING = (0.5, 7.5)


@dataclass
class TrapConfig:
    loss_weights: LossWeights = field(default_factory=LossWeights)
    outer_iterations: int = 20
    inner_steps: int = 20
    learning_rate: float = 0.005
    n: int = 4
    R: int = 100
    threshold: float | None = None
    strength_grid: tuple[float, ...] = (0.3, 0.5, 0.8)
    cfg_grid: tuple[float, ...] = (2.0, 7.5, 12.0)
    grid_search: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: bool = True
    lpips_bound: float = 0.45
    carry_candidate: bool = True
    decoder_steps: int = 30
    compose_height: int = DEFAULT_HEIGHT
    noise_sigma: float = 0.0
    template_id: str = "default"

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.strength_grid = tuple(float(s) for s in self.strength_grid)
        self.cfg_grid = tuple(float(c) for c in self.cfg_grid)
        if min(self.outer_iterations, self.n, self.R) < 1 or self.inner_steps < 0:
            raise ValueError("M, n, R must be >= 1 and T >= 0")
        if self.threshold is None:
            self.threshold = 1.0 / self.n
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not self.strength_grid or not self.cfg_grid:
            raise ValueError("decoder grids must be non-empty")
        if any(not STRENGTH_RANGE[0] <= s <= STRENGTH_RANGE[1] for s in self.strength_grid):
            raise ValueError(f"strength grid must lie within {STRENGTH_RANGE}")
        if any(not CFG_RANGE[0] <= c <= CFG_RANGE[1] for c in self.cfg_grid):
            raise ValueError(f"cfg grid must lie within {CFG_RANGE}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strength_grid"] = list(self.strength_grid)
        d["cfg_grid"] = list(self.cfg_grid)
        return d


class Adam:
    """First/second-moment gradient descent; ``momentum=False`` gives plain steps."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 momentum: bool = True):
        self.lr, self.beta1, self.beta2, self.eps, self.momentum = lr, beta1, beta2, eps, momentum
        self.t = 0
        self.m = self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if not self.momentum:
            return params - self.lr * grad
        if self.m is None:
            self.m, self.v = np.zeros_like(params), np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fuse_embedding(dec: Decomposition, A) -> np.ndarray:
    """Common branch scaled by the mask mean (a float is taken as the mean itself)."""
    scale = mask_mean(A) if isinstance(A, LayoutMask) else float(A)
    return dec.e_com * scale


@dataclass
class InstanceContext:
    """Everything the inner loop needs for one target; built by ``prepare_context``."""

    stack: Stack
    x_target: np.ndarray
    competitors: list
    agent: object
    prompt: str
    e_target: np.ndarray
    e_text: np.ndarray
    decomposer: DecomposerWeights
    dec_target: Decomposition
    mask_scale: float
    cfg: TrapConfig

    @property
    def instruction(self) -> str:
        return instruction_for(selection_task(self.prompt), self.cfg.n, self.cfg.template_id)


def prepare_context(x_target, prompt: str, competitors, agent, cfg: TrapConfig, stack: Stack) -> InstanceContext:
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")
    if len(competitors) != cfg.n - 1:
        raise ValueError(f"expected {cfg.n - 1} competitors, got {len(competitors)}")
    x = check_image(x_target)
    e_target = stack.embedder.embed_image(x).values
    e_text = stack.embedder.embed_text(prompt).values
    decomposer = stack.decomposer_for(e_text)
    A = stack.layout_mask(e_text, e_target, x)
    return InstanceContext(stack, x, [check_image(c) for c in competitors], agent, prompt, e_target, e_text,
                           decomposer, decomposer.decompose(e_target), mask_mean(A), cfg)


def inner_step(e_adv, ctx: InstanceContext, optimizer: Adam, settings: DecoderSettings,
               x_init) -> tuple[np.ndarray, LossBreakdown, np.ndarray]:
    """One descent step; returns (updated embedding, loss at the old one, decoded candidate)."""
    e = as_vector(e_adv)
    dec = ctx.decomposer.decompose(e)
    e_mod = fuse_embedding(dec, ctx.mask_scale)
    decoder = ctx.stack.decoder
    x_cand = decoder.decode(e_mod, ctx.e_text, x_init, settings)

    candidate_vjp = None
    if getattr(decoder, "differentiable", False):
        def candidate_vjp(g_image):
            g_mod = decoder.vjp(e_mod, x_init, settings, g_image)
            return ctx.decomposer.vjp(e, g_com=ctx.mask_scale * g_mod)

    loss = total_loss(e, ctx.e_text, x_cand, ctx.x_target, dec, ctx.dec_target, ctx.cfg.loss_weights,
                      perceptual=ctx.stack.perceptual, decomposer=ctx.decomposer, candidate_vjp=candidate_vjp)
    return optimizer.step(e, loss.gradient_wrt_e_adv), loss, x_cand


def run_iteration(ctx: InstanceContext, settings: DecoderSettings, x_init, iteration: int,
                  trace: list | None = None, kind: str = "step") -> np.ndarray:
    """Inner loop of one outer iteration. With T = 0 the candidate is ``x_init`` itself."""
    cfg = ctx.cfg
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.momentum)
    e_adv = ctx.e_target.copy()
    x_cand = x_init
    for t in range(1, cfg.inner_steps + 1):
        e_adv, loss, x_cand = inner_step(e_adv, ctx, opt, settings, x_init)
        if trace is not None:
            trace.append({"kind": kind, "iteration": iteration, **loss.record(t)})
    return x_cand


def estimate(ctx: InstanceContext, x_cand, iteration: int, label: str = "iter") -> SelectionEstimate:
    cfg = ctx.cfg
    return run_trials(x_cand, ctx.competitors, ctx.agent, cfg.R, cfg.n,
                      seed=hash_seed(cfg.seed, label, iteration), instruction=ctx.instruction,
                      noise_sigma=cfg.noise_sigma, height=cfg.compose_height)


def select_setting(cells, scores) -> tuple[float, float]:
    """Highest score; ties go to the cell nearest (0.5, 7.5) in range-normalised units, then lower strength."""
    s_width = STRENGTH_RANGE[1] - STRENGTH_RANGE[0]
    c_width = CFG_RANGE[1] - CFG_RANGE[0]

    def key(i):
        s, c = cells[i]
        dist = np.hypot((s - INITIAL_SETTING[0]) / s_width, (c - INITIAL_SETTING[1]) / c_width)
        return (-scores[i], round(float(dist), 12), s)

    return cells[min(range(len(cells)), key=key)]


def grid_search(ctx: InstanceContext, cfg: TrapConfig | None = None,
                trace: list | None = None) -> DecoderSettings:
    """Probe every (strength, cfg) cell with one outer iteration and keep the best-scoring one."""
    cfg = cfg or ctx.cfg
    cells = [(s, c) for s in cfg.strength_grid for c in cfg.cfg_grid]
    if len(cells) == 1:
        s, c = cells[0]
        return DecoderSettings(s, c, cfg.seed, cfg.decoder_steps)
    scores = []
    for i, (s, c) in enumerate(cells):
        settings = DecoderSettings(s, c, cfg.seed, cfg.decoder_steps)
        x_cand = run_iteration(ctx, settings, ctx.x_target, iteration=0, trace=None)
        est = estimate(ctx, x_cand, i, label="probe")
        scores.append(est.p_adv)
        if trace is not None:
            trace.append({"kind": "probe", "strength": s, "cfg": c, "p_adv": est.p_adv})
    s, c = select_setting(cells, scores)
    return DecoderSettings(s, c, cfg.seed, cfg.decoder_steps)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    best_score: float
    iterations_used: int
    trace: list
    settings_chosen: DecoderSettings
    status: str
    method: str = "trap"
    initial_score: float | None = None

    def summary(self) -> dict:
        return {"method": self.method, "best_score": self.best_score, "iterations_used": self.iterations_used,
                "status": self.status, "settings": self.settings_chosen.to_dict(),
                "initial_score": self.initial_score}

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        (out / "settings.json").write_text(json.dumps(self.settings_chosen.to_dict(), indent=2, sort_keys=True))
        write_trace(out / "trace.jsonl", self.trace)
        save_png(self.x_adv, out / "x_adv.png")
        return out


def write_trace(path, trace):
    with open(path, "w") as fh:
        for row in trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def optimize_instance(x_target, prompt: str, competitors, agent, cfg: TrapConfig, stack: Stack,
                      settings: DecoderSettings | None = None, out_dir=None,
                      save_candidates: bool = False) -> AttackResult:
    """Run the full attack on one target image.

    ``settings`` skips the grid search. With ``out_dir`` the result is
    persisted there, including a partial trace if the agent fails.
    """
    ctx = prepare_context(x_target, prompt, competitors, agent, cfg, stack)
    trace: list = []
    try:
        if settings is None:
            settings = (grid_search(ctx, cfg, trace) if cfg.grid_search
                        else DecoderSettings(*INITIAL_SETTING, cfg.seed, cfg.decoder_steps))
        best_score, x_adv = 0.0, ctx.x_target
        x_init = ctx.x_target
        used = 0
        for m in range(1, cfg.outer_iterations + 1):
            used = m
            x_cand = run_iteration(ctx, settings, x_init, m, trace)
            if save_candidates and out_dir is not None:
                save_png(x_cand, Path(out_dir) / "candidates" / f"iteration_{m}_step_{cfg.inner_steps}.png")
            accepted = True
            if not getattr(stack.decoder, "differentiable", False):
                # reference decoder: the perceptual term acts as an acceptance filter
                accepted = stack.perceptual(x_cand, ctx.x_target) <= cfg.lpips_bound
            est = estimate(ctx, x_cand, m)
            trace.append({"kind": "estimate", "iteration": m, "accepted": accepted, **est.to_dict()})
            if accepted and est.p_adv > best_score:
                best_score, x_adv = est.p_adv, x_cand
            if best_score >= cfg.threshold:
                break
            if cfg.carry_candidate:
                x_init = x_cand
    except AgentUnavailableError:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_trace(Path(out_dir) / "trace.partial.jsonl", trace)
        raise
    status = "success" if best_score >= cfg.threshold else "budget_exhausted"
    result = AttackResult(x_adv, best_score, used, trace, settings, status)
    if out_dir is not None:
        result.save(out_dir)
    return result
