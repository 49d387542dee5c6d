"""Bad-image bootstrap: degrade each target until the agent no longer prefers it."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from ..decoder import DecoderSettings
from ..embedding import load_png, save_png
from ..harness import hash_seed, instruction_for, run_trials, selection_task
from ..optimizer import TrapConfig
from ..stack import Stack
from .dataset import InstanceSpec
from .textgen import generate_negative_prompt

log = logging.getLogger(__name__)


def degrade(x_target, negative_prompt: str, stack: Stack, settings: DecoderSettings) -> np.ndarray:
    """Image-to-image decode of the target conditioned on the negative prompt.

    The prompt embedding is rescaled to the target embedding's norm so it acts
    with image-embedding magnitude.
    """
    e_target = stack.embedder.embed_image(x_target).values
    e_neg = stack.embedder.embed_text(negative_prompt).values
    e_mod = e_neg * (np.linalg.norm(e_target) / np.linalg.norm(e_neg))
    return stack.decoder.decode(e_mod, e_neg, x_target, settings)


def bootstrap_bad_image(spec: InstanceSpec, agent, cfg: TrapConfig, stack: Stack, textgen=None,
                        attempts: int = 5, strength: float = 0.5, strength_step: float = 0.1,
                        R: int | None = None, out_path=None) -> InstanceSpec:
    """Generate the degraded target and verify its selection probability is below threshold.

    Each retry raises the decoding strength by ``strength_step``. After
    ``attempts`` failures the instance is marked ``excluded``; the last
    generated image and its probability are still recorded.
    """
    negative, fell_back = generate_negative_prompt(spec.caption, textgen)
    x_target = load_png(spec.target_path)
    competitors = [load_png(p) for p in spec.competitor_paths]
    instruction = instruction_for(selection_task(spec.caption), cfg.n, cfg.template_id)
    R = R or cfg.R
    notes = list(spec.notes)
    if fell_back:
        notes.append("negative prompt from offline fallback")
    status, bad, p, seed = "excluded", None, None, None
    for k in range(attempts):
        s = min(1.0, strength + k * strength_step)
        settings = DecoderSettings(s, 7.5, cfg.seed + k, cfg.decoder_steps)
        bad = degrade(x_target, negative, stack, settings)
        seed = hash_seed(cfg.seed, spec.instance_id, "bootstrap", k)
        est = run_trials(bad, competitors, agent, R, cfg.n, seed=seed, instruction=instruction,
                         noise_sigma=cfg.noise_sigma, height=cfg.compose_height)
        p = est.p_adv
        log.info("instance %s bootstrap attempt %d: strength %.2f, P=%.3f", spec.instance_id, k + 1, s, p)
        if p < cfg.threshold:
            status = "accepted"
            break
    if status == "excluded":
        notes.append(f"bootstrap failed after {attempts} attempts")
        log.warning("instance %s excluded: bad image still selected with P=%.3f", spec.instance_id, p)
    bad_path = None
    if out_path is not None and bad is not None:
        bad_path = str(save_png(bad, out_path))
    return dataclasses.replace(spec, negative_prompt=negative, bootstrap_status=status, initial_p=p,
                               bad_image_path=bad_path, bootstrap_seed=seed, notes=notes)
