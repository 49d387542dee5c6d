"""Experiment configuration: one key-value tree (YAML or JSON) with environment overrides."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from ..baselines import PerturbationBudget
from ..optimizer import TrapConfig

DEFAULTS: dict = {
    "run_id": "default",
    "output_dir": "runs",
    "seed": 0,
    "workers": 1,
    "backend": "toy",
    "stack": {
        "embedder_seed": 0,
        "decomposer_mode": "analytic",
        "decomposer_seed": 0,
        "decomposer_weights": None,
        "hidden": 1024,
        "layout_seed": 0,
        "layout_in_width": 1536,
        "layout_weights": None,
        "box_fraction": 0.75,
        "decoder_parallelism": 1,
        "device": "cpu",
    },
    "dataset": {
        "path": None,
        "count": 100,
        "target_included": None,
        "toy": None,  # {"count": 60, "seed": 1}: generate a synthetic corpus at ``path``
    },
    "trap": {},
    "baselines": {"oracle": "surrogate", "oracle_trials": 10, "budget": {}},
    "agent": {
        "kind": "surrogate",
        "endpoint": None,
        "name": None,
        "temperature": 0.0,
        "parallelism": 1,
        "timeout": 60.0,
        "retries": 3,
    },
    "textgen": {"kind": "offline", "endpoint": None, "timeout": 60.0},
    "bootstrap": {"attempts": 5, "strength": 0.5, "strength_step": 0.1},
    "methods": ["initial", "trap", "spsa", "bandit", "noopt"],
    "evaluation": {"R": None, "noise_sigma": 0.0},
    "ablations": {
        "temperatures": [0.0, 0.3, 0.7, 1.0],
        "threshold_eps": [0.0, 0.05, 0.1, 0.2, 0.35],
        "prompt_variants": ["default", "concise", "shopper", "careful", "formatted"],
        "noise_sigma": 0.05,
    },
}

ENV_OVERRIDES = {
    "TRAP_AGENT_ENDPOINT": ("agent", "endpoint"),
    "TRAP_AGENT_API_KEY": ("agent", "api_key"),
    "TRAP_TEXTGEN_ENDPOINT": ("textgen", "endpoint"),
    "TRAP_TEXTGEN_API_KEY": ("textgen", "api_key"),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict, env: dict | None = None) -> "ExperimentConfig":
        merged = _merge(DEFAULTS, data)
        env = os.environ if env is None else env
        for var, (section, key) in ENV_OVERRIDES.items():
            if env.get(var):
                merged[section][key] = env[var]
        cfg = cls(merged)
        cfg.trap  # validate eagerly
        cfg.budget
        return cfg

    @classmethod
    def load(cls, path, env: dict | None = None) -> "ExperimentConfig":
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        return cls.from_dict(data or {}, env)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def trap(self) -> TrapConfig:
        t = dict(self.raw["trap"])
        t.setdefault("seed", self.raw["seed"])
        return TrapConfig(**t)

    @property
    def budget(self) -> PerturbationBudget:
        return PerturbationBudget(**self.raw["baselines"]["budget"])

    @property
    def run_dir(self) -> Path:
        return Path(self.raw["output_dir"]) / self.raw["run_id"]

    @property
    def eval_R(self) -> int:
        return self.raw["evaluation"]["R"] or self.trap.R

    def dump(self) -> str:
        """Config as stored in the run directory; credentials are left out."""
        clean = copy.deepcopy(self.raw)
        for section in ("agent", "textgen"):
            clean[section].pop("api_key", None)
        return json.dumps(clean, indent=2, sort_keys=True)
