"""Experiment orchestration: bootstrap, attacks, baselines, evaluation and ablations.

Every unit of work writes its output under ``runs/{run_id}/instances/{id}/``
and is skipped when that output already exists, so reruns resume where a
previous run stopped. Estimates are stored one file per (instance, method,
condition) and gathered into ``estimates.jsonl`` in sorted order by the
report stage.
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from ..baselines import (agent_frequency_oracle, bandit_attack, spsa_attack, surrogate_oracle,
                         unoptimized_diffusion)
from ..decoder import DecoderSettings
from ..embedding import load_png, save_png
from ..errors import TrapError
from ..harness import (RemoteAgentAdapter, hash_seed, instruction_for, run_trials, selection_task,
                       surrogate_argmax_agent)
from ..optimizer import INITIAL_SETTING, optimize_instance
from ..stack import Stack, build_stack
from .bootstrap import bootstrap_bad_image
from .config import ExperimentConfig
from .dataset import InstanceSpec, load_instances, make_toy_dataset
from .textgen import OfflineTemplateEngine, RemoteTextGenerator

log = logging.getLogger(__name__)

ATTACK_METHODS = ("trap", "spsa", "bandit", "noopt")
STAGES = ("bootstrap", "attack", "baseline", "evaluate", "ablate", "report")


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True))
    tmp.replace(path)


class Experiment:
    """One configured run directory and the stage drivers that fill it."""

    def __init__(self, config: ExperimentConfig, stack: Stack | None = None):
        self.config = config
        self.run_dir = config.run_dir
        self.trap = config.trap
        self.stack = stack or build_stack(config["backend"], **config["stack"])
        self.timing: dict = {}

    # ------------------------------------------------------------------ helpers

    def instance_dir(self, instance_id: str) -> Path:
        return self.run_dir / "instances" / str(instance_id)

    def make_agent(self, prompt: str, temperature: float | None = None):
        a = self.config["agent"]
        t = a["temperature"] if temperature is None else temperature
        if a["kind"] == "surrogate":
            return surrogate_argmax_agent(prompt, self.stack.embedder, temperature=t, seed=self.config["seed"])
        if a["kind"] == "remote":
            if not a.get("endpoint"):
                raise TrapError("remote agent selected but no endpoint configured")
            headers = {"Authorization": f"Bearer {a['api_key']}"} if a.get("api_key") else None
            return RemoteAgentAdapter(a["endpoint"], name=a.get("name") or "remote", temperature=t,
                                      timeout=a["timeout"], retries=a["retries"],
                                      parallelism=a["parallelism"], headers=headers)
        raise TrapError(f"unknown agent kind {a['kind']!r}")

    def make_textgen(self):
        t = self.config["textgen"]
        if t["kind"] == "remote" and t.get("endpoint"):
            headers = {"Authorization": f"Bearer {t['api_key']}"} if t.get("api_key") else None
            return RemoteTextGenerator(t["endpoint"], timeout=t["timeout"], headers=headers)
        return OfflineTemplateEngine()

    def _map(self, fn, items):
        workers = max(1, int(self.config["workers"]))
        if workers == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))

    def _guarded(self, stage: str, spec: InstanceSpec, fn):
        """Run one unit of work; failures are recorded for the instance and skipped."""
        try:
            return fn()
        except Exception as exc:  # per-instance isolation
            log.error("instance %s failed in %s: %s", spec.instance_id, stage, exc)
            _write_json(self.instance_dir(spec.instance_id) / f"failure_{stage}.json",
                        {"stage": stage, "error": f"{type(exc).__name__}: {exc}",
                         "traceback": traceback.format_exc()})
            return None

    def _timed(self, stage: str, fn):
        start = time.perf_counter()
        out = fn()
        self.timing[stage] = time.perf_counter() - start
        if self.run_dir.exists():
            self._write_timing()
        return out

    # ------------------------------------------------------------------ instances

    def _dataset_path(self) -> Path:
        d = self.config["dataset"]
        if not d.get("path"):
            raise TrapError("dataset.path is not configured")
        path = Path(d["path"])
        toy = d.get("toy")
        if toy and not path.exists():
            make_toy_dataset(path, count=toy.get("count", 60), seed=toy.get("seed", 0),
                             size=toy.get("size", 64))
        return path

    def candidate_specs(self) -> list[InstanceSpec]:
        d = self.config["dataset"]
        return load_instances(self._dataset_path(), d["count"], self.trap.n, self.config["seed"])

    def included(self) -> list[InstanceSpec]:
        """Accepted instances in sampling order, capped at ``dataset.target_included``."""
        path = self.run_dir / "instances.json"
        if not path.exists():
            raise TrapError(f"no bootstrap output in {self.run_dir}; run the bootstrap stage first")
        specs = [InstanceSpec.from_dict(s) for s in json.loads(path.read_text())]
        accepted = [s for s in specs if s.bootstrap_status == "accepted"]
        cap = self.config["dataset"].get("target_included")
        return accepted[:cap] if cap else accepted

    # ------------------------------------------------------------------ stages

    def bootstrap(self) -> list[InstanceSpec]:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.json").write_text(self.config.dump())
        b = self.config["bootstrap"]
        textgen = self.make_textgen()
        cap = self.config["dataset"].get("target_included")

        def one(spec: InstanceSpec):
            done = self.instance_dir(spec.instance_id) / "spec.json"
            if done.exists():
                return InstanceSpec.from_dict(json.loads(done.read_text()))
            agent = self.make_agent(spec.caption)
            out = bootstrap_bad_image(spec, agent, self.trap, self.stack, textgen, attempts=b["attempts"],
                                      strength=b["strength"], strength_step=b["strength_step"],
                                      out_path=self.instance_dir(spec.instance_id) / "bad.png")
            _write_json(done, out.to_dict())
            return out

        def run():
            results = []
            for spec in self.candidate_specs():
                if cap and sum(r.bootstrap_status == "accepted" for r in results) >= cap:
                    break
                res = self._guarded("bootstrap", spec, lambda s=spec: one(s))
                results.append(res or spec)
            return results

        specs = self._timed("bootstrap", run)
        _write_json(self.run_dir / "instances.json", [s.to_dict() for s in specs])
        return specs

    def _inputs(self, spec: InstanceSpec):
        return load_png(spec.bad_image_path), [load_png(p) for p in spec.competitor_paths]

    def attack(self) -> None:
        def one(spec: InstanceSpec):
            out = self.instance_dir(spec.instance_id) / "trap"
            if (out / "result.json").exists():
                return
            x_bad, comps = self._inputs(spec)
            agent = self.make_agent(spec.caption)
            start = time.perf_counter()
            res = optimize_instance(x_bad, spec.caption, comps, agent, self.trap, self.stack, out_dir=out)
            elapsed = time.perf_counter() - start
            _write_json(out / "timing.json", {"seconds": elapsed,
                                              "seconds_per_iteration": elapsed / max(1, res.iterations_used)})

        self._timed("attack", lambda: self._map(lambda s: self._guarded("attack", s, lambda: one(s)),
                                                self.included()))

    def _baseline_oracle(self, spec: InstanceSpec, comps):
        bcfg = self.config["baselines"]
        if bcfg["oracle"] == "surrogate":
            return surrogate_oracle(self.stack.embedder, spec.caption)
        return agent_frequency_oracle(self.make_agent(spec.caption), comps, spec.caption, self.trap.n,
                                      bcfg["oracle_trials"], seed=hash_seed(self.config["seed"], spec.instance_id),
                                      height=self.trap.compose_height)

    def baseline(self, methods=None) -> None:
        methods = [m for m in (methods or self.config["methods"]) if m in ("spsa", "bandit", "noopt")]
        budget = self.config.budget
        seed = self.config["seed"]

        def one(spec: InstanceSpec, method: str):
            out = self.instance_dir(spec.instance_id) / method
            if (out / "result.json").exists():
                return
            x_bad, comps = self._inputs(spec)
            trace: list = []
            start = time.perf_counter()
            info: dict = {"method": method}
            if method == "noopt":
                settings = DecoderSettings(*INITIAL_SETTING, seed, self.trap.decoder_steps)
                x_adv = unoptimized_diffusion(x_bad, spec.caption, settings, self.stack)
                info["settings"] = settings.to_dict()
            else:
                oracle = self._baseline_oracle(spec, comps)
                attack = spsa_attack if method == "spsa" else bandit_attack
                x_adv = attack(x_bad, oracle, budget, seed=hash_seed(seed, spec.instance_id, method), trace=trace)
                info.update(queries=oracle.queries, oracle=oracle.mode)
            elapsed = time.perf_counter() - start
            out.mkdir(parents=True, exist_ok=True)
            save_png(x_adv, out / "x_adv.png")
            with open(out / "trace.jsonl", "w") as fh:
                for row in trace:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
            _write_json(out / "timing.json", {"seconds": elapsed})
            _write_json(out / "result.json", info)

        jobs = [(s, m) for s in self.included() for m in methods]
        self._timed("baseline", lambda: self._map(
            lambda job: self._guarded(f"baseline_{job[1]}", job[0], lambda: one(*job)), jobs))

    def _method_image(self, spec: InstanceSpec, method: str) -> Path:
        if method == "initial":
            return Path(spec.bad_image_path)
        return self.instance_dir(spec.instance_id) / method / "x_adv.png"

    def _evaluate_one(self, spec: InstanceSpec, method: str, ablation: str, condition,
                      temperature=None, template_id="default", noise_sigma=None) -> dict | None:
        path = self.instance_dir(spec.instance_id) / "estimates" / f"{ablation}__{condition}__{method}.json"
        if path.exists():
            return json.loads(path.read_text())
        image_path = self._method_image(spec, method)
        if not image_path.exists():
            return None
        x = load_png(image_path)
        comps = [load_png(p) for p in spec.competitor_paths]
        agent = self.make_agent(spec.caption, temperature)
        n = self.trap.n
        sigma = self.config["evaluation"]["noise_sigma"] if noise_sigma is None else noise_sigma
        seed = hash_seed(self.config["seed"], "eval", spec.instance_id, method, ablation, str(condition))
        est = run_trials(x, comps, agent, self.config.eval_R, n, seed=seed,
                         instruction=instruction_for(selection_task(spec.caption), n, template_id),
                         noise_sigma=sigma, height=self.trap.compose_height)
        record = {"instance_id": spec.instance_id, "method": method, "ablation": ablation,
                  "condition": condition, "n": n, **est.to_dict()}
        _write_json(path, record)
        return record

    def evaluate(self) -> None:
        methods = list(self.config["methods"])
        jobs = [(s, m) for s in self.included() for m in methods]
        self._timed("evaluate", lambda: self._map(
            lambda job: self._guarded("evaluate", job[0],
                                      lambda: self._evaluate_one(job[0], job[1], "main", "default")), jobs))

    def ablate(self) -> None:
        ab = self.config["ablations"]
        jobs = []
        for spec in self.included():
            for t in ab["temperatures"]:
                jobs.append((spec, "temperature", float(t), {"temperature": float(t)}))
            for variant in ab["prompt_variants"]:
                jobs.append((spec, "prompt_variant", variant, {"template_id": variant}))
            if ab.get("noise_sigma"):
                jobs.append((spec, "noise_defense", float(ab["noise_sigma"]),
                             {"noise_sigma": float(ab["noise_sigma"])}))
        self._timed("ablate", lambda: self._map(
            lambda job: self._guarded("ablate", job[0],
                                      lambda: self._evaluate_one(job[0], "trap", job[1], job[2], **job[3])),
            jobs))

    def collect_estimates(self) -> list[dict]:
        """Every stored estimate for the included instances, in a stable order."""
        records = []
        for spec in self.included():
            est_dir = self.instance_dir(spec.instance_id) / "estimates"
            if est_dir.is_dir():
                records.extend(json.loads(p.read_text()) for p in sorted(est_dir.glob("*.json")))
        records.sort(key=lambda r: (r["ablation"], str(r["condition"]), r["method"], r["instance_id"]))
        return records

    def failures(self) -> list[dict]:
        out = []
        for p in sorted(self.run_dir.glob("instances/*/failure_*.json")):
            d = json.loads(p.read_text())
            out.append({"instance_id": p.parent.name, "stage": d["stage"], "error": d["error"]})
        return out

    def report(self) -> dict:
        from .report import write_report

        records = self.collect_estimates()
        with open(self.run_dir / "estimates.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        specs = json.loads((self.run_dir / "instances.json").read_text())
        ab = self.config["ablations"]
        order = {"temperature": [float(t) for t in ab["temperatures"]],
                 "prompt_variant": list(ab["prompt_variants"]),
                 "noise_defense": [float(ab["noise_sigma"])] if ab.get("noise_sigma") else []}
        report = write_report(self.run_dir, records, n=self.trap.n,
                              methods=list(self.config["methods"]),
                              threshold_eps=ab["threshold_eps"],
                              instances_sampled=len(specs), instances_included=len(self.included()),
                              failures=self.failures(), ablation_order=order)
        self._write_timing()
        return report

    def _write_timing(self) -> None:
        path = self.run_dir / "timing.json"
        timing = json.loads(path.read_text()) if path.exists() else {}
        timing.update({f"stage_{k}": v for k, v in self.timing.items()})
        per_method: dict = {}
        for p in sorted(self.run_dir.glob("instances/*/*/timing.json")):
            per_method.setdefault(p.parent.name, []).append(json.loads(p.read_text())["seconds"])
        timing["seconds_per_instance_mean"] = {m: sum(v) / len(v) for m, v in per_method.items()}
        _write_json(path, timing)

    def run(self, stages=STAGES) -> dict | None:
        report = None
        for stage in stages:
            log.info("stage %s", stage)
            result = getattr(self, stage)()
            if stage == "report":
                report = result
        return report


def run_experiment(config: ExperimentConfig | dict, stack: Stack | None = None) -> dict:
    """All stages in order; returns the report dictionary."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    return Experiment(config, stack).run()
