import base64
import json

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from trap_attack.agent_server import create_app, parse_instruction
from trap_attack.cli import main as cli_main
from trap_attack.embedding import load_png, png_bytes
from trap_attack.errors import DatasetError, EmptyInputError, TrapError
from trap_attack.harness import (FunctionAgent, compose_trial, instruction_for, run_trials, selection_task,
                                 surrogate_argmax_agent)
from trap_attack.optimizer import TrapConfig
from trap_attack.pipeline.bootstrap import bootstrap_bad_image
from trap_attack.pipeline.config import ExperimentConfig
from trap_attack.pipeline.dataset import InstanceSpec, load_instances, make_toy_dataset
from trap_attack.pipeline.experiment import Experiment
from trap_attack.pipeline.report import build_report, dumps, recompute_report
from trap_attack.pipeline.textgen import (OfflineTemplateEngine, RemoteTextGenerator, generate_negative_prompt,
                                          head_noun)


def never_pick(composite, instruction):
    """Unparseable answer, counted as non-selection."""
    return "none of these"


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, count=12, seed=3, size=32)
    return root


# ------------------------------------------------------------------ dataset

class TestDataset:
    def test_zero_count_is_empty(self, tmp_path):
        assert load_instances(tmp_path / "missing", 0) == []

    def test_seeded_and_competitors_distinct(self, toy_root):
        a = load_instances(toy_root, 6, n=4, seed=9)
        b = load_instances(toy_root, 6, n=4, seed=9)
        assert [s.to_dict() for s in a] == [s.to_dict() for s in b]
        assert len({s.instance_id for s in a}) == 6
        for s in a:
            assert len(s.competitor_paths) == 3
            assert len(set(s.competitor_paths)) == 3
            assert s.target_path not in s.competitor_paths

    def test_manifest_path_accepted(self, toy_root):
        via_file = load_instances(toy_root / "annotations" / "captions_toy.json", 3, seed=1)
        via_dir = load_instances(toy_root, 3, seed=1)
        assert [s.to_dict() for s in via_file] == [s.to_dict() for s in via_dir]

    def test_errors(self, toy_root, tmp_path):
        with pytest.raises(DatasetError):
            load_instances(tmp_path / "nothing.json", 3)
        with pytest.raises(DatasetError):
            load_instances(tmp_path, 3)
        with pytest.raises(DatasetError):
            load_instances(toy_root, 13)

    def test_empty_caption_rejected(self):
        with pytest.raises(DatasetError):
            InstanceSpec("1", "t.png", "  ", [])

    def test_spec_round_trip(self, toy_root):
        s = load_instances(toy_root, 1)[0]
        assert InstanceSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


# ------------------------------------------------------------------ negative prompts

class TestTextgen:
    def test_template(self):
        assert OfflineTemplateEngine().generate("a red apple on a table") == "low quality, blurry, unappealing apple"

    @pytest.mark.parametrize("caption,noun", [("Two dogs playing in the park", "dogs"),
                                               ("the old wooden chair beside a window", "chair"),
                                               ("A man riding a horse", "man")])
    def test_head_noun(self, caption, noun):
        assert head_noun(caption) == noun

    def test_empty_caption(self):
        with pytest.raises(EmptyInputError):
            generate_negative_prompt("   ")

    def test_remote_and_fallback(self):
        ok = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"text": "ugly apple"})))
        assert generate_negative_prompt("an apple", RemoteTextGenerator("http://x", client=ok)) == ("ugly apple", False)
        down = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
        text, fell_back = generate_negative_prompt("an apple", RemoteTextGenerator("http://x", client=down))
        assert fell_back and text == "low quality, blurry, unappealing apple"


# ------------------------------------------------------------------ bootstrap

def _cfg():
    return TrapConfig(R=8, compose_height=32, seed=2)


class TestBootstrap:
    def test_never_selected_accepts_first_attempt(self, toy_root, stack, tmp_path):
        spec = load_instances(toy_root, 1, seed=4)[0]
        out = bootstrap_bad_image(spec, FunctionAgent(never_pick), _cfg(), stack, out_path=tmp_path / "bad.png")
        assert out.bootstrap_status == "accepted"
        assert out.initial_p == 0.0
        assert out.negative_prompt.startswith("low quality, blurry, unappealing")
        assert load_png(out.bad_image_path).shape == load_png(spec.target_path).shape

    def test_always_selected_is_excluded(self, toy_root, stack):
        spec = load_instances(toy_root, 1, seed=4)[0]
        comps = {tuple(np.round(load_png(p).mean(axis=(0, 1)), 4)) for p in spec.competitor_paths}
        calls = []

        def pick_non_competitor(composite, instruction):
            calls.append(1)
            for k in range(len(composite.slots)):
                if tuple(np.round(composite.slot_image(k).mean(axis=(0, 1)), 4)) not in comps:
                    return f"Image {k + 1}"
            return "Image 1"

        out = bootstrap_bad_image(spec, FunctionAgent(pick_non_competitor), _cfg(), stack, attempts=5)
        assert out.bootstrap_status == "excluded"
        assert out.initial_p > 0.25
        assert len(calls) == 5 * 8
        assert any("5 attempts" in n for n in out.notes)

    def test_recorded_probability_is_reproducible(self, toy_root, stack, embedder, tmp_path):
        spec = load_instances(toy_root, 1, seed=5)[0]
        cfg = _cfg()
        agent = surrogate_argmax_agent(spec.caption, embedder, temperature=0.5, seed=0)
        out = bootstrap_bad_image(spec, agent, cfg, stack, out_path=tmp_path / "bad.png")
        # independent estimate from the stored image and seed
        bad = load_png(out.bad_image_path)
        est = run_trials(bad, [load_png(p) for p in spec.competitor_paths], agent, cfg.R, cfg.n,
                         seed=out.bootstrap_seed, instruction=instruction_for(selection_task(spec.caption), cfg.n),
                         height=cfg.compose_height)
        assert est.p_adv == out.initial_p


# ------------------------------------------------------------------ config

def test_env_overrides_and_credentials_stripped():
    cfg = ExperimentConfig.from_dict({"run_id": "x"}, env={"TRAP_AGENT_ENDPOINT": "http://agent",
                                                            "TRAP_AGENT_API_KEY": "secret"})
    assert cfg["agent"]["endpoint"] == "http://agent"
    assert cfg["agent"]["api_key"] == "secret"
    assert "secret" not in cfg.dump()
    assert json.loads(cfg.dump())["agent"]["endpoint"] == "http://agent"


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"trap": {"n": 0}}, env={})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"baselines": {"budget": {"query_budget": -5}}}, env={})


# ------------------------------------------------------------------ experiment

def small_config(tmp_path, **over):
    raw = {
        "run_id": "t", "output_dir": str(tmp_path / "runs"), "seed": 0,
        "dataset": {"path": str(tmp_path / "data"), "count": 8, "target_included": 3,
                    "toy": {"count": 12, "seed": 1, "size": 32}},
        "trap": {"outer_iterations": 2, "inner_steps": 3, "R": 8, "compose_height": 32, "grid_search": False,
                 "decoder_steps": 5},
        "evaluation": {"R": 8},
        "baselines": {"budget": {"query_budget": 64, "samples_per_step": 2}},
        "ablations": {"temperatures": [0.0, 1.0], "prompt_variants": ["default", "concise"],
                      "threshold_eps": [0.0, 0.1, 0.3], "noise_sigma": 0.05},
    }
    for k, v in over.items():
        raw[k] = v
    return ExperimentConfig.from_dict(raw, env={})


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, stack):
    tmp = tmp_path_factory.mktemp("exp")
    exp = Experiment(small_config(tmp), stack)
    report = exp.run()
    return exp, report


class TestExperiment:
    def test_layout(self, finished_run):
        exp, report = finished_run
        d = exp.run_dir
        for name in ("config.json", "instances.json", "estimates.jsonl", "report.json", "timing.json",
                     "tables/methods.csv", "tables/methods.json", "plots/asr_by_method.png"):
            assert (d / name).exists(), name
        spec = exp.included()[0]
        inst = exp.instance_dir(spec.instance_id)
        for method in ("trap", "spsa", "bandit", "noopt"):
            assert (inst / method / "x_adv.png").exists()
        assert (inst / "trap" / "result.json").exists()
        assert len(exp.included()) == 3
        assert report["completeness"]["instances_complete"] == 3

    def test_report_recomputes_exactly(self, finished_run):
        exp, report = finished_run
        text = (exp.run_dir / "report.json").read_text()
        assert dumps(recompute_report(exp.run_dir)) == text
        assert "seconds" not in text

    def test_resume_is_idempotent(self, finished_run, stack):
        exp, _ = finished_run
        before = (exp.run_dir / "report.json").read_text()
        mtimes = {p: p.stat().st_mtime_ns for p in exp.run_dir.glob("instances/*/estimates/*.json")}
        Experiment(exp.config, stack).run()
        assert (exp.run_dir / "report.json").read_text() == before
        assert {p: p.stat().st_mtime_ns for p in mtimes} == mtimes

    def test_threshold_sweep_monotone(self, finished_run):
        _, report = finished_run
        for m in report["inputs"]["methods"]:
            asr = [r["asr"] for r in report["threshold_sweep"] if r["method"] == m]
            assert asr == sorted(asr, reverse=True)

    def test_ablation_rows(self, finished_run):
        _, report = finished_run
        assert [r["temperature"] for r in report["ablations"]["temperature"]] == [0.0, 1.0]
        assert [r["template_id"] for r in report["ablations"]["prompt_variant"]] == ["default", "concise"]
        assert [r["noise_sigma"] for r in report["ablations"]["noise_defense"]] == [0.05]

    def test_initial_row_is_zero_with_never_picking_agent(self, tmp_path, stack):
        exp = Experiment(small_config(tmp_path, methods=["initial"]), stack)
        exp.make_agent = lambda prompt, temperature=None: FunctionAgent(never_pick)
        report = exp.run(("bootstrap", "evaluate", "report"))
        assert report["methods"] == [{"method": "initial", "asr": 0.0, "mean_p": 0.0, "instances": 3}]

    def test_failures_are_isolated_and_reported(self, tmp_path, stack):
        exp = Experiment(small_config(tmp_path, methods=["initial", "noopt"]), stack)
        exp.run(("bootstrap",))
        broken = exp.included()[0]
        import trap_attack.pipeline.experiment as mod

        original = mod.unoptimized_diffusion

        def flaky(x, prompt, s, st):
            if prompt == broken.caption:
                raise RuntimeError("decoder exploded")
            return original(x, prompt, s, st)

        mod.unoptimized_diffusion = flaky
        try:
            exp.baseline()
        finally:
            mod.unoptimized_diffusion = original
        report = exp.run(("evaluate", "report"))
        assert any(f["instance_id"] == broken.instance_id and "decoder exploded" in f["error"]
                   for f in report["failures"])
        assert report["completeness"]["instances_complete"] == len(exp.included()) - 1

    def test_included_requires_bootstrap(self, tmp_path, stack):
        with pytest.raises(TrapError):
            Experiment(small_config(tmp_path), stack).included()


def test_build_report_counts_from_outcomes():
    records = [{"instance_id": str(i), "method": "trap", "ablation": "main", "condition": "default", "n": 4,
                "outcomes": o, "adv_slots": [0] * len(o), "wins": o.count("1"), "R": len(o)}
               for i, o in enumerate(["1100", "1000", "11?1"])]
    rep = build_report(records, 4, ["trap"], [0.0, 0.5], 3, 3)
    assert rep["methods"][0]["asr"] == pytest.approx(2 / 3)
    assert rep["methods"][0]["mean_p"] == pytest.approx((0.5 + 0.25 + 0.75) / 3)
    assert [r["asr"] for r in rep["threshold_sweep"]] == pytest.approx([2 / 3, 0.0])


# ------------------------------------------------------------------ CLI and agent service

def test_cli_run_and_report(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(small_config(tmp_path).raw))
    assert cli_main(["run", "-c", str(cfg_path), "--run-id", "cli"]) == 0
    out = capsys.readouterr().out
    assert "trap" in out and "complete 3/3" in out
    assert (tmp_path / "runs" / "cli" / "report.json").exists()
    assert cli_main(["report", "-c", str(cfg_path), "--run-id", "cli"]) == 0


def test_cli_reports_errors(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"output_dir": str(tmp_path)}))
    assert cli_main(["attack", "-c", str(cfg_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_make_toy_dataset(tmp_path):
    assert cli_main(["make-toy-dataset", str(tmp_path / "d"), "--count", "5", "--size", "16"]) == 0
    assert len(load_instances(tmp_path / "d", 5)) == 5


class TestAgentServer:
    def test_parse_instruction(self):
        for template in ("default", "concise", "shopper", "careful", "formatted"):
            text = instruction_for(selection_task("a red apple on a table"), 4, template)
            assert parse_instruction(text) == (4, "a red apple on a table")
        with pytest.raises(ValueError):
            parse_instruction("pick one")

    def test_choose_matches_local_agent(self, embedder):
        rng = np.random.default_rng(0)
        images = [rng.uniform(0, 1, (24, 20 + 4 * k, 3)) for k in range(4)]
        comp = compose_trial(images, height=24)
        instruction = instruction_for(selection_task("a blue car"), 4)
        client = TestClient(create_app(embedder))
        r = client.post("/choose", json={"image": base64.b64encode(png_bytes(comp.image)).decode(),
                                         "instruction": instruction})
        assert r.status_code == 200
        local = surrogate_argmax_agent("a blue car", embedder).choose(comp, instruction)
        assert r.json()["text"] == local
        assert client.get("/health").json()["status"] == "ok"

    def test_bad_requests(self, embedder):
        client = TestClient(create_app(embedder))
        assert client.post("/choose", json={"image": "???", "instruction": "x"}).status_code == 422
        assert client.post("/choose", json={"instruction": "x"}).status_code == 422
