"""Aggregate persisted estimates into the report, tables and plots.

``build_report`` is a pure function of the estimate records plus a few run
facts, so the report can be recomputed from ``estimates.jsonl`` at any time.
Wall-clock timings live in ``timing.json`` and never enter the report.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from ..harness import SelectionEstimate, compute_asr

REPORT_VERSION = 1


def _estimates(records) -> list[SelectionEstimate]:
    return [SelectionEstimate.from_outcomes(r["outcomes"], r["adv_slots"], r["n"]) for r in records]


def _summary(records, threshold: float) -> dict:
    ests = _estimates(records)
    return {"asr": compute_asr(ests, threshold), "mean_p": sum(e.p_adv for e in ests) / len(ests),
            "instances": len(ests)}


def _select(records, ablation, method=None, condition=None):
    return [r for r in records if r["ablation"] == ablation
            and (method is None or r["method"] == method)
            and (condition is None or r["condition"] == condition)]


def _conditions(records, ablation):
    seen = []
    for r in records:
        if r["ablation"] == ablation and r["condition"] not in seen:
            seen.append(r["condition"])
    return seen


def build_report(records: list[dict], n: int, methods: list[str], threshold_eps: list[float],
                 instances_sampled: int, instances_included: int, failures: list[dict] | None = None,
                 ablation_order: dict | None = None) -> dict:
    """Summary tables from raw per-trial records.

    ``records`` carry outcome codes and slot positions per trial; every
    probability and success rate here is recomputed from them.
    """
    threshold = 1.0 / n
    main = _select(records, "main")
    method_rows = []
    for m in methods:
        rs = _select(main, "main", m)
        if rs:
            method_rows.append({"method": m, **_summary(rs, threshold)})
    sweep = []
    for m in methods:
        rs = _select(main, "main", m)
        if not rs:
            continue
        ps = [e.p_adv for e in _estimates(rs)]
        for eps in threshold_eps:
            t = threshold + float(eps)
            sweep.append({"method": m, "eps": float(eps), "threshold": t, "asr": compute_asr(ps, t)})

    ablation_order = ablation_order or {}
    ablations = {}
    for name, key in (("temperature", "temperature"), ("prompt_variant", "template_id"),
                      ("noise_defense", "noise_sigma")):
        conds = ablation_order.get(name) or _conditions(records, name)
        rows = []
        for c in conds:
            rs = _select(records, name, "trap", c)
            if rs:
                rows.append({key: c, **_summary(rs, threshold)})
        ablations[name] = rows

    per_instance: dict = {}
    for r in main:
        per_instance.setdefault(r["instance_id"], {})[r["method"]] = r["wins"] / r["R"] if r["R"] else 0.0
    complete = sum(all(m in v for m in methods) for v in per_instance.values())
    return {
        "version": REPORT_VERSION,
        "n": n,
        "threshold": threshold,
        "inputs": {"methods": list(methods), "threshold_eps": [float(e) for e in threshold_eps],
                   "instances_sampled": instances_sampled, "instances_included": instances_included,
                   "failures": list(failures or []), "ablation_order": ablation_order},
        "completeness": {"instances_sampled": instances_sampled, "instances_included": instances_included,
                         "instances_complete": complete,
                         "fraction": complete / instances_included if instances_included else 0.0},
        "methods": method_rows,
        "threshold_sweep": sweep,
        "ablations": ablations,
        "per_instance": {k: per_instance[k] for k in sorted(per_instance)},
        "failures": list(failures or []),
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def read_estimates(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def recompute_report(run_dir) -> dict:
    """Rebuild the report from ``estimates.jsonl`` and the run facts stored in ``report.json``."""
    run_dir = Path(run_dir)
    old = json.loads((run_dir / "report.json").read_text())
    i = old["inputs"]
    return build_report(read_estimates(run_dir / "estimates.jsonl"), old["n"], i["methods"], i["threshold_eps"],
                        i["instances_sampled"], i["instances_included"], i["failures"], i["ablation_order"])


def _write_table(base: Path, rows: list[dict]) -> None:
    base.with_suffix(".json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    cols = list(rows[0]) if rows else []
    with open(base.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def write_tables(run_dir, report: dict) -> None:
    tables = Path(run_dir) / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    _write_table(tables / "methods", report["methods"])
    _write_table(tables / "threshold_sweep", report["threshold_sweep"])
    for name, rows in report["ablations"].items():
        _write_table(tables / name, rows)


def write_plots(run_dir, report: dict) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots = Path(run_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}
    written = []

    def save(fig, name):
        path = plots / name
        fig.tight_layout()
        fig.savefig(path, metadata=meta)
        plt.close(fig)
        written.append(path)

    rows = report["methods"]
    if rows:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar([r["method"] for r in rows], [r["asr"] for r in rows], color="#4c72b0")
        ax.set_ylim(0, 1)
        ax.set_ylabel("ASR")
        ax.set_title("Attack success rate by method")
        save(fig, "asr_by_method.png")

    if report["threshold_sweep"]:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for m in report["inputs"]["methods"]:
            pts = [r for r in report["threshold_sweep"] if r["method"] == m]
            if pts:
                ax.plot([p["threshold"] for p in pts], [p["asr"] for p in pts], marker="o", label=m)
        ax.set_xlabel("majority threshold")
        ax.set_ylabel("ASR")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7)
        save(fig, "threshold_sweep.png")

    temps = report["ablations"].get("temperature", [])
    if temps:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot([r["temperature"] for r in temps], [r["asr"] for r in temps], marker="o")
        ax.set_xlabel("sampling temperature")
        ax.set_ylabel("ASR")
        ax.set_ylim(-0.02, 1.02)
        save(fig, "temperature.png")

    variants = report["ablations"].get("prompt_variant", [])
    if variants:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar([r["template_id"] for r in variants], [r["asr"] for r in variants], color="#55a868")
        ax.set_ylim(0, 1)
        ax.set_ylabel("ASR")
        ax.set_title("System prompt variants")
        save(fig, "prompt_variants.png")
    return written


def write_report(run_dir, records, **kwargs) -> dict:
    run_dir = Path(run_dir)
    report = build_report(records, **kwargs)
    (run_dir / "report.json").write_text(dumps(report))
    write_tables(run_dir, report)
    write_plots(run_dir, report)
    return report
