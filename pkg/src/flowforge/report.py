"""Regression-friendly summaries of training runs and timestep audits."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy import stats

from . import plotting

TIMESTEP_HEADER = ["step", "rank", "interval", "t"]
WINDOW = 100
CHI2_BINS = 100
CHI2_ALPHA = 0.01

SUMMARY_COLUMNS = (
    "name", "kind", "stage", "config_hash", "n_steps", "final_loss", "final_flow_loss",
    "early_flow_loss", "trailing_flow_loss", "reward_mean", "right_fraction_before",
    "right_fraction_after", "sample_reward_before", "sample_reward_after", "chi2", "chi2_p",
    "invariants_pass",
)


def _num(value: str):
    if value == "":
        return None
    try:
        return float(value)
    except ValueError:
        return value


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = [{k: _num(v) for k, v in row.items()} for row in reader]
        return list(reader.fieldnames or []), rows


def stratification_stats(steps, ranks, intervals, t) -> dict:
    """Partition invariant per step plus a pooled chi-square test on 100 equal bins."""
    steps, ranks, intervals = (np.asarray(a, dtype=int) for a in (steps, ranks, intervals))
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        return {"n": 0, "world_size": 0, "partition_ok": True, "inside_ok": True,
                "chi2": None, "chi2_p": None, "chi2_pass": None}
    k = int(ranks.max()) + 1
    inside = bool(np.all((t >= intervals / k) & (t < (intervals + 1) / k)))
    order = np.lexsort((intervals, steps))
    s_sorted, i_sorted = steps[order], intervals[order]
    uniq, counts = np.unique(s_sorted, return_counts=True)
    partition = bool(np.all(counts == k))
    if partition:
        partition = bool(np.all(i_sorted.reshape(-1, k) == np.arange(k)))
    observed, _ = np.histogram(t, bins=CHI2_BINS, range=(0.0, 1.0))
    expected = np.full(CHI2_BINS, t.size / CHI2_BINS)
    chi2 = float(np.sum((observed - expected) ** 2 / expected))
    p = float(stats.chi2.sf(chi2, CHI2_BINS - 1))
    return {"n": int(t.size), "world_size": k, "partition_ok": partition, "inside_ok": inside,
            "chi2": chi2, "chi2_p": p, "chi2_pass": p > CHI2_ALPHA}


def _column(rows, key):
    return np.array([r[key] for r in rows if isinstance(r.get(key), float)], dtype=float)


def _mean(a):
    return float(np.mean(a)) if len(a) else None


def _last(a):
    return float(a[-1]) if len(a) else None


def _summarize_run(path: Path) -> tuple[dict, dict]:
    _, rows = read_csv(path)
    run_dir = path.parent
    meta = {}
    if (run_dir / "run.json").exists():
        meta = json.loads((run_dir / "run.json").read_text())
    flow = _column(rows, "flow_loss")
    loss = _column(rows, "loss")
    reward = _column(rows, "reward_mean")
    finite = all(
        math.isfinite(v) for r in rows for v in r.values() if isinstance(v, float)
    )
    entry = {
        "name": run_dir.name if path.name == "metrics.csv" else path.stem,
        "kind": "train",
        "stage": meta.get("stage") or (rows[0]["stage"] if rows else None),
        "config_hash": meta.get("config_hash"),
        "n_steps": len(rows),
        "final_loss": _last(loss),
        "final_flow_loss": _last(flow),
        "early_flow_loss": _mean(flow[:WINDOW]),
        "trailing_flow_loss": _mean(flow[-WINDOW:]),
        "reward_mean": _mean(reward[-WINDOW:]),
    }
    for key in ("right_fraction_before", "right_fraction_after",
                "sample_reward_before", "sample_reward_after"):
        entry[key] = meta.get("samples", {}).get(key)
    invariants = {"finite_metrics": finite}
    ts_path = run_dir / "timesteps.csv"
    entry["stratification"] = None
    series = {"loss": (np.arange(1, len(loss) + 1), loss)}
    t = None
    if ts_path.exists() and path.name == "metrics.csv":
        _, trows = read_csv(ts_path)
        t = np.array([r["t"] for r in trows], dtype=float)
        st = stratification_stats([r["step"] for r in trows], [r["rank"] for r in trows],
                                  [r["interval"] for r in trows], t)
        entry["stratification"] = st
        if st["n"]:
            invariants["stratification_partition"] = st["partition_ok"] and st["inside_ok"]
    entry["invariants"] = invariants
    return entry, {"series": series, "t": t}


def _summarize_timesteps(path: Path) -> tuple[dict, dict]:
    _, rows = read_csv(path)
    t = np.array([r["t"] for r in rows], dtype=float)
    st = stratification_stats([r["step"] for r in rows], [r["rank"] for r in rows],
                              [r["interval"] for r in rows], t)
    entry = dict.fromkeys(SUMMARY_COLUMNS)
    entry.update(name=path.stem, kind="timesteps", n_steps=len({r["step"] for r in rows}),
                 stratification=st)
    entry["invariants"] = {"stratification_partition": st["partition_ok"] and st["inside_ok"]}
    if st["n"]:
        entry["invariants"]["chi2_uniform"] = st["chi2_pass"]
    return entry, {"series": None, "t": t}


def _is_timestep_file(path: Path) -> bool:
    with open(path, encoding="utf-8") as fh:
        return fh.readline().strip().split(",") == TIMESTEP_HEADER


def summarize(paths) -> tuple[dict, list[dict]]:
    runs, extras = [], []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            path = path / "metrics.csv"
        if not path.exists():
            raise FileNotFoundError(f"metrics file not found: {raw}")
        entry, extra = (_summarize_timesteps if _is_timestep_file(path) else _summarize_run)(path)
        st = entry.get("stratification")
        if st:
            entry["chi2"], entry["chi2_p"] = st["chi2"], st["chi2_p"]
        entry["invariants_pass"] = all(entry["invariants"].values())
        runs.append(entry)
        extras.append(extra)
    summary = {
        "n_runs": len(runs),
        "n_steps_total": sum(r["n_steps"] or 0 for r in runs),
        "all_invariants_pass": all(r["invariants_pass"] for r in runs),
        "runs": runs,
    }
    return summary, extras


def write_report(paths, out_dir, figures: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, extras = summarize(paths)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for run in summary["runs"]:
            writer.writerow(["" if run.get(c) is None else run.get(c) for c in SUMMARY_COLUMNS])
    if figures and summary["runs"]:
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        curves = [(run["name"], *ex["series"]["loss"]) for run, ex in zip(summary["runs"], extras)
                  if ex["series"] is not None]
        if curves:
            plotting.loss_curves(curves, fig_dir / "loss_curves.png")
        hists = [(run["name"], ex["t"]) for run, ex in zip(summary["runs"], extras)
                 if ex["t"] is not None and len(ex["t"])]
        if hists:
            plotting.timestep_histogram(hists, fig_dir / "timestep_hist.png")
    return summary
