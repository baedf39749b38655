"""Experiment orchestration: single runs, variant sweeps and cross-run reports.

Every run lives in ``<output_dir>/<config_hash>-<order_seed>/``:

    config.json          resolved, fully explicit config (re-runnable as is)
    events.jsonl         one JSON object per epoch / freeze / eval event
    accuracy_matrix.csv  step, task, correct, total, percent
    metrics.csv          run_id, seed, method, arch_stable, arch_plastic, metric, task_step, value
    confusion.json       task confusion after the last task (counts + normalized)
    checkpoints/         binary tensors + JSON manifests
    DONE                 written last; sweeps skip directories that have it
"""
from __future__ import annotations

import csv
import io
import json
import os
import shutil
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .config import arch_label, config_hash, resolve, single_run_configs
from .data import load_mnist, split_tasks, synth_train_test
from .engine import TrainConfig, peak_param_report, run_stream
from .losses import LossConfig
from .methods import make_method
from .nn import ArchSpec

METRIC_COLUMNS = ["run_id", "seed", "method", "arch_stable", "arch_plastic", "metric", "task_step", "value"]
FINAL_METRICS = ("AAN", "LA", "AIA", "FAF", "FRF")
STEP_METRICS = ("A", "a_new", "AF", "RF")
DONE = "DONE"


def _fmt(v):
    # repr round-trips exactly, so CSV values re-read as the same float
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def load_datasets(ds):
    if ds["kind"] == "mnist_idx":
        return load_mnist(ds.get("root"))
    return synth_train_test(ds["num_classes"], ds["per_class"], ds["test_per_class"], ds["dim"], ds["seed"],
                            ds["noise"], tuple(ds["shape"]) if ds.get("shape") else None)


def run_id(cfg):
    return f"{config_hash(cfg)}-{cfg['order_seeds'][0]}"


def run_dir(cfg):
    return Path(cfg["output_dir"]) / run_id(cfg)


def metric_rows(cfg, matrix, peak_params):
    """Long-format metric rows: per-step series plus final summary values."""
    rid = run_id(cfg)
    base = [rid, cfg["order_seeds"][0], cfg["method"]["name"], arch_label(cfg["arch_stable"]),
            arch_label(cfg["arch_plastic"])]
    rows = []
    a, joint = matrix.a, matrix.joint
    for k in range(1, matrix.steps + 1):
        rows.append(base + ["A", k, joint[k - 1]])
        rows.append(base + ["a_new", k, a[k - 1, k - 1]])
        if k >= 2:
            rows.append(base + ["AF", k, metrics.af(matrix, k)])
            try:
                rows.append(base + ["RF", k, 100.0 * metrics.rf(matrix, k)])
            except ZeroDivisionError:
                rows.append(base + ["RF", k, float("nan")])
    K = matrix.steps
    la, aia = metrics.la_aia(matrix)
    rows.append(base + ["AAN", K, metrics.aan(matrix)])
    rows.append(base + ["LA", K, la])
    rows.append(base + ["AIA", K, aia])
    if K >= 2:
        rows.append(base + ["FAF", K, metrics.faf(matrix)])
        try:
            rows.append(base + ["FRF", K, 100.0 * metrics.frf(matrix)])
        except ZeroDivisionError:
            rows.append(base + ["FRF", K, float("nan")])
    rows.append(base + ["peak_params", K, int(peak_params)])
    return rows


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def execute(cfg, quiet=True):
    """Run one resolved single-seed config and write its artifacts.  Returns the run directory."""
    if len(cfg["order_seeds"]) != 1:
        raise ValueError("execute() takes a single-seed config; use single_run_configs()")
    order_seed = cfg["order_seeds"][0]
    out = run_dir(cfg)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    train, test = load_datasets(cfg["dataset"])
    stream = split_tasks(train, cfg["tasks"], order_seed, test)
    m = cfg["method"]
    params = {k: m[k] for k in ("lambda", "temperature", "align", "ce_scope") if k in m}
    method = make_method(m["name"], cfg["memory"]["budget"], **params)
    seed = order_seed if cfg["seed"] is None else cfg["seed"]
    train_cfg = TrainConfig(seed=seed, **cfg["train"])
    loss_cfg = LossConfig(**cfg["loss"])
    st = ArchSpec.from_dict(cfg["arch_stable"])
    pl = ArchSpec.from_dict(cfg["arch_plastic"]) if cfg["arch_plastic"] else None

    with open(out / "events.jsonl", "w") as sink:
        result = run_stream(stream, st, pl, method, loss_cfg, train_cfg, out_dir=out, event_sink=sink,
                            checkpoints=cfg["checkpoints"])

    matrix = result.matrix
    write_csv(out / "accuracy_matrix.csv", ["step", "task", "correct", "total", "percent"],
              [[r["step"], r["task"], r["correct"], r["total"], r["percent"]] for r in matrix.to_rows()])
    write_csv(out / "metrics.csv", METRIC_COLUMNS, metric_rows(cfg, matrix, peak_param_report(result)))
    counts, norm = metrics.task_confusion(result.predictions, result.labels, stream.classes_per_task, stream.K)
    (out / "confusion.json").write_text(json.dumps(
        {"tasks": stream.K, "counts": counts.tolist(), "normalized": norm.tolist()}, indent=1) + "\n")
    (out / "params.json").write_text(json.dumps(
        {"peak": peak_param_report(result), "peak_actual": peak_param_report(result, actual=True),
         "per_step": result.live_params, "per_step_actual": result.live_params_actual}, indent=1) + "\n")
    (out / DONE).write_text("")
    if not quiet:
        s = metrics.summary(matrix)
        print(f"{out}: " + "  ".join(f"{k} {v:.2f}" for k, v in s.items()))
    return out


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def sweep_configs(cfg):
    """(variant name, single-seed config) for every variant x order seed."""
    variants = cfg["variants"] or [{"name": arch_label(cfg["arch_stable"]) + (
        "+" + arch_label(cfg["arch_plastic"]) if cfg["arch_plastic"] else ""),
        "arch_stable": cfg["arch_stable"], "arch_plastic": cfg["arch_plastic"]}]
    out = []
    for var in variants:
        base = dict(cfg, arch_stable=var["arch_stable"], arch_plastic=var["arch_plastic"], variants=None)
        for c in single_run_configs(base):
            out.append((var["name"], c))
    return out


def _execute_quiet(cfg):
    return str(execute(cfg))


def sweep(cfg, jobs=1, resume=True, log=print):
    """Run every variant x seed, skipping finished runs, then write summary.csv."""
    todo, runs = [], []
    for name, c in sweep_configs(cfg):
        d = run_dir(c)
        runs.append((name, c, d))
        if resume and (d / DONE).exists():
            log(f"skip {d} (done)")
            continue
        todo.append(c)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for d in pool.map(_execute_quiet, todo):
                log(f"done {d}")
    else:
        for c in todo:
            log(f"done {execute(c)}")
    out = Path(cfg["output_dir"])
    path = out / "summary.csv"
    write_csv(path, ["variant", "arch_stable", "arch_plastic", "metric", "n", "mean", "std_pop"], summarize(runs))
    return path


def summarize(runs):
    """Per-variant mean and population std of the final metrics across seeds."""
    by_variant = defaultdict(lambda: defaultdict(list))
    labels = {}
    for name, c, d in runs:
        labels[name] = (arch_label(c["arch_stable"]), arch_label(c["arch_plastic"]))
        for r in read_csv(Path(d) / "metrics.csv"):
            if r["metric"] in FINAL_METRICS:
                by_variant[name][r["metric"]].append(float(r["value"]))
    rows = []
    for name in labels:
        for metric in FINAL_METRICS:
            vals = by_variant[name].get(metric)
            if vals:
                mean, std = metrics.mean_std(vals)
                rows.append([name, *labels[name], metric, len(vals), mean, std])
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def find_runs(results_dir):
    """Completed run directories under ``results_dir`` (itself included), sorted by name."""
    root = Path(results_dir)
    cands = [root] + [p for p in root.rglob("*") if p.is_dir()]
    return sorted({p for p in cands if (p / DONE).exists() and (p / "metrics.csv").exists()})


def _pair_key(cfg):
    """Everything but the plastic learner (and output placement) identifies a comparison pair."""
    c = {k: v for k, v in cfg.items() if k not in ("arch_plastic", "output_dir", "name", "variants")}
    return json.dumps(c, sort_keys=True)


def report(results_dir, out_dir=None):
    """Write table.csv, deltas.csv and series.csv; returns their paths."""
    runs = find_runs(results_dir)
    if not runs:
        raise FileNotFoundError(f"no completed runs under {results_dir}")
    out = Path(out_dir) if out_dir else Path(results_dir)
    out.mkdir(parents=True, exist_ok=True)

    table, series = [], []
    cfgs, finals = {}, {}
    for d in runs:
        rows = read_csv(d / "metrics.csv")
        cfg = json.loads((d / "config.json").read_text())
        rid = rows[0]["run_id"] if rows else d.name
        cfgs[rid] = cfg
        finals[rid] = {r["metric"]: r["value"] for r in rows if r["metric"] in FINAL_METRICS}
        table.extend([r[c] for c in METRIC_COLUMNS] for r in rows)
        steps = defaultdict(dict)
        for r in rows:
            if r["metric"] in STEP_METRICS:
                steps[int(r["task_step"])][r["metric"]] = r["value"]
        head = rows[0] if rows else {}
        for k in sorted(steps):
            series.append([rid, head.get("seed"), head.get("method"), head.get("arch_stable"),
                           head.get("arch_plastic"), k] + [steps[k].get(m, "") for m in STEP_METRICS])

    groups = defaultdict(lambda: {"base": [], "dual": []})
    for rid, cfg in cfgs.items():
        groups[_pair_key(cfg)]["dual" if cfg["arch_plastic"] else "base"].append(rid)
    deltas = []
    for g in groups.values():
        for b in sorted(g["base"]):
            for dl in sorted(g["dual"]):
                cb, cd = cfgs[b], cfgs[dl]
                for metric in FINAL_METRICS:
                    if metric in finals[b] and metric in finals[dl]:
                        vb, vd = float(finals[b][metric]), float(finals[dl][metric])
                        deltas.append([cb["method"]["name"], cb["order_seeds"][0], arch_label(cb["arch_stable"]),
                                       arch_label(cd["arch_plastic"]), metric, b, dl, vb, vd, vd - vb])
    deltas.sort(key=lambda r: tuple(str(x) for x in r[:5]))

    paths = {"table": out / "table.csv", "deltas": out / "deltas.csv", "series": out / "series.csv"}
    write_csv(paths["table"], METRIC_COLUMNS, table)
    write_csv(paths["deltas"], ["method", "seed", "arch_stable", "arch_plastic", "metric", "baseline_run",
                                "dual_run", "baseline", "dual_arch", "delta"], deltas)
    write_csv(paths["series"], ["run_id", "seed", "method", "arch_stable", "arch_plastic", "task_step",
                                *STEP_METRICS], series)
    return paths


def load_and_resolve(path):
    with open(path) as f:
        text = f.read()
    return resolve(text=text)


def cpu_count():
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
