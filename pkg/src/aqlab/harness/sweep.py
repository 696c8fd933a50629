"""Running sweeps, aggregating per-cell results, and emitting plot data.

Output directory layout::

    config.json              resolved sweep config
    manifest.json            status, fingerprint and CSV hash of every run
    runs/<cell>/seed_<n>.csv per-run metric rows
    cells/<cell>.json        aggregate report of one cell

Each run is fully determined by the config and its seed. Workers only write
their own CSV; the manifest and the reports are written by the parent.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import re
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..continuous.train import train_continuous
from ..mdp import value_iteration
from ..metrics import RunMetrics
from ..tabular import train_tabular
from . import stats
from .config import Cell, ConfigError, ContinuousCell, RunConfig, TabularCell, build_cell, parse_config, run_seed_sequence

_CELL_ID = re.compile(r"^[A-Za-z0-9_.=+-]+$")
MANIFEST = "manifest.json"
TRACE_RESAMPLES = 1000


@dataclass
class SweepResult:
    out_dir: Path
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


def run_key(cell_id: str, seed: int) -> str:
    return f"{cell_id}/seed_{seed}"


def run_path(out_dir: Path, cell_id: str, seed: int) -> Path:
    return out_dir / "runs" / cell_id / f"seed_{seed}.csv"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    os.replace(tmp, path)


def execute_run(cfg: RunConfig, cell: Cell, seed: int) -> RunMetrics:
    """Train one (cell, seed) run in-process."""
    built = build_cell(cfg, cell)
    ss = run_seed_sequence(cfg.master_seed, cell.cell_id, seed)
    if isinstance(built, TabularCell):
        return train_tabular(built.mdp, built.rule, built.noise, steps=cfg.total_steps, seed=ss,
                             log_every=cfg.log_every, **built.agent)
    return train_continuous(built.env, built.agent, ss, cfg.total_steps, log_every=cfg.log_every, probes=built.probes)


def _worker(cfg: RunConfig, cell: Cell, seed: int, path: str) -> tuple[str, str]:
    try:
        execute_run(cfg, cell, seed).to_csv(path)
        return "ok", ""
    except Exception as exc:  # a failed run is recorded, the sweep goes on
        return "failed", "".join(traceback.format_exception_only(type(exc), exc)).strip()


def load_manifest(out_dir: Path) -> dict:
    p = out_dir / MANIFEST
    if not p.exists():
        return {"runs": {}}
    return json.loads(p.read_text())


def _is_done(entry: dict | None, fingerprint: str, path: Path) -> bool:
    return (
        entry is not None and entry.get("status") == "ok" and entry.get("fingerprint") == fingerprint
        and path.exists() and _sha256(path) == entry.get("sha256")
    )


def run_sweep(cfg: RunConfig, out_dir: str | Path | None = None, workers: int | None = None, progress=None) -> SweepResult:
    """Run every (cell x seed) not already completed, then aggregate every cell."""
    out = Path(out_dir or cfg.out or cfg.name)
    cells = cfg.cells()
    for c in cells:
        if not _CELL_ID.match(c.cell_id):
            raise ConfigError("grid", f"cell id {c.cell_id!r} is not usable as a file name")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"config": cfg.to_dict(), "base_dir": cfg.base_dir})
    manifest = load_manifest(out)
    runs = manifest.setdefault("runs", {})
    result = SweepResult(out)

    todo = []
    for cell in cells:
        fp = cfg.fingerprint(cell)
        (out / "runs" / cell.cell_id).mkdir(parents=True, exist_ok=True)
        for seed in cfg.seeds:
            key, path = run_key(cell.cell_id, seed), run_path(out, cell.cell_id, seed)
            if _is_done(runs.get(key), fp, path):
                result.skipped.append(key)
            else:
                todo.append((cell, seed, fp, key, path))

    def record(key, fp, path, status, error):
        entry = {"status": status, "fingerprint": fp}
        if status == "ok":
            entry["sha256"] = _sha256(path)
            result.completed.append(key)
        else:
            entry["error"] = error
            result.failed[key] = error
        runs[key] = entry
        _write_json(out / MANIFEST, manifest)
        if progress:
            progress(key, status, error)

    n_workers = workers or cfg.workers
    if n_workers <= 1 or len(todo) <= 1:
        for cell, seed, fp, key, path in todo:
            record(key, fp, path, *_worker(cfg, cell, seed, str(path)))
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = {pool.submit(_worker, cfg, cell, seed, str(path)): (key, fp, path) for cell, seed, fp, key, path in todo}
            for fut in as_completed(futures):
                key, fp, path = futures[fut]
                try:
                    status, error = fut.result()
                except BrokenProcessPool as exc:
                    status, error = "failed", f"worker process died: {exc}"
                record(key, fp, path, status, error)

    aggregate(out, cfg)
    return result


def load_sweep_config(out_dir: str | Path) -> RunConfig:
    saved = json.loads((Path(out_dir) / "config.json").read_text())
    cfg = parse_config(saved["config"])
    cfg.base_dir = saved.get("base_dir")
    return cfg


def _load_cell_runs(out_dir: Path, cfg: RunConfig, cell_id: str) -> dict[int, RunMetrics]:
    runs = {}
    for seed in cfg.seeds:
        p = run_path(out_dir, cell_id, seed)
        if p.exists():
            runs[seed] = RunMetrics.from_csv(p)
    return runs


def _summary(values, analysis) -> dict | None:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals or len(vals) != len(values):
        return None
    return stats.summarize(vals, analysis["n_resamples"], analysis["level"], analysis["bootstrap_seed"])


def trace_stats(matrix: np.ndarray, n_resamples: int = TRACE_RESAMPLES, level: float = 0.95, seed: int = 0) -> dict:
    """Per-step mean, IQM and bootstrap CI of the mean for a (seeds x steps) matrix.

    All steps share the same resampled seed sets.
    """
    m = np.asarray(matrix, dtype=float)
    n, T = m.shape
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    lo, hi = np.empty(T), np.empty(T)
    alpha = 0.5 * (1.0 - level)
    chunk = max(1, 4_000_000 // (n_resamples * n))
    for a in range(0, T, chunk):
        boot = m[idx, a:a + chunk].mean(axis=1)
        lo[a:a + chunk], hi[a:a + chunk] = np.quantile(boot, [alpha, 1.0 - alpha], axis=0)
    mean = m.mean(axis=0)
    const = np.all(m == m[:1], axis=0)
    lo, hi = np.where(const, mean, np.minimum(lo, mean)), np.where(const, mean, np.maximum(hi, mean))
    iqm = np.sort(m, axis=0).T @ stats.iqm_weights(n)
    return {"mean": mean.tolist(), "iqm": iqm.tolist(), "ci_low": lo.tolist(), "ci_high": hi.tolist()}


def _row_index(steps: np.ndarray, step: float) -> int:
    return int(np.argmin(np.abs(steps - step)))


def _tabular_summaries(cfg: RunConfig, built: TabularCell, runs: dict[int, RunMetrics]) -> dict:
    a = cfg.analysis
    q_star = float(value_iteration(built.mdp).q[0, 0])
    band = a["band_fraction"] * abs(q_star)
    stb, late, final, reached = [], [], [], 0
    for m in runs.values():
        trace = m.column("q_s0_a0")
        hit = stats.steps_to_band(trace, q_star, band, m.steps)
        reached += hit is not None
        # runs that never settle are censored at the run length
        stb.append(float(cfg.total_steps if hit is None else hit))
        k = max(1, int(round(a["late_fraction"] * len(trace))))
        late.append(float(np.mean(trace[-k:])))
        final.append(float(trace[-1]))
    return {
        "q_star": q_star,
        "band": band,
        "n_reached_band": reached,
        "scalars": {
            "steps_to_band": _summary(stb, a),
            "late_mean_q_s0_a0": _summary(late, a),
            "final_q_s0_a0": _summary(final, a),
        },
        "per_seed": {"steps_to_band": stb, "late_mean_q_s0_a0": late, "final_q_s0_a0": final},
    }


def _continuous_summaries(cfg: RunConfig, built: ContinuousCell, runs: dict[int, RunMetrics]) -> dict:
    a = cfg.analysis
    per = {"final_eval_return": [], "final_bias": [], "mid_bias": [], "early_entropy": []}
    for m in runs.values():
        steps = m.steps
        after = np.flatnonzero(steps > built.agent.start_steps)
        early = int(after[0]) if after.size else len(steps) - 1
        mid = _row_index(steps, cfg.total_steps / 2)
        per["final_eval_return"].append(float(m.column("eval_return")[-1]))
        per["final_bias"].append(float(m.column("bias")[-1]))
        per["mid_bias"].append(float(m.column("bias")[mid]))
        per["early_entropy"].append(float(m.column("entropy")[early]))
    per = {k: [None if not math.isfinite(v) else v for v in vals] for k, vals in per.items()}
    return {"scalars": {k: _summary(v, a) for k, v in per.items()}, "per_seed": per}


def aggregate_cell(out_dir: Path, cfg: RunConfig, cell: Cell) -> dict:
    runs = _load_cell_runs(out_dir, cfg, cell.cell_id)
    report = {"cell": cell.cell_id, "kind": cfg.kind, "config": cell.config, "n_seeds": len(runs),
              "seeds": list(runs), "missing_seeds": [s for s in cfg.seeds if s not in runs]}
    if not runs:
        return report
    built = build_cell(cfg, cell)
    if isinstance(built, TabularCell):
        report.update(_tabular_summaries(cfg, built, runs))
    else:
        report.update(_continuous_summaries(cfg, built, runs))
    first = next(iter(runs.values()))
    if all(m.columns == first.columns and np.array_equal(m.steps, first.steps) for m in runs.values()):
        traces = {"step": first.steps.tolist()}
        for col in first.columns[1:]:
            mat = np.stack([m.column(col) for m in runs.values()])
            # columns with missing entries (e.g. no episode finished yet) are kept raw
            if np.all(np.isfinite(mat)):
                traces[col] = trace_stats(mat, level=cfg.analysis["level"], seed=cfg.analysis["bootstrap_seed"])
        report["traces"] = traces
    return report


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def aggregate(out_dir: str | Path, cfg: RunConfig | None = None) -> dict[str, dict]:
    """Recompute every cell report from the run CSVs (a pure post-pass)."""
    out = Path(out_dir)
    cfg = cfg or load_sweep_config(out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    reports = {}
    for cell in cfg.cells():
        rep = _json_safe(aggregate_cell(out, cfg, cell))
        _write_json(out / "cells" / f"{cell.cell_id}.json", rep)
        reports[cell.cell_id] = rep
    return reports


def emit_plot_data(
    out_dir: str | Path,
    series: Sequence[str],
    cells: Sequence[str] | None = None,
    aggregated: bool = False,
    level: float = 0.95,
) -> str:
    """Tidy CSV text for the chosen metric columns.

    Long form has one row per (cell, seed, step, metric); aggregated form
    has one row per (cell, step, metric) with the seed count, mean and a
    bootstrap CI of the mean. Row order follows the config.
    """
    out = Path(out_dir)
    cfg = load_sweep_config(out)
    known = {c.cell_id: c for c in cfg.cells()}
    chosen = list(known) if cells is None else list(cells)
    for c in chosen:
        if c not in known:
            raise KeyError(f"unknown cell {c!r}; sweep has {sorted(known)}")
    if not series:
        raise ValueError("series needs at least one metric name")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "step", "metric", "n", "mean", "ci_low", "ci_high"] if aggregated else ["cell", "seed", "step", "metric", "value"])
    for cid in chosen:
        runs = _load_cell_runs(out, cfg, cid)
        if not runs:
            raise FileNotFoundError(f"cell {cid!r} has no completed runs in {out}")
        for metric in series:
            for m in runs.values():
                if metric not in m.columns:
                    raise KeyError(f"metric {metric!r} not logged; columns are {m.columns}")
        if aggregated:
            steps = next(iter(runs.values())).steps
            for metric in series:
                mat = np.stack([m.column(metric) for m in runs.values()])
                ok = np.all(np.isfinite(mat), axis=0)
                ts = trace_stats(np.where(ok, mat, 0.0), level=level)
                for j, step in enumerate(steps):
                    if ok[j]:
                        w.writerow([cid, int(step), metric, mat.shape[0], repr(ts["mean"][j]), repr(ts["ci_low"][j]), repr(ts["ci_high"][j])])
                    else:
                        w.writerow([cid, int(step), metric, mat.shape[0], "nan", "nan", "nan"])
        else:
            for seed, m in runs.items():
                cols = {metric: m.column(metric) for metric in series}
                for j, step in enumerate(m.steps):
                    for metric in series:
                        v = cols[metric][j]
                        w.writerow([cid, seed, int(step), metric, "nan" if math.isnan(v) else repr(float(v))])
    return buf.getvalue()
