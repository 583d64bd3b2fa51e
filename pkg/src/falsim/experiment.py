"""Building and running experiments from an :class:`ExperimentConfig`."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, from_dict
from .core import RngStream
from .data import Dataset, dataset_manifest, load_csv, make_task, partition_skew
from .federation import CSV_COLUMNS, Federation, RoundRecord, make_clients, train
from .metrics import (BoundInputs, adversarial_snapshots, bound_score, estimate_stability,
                      heterogeneity_report)
from .models import init_params

TREND_COLUMNS = ("x", "method", "algo", "mean_gap", "std_gap", "n")


@dataclass
class SeedResult:
    seed: int
    params: np.ndarray
    history: list[RoundRecord]
    train_set: Dataset
    partitions: list
    federation: Federation

    @property
    def acc_gap(self) -> float:
        return self.history[-1].acc_gap if self.history else 0.0


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.csv is not None:
        train_set = load_csv(d.csv, name="train")
        if d.test_csv is None:
            raise ValueError("data.csv needs data.test_csv for the generalization gap")
        return train_set, load_csv(d.test_csv, name="test")
    return make_task(d.k, d.dim, d.per_class, d.test_per_class, d.separation, seed, d.clip_norm)


def build(cfg: ExperimentConfig, seed: int, train_set: Dataset | None = None,
          partitions=None, test_set: Dataset | None = None):
    """Federation and initial parameters for one seed.

    Passing ``train_set``/``partitions`` substitutes them for the generated
    ones (used by the stability harness for neighbouring datasets).
    """
    if train_set is None or test_set is None:
        tr, te = load_data(cfg, seed)
        train_set = train_set if train_set is not None else tr
        test_set = test_set if test_set is not None else te
    if partitions is None:
        partitions = partition_skew(train_set, cfg.data.m, cfg.data.a, RngStream(seed, "partition"))
    spec = cfg.model_spec()
    fed = Federation(
        spec=spec,
        clients=make_clients(train_set, partitions),
        smoothing=cfg.smoothing_config(),
        attack=cfg.attack_config(),
        aggregation=cfg.aggregation_config(),
        algo=cfg.algo,
        seed=seed,
        train_set=train_set,
        test_set=test_set,
        eval_every=cfg.training.eval_every,
    )
    theta0 = init_params(spec, RngStream(seed, "init"))
    return fed, theta0, train_set, partitions


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    fed, theta0, train_set, partitions = build(cfg, seed)
    params, history = train(fed, theta0, cfg.training.T)
    return SeedResult(seed, params, history, train_set, partitions, fed)


def final_gap(cfg: ExperimentConfig, seed: int) -> float:
    """Robust accuracy gap of the final global model (picklable job)."""
    return run_seed(cfg, seed).acc_gap


# ---------------------------------------------------------------- workers

def worker_count() -> int:
    env = os.environ.get("FALSIM_THREADS")
    avail = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if env:
        try:
            return max(1, min(int(env), avail))
        except ValueError:
            raise ValueError(f"FALSIM_THREADS must be an integer, got {env!r}") from None
    return avail


def _job(args):
    raw, seed = args
    return _seed_outputs(from_dict(raw), seed)


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Ordered map; a process pool when more than one worker is allowed."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- outputs

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def history_csv(history: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in history:
        w.writerow([_fmt(v) for v in rec.csv_row()])
    return buf.getvalue()


def _seed_outputs(cfg: ExperimentConfig, seed: int) -> dict:
    res = run_seed(cfg, seed)
    fed = res.federation
    snaps = adversarial_snapshots(fed.spec, res.params, fed.attack, res.train_set, res.partitions,
                                  RngStream(seed, "heterogeneity"))
    het = {
        method: heterogeneity_report(res.train_set, res.partitions, snaps, method).to_dict()
        for method in ("label_marginal", "projected_histogram")
    }
    return {
        "seed": seed,
        "csv": history_csv(res.history),
        "history": [r.to_dict() for r in res.history],
        "heterogeneity": het,
        "n_min": min(p.n for p in res.partitions),
        "data": dataset_manifest(res.train_set, res.partitions),
    }


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std


def summarize(cfg: ExperimentConfig, outputs: list[dict]) -> dict:
    """Mean and std (n-1) of each round's gaps across seeds, plus a score."""
    T = cfg.training.T
    rounds = []
    for t in range(T):
        row = {"round": t + 1}
        for key in ("loss_gap", "acc_gap", "alpha", "m_tilde"):
            vals = [o["history"][t][key] for o in outputs]
            vals = [v for v in vals if v == v]
            mean, std = _mean_std(vals)
            row[f"mean_{key}"] = mean
            row[f"std_{key}"] = std
        rounds.append(row)
    final = [o["history"][-1]["acc_gap"] for o in outputs] if T else [0.0 for _ in outputs]
    mean, std = _mean_std(final)
    D_max = float(np.mean([o["heterogeneity"]["label_marginal"]["D_max"] for o in outputs]))
    score = None
    if T >= 1:
        alphas = [o["history"][-1]["alpha"] for o in outputs]
        first = [o["history"][0]["train_robust_loss"] for o in outputs]
        best = [min(h["train_robust_loss"] for h in o["history"] if h["train_robust_loss"] == h["train_robust_loss"])
                for o in outputs]
        delta = max(0.0, float(np.mean(first) - np.mean(best))) if all(x == x for x in first) else 1.0
        m_hat = cfg.aggregation_config().resolved_m_hat(cfg.data.m) if cfg.algo == "sfal" else 1
        inputs = BoundInputs(
            rho=cfg.attack.rho, T=T, m=cfg.data.m, n_min=min(o["n_min"] for o in outputs), K=cfg.training.K,
            Q=cfg.smoothing.Q, s=max(cfg.model_spec().hidden), gamma=cfg.smoothing.gamma,
            D_max=D_max, Delta=delta, alpha=float(np.mean(alphas)) if cfg.algo == "sfal" else 0.0, m_hat=m_hat,
        )
        score = bound_score(cfg.smoothing.method, cfg.algo, inputs)
    return {
        "seeds": [o["seed"] for o in outputs],
        "final_acc_gap": {"mean": mean, "std": std, "n": len(final), "values": final},
        "rounds": rounds,
        "D_max_label_marginal": D_max,
        "bound_score": score,
    }


def manifest(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.to_dict(), "version": __version__, "seeds": list(cfg.seeds),
            "csv_columns": list(CSV_COLUMNS)}


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, workers: int | None = None) -> dict:
    """Train every seed and write per-seed CSVs, summary, heterogeneity and
    manifest into ``out`` (default ``cfg.out``). Returns the summary."""
    out = Path(out if out is not None else cfg.out)
    raw = cfg.to_dict()
    outputs = parallel_map(_job, [(raw, s) for s in cfg.seeds], workers)
    for o in outputs:
        _write(out / f"seed_{o['seed']}.csv", o["csv"])
        _write(out / f"seed_{o['seed']}_history.json", _dump(o["history"]))
    summary = summarize(cfg, outputs)
    _write(out / "summary.json", _dump(summary))
    _write(out / "heterogeneity.json", _dump({str(o["seed"]): o["heterogeneity"] for o in outputs}))
    _write(out / "manifest.json", _dump(manifest(cfg) | {"data": {str(o["seed"]): o["data"] for o in outputs}}))
    return summary


# ---------------------------------------------------------------- sweeps

def parse_values(text: str) -> list:
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            vals.append(json.loads(tok))
        except json.JSONDecodeError:
            vals.append(tok)
    return vals


SWEEP_KEYS = {"rho": "attack.rho", "a": "data.a", "m": "data.m", "Q": "smoothing.Q",
              "gamma": "smoothing.gamma", "T": "training.T"}


def emit_trend(points: list[dict]) -> str:
    """Trend CSV from sweep points ``{x, method, algo, gaps}``.

    One row per (method, algo, x); std uses the n-1 denominator. Rows are
    sorted by series, then ascending x.
    """
    if len(points) < 2:
        raise ValueError("a trend needs at least two sweep points")
    n = {len(p["gaps"]) for p in points}
    if len(n) != 1:
        raise ValueError("sweep points have different seed counts")
    rows = []
    for p in points:
        mean, std = _mean_std(p["gaps"])
        rows.append((p["method"], p["algo"], float(p["x"]), mean, std, len(p["gaps"])))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TREND_COLUMNS)
    for method, algo, x, mean, std, cnt in rows:
        w.writerow([repr(x), method, algo, repr(mean), repr(std), cnt])
    return buf.getvalue()


def run_sweep(cfg: ExperimentConfig, key: str, values: list, out: str | Path | None = None,
              workers: int | None = None) -> str:
    """One run directory per value plus ``trend.csv``; returns the trend text."""
    out = Path(out if out is not None else cfg.out)
    dotted = SWEEP_KEYS.get(key, key)
    points = []
    for v in values:
        sub = cfg.with_overrides(**{dotted: v})
        summary = run_experiment(sub, out / f"{key}={v}", workers)
        points.append({"x": v, "method": sub.smoothing.method, "algo": sub.algo,
                       "gaps": summary["final_acc_gap"]["values"]})
    text = emit_trend(points)
    _write(out / "trend.csv", text)
    return text


# ---------------------------------------------------------------- stability

def stability_recipe(cfg: ExperimentConfig, test_set: Dataset):
    """Deterministic ``(dataset, partitions, seed) -> params`` training recipe."""
    def recipe(ds, parts, seed):
        fed, theta0, _, _ = build(cfg, seed, ds, parts, test_set)
        fed.eval_every = 0
        fed.test_set = None
        from .federation import run_round
        params, prev = theta0, None
        for t in range(cfg.training.T):
            params, rec = run_round(fed, params, t, prev)
            prev = rec.m_tilde
        return params
    return recipe


def run_stability(cfg: ExperimentConfig, client: int = 0, J: int = 3, R: int = 3,
                  replace: bool = True, data_seed: int | None = None):
    """On-average stability estimate on the config's task (data from the
    first seed unless ``data_seed`` is given; training seeds = cfg.seeds)."""
    data_seed = cfg.seeds[0] if data_seed is None else data_seed
    train_set, test_set = load_data(cfg, data_seed)
    parts = partition_skew(train_set, cfg.data.m, cfg.data.a, RngStream(data_seed, "partition"))
    return estimate_stability(stability_recipe(cfg, test_set), cfg.model_spec(), train_set, parts, client,
                              J=J, R=R, seeds=cfg.seeds, attack_cfg=cfg.attack_config(),
                              replace=replace, index_seed=data_seed)


__all__ = [
    "SeedResult", "build", "run_seed", "final_gap", "run_experiment", "run_sweep",
    "emit_trend", "run_stability", "stability_recipe", "summarize", "history_csv", "worker_count",
]
