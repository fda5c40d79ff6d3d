"""Full-ranking Recall@k / NDCG@k, ablation grid and hyperparameter sweeps."""
from __future__ import annotations

import csv
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import TrainConfig, normalize_keys
from .data import InteractionMatrix, normalize
from .errors import ConfigError
from .factorization import VARIANT_LABELS, VARIANTS
from .model import Checkpoint, inference_embeddings


def rank_items(user_vec, item_emb, mask=()) -> np.ndarray:
    """Items by descending dot-product score, ties by ascending index, masked items removed."""
    scores = np.asarray(item_emb, dtype=np.float64) @ np.asarray(user_vec, dtype=np.float64)
    scores[np.asarray(list(mask), dtype=np.int64)] = -np.inf
    order = np.argsort(-scores, kind="stable")
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(list(mask), dtype=np.int64)] = False
    return order[keep[order]]


def recall_at_k(ranking, relevant, k: int) -> float:
    """Fraction of relevant items in the top ``k``; NaN when nothing is relevant."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    relevant = set(int(x) for x in relevant)
    if not relevant:
        return math.nan
    hits = sum(1 for x in list(ranking)[:k] if int(x) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranking, relevant, k: int) -> float:
    """Binary-gain NDCG with the ideal DCG truncated at ``min(k, |relevant|)``; NaN when nothing is relevant."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    relevant = set(int(x) for x in relevant)
    if not relevant:
        return math.nan
    dcg = sum(1.0 / math.log2(i + 2) for i, x in enumerate(list(ranking)[:k]) if int(x) in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class MetricsReport:
    recall: dict
    ndcg: dict
    n_users: int
    split: str
    per_user: Optional[dict] = None
    config_hash: str = ""
    dataset: str = ""
    seed: Optional[int] = None
    runtime_s: float = 0.0

    def metrics(self) -> dict:
        out = {}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
        for k in sorted(self.ndcg):
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out

    def to_dict(self) -> dict:
        # wall-clock time is kept out so identical runs give identical bytes; it goes in the manifest
        return {
            "dataset": self.dataset,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "split": self.split,
            "n_users": self.n_users,
            "metrics": self.metrics(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class RankingEvaluator:
    """Precomputed masks and relevance sets for one split.

    Train items are masked for every split; the validation items are also
    masked when scoring the test split.
    """

    def __init__(self, matrix: InteractionMatrix, split: str = "test", chunk: int = 1024):
        if split not in ("valid", "test"):
            raise ConfigError(f"split must be 'valid' or 'test', got {split!r}")
        self.split = split
        self.chunk = chunk
        self.num_users, self.num_items = matrix.shape
        mask_splits = ["train"] + (["valid"] if split == "test" else [])
        mu, mi = [], []
        for s in mask_splits:
            u, i = matrix.pairs(s)
            mu.append(u)
            mi.append(i)
        self.mask_users = np.concatenate(mu)
        self.mask_items = np.concatenate(mi)
        ru, ri = matrix.pairs(split)
        self.rel_users = ru
        self.rel_items = ri
        self.n_relevant = np.bincount(ru, minlength=self.num_users)
        self.users = np.flatnonzero(self.n_relevant > 0)

    def evaluate_embeddings(self, user_out, item_out, ks: Sequence[int] = (10, 20),
                            per_user: bool = False) -> MetricsReport:
        ks = sorted(set(int(k) for k in ks))
        if not ks or ks[0] < 1:
            raise ConfigError(f"ks must be positive integers, got {ks}")
        if user_out.shape[0] != self.num_users or item_out.shape[0] != self.num_items:
            raise ConfigError(f"embeddings {user_out.shape[0]}x{item_out.shape[0]} do not match the "
                              f"dataset {self.num_users}x{self.num_items}")
        kmax = min(max(ks), self.num_items)
        discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
        cum_disc = np.concatenate([[0.0], np.cumsum(discounts)])
        recall = {k: np.zeros(len(self.users)) for k in ks}
        ndcg = {k: np.zeros(len(self.users)) for k in ks}

        for start in range(0, len(self.users), self.chunk):
            users = self.users[start : start + self.chunk]
            local = np.full(self.num_users, -1)
            local[users] = np.arange(len(users))
            scores = user_out[users] @ item_out.T
            sel = local[self.mask_users] >= 0
            scores[local[self.mask_users[sel]], self.mask_items[sel]] = -np.inf
            top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
            rel = np.zeros_like(scores, dtype=bool)
            sel = local[self.rel_users] >= 0
            rel[local[self.rel_users[sel]], self.rel_items[sel]] = True
            hits = np.take_along_axis(rel, top, axis=1)
            n_rel = self.n_relevant[users]
            for k in ks:
                kk = min(k, kmax)
                h = hits[:, :kk]
                recall[k][start : start + len(users)] = h.sum(axis=1) / n_rel
                dcg = (h * discounts[:kk]).sum(axis=1)
                ndcg[k][start : start + len(users)] = dcg / cum_disc[np.minimum(n_rel, kk)]

        report = MetricsReport(
            recall={k: float(np.mean(recall[k])) if len(self.users) else 0.0 for k in ks},
            ndcg={k: float(np.mean(ndcg[k])) if len(self.users) else 0.0 for k in ks},
            n_users=int(len(self.users)),
            split=self.split,
        )
        if per_user:
            report.per_user = {
                "users": self.users.tolist(),
                **{f"recall@{k}": recall[k].tolist() for k in ks},
                **{f"ndcg@{k}": ndcg[k].tolist() for k in ks},
            }
        return report


def evaluate(checkpoint: Checkpoint, matrix: InteractionMatrix, split: str = "test",
             ks: Sequence[int] = (10, 20), dataset_id: str = "", per_user: bool = False) -> MetricsReport:
    """Score a checkpoint with noise-free propagation and full ranking over all items."""
    started = time.perf_counter()
    if checkpoint.user_emb.shape[0] != matrix.num_users or checkpoint.item_emb.shape[0] != matrix.num_items:
        raise ConfigError(
            f"checkpoint is {checkpoint.user_emb.shape[0]} users x {checkpoint.item_emb.shape[0]} items, "
            f"dataset is {matrix.num_users} x {matrix.num_items}"
        )
    cfg = TrainConfig.from_dict(checkpoint.config)
    adj = normalize(matrix)
    eu, ei = inference_embeddings(adj, checkpoint.user_emb, checkpoint.item_emb, cfg.n_layers,
                                  cfg.activation, cfg.readout)
    report = RankingEvaluator(matrix, split).evaluate_embeddings(eu, ei, ks, per_user=per_user)
    report.config_hash = checkpoint.config_hash
    report.seed = cfg.seed
    report.dataset = dataset_id
    report.runtime_s = time.perf_counter() - started
    return report


# -- experiment grids ---------------------------------------------------------

@dataclass
class RunRecord:
    label: str
    overrides: dict
    config: TrainConfig
    report: MetricsReport
    best_epoch: int
    split_hash: str
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)


def _execute(matrix, configs, names, train_fn=None, dataset_id="", jobs=1, run_dir=None, sources=None,
             dataset=None, command=""):
    """Train each config, optionally in ``jobs`` worker processes; results keep the input order."""
    if train_fn is not None:
        return [train_fn(matrix, c) for c in configs]
    from .runs import run_point

    dirs = [None if run_dir is None else Path(run_dir) / n for n in names]
    args = [(matrix, c, dataset_id, d, sources, dataset, command) for c, d in zip(configs, dirs)]
    if jobs <= 1 or len(configs) <= 1:
        return [run_point(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_point, *a) for a in args]
        return [f.result() for f in futures]


def ablate(matrix: InteractionMatrix, base: TrainConfig, seeds: Optional[Iterable[int]] = None,
           variants: Sequence[str] = VARIANTS, train_fn=None, dataset_id: str = "", jobs: int = 1,
           run_dir=None, sources=None, dataset=None) -> list:
    """Train every factor variant on the same split; one record per (variant, seed)."""
    seeds = [base.seed] if seeds is None else list(seeds)
    split_hash = matrix.split_hash()
    points = []
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        for seed in seeds:
            points.append((variant, seed, base.with_overrides(variant=variant, seed=seed)))
    names = [f"{VARIANT_LABELS[v]}-seed{s}" for v, s, _ in points]
    grid_sources = {**(sources or {}), "variant": "grid"}
    if seeds != [base.seed]:
        grid_sources["seed"] = "grid"
    results = _execute(matrix, [c for _, _, c in points], names, train_fn, dataset_id, jobs, run_dir,
                       grid_sources, dataset, "ablate")
    return [RunRecord(VARIANT_LABELS[v], {"variant": v, "seed": s}, cfg, r.report, r.best_epoch, split_hash,
                      r.runtime_s) for (v, s, cfg), r in zip(points, results)]


def expand_grid(grid: dict, mode: str = "per-axis") -> list:
    """Override dicts for a sweep: one axis at a time, or the Cartesian product."""
    canonical = {}
    for key, values in grid.items():
        values = list(values)
        name = next(iter(normalize_keys({key: values[0]}))) if values else key
        if values and name in canonical:
            raise ConfigError(f"grid names {name!r} twice")
        canonical[name] = values
    grid = {k: v for k, v in canonical.items() if v}
    if not grid:
        return [{}]
    if mode == "per-axis":
        return [{k: v} for k, values in grid.items() for v in values]
    if mode == "cartesian":
        keys = list(grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    raise ConfigError(f"sweep mode must be 'per-axis' or 'cartesian', got {mode!r}")


def sweep(matrix: InteractionMatrix, base: TrainConfig, grid: dict, mode: str = "per-axis",
          train_fn=None, dataset_id: str = "", jobs: int = 1, run_dir=None, sources=None,
          dataset=None) -> list:
    """Train one run per grid point; identical resolved configs are trained once."""
    split_hash = matrix.split_hash()
    points = [(o, base.with_overrides(**o)) for o in expand_grid(grid, mode)]
    unique = {}
    for overrides, cfg in points:
        unique.setdefault(cfg.hash(), (overrides, cfg))
    keys = list(unique)
    grid_sources = {**(sources or {}), **{k: "grid" for k in grid_keys(grid)}}
    results = _execute(matrix, [unique[k][1] for k in keys], keys, train_fn, dataset_id, jobs, run_dir,
                       grid_sources, dataset, "sweep")
    done = dict(zip(keys, results))
    rows = []
    for overrides, cfg in points:
        result = done[cfg.hash()]
        label = ",".join(f"{k}={v}" for k, v in overrides.items()) or "base"
        rows.append(RunRecord(label, dict(overrides), cfg, result.report, result.best_epoch, split_hash,
                              result.runtime_s))
    return rows


def grid_keys(grid: dict) -> list:
    return [k for o in expand_grid(grid, "per-axis") for k in o]


def write_runs_csv(rows: Sequence[RunRecord], path) -> None:
    """One CSV row per run with its overrides, metrics and provenance."""
    override_keys = sorted({k for r in rows for k in r.overrides})
    metric_keys = sorted({k for r in rows for k in r.report.metrics()},
                         key=lambda s: (s.split("@")[0], int(s.split("@")[1])))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *override_keys, *metric_keys, "best_epoch", "split_hash", "config_hash"])
        for r in rows:
            m = r.report.metrics()
            w.writerow([r.label, *(r.overrides.get(k, "") for k in override_keys),
                        *(repr(m[k]) if k in m else "" for k in metric_keys),
                        r.best_epoch, r.split_hash, r.config.hash()])
