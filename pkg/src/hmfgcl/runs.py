"""Run directories: checkpoint, loss log, metrics and a manifest with content hashes."""
from __future__ import annotations

import datetime as _dt
import json
import sys
import time
from pathlib import Path
from typing import Optional

from ._blob import sha256_file
from .config import TrainConfig

CHECKPOINT = "checkpoint.bin"
LOSS_LOG = "loss.csv"
METRICS = "metrics.json"
VALID_METRICS = "metrics_valid.json"
MANIFEST = "manifest.json"


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def config_snapshot(config: TrainConfig, sources: Optional[dict] = None) -> dict:
    """Every resolved config value with where it came from (default, file, flag or grid)."""
    sources = sources or {}
    return {k: {"value": v, "source": sources.get(k, "default")} for k, v in config.to_dict().items()}


def write_manifest(path, command: str, *, config: Optional[TrainConfig] = None, sources=None,
                   outputs=(), started: Optional[str] = None, **extra) -> dict:
    """Write ``manifest.json``; every existing output file is listed with its sha256."""
    path = Path(path)
    manifest = {"command": command, "argv": list(sys.argv[1:])}
    if config is not None:
        manifest["config"] = config_snapshot(config, sources)
        manifest["config_hash"] = config.hash()
        manifest["seed"] = config.seed
    manifest.update(extra)
    manifest["outputs"] = {Path(p).name: sha256_file(p) for p in outputs if Path(p).exists()}
    manifest["started_at"] = started or now()
    manifest["finished_at"] = now()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return manifest


def run_point(matrix, config: TrainConfig, dataset_id: str = "", run_dir=None, sources=None,
              dataset: Optional[dict] = None, command: str = "train"):
    """Train one configuration; with ``run_dir`` every artifact and a manifest land there.

    On divergence the partial loss log and a manifest with ``status: diverged``
    are kept before the error propagates.
    """
    from .training import TrainingDiverged, train

    if run_dir is None:
        return train(matrix, config, dataset_id=dataset_id)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started, t0 = now(), time.perf_counter()
    files = [run_dir / n for n in (CHECKPOINT, LOSS_LOG, METRICS, VALID_METRICS)]
    common = dict(config=config, sources=sources, outputs=files, started=started, dataset=dataset)
    try:
        result = train(matrix, config, log_path=run_dir / LOSS_LOG, dataset_id=dataset_id)
    except TrainingDiverged as exc:
        write_manifest(run_dir / MANIFEST, command, status="diverged", error=str(exc),
                       last_finite_epoch=exc.last_finite_epoch, runtime_s=time.perf_counter() - t0, **common)
        raise
    result.checkpoint.save(run_dir / CHECKPOINT)
    (run_dir / METRICS).write_text(result.report.to_json(), encoding="utf-8")
    (run_dir / VALID_METRICS).write_text(result.valid_report.to_json(), encoding="utf-8")
    write_manifest(run_dir / MANIFEST, command, status="ok", best_epoch=result.best_epoch,
                   epochs_run=len(result.loss_log), runtime_s=result.runtime_s, **common)
    return result
