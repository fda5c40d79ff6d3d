"""Low-rank views of the normalized adjacency: gradient-fitted MF and truncated SVD."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _blob
from .errors import ConfigError, NumericalError, RangeError
from .linalg import SparseMatrix, SvdResult, truncated_svd
from .optim import AdamState, adam_step

VARIANTS = ("full", "mf-only", "svd-only", "none")
VARIANT_LABELS = {"full": "HMFGCL", "mf-only": "HMFGCL-M", "svd-only": "HMFGCL-S", "none": "HMFGCL-R"}


@dataclass(frozen=True, eq=False)
class MfFactors:
    P: np.ndarray
    Q: np.ndarray
    final_loss: float
    iterations_run: int
    loss_trace: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def rank(self) -> int:
        return self.P.shape[1]


@dataclass(frozen=True)
class LowRankFactors:
    mf: Optional[MfFactors] = None
    svd: Optional[SvdResult] = None


def _matrix(adj) -> SparseMatrix:
    return adj.matrix if hasattr(adj, "matrix") else adj


def mf_factorize(adj, k: int, max_iters: int = 300, lr: float = 0.01, tol: float = 1e-5,
                 seed: int = 0, init: Optional[tuple] = None) -> MfFactors:
    """Fit ``P Q^T`` to the normalized adjacency by full-batch Adam on the squared Frobenius error.

    Factors start from a seeded standard Gaussian scaled by ``1/sqrt(k)``
    unless ``init=(P0, Q0)`` is given. Iteration stops after ``max_iters``
    steps or once the relative change of the loss falls below ``tol``.
    ``final_loss`` and ``loss_trace`` hold the squared Frobenius error.
    """
    a = _matrix(adj)
    m, n = a.shape
    if k < 1:
        raise RangeError(f"rank k must be >= 1, got {k}")
    if max_iters < 1 or lr <= 0:
        raise RangeError("max_iters must be >= 1 and lr > 0")
    if init is None:
        rng = np.random.default_rng(seed)
        p = rng.standard_normal((m, k)) / np.sqrt(k)
        q = rng.standard_normal((n, k)) / np.sqrt(k)
    else:
        p = np.array(init[0], dtype=np.float64)
        q = np.array(init[1], dtype=np.float64)
        if p.shape != (m, k) or q.shape != (n, k):
            raise RangeError(f"init shapes {p.shape}, {q.shape} do not match ({m},{k}), ({n},{k})")

    csr = a.to_scipy()
    csr_t = csr.T.tocsr()
    a_sq = float(a.data @ a.data)

    def loss_of(p, q, aq):
        # ||A||^2 - 2<A, PQ^T> + ||PQ^T||^2 with <A, PQ^T> = tr(P^T A Q)
        with np.errstate(over="ignore", invalid="ignore"):
            return a_sq - 2.0 * float(np.sum(p * aq)) + float(np.sum((p.T @ p) * (q.T @ q)))

    params = {"P": p, "Q": q}
    state = AdamState()
    trace = []
    aq = csr @ q
    loss = loss_of(p, q, aq)
    trace.append(loss)
    it = 0
    for it in range(1, max_iters + 1):
        atp = csr_t @ p
        with np.errstate(over="ignore", invalid="ignore"):
            grad_p = -2.0 * (aq - p @ (q.T @ q))
            grad_q = -2.0 * (atp - q @ (p.T @ p))
        adam_step(params, {"P": grad_p, "Q": grad_q}, state, lr)
        aq = csr @ q
        new = loss_of(p, q, aq)
        if not np.isfinite(new):
            raise NumericalError(f"MF diverged at iteration {it} (loss={new}); try a smaller lr than {lr}")
        trace.append(new)
        # only a small *decrease* counts; Adam overshoot can make the loss flat while rising
        done = 0.0 <= loss - new <= tol * max(abs(loss), 1e-300)
        loss = new
        if done:
            break
    # the expansion can undershoot zero by rounding
    return MfFactors(P=p, Q=q, final_loss=max(loss, 0.0), iterations_run=it, loss_trace=np.asarray(trace))


def svd_factorize(adj, q: int, seed: int = 0, oversample: int = 8, power_iters: int = 4) -> SvdResult:
    """Rank-``q`` truncated SVD of the normalized adjacency."""
    return truncated_svd(_matrix(adj), q, oversample=oversample, power_iters=power_iters, seed=seed)


class FactorCache:
    """Directory of cached factorizations keyed by dataset fingerprint and fit parameters."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _key(kind: str, params: dict) -> str:
        blob = json.dumps({"kind": kind, **params}, sort_keys=True).encode()
        return f"{kind}-{hashlib.sha256(blob).hexdigest()[:20]}.bin"

    def load(self, kind: str, params: dict):
        path = self.directory / self._key(kind, params)
        if not path.exists():
            return None
        header, payload = _blob.read(path)
        arrays = {}
        offset = 0
        for name, shape in header["arrays"]:
            size = int(np.prod(shape)) * 8
            arrays[name] = np.frombuffer(payload[offset : offset + size], dtype="<f8").reshape(shape).copy()
            offset += size
        if kind == "mf":
            return MfFactors(arrays["P"], arrays["Q"], header["final_loss"], header["iterations_run"],
                             arrays["trace"])
        return SvdResult(arrays["U"], arrays["S"], arrays["V"])

    def store(self, kind: str, params: dict, value) -> None:
        if kind == "mf":
            arrays = {"P": value.P, "Q": value.Q, "trace": value.loss_trace}
            extra = {"final_loss": value.final_loss, "iterations_run": value.iterations_run}
        else:
            arrays = {"U": value.U, "S": value.S, "V": value.V}
            extra = {}
        header = {"params": params, "arrays": [[k, list(v.shape)] for k, v in arrays.items()], **extra}
        payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
        _blob.write(self.directory / self._key(kind, params), header, payload)


def build_factors(adj, config, cache: Optional[FactorCache] = None) -> LowRankFactors:
    """Run the factorizations required by ``config.variant``."""
    variant = config.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    fingerprint = adj.fingerprint() if hasattr(adj, "fingerprint") else None
    mf = svd = None
    if variant in ("full", "mf-only"):
        params = {"data": fingerprint, "k": config.mf_rank, "iters": config.mf_iters,
                  "lr": config.mf_lr, "tol": config.mf_tol, "seed": config.seed}
        mf = cache.load("mf", params) if cache and fingerprint else None
        if mf is None:
            mf = mf_factorize(adj, config.mf_rank, config.mf_iters, config.mf_lr, config.mf_tol, config.seed)
            if cache and fingerprint:
                cache.store("mf", params, mf)
    if variant in ("full", "svd-only"):
        params = {"data": fingerprint, "q": config.svd_rank, "oversample": config.svd_oversample,
                  "power_iters": config.svd_power_iters, "seed": config.seed}
        svd = cache.load("svd", params) if cache and fingerprint else None
        if svd is None:
            svd = svd_factorize(adj, config.svd_rank, config.seed, config.svd_oversample, config.svd_power_iters)
            if cache and fingerprint:
                cache.store("svd", params, svd)
    return LowRankFactors(mf=mf, svd=svd)
