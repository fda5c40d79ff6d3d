"""Forward computation: embedding tables, mixed noise, noisy propagation and factor-fused views.

All tensors are dense ``float64`` arrays; the adjacency is a ``SparseMatrix``
of shape (users, items). Layer lists are indexed ``0..L`` with layer 0 the
trainable tables themselves.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _blob
from .errors import ConfigError, NumericalError, ParseError
from .factorization import LowRankFactors
from .linalg import SparseMatrix, spmm, spmm_t

LEAKY_SLOPE = 0.5
FUSION_MODES = ("hadamard", "sum", "mean")
READOUT_MODES = ("sum", "mean", "last")


@dataclass(frozen=True)
class Activation:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]  # derivative evaluated at the pre-activation


ACTIVATIONS = {
    "identity": Activation("identity", lambda x: x, lambda x: np.ones_like(x)),
    "leaky_relu": Activation(
        "leaky_relu",
        lambda x: np.where(x > 0, x, LEAKY_SLOPE * x),
        lambda x: np.where(x > 0, 1.0, LEAKY_SLOPE),
    ),
}


def get_activation(name) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


@dataclass(frozen=True)
class NoiseSpec:
    epsilon: float = 0.1
    uniform_weight: float = 0.2
    gaussian_weight: float = 0.8

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"noise epsilon must be >= 0, got {self.epsilon}")
        w1, w2 = self.uniform_weight, self.gaussian_weight
        if not (0 <= w1 <= 1 and 0 <= w2 <= 1) or abs(w1 + w2 - 1) > 1e-9:
            raise ConfigError(f"noise mix weights must lie in [0,1] and sum to 1, got ({w1}, {w2})")


@dataclass
class EmbeddingState:
    user_emb: np.ndarray
    item_emb: np.ndarray
    z_user: list = field(default_factory=list)
    z_item: list = field(default_factory=list)
    g_user: list = field(default_factory=list)
    g_item: list = field(default_factory=list)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.user_emb.shape[0], self.item_emb.shape[0], self.user_emb.shape[1])


@dataclass
class ForwardTrace:
    """Intermediates kept for the manual backward pass.

    ``pre_*[l]`` is the pre-activation of main-view layer ``l`` (index 0
    unused). ``view_*[l]`` holds ``(mf_stream, svd_stream, pre_activation)``
    for contrastive-view layer ``l``; streams are ``None`` when absent.
    """

    adj: SparseMatrix
    n_layers: int
    activation: Activation
    pre_user: list = field(default_factory=list)
    pre_item: list = field(default_factory=list)
    noise_user: list = field(default_factory=list)
    noise_item: list = field(default_factory=list)
    factors: Optional[LowRankFactors] = None
    variant: Optional[str] = None
    fusion: Optional[str] = None
    view_user: list = field(default_factory=list)
    view_item: list = field(default_factory=list)


def init_embeddings(num_users: int, num_items: int, dim: int, seed: int = 0) -> EmbeddingState:
    """Xavier-uniform tables with bound ``sqrt(6 / (2 * dim))``."""
    if dim < 1:
        raise ConfigError(f"embedding size must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (dim + dim))
    return EmbeddingState(
        user_emb=rng.uniform(-bound, bound, size=(num_users, dim)),
        item_emb=rng.uniform(-bound, bound, size=(num_items, dim)),
    )


def draw_noise(shape, spec: NoiseSpec, rng: np.random.Generator, rescale: bool = True) -> np.ndarray:
    """Mixed uniform/Gaussian noise, one row per node.

    Each row is ``w * (a * U(0,1) + b * N(0,1))`` with ``w ~ U(0,1)``
    elementwise, then scaled to L2 norm ``spec.epsilon``. Draw order is
    ``w``, uniform, Gaussian, so a seeded generator reproduces the raw rows.
    """
    shape = tuple(shape)
    omega = rng.random(shape)
    uni = rng.random(shape)
    gauss = rng.standard_normal(shape)
    raw = omega * (spec.uniform_weight * uni + spec.gaussian_weight * gauss)
    if not rescale:
        return raw
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    scale = np.divide(spec.epsilon, norms, out=np.zeros_like(norms), where=norms > 0)
    return raw * scale


def _check_finite(x: np.ndarray, what: str, layer: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what} at layer {layer}")


def forward_main(adj, state: EmbeddingState, n_layers: int, spec: Optional[NoiseSpec] = None,
                 rng: Optional[np.random.Generator] = None, activation="identity"):
    """Noisy alternating propagation over the bipartite graph.

    ``z_user[l] = act(A (z_item[l-1] + noise))`` and
    ``z_item[l] = act(A^T (z_user[l-1] + noise))``, fresh noise per layer.
    Noise is skipped when ``spec`` is ``None`` or has zero epsilon.
    """
    a = adj.matrix if hasattr(adj, "matrix") else adj
    act = get_activation(activation)
    if n_layers < 1:
        raise ConfigError(f"need at least one layer, got {n_layers}")
    m, n, d = state.dims
    if a.shape != (m, n):
        raise ConfigError(f"adjacency {a.shape} does not match embeddings ({m}, {n})")
    noisy = spec is not None and spec.epsilon > 0
    if noisy and rng is None:
        raise ConfigError("a random generator is required when noise is enabled")

    trace = ForwardTrace(adj=a, n_layers=n_layers, activation=act,
                         pre_user=[None], pre_item=[None], noise_user=[None], noise_item=[None])
    zu, zi = [state.user_emb], [state.item_emb]
    for layer in range(1, n_layers + 1):
        item_in, user_in = zi[-1], zu[-1]
        nu = ni = None
        if noisy:
            ni = draw_noise((n, d), spec, rng)
            nu = draw_noise((m, d), spec, rng)
            item_in = item_in + ni
            user_in = user_in + nu
        pre_u = spmm(a, item_in)
        pre_i = spmm_t(a, user_in)
        _check_finite(pre_u, "user propagation", layer)
        _check_finite(pre_i, "item propagation", layer)
        trace.pre_user.append(pre_u)
        trace.pre_item.append(pre_i)
        trace.noise_user.append(nu)
        trace.noise_item.append(ni)
        zu.append(act.fn(pre_u))
        zi.append(act.fn(pre_i))
    return replace(state, z_user=zu, z_item=zi), trace


def _check_variant(factors: LowRankFactors, variant: str) -> None:
    need_mf = variant in ("full", "mf-only")
    need_svd = variant in ("full", "svd-only")
    if variant not in ("full", "mf-only", "svd-only", "none"):
        raise ConfigError(f"unknown variant {variant!r}")
    if (need_mf and factors.mf is None) or (need_svd and factors.svd is None):
        raise ConfigError(f"variant {variant!r} needs factors that were not built")


def fuse(mf_stream, svd_stream, mode: str):
    if mf_stream is None:
        return svd_stream
    if svd_stream is None:
        return mf_stream
    if mode == "hadamard":
        return mf_stream * svd_stream
    if mode == "sum":
        return mf_stream + svd_stream
    if mode == "mean":
        return 0.5 * (mf_stream + svd_stream)
    raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


def _streams(factors: LowRankFactors, x: np.ndarray, side: str):
    """Low-rank propagation of ``x`` via the MF and SVD reconstructions (never densified)."""
    mf = svd = None
    if factors.mf is not None:
        p, q = factors.mf.P, factors.mf.Q
        mf = p @ (q.T @ x) if side == "user" else q @ (p.T @ x)
    if factors.svd is not None:
        u, s, v = factors.svd.U, factors.svd.S, factors.svd.V
        svd = u @ (s[:, None] * (v.T @ x)) if side == "user" else v @ (s[:, None] * (u.T @ x))
    return mf, svd


def forward_views(factors: LowRankFactors, state: EmbeddingState, n_layers: int, activation="identity",
                  fusion: str = "hadamard", variant: str = "full", trace: Optional[ForwardTrace] = None):
    """Contrastive views from the main-view layers.

    Layer ``l`` of the user view fuses ``P~ Q~^T z_item[l-1]`` with
    ``P^ S^ Q^^T z_item[l-1]`` (items use the transposed products); layer 0
    is the embedding table. Returns the state with ``g_*`` filled, or
    unchanged when the variant has no views.
    """
    if variant == "none":
        return replace(state, g_user=[], g_item=[])
    _check_variant(factors, variant)
    if fusion not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion!r}; expected one of {FUSION_MODES}")
    used = LowRankFactors(mf=factors.mf if variant != "svd-only" else None,
                          svd=factors.svd if variant != "mf-only" else None)
    act = get_activation(activation)
    gu, gi = [state.user_emb], [state.item_emb]
    if trace is not None:
        trace.factors, trace.variant, trace.fusion = used, variant, fusion
        trace.view_user, trace.view_item = [None], [None]
    for layer in range(1, n_layers + 1):
        mu, su = _streams(used, state.z_item[layer - 1], "user")
        mi, si = _streams(used, state.z_user[layer - 1], "item")
        pre_u = fuse(mu, su, fusion)
        pre_i = fuse(mi, si, fusion)
        _check_finite(pre_u, "user view", layer)
        _check_finite(pre_i, "item view", layer)
        gu.append(act.fn(pre_u))
        gi.append(act.fn(pre_i))
        if trace is not None:
            trace.view_user.append((mu, su, pre_u))
            trace.view_item.append((mi, si, pre_i))
    return replace(state, g_user=gu, g_item=gi)


def readout(state: EmbeddingState, mode: str = "sum") -> tuple[np.ndarray, np.ndarray]:
    """Combine main-view layers ``0..L`` into final user/item embeddings."""
    if not state.z_user:
        raise ConfigError("readout needs propagated layers; run forward_main first")
    if mode == "sum":
        return np.sum(state.z_user, axis=0), np.sum(state.z_item, axis=0)
    if mode == "mean":
        return np.mean(state.z_user, axis=0), np.mean(state.z_item, axis=0)
    if mode == "last":
        return state.z_user[-1], state.z_item[-1]
    raise ConfigError(f"unknown readout mode {mode!r}; expected one of {READOUT_MODES}")


def readout_weights(mode: str, n_layers: int) -> list[float]:
    """Coefficient of each layer in the readout (used by the backward pass)."""
    if mode == "sum":
        return [1.0] * (n_layers + 1)
    if mode == "mean":
        return [1.0 / (n_layers + 1)] * (n_layers + 1)
    if mode == "last":
        return [0.0] * n_layers + [1.0]
    raise ConfigError(f"unknown readout mode {mode!r}; expected one of {READOUT_MODES}")


def predict(user_vec, item_vec) -> float:
    return float(np.dot(user_vec, item_vec))


def inference_embeddings(adj, user_emb, item_emb, n_layers: int, activation="identity", mode="sum"):
    """Noise-free readout used for ranking."""
    state, _ = forward_main(adj, EmbeddingState(user_emb, item_emb), n_layers, None, None, activation)
    return readout(state, mode)


@dataclass(eq=False)
class Checkpoint:
    user_emb: np.ndarray
    item_emb: np.ndarray
    config: dict
    epoch: int = 0

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_bytes(self) -> bytes:
        m, d = self.user_emb.shape
        header = {
            "format": "embedding-checkpoint/1",
            "num_users": m,
            "num_items": self.item_emb.shape[0],
            "dim": d,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "config": self.config,
        }
        payload = (np.ascontiguousarray(self.user_emb, dtype="<f8").tobytes()
                   + np.ascontiguousarray(self.item_emb, dtype="<f8").tobytes())
        return _blob.dumps(header, payload)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            header, payload = _blob.read(path)
            if header.get("format") != "embedding-checkpoint/1":
                raise ValueError(f"unexpected format {header.get('format')!r}")
            m, n, d = header["num_users"], header["num_items"], header["dim"]
            arr = np.frombuffer(payload, dtype="<f8")
            if arr.size != (m + n) * d:
                raise ValueError(f"payload has {arr.size} values, expected {(m + n) * d}")
        except (ValueError, KeyError) as exc:
            raise ParseError(f"corrupt checkpoint: {exc}", path) from exc
        return cls(arr[: m * d].reshape(m, d).copy(), arr[m * d :].reshape(n, d).copy(),
                   header["config"], header.get("epoch", 0))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
