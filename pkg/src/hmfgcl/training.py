"""Losses, manual reverse-mode gradients, batching and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .config import TrainConfig
from .data import InteractionMatrix, normalize
from .errors import NumericalError, SamplingError
from .factorization import FactorCache, LowRankFactors, build_factors
from .linalg import spmm, spmm_t
from .model import (
    Checkpoint,
    EmbeddingState,
    ForwardTrace,
    _streams,
    forward_main,
    forward_views,
    init_embeddings,
    readout,
    readout_weights,
)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("epoch", "rec", "cl_user", "cl_item", "reg", "total", "valid_recall20")


@dataclass
class Batch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray  # (batch, S)


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    cl_user: float
    cl_item: float
    reg: float
    total: float

    @classmethod
    def combine(cls, rec, cl_user, cl_item, reg, cl_weight, reg_weight) -> "LossBreakdown":
        total = rec + cl_weight * (cl_user + cl_item) + reg_weight * reg
        return cls(float(rec), float(cl_user), float(cl_item), float(reg), float(total))


class TrainSampler:
    """Uniform (user, positive) draws from the train split with rejection-sampled negatives."""

    def __init__(self, matrix: InteractionMatrix, max_retries: int = 100):
        self.users, self.items = matrix.pairs("train")
        if len(self.users) == 0:
            raise SamplingError("train split is empty")
        self.num_items = matrix.num_items
        self.keys = np.unique(self.users * self.num_items + self.items)
        self.degree = np.bincount(self.users, minlength=matrix.num_users)
        self.user_keys = matrix.user_keys
        self.max_retries = max_retries

    def _is_positive(self, users, items) -> np.ndarray:
        keys = users * self.num_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def sample(self, batch_size: int, n_negatives: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, len(self.users), size=batch_size)
        users, positives = self.users[idx], self.items[idx]
        full = self.degree[users] >= self.num_items
        if np.any(full):
            u = int(users[np.argmax(full)])
            raise SamplingError(f"user {self.user_keys[u]!r} (index {u}) interacted with every item; "
                                "no negative exists")
        rep = np.repeat(users, n_negatives).reshape(batch_size, n_negatives)
        neg = rng.integers(0, self.num_items, size=(batch_size, n_negatives))
        bad = self._is_positive(rep, neg)
        for _ in range(self.max_retries):
            if not bad.any():
                break
            neg[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad = self._is_positive(rep, neg)
        if bad.any():
            u = int(rep[bad][0])
            raise SamplingError(f"could not draw a negative for user {self.user_keys[u]!r} "
                                f"after {self.max_retries} retries")
        return Batch(users, positives, neg)


def sample_batch(matrix, batch_size: int, n_negatives: int, rng: np.random.Generator) -> Batch:
    sampler = matrix if isinstance(matrix, TrainSampler) else TrainSampler(matrix)
    return sampler.sample(batch_size, n_negatives, rng)


# -- losses -----------------------------------------------------------------

def _as_pairs(scores_pos, scores_neg):
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if neg.ndim == pos.ndim:
        if neg.shape != pos.shape:
            raise ValueError(f"score shapes differ: {pos.shape} vs {neg.shape}")
        neg = neg[..., None]
    if neg.shape[0] != pos.shape[0]:
        raise ValueError(f"score lengths differ: {pos.shape} vs {neg.shape}")
    return pos, neg


def rec_loss_hinge(scores_pos, scores_neg) -> float:
    """Sum of ``max(0, 1 - pos + neg)``; ``scores_neg`` may carry S columns per positive."""
    pos, neg = _as_pairs(scores_pos, scores_neg)
    return float(np.maximum(0.0, 1.0 - pos[:, None] + neg).sum())


def rec_loss_hinge_grad(scores_pos, scores_neg):
    pos, neg = _as_pairs(scores_pos, scores_neg)
    active = ((1.0 - pos[:, None] + neg) > 0).astype(np.float64)  # subgradient 0 at the kink
    return -active.sum(axis=1), active


def rec_loss_bpr(scores_pos, scores_neg) -> float:
    """Sum of ``-log sigmoid(pos - neg)`` computed as ``softplus(neg - pos)``."""
    pos, neg = _as_pairs(scores_pos, scores_neg)
    return float(np.logaddexp(0.0, neg - pos[:, None]).sum())


def rec_loss_bpr_grad(scores_pos, scores_neg):
    pos, neg = _as_pairs(scores_pos, scores_neg)
    s = expit(neg - pos[:, None])
    return -s.sum(axis=1), s


REC_LOSSES = {
    "hinge": (rec_loss_hinge, rec_loss_hinge_grad),
    "bpr": (rec_loss_bpr, rec_loss_bpr_grad),
}


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return unit, norms


def infonce_layer(z, g, tau: float, with_grad: bool = True):
    """InfoNCE between row-aligned views with the other rows as negatives.

    Returns ``(loss, per_node_terms, dz, dg)``; zero-norm rows have cosine 0
    and receive zero gradient.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    for name, x in (("z", z), ("g", g)):
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise NumericalError(f"non-finite {name} at row {int(np.flatnonzero(bad)[0])}")
    zu, zn = _unit_rows(z)
    gu, gn = _unit_rows(g)
    logits = (zu @ gu.T) / tau
    # cosine logits never exceed 1/tau, so that bound is a safe softmax shift
    shift = 1.0 / tau
    expd = np.exp(logits - shift)
    rowsum = expd.sum(axis=1)
    lse = np.log(rowsum) + shift
    # the positive pair is in the denominator, so a term is >= 0 up to rounding
    terms = np.maximum(lse - np.diag(logits), 0.0)
    if not np.all(np.isfinite(terms)):
        bad = int(np.flatnonzero(~np.isfinite(terms))[0])
        raise NumericalError(f"non-finite InfoNCE term at row {bad}")
    loss = float(terms.sum())
    if not with_grad:
        return loss, terms, None, None
    dlogits = expd / rowsum[:, None]
    dlogits[np.diag_indices_from(dlogits)] -= 1.0
    dlogits /= tau
    dzu = dlogits @ gu
    dgu = dlogits.T @ zu

    def back(unit, norms, dunit):
        proj = np.sum(unit * dunit, axis=1, keepdims=True)
        return np.divide(dunit - unit * proj, norms, out=np.zeros_like(dunit), where=norms > 0)

    return loss, terms, back(zu, zn, dzu), back(gu, gn, dgu)


def infonce(z_layers, g_layers, nodes, tau: float) -> float:
    """Contrastive loss summed over layers ``0..L`` and the given node rows."""
    if len(z_layers) != len(g_layers):
        raise ValueError("z and g layer lists must be aligned")
    nodes = np.asarray(nodes)
    total = 0.0
    for layer, (z, g) in enumerate(zip(z_layers, g_layers)):
        try:
            total += infonce_layer(z[nodes], g[nodes], tau, with_grad=False)[0]
        except NumericalError as exc:
            raise NumericalError(f"layer {layer}: {exc}") from exc
    return total


def touched_rows(batch: Batch):
    return np.unique(batch.users), np.unique(np.concatenate([batch.positives, batch.negatives.ravel()]))


def l2_reg(user_emb, item_emb, batch: Batch) -> float:
    """Squared L2 norm of the embedding-table rows the batch touches (each row once)."""
    users, items = touched_rows(batch)
    return float(np.sum(user_emb[users] ** 2) + np.sum(item_emb[items] ** 2))


# -- backward ----------------------------------------------------------------

@dataclass
class GradSeeds:
    """Upstream gradients entering the forward graph.

    ``readout_*`` are gradients w.r.t. the readout embeddings; ``z_*``/``g_*``
    map layer index to gradients w.r.t. that main-view / contrastive-view layer.
    """

    readout_user: Optional[np.ndarray] = None
    readout_item: Optional[np.ndarray] = None
    z_user: dict = field(default_factory=dict)
    z_item: dict = field(default_factory=dict)
    g_user: dict = field(default_factory=dict)
    g_item: dict = field(default_factory=dict)


def _fuse_backward(mf, svd, grad, mode):
    if mf is None:
        return None, grad
    if svd is None:
        return grad, None
    if mode == "hadamard":
        return grad * svd, grad * mf
    if mode == "sum":
        return grad, grad
    return 0.5 * grad, 0.5 * grad


def backward(trace: ForwardTrace, seeds: GradSeeds, readout_mode: str = "sum"):
    """Gradients w.r.t. the layer-0 tables, treating noise, adjacency and factors as constants."""
    n_layers = trace.n_layers
    if len(trace.pre_user) != n_layers + 1:
        raise AssertionError("forward trace does not cover every layer")
    a, act = trace.adj, trace.activation
    m, n = a.shape

    def zeros(rows, like):
        return np.zeros((rows, like.shape[1]))

    ref = next(x for x in (seeds.readout_user, *seeds.z_user.values(), *seeds.g_user.values(),
                           seeds.readout_item, *seeds.z_item.values(), *seeds.g_item.values())
               if x is not None)
    weights = readout_weights(readout_mode, n_layers)
    gzu = [zeros(m, ref) for _ in range(n_layers + 1)]
    gzi = [zeros(n, ref) for _ in range(n_layers + 1)]
    for layer in range(n_layers + 1):
        if seeds.readout_user is not None and weights[layer]:
            gzu[layer] += weights[layer] * seeds.readout_user
        if seeds.readout_item is not None and weights[layer]:
            gzi[layer] += weights[layer] * seeds.readout_item
    for layer, g in seeds.z_user.items():
        gzu[layer] += g
    for layer, g in seeds.z_item.items():
        gzi[layer] += g
    # contrastive view layer 0 is the table itself
    if 0 in seeds.g_user:
        gzu[0] += seeds.g_user[0]
    if 0 in seeds.g_item:
        gzi[0] += seeds.g_item[0]
    has_views = bool(trace.view_user) and any(l > 0 for l in (*seeds.g_user, *seeds.g_item))
    if has_views and len(trace.view_user) != n_layers + 1:
        raise AssertionError("view gradients supplied but the trace has no view layers")

    for layer in range(n_layers, 0, -1):
        if has_views:
            if layer in seeds.g_user:
                mf, svd, pre = trace.view_user[layer]
                gm, gs = _fuse_backward(mf, svd, seeds.g_user[layer] * act.grad(pre), trace.fusion)
                # adjoint of the user-side low-rank products is the item-side product
                gzi[layer - 1] += _stream_adjoint(gm, gs, trace.factors, "item")
            if layer in seeds.g_item:
                mf, svd, pre = trace.view_item[layer]
                gm, gs = _fuse_backward(mf, svd, seeds.g_item[layer] * act.grad(pre), trace.fusion)
                gzu[layer - 1] += _stream_adjoint(gm, gs, trace.factors, "user")
        gpre_u = gzu[layer] * act.grad(trace.pre_user[layer])
        gpre_i = gzi[layer] * act.grad(trace.pre_item[layer])
        gzi[layer - 1] += spmm_t(a, gpre_u)
        gzu[layer - 1] += spmm(a, gpre_i)
    return gzu[0], gzi[0]


def _stream_adjoint(gm, gs, factors: LowRankFactors, side: str):
    """Apply the ``side`` low-rank products to the stream gradients and add them."""
    out = 0.0
    if gm is not None:
        out = out + _streams(LowRankFactors(mf=factors.mf), gm, side)[0]
    if gs is not None:
        out = out + _streams(LowRankFactors(svd=factors.svd), gs, side)[1]
    return out


# -- one optimization step -------------------------------------------------

@dataclass
class StepResult:
    losses: LossBreakdown
    grad_user: np.ndarray
    grad_item: np.ndarray
    state: EmbeddingState


def loss_and_grad(user_emb, item_emb, adj, factors: LowRankFactors, batch: Batch, config: TrainConfig,
                  rng: Optional[np.random.Generator] = None) -> StepResult:
    """Forward both views, evaluate the composite loss and backpropagate to the tables."""
    state = EmbeddingState(user_emb, item_emb)
    noise = config.noise if config.noise_eps > 0 else None
    state, trace = forward_main(adj, state, config.n_layers, noise, rng, config.activation)
    with_views = config.variant != "none"
    if with_views:
        state = forward_views(factors, state, config.n_layers, config.activation, config.fusion,
                              config.variant, trace)
    eu, ei = readout(state, config.readout)
    d = eu.shape[1]

    users, pos, neg = batch.users, batch.positives, batch.negatives
    eu_b = eu[users]
    s_pos = np.einsum("bd,bd->b", eu_b, ei[pos])
    s_neg = np.einsum("bd,bsd->bs", eu_b, ei[neg])
    loss_fn, grad_fn = REC_LOSSES[config.rec_loss]
    rec = loss_fn(s_pos, s_neg)
    d_pos, d_neg = grad_fn(s_pos, s_neg)

    d_eu = np.zeros_like(eu)
    d_ei = np.zeros_like(ei)
    np.add.at(d_eu, users, d_pos[:, None] * ei[pos] + np.einsum("bs,bsd->bd", d_neg, ei[neg]))
    np.add.at(d_ei, pos, d_pos[:, None] * eu_b)
    np.add.at(d_ei, neg.ravel(), (d_neg[:, :, None] * eu_b[:, None, :]).reshape(-1, d))
    seeds = GradSeeds(readout_user=d_eu, readout_item=d_ei)

    cl_user = cl_item = 0.0
    if with_views:
        m, n = eu.shape[0], ei.shape[0]
        if config.cl_scope == "full":
            nodes_u, nodes_i = np.arange(m), np.arange(n)
        else:
            nodes_u, nodes_i = np.unique(users), np.unique(pos)
        lam = config.cl_weight
        for layer in range(config.n_layers + 1):
            for side, nodes, z_l, g_l, zs, gs in (
                ("user", nodes_u, state.z_user, state.g_user, seeds.z_user, seeds.g_user),
                ("item", nodes_i, state.z_item, state.g_item, seeds.z_item, seeds.g_item),
            ):
                try:
                    val, _, dz, dg = infonce_layer(z_l[layer][nodes], g_l[layer][nodes], config.temperature)
                except NumericalError as exc:
                    raise NumericalError(f"{side} InfoNCE, layer {layer}: {exc}") from exc
                if side == "user":
                    cl_user += val
                else:
                    cl_item += val
                if lam:
                    rows = z_l[layer].shape[0]
                    gz = np.zeros((rows, d))
                    gg = np.zeros((rows, d))
                    gz[nodes] = lam * dz
                    gg[nodes] = lam * dg
                    zs[layer] = zs.get(layer, 0) + gz
                    gs[layer] = gs.get(layer, 0) + gg

    grad_u, grad_i = backward(trace, seeds, config.readout)

    ru, ri = touched_rows(batch)
    reg = float(np.sum(user_emb[ru] ** 2) + np.sum(item_emb[ri] ** 2))
    if config.reg_weight:
        grad_u[ru] += 2.0 * config.reg_weight * user_emb[ru]
        grad_i[ri] += 2.0 * config.reg_weight * item_emb[ri]

    losses = LossBreakdown.combine(rec, cl_user, cl_item, reg, config.cl_weight, config.reg_weight)
    if not math.isfinite(losses.total):
        raise NumericalError(f"non-finite loss {losses}")
    return StepResult(losses, grad_u, grad_i, state)


# -- epoch loop -------------------------------------------------------------

class TrainingDiverged(NumericalError):
    def __init__(self, message, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


@dataclass
class EpochLog:
    epoch: int
    rec: float
    cl_user: float
    cl_item: float
    reg: float
    total: float
    valid_recall20: float

    def row(self) -> list:
        return [self.epoch, *(repr(float(getattr(self, c))) for c in LOSS_LOG_COLUMNS[1:])]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list
    report: object  # MetricsReport on the test split
    best_epoch: int
    valid_report: object = None
    runtime_s: float = 0.0


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_COLUMNS)
        for r in rows:
            w.writerow(r.row())


def train(matrix: InteractionMatrix, config: TrainConfig, *, log_path=None,
          factors: Optional[LowRankFactors] = None, cache: Optional[FactorCache] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None, dataset_id: str = "") -> TrainResult:
    """Train embeddings with early stopping on the validation metric.

    When ``log_path`` is given the loss log is appended to it epoch by epoch,
    so it survives a divergence. Returns the best-validation checkpoint and
    its test-split metrics.
    """
    from .evaluation import RankingEvaluator

    started = time.perf_counter()
    adj = normalize(matrix)
    if factors is None:
        factors = build_factors(adj, config, cache)
    state = init_embeddings(matrix.num_users, matrix.num_items, config.embedding_size, config.seed)
    params = {"user": state.user_emb, "item": state.item_emb}
    opt = AdamState()
    sampler = TrainSampler(matrix)
    batch_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    n_train = len(sampler.users)
    n_batches = math.ceil(n_train / config.batch_size)

    valid_eval = RankingEvaluator(matrix, "valid")
    metric_name, _, metric_k = config.valid_metric.partition("@")
    ks = sorted({20, int(metric_k)})

    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_LOG_COLUMNS)
        fh.flush()

    history = []
    best = (-1.0, 0, None, None)
    since_best = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            sums = np.zeros(5)
            for _ in range(n_batches):
                batch = sampler.sample(config.batch_size, config.n_negatives, batch_rng)
                try:
                    # overflow is caught by the explicit finiteness checks below
                    with np.errstate(over="ignore", invalid="ignore"):
                        step = loss_and_grad(params["user"], params["item"], adj, factors, batch, config,
                                             noise_rng)
                except NumericalError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch - 1) from exc
                adam_step(params, {"user": step.grad_user, "item": step.grad_item}, opt, config.lr)
                l = step.losses
                sums += (l.rec, l.cl_user, l.cl_item, l.reg, l.total)
            if not (np.all(np.isfinite(params["user"])) and np.all(np.isfinite(params["item"]))):
                raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite", epoch - 1)
            eu, ei = _inference(adj, params, config)
            report = valid_eval.evaluate_embeddings(eu, ei, ks)
            score = getattr(report, metric_name)[int(metric_k)]
            means = sums / n_batches
            entry = EpochLog(epoch, *means, valid_recall20=report.recall[20])
            history.append(entry)
            if fh is not None:
                writer.writerow(entry.row())
                fh.flush()
            if on_epoch is not None:
                on_epoch(entry)
            log.info("epoch %d total=%.4f rec=%.4f cl=%.4f/%.4f valid %s=%.4f", epoch, entry.total,
                     entry.rec, entry.cl_user, entry.cl_item, config.valid_metric, score)
            if score > best[0]:
                best = (score, epoch, params["user"].copy(), params["item"].copy())
                since_best = 0
            else:
                since_best += 1
                if config.patience and since_best >= config.patience:
                    break
    finally:
        if fh is not None:
            fh.close()

    _, best_epoch, bu, bi = best
    ckpt = Checkpoint(bu, bi, config.to_dict(), best_epoch)
    test_eval = RankingEvaluator(matrix, "test")
    eu, ei = _inference(adj, {"user": bu, "item": bi}, config)
    report = test_eval.evaluate_embeddings(eu, ei, config.eval_ks)
    valid_report = valid_eval.evaluate_embeddings(eu, ei, config.eval_ks)
    runtime = time.perf_counter() - started
    for r in (report, valid_report):
        r.config_hash = config.hash()
        r.seed = config.seed
        r.dataset = dataset_id
        r.runtime_s = runtime
    return TrainResult(ckpt, history, report, best_epoch, valid_report, runtime)


def _inference(adj, params, config):
    from .model import inference_embeddings

    return inference_embeddings(adj, params["user"], params["item"], config.n_layers,
                                config.activation, config.readout)
