"""End-to-end training of the output-sparsity predictor.

The predictor decision ``p = step(U V a)`` has zero derivative almost
everywhere; gradients reach ``U`` and ``V`` through a straight-through
estimator that treats the step as ``clip(z, -1, 1)``, i.e. passes the
gradient unchanged where ``|z| < 1`` and blocks it elsewhere. An l1 penalty
on ``p`` (weight ``l1_lambda``) pushes scores down and raises the predicted
sparsity.

The truncated-SVD baseline keeps ``U V`` as the best rank-r approximation of
``W``, recomputed once per epoch and never trained.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, batches
from .model import ForwardCache, NetworkParams, NetworkSpec, forward_dense, forward_gated

log = logging.getLogger(__name__)


class PredictorMode(str, enum.Enum):
    END_TO_END = "end_to_end"
    SVD_STATIC = "svd_static"
    NONE = "none"


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, report: Optional[TrainReport] = None):
        super().__init__(msg)
        self.report = report


class SVDConvergenceError(RuntimeError):
    pass


@dataclass
class HyperParams:
    learning_rate: float = 0.1
    l1_lambda: float = 0.0
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    predictor_mode: PredictorMode = PredictorMode.END_TO_END
    # True: the l1 term presses every in-window score down; False: only
    # scores of units currently predicted active
    l1_penalize_all: bool = True
    # also back-propagate through the predictor branch U V a
    full_path_delta: bool = False

    def __post_init__(self):
        self.predictor_mode = PredictorMode(self.predictor_mode)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class Gradients:
    dW: List[np.ndarray]
    dU: List[Optional[np.ndarray]]
    dV: List[Optional[np.ndarray]]
    # error terms: d_act[l] = dl/d(input of layer l), d_score[l] = dl/dz, d_pre[l] = dl/d(W a)
    d_act: List[Optional[np.ndarray]] = field(default_factory=list)
    d_score: List[Optional[np.ndarray]] = field(default_factory=list)
    d_pre: List[Optional[np.ndarray]] = field(default_factory=list)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    ter: float
    sparsity: List[Optional[float]]


@dataclass
class TrainReport:
    mode: str
    epochs: List[EpochStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "epochs": [asdict(e) for e in self.epochs]}


@dataclass
class EvalResult:
    ter: float
    sparsity: Optional[List[Optional[float]]]


# -- loss ----------------------------------------------------------------------

def loss_and_delta(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    For a batch the loss is the mean and ``delta`` holds per-sample rows.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits")
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError(f"label out of range [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    loss = float(np.mean(logsum - shifted[rows, y]))
    delta = np.exp(shifted - logsum[:, None])
    delta[rows, y] -= 1.0
    return loss, delta[0] if single else delta


def l1_penalty(cache: ForwardCache, l1_lambda: float, penalize_all: bool = True) -> float:
    """Mean per-sample value of the regularizer whose gradient ``backward`` applies."""
    total = 0.0
    for p in cache.gates:
        if p is None:
            continue
        p2 = np.atleast_2d(p)
        total += float(np.sum(p2 if penalize_all else np.maximum(p2, 0.0))) / p2.shape[0]
    return l1_lambda * total


def objective(params: NetworkParams, x, labels, l1_lambda: float = 0.0,
              relaxed: bool = False, penalize_all: bool = True) -> float:
    cache = forward_gated(params, x, relaxed=relaxed)
    loss, _ = loss_and_delta(cache.logits, labels)
    return loss + l1_penalty(cache, l1_lambda, penalize_all)


# -- backward ------------------------------------------------------------------

def backward(params: NetworkParams, cache: ForwardCache, delta_L: np.ndarray,
             l1_lambda: float = 0.0, penalize_all: bool = True,
             full_path: bool = False) -> Gradients:
    """Gradients of the (batch-mean) loss for every W, U and V.

    ``cache`` must come from :func:`forward_gated` on the same parameters.
    With ``full_path`` the error reaching layer ``l`` also includes the
    predictor branch ``U V a``; otherwise only the ``W`` branch is used.
    """
    L = params.spec.num_layers
    if len(cache.inputs) != L:
        raise ValueError("cache does not match the network depth")
    for l in range(L):
        if cache.inputs[l].shape[-1] != params.W[l].shape[1] or cache.pre[l].shape[-1] != params.W[l].shape[0]:
            raise ValueError(f"stale cache: layer {l} shapes do not match the parameters")
    single = cache.inputs[0].ndim == 1
    batch = 1 if single else cache.inputs[0].shape[0]
    as2d = lambda v: np.atleast_2d(v)

    g = Gradients([None] * L, [None] * L, [None] * L,
                  [None] * (L + 1), [None] * L, [None] * L)
    delta = as2d(delta_L)
    g.d_act[L] = delta
    for l in range(L - 1, -1, -1):
        a = as2d(cache.inputs[l])
        if l == L - 1:
            d_pre = delta
        else:
            pre = as2d(cache.pre[l])
            p = cache.gates[l]
            if p is None:
                d_pre = delta * (pre > 0)
            else:
                p = as2d(p)
                z = as2d(cache.scores[l])
                a_ori = as2d(cache.a_ori[l])
                dp = delta * a_ori
                if l1_lambda:
                    dp = dp + (l1_lambda if penalize_all else l1_lambda * (p > 0))
                d_score = dp * (np.abs(z) < 1.0)
                d_pre = delta * p * (pre > 0)
                U, V = params.U[l], params.V[l]
                va = a @ V.T
                g.d_score[l] = d_score
                g.dU[l] = d_score.T @ va / batch
                g.dV[l] = (d_score @ U).T @ a / batch
        g.d_pre[l] = d_pre
        g.dW[l] = d_pre.T @ a / batch
        delta = d_pre @ params.W[l]
        if full_path and g.d_score[l] is not None:
            delta = delta + (g.d_score[l] @ params.U[l]) @ params.V[l]
        g.d_act[l] = delta
    if single:
        g.d_act = [None if d is None else d[0] for d in g.d_act]
        g.d_score = [None if t is None else t[0] for t in g.d_score]
        g.d_pre = [None if t is None else t[0] for t in g.d_pre]
    return g


def sgd_step(params: NetworkParams, grads: Gradients, lr: float, update_predictor: bool = True) -> None:
    for l in range(params.spec.num_layers):
        params.W[l] -= lr * grads.dW[l]
        if update_predictor and grads.dU[l] is not None:
            params.U[l] -= lr * grads.dU[l]
            params.V[l] -= lr * grads.dV[l]


# -- truncated SVD ---------------------------------------------------------------

def _round_robin(k: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint column pairs covering every pair once (circle method)."""
    players = list(range(k)) + ([-1] if k % 2 else [])
    n = len(players)
    rounds = []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            arr = np.array(pairs)
            rounds.append((arr[:, 0], arr[:, 1]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(A: np.ndarray, tol: float, max_sweeps: int) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi: orthogonalise the columns of A. Returns (A J, J)."""
    # columns are stored as contiguous rows so each round gathers whole rows
    Bt = np.ascontiguousarray(A.T)
    k = Bt.shape[0]
    Jt = np.eye(k)
    rounds = _round_robin(k)
    tiny = np.finfo(np.float64).tiny
    for _ in range(max_sweeps):
        rotated = False
        for P, Q in rounds:
            bp, bq = Bt[P], Bt[Q]
            alpha = np.einsum("ij,ij->i", bp, bp)
            beta = np.einsum("ij,ij->i", bq, bq)
            gam = np.einsum("ij,ij->i", bp, bq)
            need = np.abs(gam) > tol * np.sqrt(alpha * beta) + tiny
            if not need.any():
                continue
            rotated = True
            if not need.all():
                P, Q = P[need], Q[need]
                bp, bq = bp[need], bq[need]
                alpha, beta, gam = alpha[need], beta[need], gam[need]
            zeta = (beta - alpha) / (2.0 * gam)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            Bt[P] = c * bp - s * bq
            Bt[Q] = s * bp + c * bq
            jp, jq = Jt[P], Jt[Q]
            Jt[P] = c * jp - s * jq
            Jt[Q] = s * jp + c * jq
        if not rotated:
            return Bt.T, Jt.T
    raise SVDConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def svd(W: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``W = U diag(s) Vt`` with singular values in descending order."""
    W = np.asarray(W, dtype=np.float64)
    transposed = W.shape[0] < W.shape[1]
    A = W.T if transposed else W
    # QR first so the Jacobi sweeps only touch a k x k triangle
    Qf, R = np.linalg.qr(A)
    B, J = _jacobi_columns(R, tol, max_sweeps)
    s = np.linalg.norm(B, axis=0)
    order = np.argsort(-s, kind="stable")
    s, B, J = s[order], B[:, order], J[:, order]
    safe = np.where(s > 0, s, 1.0)
    left = (Qf @ B) / safe
    left[:, s == 0] = 0.0
    if transposed:
        return J, s, left.T
    return left, s, J.T


def truncated_svd(W: np.ndarray, r: int, tol: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """Rank-r factors ``(U_r diag(s_r), V_r^T)`` of ``W``."""
    m, n = W.shape
    if not 0 < r < min(m, n):
        raise ValueError(f"rank {r} must satisfy 0 < r < min({m}, {n})")
    Uf, s, Vt = svd(W, tol)
    return Uf[:, :r] * s[:r], Vt[:r].copy()


# -- initialisation, training loop, evaluation ----------------------------------

def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights; predictor factors start from the SVD of W."""
    rng = np.random.default_rng(seed)
    W, U, V = [], [], []
    for l in range(spec.num_layers):
        m, n = spec.layer_shape(l)
        bound = math.sqrt(6.0 / (m + n))
        W.append(rng.uniform(-bound, bound, size=(m, n)))
        if spec.has_predictor(l):
            u, v = truncated_svd(W[-1], spec.rank)
            U.append(u)
            V.append(v)
        else:
            U.append(None)
            V.append(None)
    return NetworkParams(spec, W, U, V)


def _view_without_predictors(params: NetworkParams) -> NetworkParams:
    # shares the W arrays, so in-place updates reach the caller's params
    spec = NetworkSpec(params.spec.layer_sizes)
    L = spec.num_layers
    return NetworkParams(spec, params.W, [None] * L, [None] * L)


def refresh_svd_predictors(params: NetworkParams) -> None:
    for l in sorted(params.spec.predictor_layers):
        params.U[l], params.V[l] = truncated_svd(params.W[l], params.spec.rank)


def evaluate(params: NetworkParams, ds: Dataset, mode: PredictorMode | str = PredictorMode.END_TO_END,
             chunk: int = 1000) -> EvalResult:
    """Test error rate in percent and per-layer predicted sparsity.

    With mode ``none`` the dense network is used and sparsity is absent.
    """
    mode = PredictorMode(mode)
    use_pred = mode != PredictorMode.NONE and bool(params.spec.predictor_layers)
    wrong = 0
    zero_bits = np.zeros(params.spec.num_layers)
    for i in range(0, len(ds), chunk):
        x, y = ds.images[i:i + chunk], ds.labels[i:i + chunk]
        cache = forward_gated(params, x) if use_pred else forward_dense(params, x)
        wrong += int(np.sum(np.argmax(cache.logits, axis=1) != y))
        if use_pred:
            for l in params.spec.predictor_layers:
                zero_bits[l] += np.sum(~cache.mask(l)) / cache.scores[l].shape[1]
    ter = 100.0 * wrong / len(ds)
    if not use_pred:
        return EvalResult(ter, None)
    sparsity = [float(zero_bits[l] / len(ds)) if params.spec.has_predictor(l) else None
                for l in range(params.spec.num_layers)]
    return EvalResult(ter, sparsity)


def train(params: NetworkParams, train_ds: Dataset, hyper: HyperParams,
          test_ds: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[EpochStats], None]] = None) -> TrainReport:
    """Minibatch SGD; updates ``params`` in place and returns per-epoch stats."""
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    mode = hyper.predictor_mode
    report = TrainReport(mode.value)
    net = params
    if mode == PredictorMode.NONE or not params.spec.predictor_layers:
        net = _view_without_predictors(params)
    update_uv = mode == PredictorMode.END_TO_END
    rng = np.random.default_rng(hyper.seed)
    eval_ds = test_ds if test_ds is not None else train_ds
    for epoch in range(hyper.epochs):
        if mode == PredictorMode.SVD_STATIC:
            refresh_svd_predictors(net)
        total, count = 0.0, 0
        for x, y in batches(train_ds, hyper.batch_size, rng):
            cache = forward_gated(net, x)
            try:
                loss, delta = loss_and_delta(cache.logits, y)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} in epoch {epoch}", report) from None
            loss += l1_penalty(cache, hyper.l1_lambda, hyper.l1_penalize_all)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", report)
            grads = backward(net, cache, delta, hyper.l1_lambda, hyper.l1_penalize_all,
                             hyper.full_path_delta)
            sgd_step(net, grads, hyper.learning_rate, update_predictor=update_uv)
            total += loss * len(y)
            count += len(y)
        ev = evaluate(net, eval_ds, mode)
        sparsity = ev.sparsity or [None] * params.spec.num_layers
        stats = EpochStats(epoch, total / count, ev.ter, sparsity)
        report.epochs.append(stats)
        log.info("epoch %d loss %.4f TER %.2f%% sparsity %s", epoch, stats.loss, stats.ter, sparsity)
        if on_epoch is not None:
            on_epoch(stats)
    return report
