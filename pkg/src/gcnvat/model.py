"""Two-layer graph convolutional network with hand-derived gradients.

The forward pass is

    Z = softmax(S),  S = A_hat @ H @ W1,  H = dropout(relu(A_hat @ M @ W0))

where A_hat is the normalized adjacency and M is the effective input
(features plus an optional perturbation). All gradients, with respect to
the weights and with respect to M, are reverse-mode by hand; there is no
autodiff anywhere in the package.

Supported scalar losses:

  * "supervised": mean cross entropy over a labeled node set,
    -(1/|L|) sum_l log Z[l, y_l]
  * "kl": mean KL(p_fixed || Z) over a node set, with p_fixed held
    constant (no gradient flows into it)

Both use the mean over their node set so the regularization coefficient
keeps a stable meaning across label rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NormalizedAdjacency
from .sparse import SparseMatrix

PROB_FLOOR = 1e-12  # clamp inside logarithms; saturated softmax stays finite

LOSS_KINDS = ("supervised", "kl")


@dataclass(frozen=True, eq=False)
class GcnParams:
    """Input-to-hidden and hidden-to-output weight matrices."""

    w0: np.ndarray  # F x H
    w1: np.ndarray  # H x C

    def __post_init__(self):
        object.__setattr__(self, "w0", np.asarray(self.w0, dtype=np.float64))
        object.__setattr__(self, "w1", np.asarray(self.w1, dtype=np.float64))

    @property
    def hidden(self) -> int:
        return self.w0.shape[1]

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.w0)) and np.all(np.isfinite(self.w1)))


def glorot_params(num_features: int, hidden: int, num_classes: int, rng: np.random.Generator) -> GcnParams:
    """Uniform Glorot-style init, range +-sqrt(6 / (fan_in + fan_out))."""
    b0 = np.sqrt(6.0 / (num_features + hidden))
    b1 = np.sqrt(6.0 / (hidden + num_classes))
    return GcnParams(
        rng.uniform(-b0, b0, size=(num_features, hidden)),
        rng.uniform(-b1, b1, size=(hidden, num_classes)),
    )


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Intermediates of one forward pass, enough to run any backward pass."""

    input: SparseMatrix | np.ndarray  # effective feature matrix actually used
    pre_activation: np.ndarray  # n x H, before relu
    hidden: np.ndarray  # n x H, relu output after dropout scaling
    dropout_mask: np.ndarray | None  # 0/1 mask, None for deterministic passes
    keep_prob: float
    logits: np.ndarray  # n x C
    probs: np.ndarray  # n x C, row softmax of logits
    a_hat: NormalizedAdjacency
    params: GcnParams

    @property
    def num_nodes(self) -> int:
        return self.logits.shape[0]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _dot(x, w: np.ndarray) -> np.ndarray:
    return x.dot(w) if isinstance(x, SparseMatrix) else x @ w


def _t_dot(x, g: np.ndarray) -> np.ndarray:
    return x.t_dot(g) if isinstance(x, SparseMatrix) else x.T @ g


def effective_input(features, perturbation):
    """features + perturbation, staying sparse when the structures align."""
    if perturbation is None:
        return features
    if isinstance(features, SparseMatrix):
        if isinstance(perturbation, SparseMatrix):
            if not perturbation.same_structure(features):
                raise ValueError("sparse perturbation structure does not match features")
            return features.with_values(features.values + perturbation.values)
        return features.to_dense() + np.asarray(perturbation)
    return features + np.asarray(perturbation)


def forward(
    features,
    a_hat: NormalizedAdjacency,
    params: GcnParams,
    *,
    perturbation=None,
    keep_prob: float = 1.0,
    rng: np.random.Generator | None = None,
    dropout_mask: np.ndarray | None = None,
) -> ForwardCache:
    """Run the two-layer forward pass.

    A stochastic pass is requested by passing ``rng`` with keep_prob < 1
    (inverted dropout on the hidden layer: mask then scale by 1/keep_prob).
    Passing ``dropout_mask`` replays a recorded mask, which makes the pass
    a deterministic pure function of its arguments.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    x = effective_input(features, perturbation)
    n = x.rows if isinstance(x, SparseMatrix) else x.shape[0]
    if isinstance(x, np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input feature")
    a = a_hat.matrix
    if a.rows != n:
        raise ValueError(f"adjacency is {a.rows}x{a.cols} but input has {n} rows")
    if (x.cols if isinstance(x, SparseMatrix) else x.shape[1]) != params.w0.shape[0]:
        raise ValueError("feature width does not match w0")
    if params.w0.shape[1] != params.w1.shape[0]:
        raise ValueError("w0 and w1 hidden widths differ")

    pre_activation = a.dot(_dot(x, params.w0))
    activated = np.maximum(pre_activation, 0.0)
    mask = dropout_mask
    if mask is None and rng is not None and keep_prob < 1.0:
        mask = (rng.random(activated.shape) < keep_prob).astype(np.float64)
    if mask is not None:
        hidden = activated * mask / keep_prob
    else:
        hidden = activated
    logits = a.dot(hidden @ params.w1)
    probs = softmax_rows(logits)
    return ForwardCache(
        input=x,
        pre_activation=pre_activation,
        hidden=hidden,
        dropout_mask=mask,
        keep_prob=keep_prob if mask is not None else 1.0,
        logits=logits,
        probs=probs,
        a_hat=a_hat,
        params=params,
    )


def one_layer_embedding(features, a_hat: NormalizedAdjacency) -> np.ndarray:
    """Single smoothing step A_hat @ X (each node averaged with its neighbors)."""
    x = features.to_dense() if isinstance(features, SparseMatrix) else np.asarray(features, dtype=np.float64)
    if a_hat.matrix.cols != x.shape[0]:
        raise ValueError("adjacency size does not match feature rows")
    return a_hat.matrix.dot(x)


# -- losses -------------------------------------------------------------------


def supervised_loss(cache: ForwardCache, labels: np.ndarray, labeled: np.ndarray) -> float:
    """Mean cross entropy of the labeled nodes."""
    labeled = np.asarray(labeled, dtype=np.int64)
    if len(labeled) == 0:
        raise ValueError("labeled set is empty")
    picked = cache.probs[labeled, np.asarray(labels, dtype=np.int64)[labeled]]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def kl_divergence(p: np.ndarray, q: np.ndarray, node_set: np.ndarray | None = None) -> float:
    """Mean row-wise KL(p || q) over node_set (all rows when None).

    Rows of p and q must be probability vectors; q is clamped below by
    PROB_FLOOR inside the logarithm and 0 * log 0 is taken as 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if node_set is not None:
        p = p[np.asarray(node_set, dtype=np.int64)]
        q = q[np.asarray(node_set, dtype=np.int64)]
    log_ratio = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    terms = np.where(p > 0.0, p * log_ratio, 0.0)
    return float(terms.sum(axis=1).mean())


def _logit_grad(
    cache: ForwardCache,
    loss: str,
    *,
    labels=None,
    labeled=None,
    p_fixed=None,
    node_set=None,
) -> np.ndarray:
    """d(loss)/d(logits) for the supported scalar losses."""
    n, c = cache.probs.shape
    ds = np.zeros((n, c))
    if loss == "supervised":
        if labels is None or labeled is None:
            raise ValueError("supervised loss needs labels and labeled")
        labeled = np.asarray(labeled, dtype=np.int64)
        if len(labeled) == 0:
            raise ValueError("labeled set is empty")
        ds[labeled] = cache.probs[labeled]
        ds[labeled, np.asarray(labels, dtype=np.int64)[labeled]] -= 1.0
        ds[labeled] /= len(labeled)
    elif loss == "kl":
        if p_fixed is None:
            raise ValueError("kl loss needs the fixed distribution p_fixed")
        p_fixed = np.asarray(p_fixed, dtype=np.float64)
        if p_fixed.shape != cache.probs.shape:
            raise ValueError("p_fixed shape does not match probs")
        rows = np.arange(n) if node_set is None else np.asarray(node_set, dtype=np.int64)
        ds[rows] = (cache.probs[rows] - p_fixed[rows]) / len(rows)
    else:
        raise ValueError(f"unknown loss kind {loss!r}, expected one of {LOSS_KINDS}")
    return ds


def _backward(cache: ForwardCache, d_logits: np.ndarray, *, wrt_params: bool, wrt_input: bool):
    """Reverse-mode sweep from a logit gradient; honors the stored dropout mask."""
    a = cache.a_hat.matrix  # symmetric, so A^T = A
    d_v = a.dot(d_logits)
    d_w1 = cache.hidden.T @ d_v if wrt_params else None
    d_hidden = d_v @ cache.params.w1.T
    if cache.dropout_mask is not None:
        d_hidden = d_hidden * cache.dropout_mask / cache.keep_prob
    d_pre = d_hidden * (cache.pre_activation > 0.0)
    d_u = a.dot(d_pre)
    d_w0 = _t_dot(cache.input, d_u) if wrt_params else None
    d_input = d_u @ cache.params.w0.T if wrt_input else None
    return d_w0, d_w1, d_input


def grad_params(cache: ForwardCache, loss: str, **aux) -> GcnParams:
    """Exact gradient of the requested loss w.r.t. (w0, w1)."""
    ds = _logit_grad(cache, loss, **aux)
    d_w0, d_w1, _ = _backward(cache, ds, wrt_params=True, wrt_input=False)
    return GcnParams(d_w0, d_w1)


def grad_input(cache: ForwardCache, loss: str, **aux) -> np.ndarray:
    """Exact gradient of the requested loss w.r.t. the effective input matrix.

    The gradient propagates through both adjacency multiplications, so a
    node's row aggregates loss terms of everything within two hops.
    """
    ds = _logit_grad(cache, loss, **aux)
    _, _, d_input = _backward(cache, ds, wrt_params=False, wrt_input=True)
    return d_input
