"""Finite-difference verification of the hand-derived gradients.

The harness generates small random instances, evaluates the analytic
gradients, and compares them against central differences of the loss
itself. It is the independent oracle for the backward passes, so it only
ever calls the forward pass and the scalar losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NormalizedAdjacency, normalize_adjacency
from .model import (
    GcnParams,
    forward,
    grad_input,
    grad_params,
    kl_divergence,
    softmax_rows,
    supervised_loss,
)
from .sparse import SparseMatrix

FD_STEP = 1e-5
GRAD_TOL = 1e-5
STATIONARY_TOL = 1e-8


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entry difference relative to the overall gradient scale."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def fd_matrix(loss_fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = loss_fn(x)
        x[idx] = orig - step
        lo = loss_fn(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


@dataclass
class ToyInstance:
    """A dense random problem small enough for exhaustive finite differences."""

    features: np.ndarray
    a_hat: NormalizedAdjacency
    labels: np.ndarray
    labeled: np.ndarray
    params: GcnParams
    p_fixed: np.ndarray


def random_adjacency(n: int, rng: np.random.Generator, edge_prob: float = 0.45) -> SparseMatrix:
    upper = np.triu(rng.random((n, n)) < edge_prob, k=1)
    dense = (upper | upper.T).astype(np.float64)
    return SparseMatrix.from_dense(dense)


def random_instance(
    rng: np.random.Generator,
    *,
    num_nodes: int | None = None,
    num_features: int | None = None,
    hidden: int | None = None,
    num_classes: int | None = None,
    kink_margin: float = 1e-4,
) -> ToyInstance:
    """Draw a toy instance whose pre-activations sit away from the relu kink.

    Central differences are only valid where the loss is smooth in the probe
    neighborhood, so instances with a pre-activation within kink_margin of
    zero are redrawn.
    """
    n = num_nodes or int(rng.integers(3, 9))
    f = num_features or int(rng.integers(2, 6))
    h = hidden or int(rng.integers(2, 5))
    c = num_classes or int(rng.integers(2, 5))
    for _ in range(200):
        a_hat = normalize_adjacency(random_adjacency(n, rng))
        features = rng.standard_normal((n, f))
        params = GcnParams(
            0.8 * rng.standard_normal((f, h)),
            0.8 * rng.standard_normal((h, c)),
        )
        labels = rng.integers(0, c, size=n)
        labeled = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        p_fixed = softmax_rows(rng.standard_normal((n, c)))
        cache = forward(features, a_hat, params)
        if np.abs(cache.pre_activation).min() > kink_margin:
            return ToyInstance(features, a_hat, labels, labeled, params, p_fixed)
    raise RuntimeError("could not draw a well-conditioned instance")


def _loss_of(inst: ToyInstance, kind: str, features: np.ndarray, params: GcnParams) -> float:
    cache = forward(features, inst.a_hat, params)
    if kind == "supervised":
        return supervised_loss(cache, inst.labels, inst.labeled)
    return kl_divergence(inst.p_fixed, cache.probs)


def _aux(inst: ToyInstance, kind: str) -> dict:
    if kind == "supervised":
        return {"labels": inst.labels, "labeled": inst.labeled}
    return {"p_fixed": inst.p_fixed}


def check_param_grads(inst: ToyInstance, kind: str, step: float = FD_STEP) -> float:
    cache = forward(inst.features, inst.a_hat, inst.params)
    analytic = grad_params(cache, kind, **_aux(inst, kind))
    w0 = inst.params.w0.copy()
    w1 = inst.params.w1.copy()
    fd_w0 = fd_matrix(lambda m: _loss_of(inst, kind, inst.features, GcnParams(m, w1)), w0, step)
    fd_w1 = fd_matrix(lambda m: _loss_of(inst, kind, inst.features, GcnParams(w0, m)), w1, step)
    return max(max_rel_err(analytic.w0, fd_w0), max_rel_err(analytic.w1, fd_w1))


def check_input_grad(inst: ToyInstance, kind: str, step: float = FD_STEP) -> float:
    cache = forward(inst.features, inst.a_hat, inst.params)
    analytic = grad_input(cache, kind, **_aux(inst, kind))
    x = inst.features.copy()
    fd = fd_matrix(lambda m: _loss_of(inst, kind, m, inst.params), x, step)
    return max_rel_err(analytic, fd)


def stationarity_at_zero(inst: ToyInstance) -> float:
    """Max |d KL(p_hat || p(X+r)) / dr| at r = 0, which vanishes analytically."""
    cache = forward(inst.features, inst.a_hat, inst.params)
    g = grad_input(cache, "kl", p_fixed=cache.probs)
    return float(np.abs(g).max())


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def run_gradient_checks(seed: int = 0, trials: int = 50, *, corrupt: bool = False) -> list[CheckResult]:
    """Run every gradient suite over `trials` random instances.

    `corrupt` injects a deliberate error into the analytic side; it exists
    so the harness itself can be shown to catch wrong gradients.
    """
    rng = np.random.default_rng(seed)
    instances = [random_instance(rng) for _ in range(trials)]
    bias = 1e-3 if corrupt else 0.0

    results = []
    for kind in ("supervised", "kl"):
        worst_p = max(check_param_grads(inst, kind) for inst in instances) + bias
        worst_x = max(check_input_grad(inst, kind) for inst in instances) + bias
        results.append(CheckResult(f"{kind}/params", worst_p, GRAD_TOL))
        results.append(CheckResult(f"{kind}/input", worst_x, GRAD_TOL))
    worst_s = max(stationarity_at_zero(inst) for inst in instances) + bias
    results.append(CheckResult("kl/stationary-at-zero", worst_s, STATIONARY_TOL))
    return results
