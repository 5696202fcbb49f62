"""Adversarial and virtual adversarial perturbations on node features.

The virtual adversarial direction is found without labels: starting from a
random unit direction, each power-iteration step pushes the direction
toward the one the model's output distribution is most sensitive to,
using a finite-difference probe of scale xi. Scaling the converged unit
direction by epsilon gives the perturbation whose induced divergence is
the regularization term.

Two placement modes exist: "sparse" keeps every perturbation on the
nonzero support of the node's feature row, "dense" perturbs every
coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import GraphDataset, NormalizedAdjacency, SplitSpec
from .model import forward, grad_input, kl_divergence
from .sparse import SparseMatrix

MODES = ("none", "sparse", "dense")

ZERO_ROW_TOL = 1e-12  # rows with gradient norm below this stay zero


@dataclass(frozen=True)
class VatConfig:
    """Hyperparameters of the virtual adversarial regularizer.

    epsilon is the per-node L2 budget of the final perturbation, alpha the
    weight of the regularization term in the training objective, xi the
    finite-difference probe scale, and power_iters the number of
    power-iteration refinement steps (one is enough in practice).
    """

    epsilon: float = 0.1
    alpha: float = 1.0
    xi: float = 1e-6
    power_iters: int = 1
    mode: str = "none"
    seed_stream: int = 0
    exclude_test: bool = False  # drop test nodes from the divergence average

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.mode != "none":
            if self.epsilon <= 0:
                raise ValueError("epsilon must be > 0")
            if self.xi <= 0:
                raise ValueError("xi must be > 0")
            if self.power_iters < 1:
                raise ValueError("power_iters must be >= 1")

    @property
    def active(self) -> bool:
        """Whether the regularizer contributes to the objective at all."""
        return self.mode != "none" and self.alpha > 0.0

    @classmethod
    def disabled(cls) -> "VatConfig":
        return cls(mode="none", alpha=0.0)


@dataclass(frozen=True, eq=False)
class Perturbation:
    """A dense perturbation matrix plus, in sparse mode, its support mask.

    After finalization every nonzero row has L2 norm equal to the epsilon
    it was built with, and in sparse mode the matrix is exactly zero off
    the support.
    """

    matrix: np.ndarray  # n x F
    support: SparseMatrix | None = None  # 0/1 mask, present in sparse mode

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=np.float64))

    def addend(self, features: SparseMatrix):
        """Representation to feed model.forward: sparse-aligned when possible."""
        if self.support is not None and self.support.same_structure(features):
            return features.with_values(self.support.gather(self.matrix))
        return self.matrix

    def row_norms(self) -> np.ndarray:
        return np.sqrt((self.matrix**2).sum(axis=1))


def feature_support(features: SparseMatrix) -> SparseMatrix:
    """0/1 mask with the sparsity structure of the feature matrix."""
    return features.with_values(np.ones(features.nnz))


def normalize_rows(matrix: np.ndarray, zero_tol: float = ZERO_ROW_TOL) -> np.ndarray:
    """Scale each row to unit L2 norm; rows below zero_tol become zero."""
    norms = np.sqrt((matrix**2).sum(axis=1, keepdims=True))
    return np.where(norms > zero_tol, matrix / np.where(norms > 0, norms, 1.0), 0.0)


def sample_unit_direction(
    shape: tuple[int, int],
    mode: str,
    support: SparseMatrix | None = None,
    rng: np.random.Generator | int = 0,
) -> Perturbation:
    """Row-normalized iid Gaussian direction, restricted to the support in sparse mode."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if mode == "sparse":
        if support is None:
            raise ValueError("sparse mode needs a support mask")
        raw = support.scatter(rng.standard_normal(support.nnz))
    elif mode == "dense":
        raw = rng.standard_normal(shape)
        support = None
    else:
        raise ValueError(f"cannot sample a direction for mode {mode!r}")
    return Perturbation(normalize_rows(raw), support)


def _masked(g: np.ndarray, support: SparseMatrix | None) -> np.ndarray:
    if support is None:
        return g
    return support.scatter(support.gather(g))


def compute_r_adv(
    dataset: GraphDataset,
    split: SplitSpec,
    a_hat: NormalizedAdjacency,
    params,
    epsilon: float,
) -> Perturbation:
    """Supervised adversarial perturbation on the labeled nodes only.

    Each labeled node's row is the normalized gradient of the supervised
    loss w.r.t. its features, scaled to epsilon; unlabeled rows are zero.
    Diagnostic mode, not part of the virtual adversarial objective.
    """
    cache = forward(dataset.features, a_hat, params)
    g = grad_input(cache, "supervised", labels=dataset.labels, labeled=split.labeled)
    direction = normalize_rows(g)
    r = np.zeros_like(direction)
    r[split.labeled] = epsilon * direction[split.labeled]
    return Perturbation(r, None)


def compute_r_vadv(
    dataset: GraphDataset,
    a_hat: NormalizedAdjacency,
    params,
    config: VatConfig,
    *,
    rng: np.random.Generator | None = None,
    node_set: np.ndarray | None = None,
    p_hat: np.ndarray | None = None,
) -> Perturbation:
    """Virtual adversarial perturbation via finite-difference power iteration.

    All forward passes here are deterministic (no dropout): the direction
    should target the deployed model, not its training noise. The clean
    distribution p_hat is treated as a constant throughout.
    """
    if config.mode == "none":
        raise ValueError("compute_r_vadv requires mode 'sparse' or 'dense'")
    if rng is None:
        rng = np.random.default_rng(config.seed_stream)
    features = dataset.features
    if p_hat is None:
        p_hat = forward(features, a_hat, params).probs
    support = feature_support(features) if config.mode == "sparse" else None
    direction = sample_unit_direction(features.shape, config.mode, support, rng)
    d = direction.matrix
    for _ in range(config.power_iters):
        probe = Perturbation(config.xi * d, support)
        cache = forward(features, a_hat, params, perturbation=probe.addend(features))
        g = grad_input(cache, "kl", p_fixed=p_hat, node_set=node_set)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient during power iteration")
        d = normalize_rows(_masked(g, support))
    return Perturbation(config.epsilon * d, support)


def vadv_loss(
    dataset: GraphDataset,
    a_hat: NormalizedAdjacency,
    params,
    r_vadv: Perturbation,
    *,
    p_hat: np.ndarray | None = None,
    keep_prob: float = 1.0,
    rng: np.random.Generator | None = None,
    node_set: np.ndarray | None = None,
) -> float:
    """KL between the clean distribution and the perturbed pass, averaged over nodes.

    The perturbed pass honors the provided dropout specification; the clean
    distribution is always deterministic and held constant.
    """
    features = dataset.features
    if p_hat is None:
        p_hat = forward(features, a_hat, params).probs
    cache = forward(
        features, a_hat, params,
        perturbation=r_vadv.addend(features), keep_prob=keep_prob, rng=rng,
    )
    return kl_divergence(p_hat, cache.probs, node_set)


def regularization_curvature(
    dataset: GraphDataset,
    a_hat: NormalizedAdjacency,
    params,
    epsilons,
    config: VatConfig,
) -> list[tuple[float, float]]:
    """Regularizer value at each epsilon, dropout disabled.

    In the small-epsilon regime the value scales like eps^2 / 2 times the
    dominant curvature, so 2 R / eps^2 estimates the dominant eigenvalue of
    the divergence Hessian. Every epsilon reuses the same seeded random
    start so the ratios are not polluted by direction resampling.
    """
    epsilons = [float(e) for e in epsilons]
    if any(e <= 0 for e in epsilons):
        raise ValueError("epsilons must be positive")
    p_hat = forward(dataset.features, a_hat, params).probs
    pairs = []
    for eps in epsilons:
        cfg = replace(config, epsilon=eps)
        r = compute_r_vadv(
            dataset, a_hat, params, cfg,
            rng=np.random.default_rng(config.seed_stream), p_hat=p_hat,
        )
        pairs.append((eps, vadv_loss(dataset, a_hat, params, r, p_hat=p_hat)))
    return pairs
