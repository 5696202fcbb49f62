"""Training loop, evaluation, and multi-run experiments.

One training step follows the three-backprop schedule: compute the clean
distribution, find the virtual adversarial perturbation (backprop w.r.t.
inputs), take the parameter gradient of the perturbed divergence with the
perturbation frozen, then the parameter gradient of the supervised loss,
and apply a single optimizer update to their weighted sum. With the
regularizer inactive the step reduces exactly to plain GCN training.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    DEFAULT_TEST_SIZE,
    GraphDataset,
    NormalizedAdjacency,
    SplitSpec,
    build_normalized_adjacency,
    make_split,
    standard_split,
)
from .model import (
    GcnParams,
    forward,
    glorot_params,
    grad_params,
    kl_divergence,
    supervised_loss,
)
from .vat import Perturbation, VatConfig, compute_r_vadv


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; the run is aborted."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    hidden: int = 16
    dropout_keep: float = 0.5
    weight_decay: float = 0.0  # L2 on the first-layer weights when > 0
    vat: VatConfig = field(default_factory=VatConfig.disabled)
    seed: int = 0
    optimizer: str = "adam"
    batch_nodes: int | None = None  # experimental: subsample loss contributions

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must be in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


class Adam:
    """Adam with bias correction; moments mirror the parameter shapes."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: GcnParams, grads: GcnParams) -> GcnParams:
        tensors = [params.w0, params.w1]
        gs = [grads.w0, grads.w1]
        if self.m is None:
            self.m = [np.zeros_like(t) for t in tensors]
            self.v = [np.zeros_like(t) for t in tensors]
        self.step_count += 1
        t = self.step_count
        out = []
        for i, (w, g) in enumerate(zip(tensors, gs)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**t)
            v_hat = self.v[i] / (1 - self.beta2**t)
            out.append(w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return GcnParams(*out)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: GcnParams, grads: GcnParams) -> GcnParams:
        return GcnParams(params.w0 - self.lr * grads.w0, params.w1 - self.lr * grads.w1)


@dataclass
class TrainState:
    """Mutable per-run state: parameters, optimizer moments, RNG streams."""

    params: GcnParams
    optimizer: Adam | Sgd
    rng_dropout: np.random.Generator
    rng_vat: np.random.Generator
    rng_batch: np.random.Generator
    epoch: int = 0


@dataclass(frozen=True)
class RunResult:
    test_accuracy: float
    loss_history: list[tuple[float, float, float]]  # (supervised, vadv, total)
    seed: int
    wall_time: float


def init_state(dataset: GraphDataset, config: TrainConfig) -> TrainState:
    """Seeded Glorot init plus independent RNG streams for dropout and VAT."""
    s_init, s_drop, s_vat, s_batch = np.random.SeedSequence(config.seed).spawn(4)
    params = glorot_params(
        dataset.num_features, config.hidden, dataset.num_classes,
        np.random.default_rng(s_init),
    )
    opt = Adam(config.learning_rate) if config.optimizer == "adam" else Sgd(config.learning_rate)
    return TrainState(
        params=params,
        optimizer=opt,
        rng_dropout=np.random.default_rng(s_drop),
        rng_vat=np.random.default_rng(s_vat),
        rng_batch=np.random.default_rng(s_batch),
    )


def vat_node_set(dataset: GraphDataset, split: SplitSpec, config: VatConfig) -> np.ndarray | None:
    """Nodes the divergence is averaged over: everything, unless test nodes are excluded."""
    if config.exclude_test:
        return np.sort(np.concatenate([split.labeled, split.unlabeled]))
    return None


def objective_grads(
    params: GcnParams,
    dataset: GraphDataset,
    a_hat: NormalizedAdjacency,
    split: SplitSpec,
    config: TrainConfig,
    *,
    r_vadv: Perturbation | None = None,
    rng_dropout: np.random.Generator | None = None,
    sup_nodes: np.ndarray | None = None,
    vat_nodes: np.ndarray | None = None,
) -> tuple[tuple[float, float, float], GcnParams]:
    """Losses and parameter gradient of supervised + alpha * vadv.

    The perturbation, when given, is held fixed (no gradient flows through
    its construction). Passing rng_dropout=None makes both passes
    deterministic, which is what the finite-difference tests rely on.
    """
    vat = config.vat
    keep = config.dropout_keep
    sup_nodes = split.labeled if sup_nodes is None else sup_nodes

    g_w0 = g_w1 = 0.0
    vadv_value = 0.0
    if r_vadv is not None:
        p_hat = forward(dataset.features, a_hat, params).probs
        pert_cache = forward(
            dataset.features, a_hat, params,
            perturbation=r_vadv.addend(dataset.features),
            keep_prob=keep, rng=rng_dropout,
        )
        vadv_value = kl_divergence(p_hat, pert_cache.probs, vat_nodes)
        g_vat = grad_params(pert_cache, "kl", p_fixed=p_hat, node_set=vat_nodes)
        g_w0 = vat.alpha * g_vat.w0
        g_w1 = vat.alpha * g_vat.w1

    sup_cache = forward(
        dataset.features, a_hat, params, keep_prob=keep, rng=rng_dropout,
    )
    sup_value = supervised_loss(sup_cache, dataset.labels, sup_nodes)
    g_sup = grad_params(sup_cache, "supervised", labels=dataset.labels, labeled=sup_nodes)
    g_w0 = g_sup.w0 + g_w0
    g_w1 = g_sup.w1 + g_w1
    if config.weight_decay > 0:
        g_w0 = g_w0 + config.weight_decay * params.w0

    total = sup_value + vat.alpha * vadv_value
    return (sup_value, vadv_value, total), GcnParams(g_w0, g_w1)


def train_step(
    state: TrainState,
    dataset: GraphDataset,
    a_hat: NormalizedAdjacency,
    split: SplitSpec,
    config: TrainConfig,
) -> tuple[float, float, float]:
    """Advance the state by one full-batch step; returns (supervised, vadv, total).

    With the regularizer inactive (mode "none" or alpha 0) the adversarial
    stages are skipped entirely, so such runs are bitwise identical to
    plain GCN training under the same seeds.
    """
    vat = config.vat
    sup_nodes = split.labeled
    vat_nodes = vat_node_set(dataset, split, vat)
    if config.batch_nodes is not None:
        n = dataset.num_nodes
        batch = state.rng_batch.choice(n, size=min(config.batch_nodes, n), replace=False)
        vat_nodes = np.sort(batch)
        in_batch = np.intersect1d(split.labeled, batch)
        sup_nodes = in_batch if len(in_batch) else split.labeled

    r_vadv = None
    if vat.active:
        r_vadv = compute_r_vadv(
            dataset, a_hat, state.params, vat,
            rng=state.rng_vat, node_set=vat_nodes,
        )

    losses, grads = objective_grads(
        state.params, dataset, a_hat, split, config,
        r_vadv=r_vadv, rng_dropout=state.rng_dropout,
        sup_nodes=sup_nodes, vat_nodes=vat_nodes,
    )
    if not all(np.isfinite(v) for v in losses):
        raise TrainingDiverged(
            f"non-finite loss at epoch {state.epoch}: supervised={losses[0]}, vadv={losses[1]}"
        )
    state.params = state.optimizer.step(state.params, grads)
    if not state.params.all_finite():
        raise TrainingDiverged(f"non-finite parameter after update at epoch {state.epoch}")
    state.epoch += 1
    return losses


def evaluate(params: GcnParams, dataset: GraphDataset, a_hat: NormalizedAdjacency, node_set) -> float:
    """Argmax accuracy over node_set with a deterministic forward pass.

    np.argmax breaks ties toward the lowest class index, which pins the
    behavior for degenerate (e.g. all-uniform) predictions.
    """
    node_set = np.asarray(node_set, dtype=np.int64)
    if len(node_set) == 0:
        raise ValueError("node_set is empty")
    probs = forward(dataset.features, a_hat, params).probs
    predicted = np.argmax(probs[node_set], axis=1)
    return float(np.mean(predicted == dataset.labels[node_set]))


def train(
    dataset: GraphDataset,
    split: SplitSpec,
    config: TrainConfig,
    *,
    a_hat: NormalizedAdjacency | None = None,
) -> RunResult:
    """Full-batch training for config.epochs steps; deterministic given config.seed."""
    if a_hat is None:
        a_hat = build_normalized_adjacency(dataset)
    start = time.perf_counter()
    state = init_state(dataset, config)
    history = []
    for _ in range(config.epochs):
        history.append(train_step(state, dataset, a_hat, split, config))
    accuracy = evaluate(state.params, dataset, a_hat, split.test if len(split.test) else split.unlabeled)
    return RunResult(
        test_accuracy=accuracy,
        loss_history=history,
        seed=config.seed,
        wall_time=time.perf_counter() - start,
    )


# -- experiments --------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    """One training run, as emitted to the CSV/JSON outputs."""

    dataset: str
    mode: str
    label_rate: float
    epsilon: float
    alpha: float
    seed: int
    accuracy: float
    wall_time_s: float
    losses: list[tuple[float, float, float]] = field(repr=False, default_factory=list)


@dataclass(frozen=True)
class SettingSummary:
    dataset: str
    mode: str
    label_rate: float
    epsilon: float
    alpha: float
    mean_accuracy: float
    std_accuracy: float
    runs: list[RunRecord]


def _summarize(records: list[RunRecord]) -> SettingSummary:
    acc = np.array([r.accuracy for r in records])
    first = records[0]
    return SettingSummary(
        dataset=first.dataset,
        mode=first.mode,
        label_rate=first.label_rate,
        epsilon=first.epsilon,
        alpha=first.alpha,
        mean_accuracy=float(acc.mean()),
        std_accuracy=float(acc.std()),  # population std: a single run reports 0
        runs=records,
    )


def run_experiment(
    dataset: GraphDataset,
    config: TrainConfig,
    *,
    dataset_name: str = "dataset",
    label_rates=None,
    per_class: int | None = None,
    runs: int = 10,
    test_size: int = DEFAULT_TEST_SIZE,
    a_hat: NormalizedAdjacency | None = None,
) -> list[SettingSummary]:
    """Mean and std accuracy over `runs` seeds for each requested setting.

    Each run k uses seed config.seed + k for both a freshly sampled split
    and the training itself.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if (label_rates is None) == (per_class is None):
        raise ValueError("pass exactly one of label_rates or per_class")
    if a_hat is None:
        a_hat = build_normalized_adjacency(dataset)

    settings = [("rate", float(r)) for r in label_rates] if label_rates is not None else [("per_class", per_class)]
    summaries = []
    for kind, value in settings:
        records = []
        for k in range(runs):
            seed = config.seed + k
            if kind == "rate":
                split = make_split(dataset, value, seed, test_size=test_size)
            else:
                split = standard_split(dataset, value, seed, test_size=test_size)
            run_config = replace(config, seed=seed)
            result = train(dataset, split, run_config, a_hat=a_hat)
            records.append(
                RunRecord(
                    dataset=dataset_name,
                    mode=config.vat.mode,
                    label_rate=len(split.labeled) / dataset.num_nodes,
                    epsilon=config.vat.epsilon,
                    alpha=config.vat.alpha,
                    seed=seed,
                    accuracy=result.test_accuracy,
                    wall_time_s=result.wall_time,
                    losses=result.loss_history,
                )
            )
        summaries.append(_summarize(records))
    return summaries


CSV_COLUMNS = ("dataset", "mode", "label_rate", "epsilon", "alpha", "seed", "accuracy", "wall_time_s")


def write_runs_csv(path, summaries: list[SettingSummary], *, append: bool = False) -> None:
    """One CSV row per run, stable column order."""
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(CSV_COLUMNS)
        for summary in summaries:
            for r in summary.runs:
                writer.writerow(
                    [r.dataset, r.mode, f"{r.label_rate:.6f}", r.epsilon, r.alpha,
                     r.seed, f"{r.accuracy:.6f}", f"{r.wall_time_s:.3f}"]
                )


def write_runs_json(path, summaries: list[SettingSummary]) -> None:
    """Per-run JSON records with full loss histories."""
    records = []
    for summary in summaries:
        for r in summary.runs:
            records.append(
                {
                    "dataset": r.dataset,
                    "mode": r.mode,
                    "label_rate": r.label_rate,
                    "epsilon": r.epsilon,
                    "alpha": r.alpha,
                    "seed": r.seed,
                    "accuracy": r.accuracy,
                    "losses": [list(t) for t in r.losses],
                    "wall_time_s": r.wall_time_s,
                }
            )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")
