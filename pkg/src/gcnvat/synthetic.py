"""Synthetic citation-style graphs for tests and demos.

A planted-partition graph with class-conditional bag-of-words features:
nodes of the same class connect more often and draw their words mostly
from a class topic. GCN-learnable and VAT-meaningful, while staying tiny.
"""

from __future__ import annotations

import numpy as np

from .data import GraphDataset
from .sparse import SparseMatrix


def synthetic_citation(
    num_nodes: int = 400,
    num_classes: int = 4,
    num_features: int = 64,
    *,
    words_per_node: int = 8,
    topic_fidelity: float = 0.8,
    p_in: float = 0.05,
    p_out: float = 0.004,
    seed: int = 0,
) -> GraphDataset:
    """Generate a dataset with community structure and topic features.

    Each class owns an equal slice of the feature vocabulary; a node draws
    words_per_node distinct words, each from its class slice with
    probability topic_fidelity and uniformly otherwise. Edges follow a
    planted partition with within/between probabilities p_in/p_out.
    """
    if num_features < num_classes:
        raise ValueError("need at least one feature per class")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % num_classes)

    # adjacency: sample the upper triangle with class-dependent probabilities
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((num_nodes, num_nodes)) < prob, k=1)
    adjacency = SparseMatrix.from_dense((upper | upper.T).astype(np.float64))

    slice_width = num_features // num_classes
    rows, cols = [], []
    for node in range(num_nodes):
        cls = labels[node]
        lo = cls * slice_width
        hi = lo + slice_width
        words = set()
        while len(words) < min(words_per_node, num_features):
            if rng.random() < topic_fidelity:
                words.add(int(rng.integers(lo, hi)))
            else:
                words.add(int(rng.integers(0, num_features)))
        rows.extend([node] * len(words))
        cols.extend(sorted(words))
    features = SparseMatrix.from_coo(
        num_nodes, num_features, rows, cols, np.ones(len(rows))
    )
    return GraphDataset(features, adjacency, labels, num_classes).validate()
