"""Dataset ingestion, normalized adjacency, and labeled/unlabeled splits.

A dataset lives on disk as a "bundle": a directory of plain TSV files
(`meta.tsv`, `edges.tsv`, `features.tsv`, `labels.tsv`, optional
`split.tsv`). The format is deliberately trivial so that bundles can be
produced from any raw source; see README for converters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sparse import SparseMatrix

DEFAULT_TEST_SIZE = 1000  # held-out node count, the common citation-network convention


class BundleError(ValueError):
    """A bundle directory is missing files or contains malformed rows."""


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Node features, undirected adjacency, and one label per node.

    The adjacency is binary, symmetric, and has an empty diagonal;
    self-loops enter only later through the normalization step.
    """

    features: SparseMatrix  # n x F, nonnegative
    adjacency: SparseMatrix  # n x n, binary, symmetric, zero diagonal
    labels: np.ndarray  # int, one class per node
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def num_nodes(self) -> int:
        return self.adjacency.rows

    @property
    def num_features(self) -> int:
        return self.features.cols

    @property
    def num_edges(self) -> int:
        """Undirected edge count (each edge stored twice in the adjacency)."""
        return self.adjacency.nnz // 2

    def validate(self) -> "GraphDataset":
        n = self.adjacency.rows
        if n == 0:
            raise ValueError("empty graph")
        if self.adjacency.cols != n:
            raise ValueError("adjacency must be square")
        if self.features.rows != n:
            raise ValueError(f"features have {self.features.rows} rows for {n} nodes")
        if len(self.labels) != n:
            raise ValueError(f"{len(self.labels)} labels for {n} nodes")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        self.features.validate()
        self.adjacency.validate()
        if self.features.nnz and self.features.values.min() < 0:
            raise ValueError("feature values must be nonnegative")
        if np.any(self.adjacency.row_index_array == self.adjacency.col_indices):
            raise ValueError("adjacency diagonal must be empty")
        if not np.all(self.adjacency.values == 1.0):
            raise ValueError("adjacency must be binary")
        if not self.adjacency.allclose(self.adjacency.transpose()):
            raise ValueError("adjacency must be symmetric")
        return self


@dataclass(frozen=True, eq=False)
class SplitSpec:
    """Disjoint labeled / unlabeled / test node index sets for one run."""

    labeled: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("labeled", "unlabeled", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    def validate(self, dataset: GraphDataset) -> "SplitSpec":
        n = dataset.num_nodes
        parts = [self.labeled, self.unlabeled, self.test]
        joined = np.concatenate(parts)
        if len(joined) and (joined.min() < 0 or joined.max() >= n):
            raise ValueError("split references a node out of range")
        if len(np.unique(joined)) != len(joined):
            raise ValueError("split sets must be pairwise disjoint")
        if len(joined) != n:
            raise ValueError("labeled and unlabeled must cover all non-test nodes")
        if len(self.labeled) == 0:
            raise ValueError("labeled set must be nonempty")
        return self

    def equals(self, other: "SplitSpec") -> bool:
        return (
            np.array_equal(self.labeled, other.labeled)
            and np.array_equal(self.unlabeled, other.unlabeled)
            and np.array_equal(self.test, other.test)
        )


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Self-looped, symmetrically degree-normalized adjacency.

    Entry (i, j) equals a_ij / sqrt(d_i * d_j) where a and d are taken from
    the self-looped adjacency. source_hash fingerprints the adjacency the
    matrix was derived from so stale pairings can be detected.
    """

    matrix: SparseMatrix
    source_hash: str


def adjacency_hash(adjacency: SparseMatrix) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(adjacency.shape, dtype=np.int64).tobytes())
    h.update(adjacency.row_offsets.tobytes())
    h.update(adjacency.col_indices.tobytes())
    return h.hexdigest()[:16]


def build_normalized_adjacency(dataset: GraphDataset) -> NormalizedAdjacency:
    """Add self-loops, then scale each entry by the inverse square-root degrees."""
    return normalize_adjacency(dataset.adjacency)


def normalize_adjacency(adj: SparseMatrix) -> NormalizedAdjacency:
    n = adj.rows
    row_idx = np.concatenate([adj.row_index_array, np.arange(n)])
    col_idx = np.concatenate([adj.col_indices, np.arange(n)])
    vals = np.ones(len(row_idx))
    looped = SparseMatrix.from_coo(n, n, row_idx, col_idx, vals)
    degrees = np.diff(looped.row_offsets).astype(np.float64)  # row sums of a 0/1 matrix
    inv_sqrt = 1.0 / np.sqrt(degrees)
    scaled = looped.values * inv_sqrt[looped.row_index_array] * inv_sqrt[looped.col_indices]
    return NormalizedAdjacency(looped.with_values(scaled), adjacency_hash(adj))


# -- bundle I/O --------------------------------------------------------------


def _data_lines(path: Path):
    if not path.is_file():
        raise BundleError(f"missing bundle file: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            yield lineno, line.split("\t")


def _parse_int(text: str, what: str, path: Path, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise BundleError(f"{path}:{lineno}: non-numeric {what}: {text!r}") from None


def _parse_float(text: str, what: str, path: Path, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise BundleError(f"{path}:{lineno}: non-numeric {what}: {text!r}") from None
    if not np.isfinite(value):
        raise BundleError(f"{path}:{lineno}: non-finite {what}: {text!r}")
    return value


def _check_node(idx: int, n: int, path: Path, lineno: int) -> int:
    if not 0 <= idx < n:
        raise BundleError(f"{path}:{lineno}: node index {idx} out of range [0, {n})")
    return idx


def load_bundle(path) -> GraphDataset:
    """Load and validate a bundle directory.

    Edges are symmetrized and deduplicated; self-loops in the edge file are
    discarded (the normalization step adds its own). Zero feature entries
    are pruned, duplicated feature triplets are summed.
    """
    path = Path(path)
    if not path.is_dir():
        raise BundleError(f"bundle directory not found: {path}")

    meta_path = path / "meta.tsv"
    meta: dict[str, int] = {}
    for lineno, fields in _data_lines(meta_path):
        if len(fields) != 2 or fields[0] not in ("nodes", "features", "classes"):
            raise BundleError(f"{meta_path}:{lineno}: expected 'nodes|features|classes\\t<count>'")
        meta[fields[0]] = _parse_int(fields[1], fields[0], meta_path, lineno)
    for key in ("nodes", "features", "classes"):
        if key not in meta:
            raise BundleError(f"{meta_path}: missing '{key}' line")
    n, num_features, num_classes = meta["nodes"], meta["features"], meta["classes"]
    if n <= 0:
        raise BundleError("empty graph: bundle declares 0 nodes")
    if num_features <= 0 or num_classes <= 0:
        raise BundleError("bundle must declare positive feature and class counts")

    edges_path = path / "edges.tsv"
    src_list, dst_list = [], []
    for lineno, fields in _data_lines(edges_path):
        if len(fields) != 2:
            raise BundleError(f"{edges_path}:{lineno}: expected 'src\\tdst'")
        src = _check_node(_parse_int(fields[0], "node", edges_path, lineno), n, edges_path, lineno)
        dst = _check_node(_parse_int(fields[1], "node", edges_path, lineno), n, edges_path, lineno)
        if src == dst:
            continue  # self-loops are added by normalization only
        src_list.extend((src, dst))
        dst_list.extend((dst, src))
    adjacency = SparseMatrix.from_coo(
        n, n, np.asarray(src_list, dtype=np.int64), np.asarray(dst_list, dtype=np.int64),
        np.ones(len(src_list)),
    )
    # symmetrize + dedup may have summed parallel edges; back to binary
    adjacency = adjacency.with_values(np.ones(adjacency.nnz))

    feat_path = path / "features.tsv"
    f_rows, f_cols, f_vals = [], [], []
    for lineno, fields in _data_lines(feat_path):
        if len(fields) != 3:
            raise BundleError(f"{feat_path}:{lineno}: expected 'node\\tfeature\\tvalue'")
        node = _check_node(_parse_int(fields[0], "node", feat_path, lineno), n, feat_path, lineno)
        fidx = _parse_int(fields[1], "feature index", feat_path, lineno)
        if not 0 <= fidx < num_features:
            raise BundleError(f"{feat_path}:{lineno}: feature index {fidx} out of range [0, {num_features})")
        value = _parse_float(fields[2], "feature value", feat_path, lineno)
        if value < 0:
            raise BundleError(f"{feat_path}:{lineno}: negative feature value {value}")
        f_rows.append(node)
        f_cols.append(fidx)
        f_vals.append(value)
    features = SparseMatrix.from_coo(n, num_features, f_rows, f_cols, f_vals)

    labels_path = path / "labels.tsv"
    labels = np.full(n, -1, dtype=np.int64)
    for lineno, fields in _data_lines(labels_path):
        if len(fields) != 2:
            raise BundleError(f"{labels_path}:{lineno}: expected 'node\\tclass'")
        node = _check_node(_parse_int(fields[0], "node", labels_path, lineno), n, labels_path, lineno)
        cls = _parse_int(fields[1], "class", labels_path, lineno)
        if not 0 <= cls < num_classes:
            raise BundleError(f"{labels_path}:{lineno}: class {cls} out of range [0, {num_classes})")
        labels[node] = cls
    if np.any(labels < 0):
        missing = int(np.nonzero(labels < 0)[0][0])
        raise BundleError(f"{labels_path}: node {missing} has no label")

    dataset = GraphDataset(features, adjacency, labels, num_classes)
    try:
        dataset.validate()
    except ValueError as exc:
        raise BundleError(f"bundle {path} failed validation: {exc}") from exc
    return dataset


def save_bundle(dataset: GraphDataset, path) -> None:
    """Write a bundle directory; inverse of load_bundle on validated datasets."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with (path / "meta.tsv").open("w", encoding="utf-8") as fh:
        fh.write(f"nodes\t{dataset.num_nodes}\n")
        fh.write(f"features\t{dataset.num_features}\n")
        fh.write(f"classes\t{dataset.num_classes}\n")
    adj = dataset.adjacency
    with (path / "edges.tsv").open("w", encoding="utf-8") as fh:
        for i, j in zip(adj.row_index_array, adj.col_indices):
            if i < j:  # store each undirected edge once
                fh.write(f"{i}\t{j}\n")
    feats = dataset.features
    with (path / "features.tsv").open("w", encoding="utf-8") as fh:
        for node, fidx, value in zip(feats.row_index_array, feats.col_indices, feats.values):
            fh.write(f"{node}\t{fidx}\t{value!r}\n")
    with (path / "labels.tsv").open("w", encoding="utf-8") as fh:
        for node, cls in enumerate(dataset.labels):
            fh.write(f"{node}\t{cls}\n")


def load_split(path, dataset: GraphDataset, seed: int = -1) -> SplitSpec:
    """Read an explicit split.tsv ('node\\t{train|test|unlabeled}')."""
    path = Path(path)
    split_path = path / "split.tsv" if path.is_dir() else path
    n = dataset.num_nodes
    roles = {"train": [], "test": [], "unlabeled": []}
    seen = np.zeros(n, dtype=bool)
    for lineno, fields in _data_lines(split_path):
        if len(fields) != 2 or fields[1] not in roles:
            raise BundleError(f"{split_path}:{lineno}: expected 'node\\t{{train|test|unlabeled}}'")
        node = _check_node(_parse_int(fields[0], "node", split_path, lineno), n, split_path, lineno)
        if seen[node]:
            raise BundleError(f"{split_path}:{lineno}: node {node} assigned twice")
        seen[node] = True
        roles[fields[1]].append(node)
    if not seen.all():
        missing = int(np.nonzero(~seen)[0][0])
        raise BundleError(f"{split_path}: node {missing} has no split assignment")
    split = SplitSpec(
        labeled=np.sort(roles["train"]),
        unlabeled=np.sort(roles["unlabeled"]),
        test=np.sort(roles["test"]),
        seed=seed,
    )
    return split.validate(dataset)


def save_split(split: SplitSpec, path) -> None:
    path = Path(path)
    split_path = path / "split.tsv" if path.is_dir() else path
    with split_path.open("w", encoding="utf-8") as fh:
        for role, nodes in (("train", split.labeled), ("unlabeled", split.unlabeled), ("test", split.test)):
            for node in nodes:
                fh.write(f"{node}\t{role}\n")


# -- split construction -------------------------------------------------------


def _class_coverage(labels: np.ndarray, chosen: np.ndarray, num_classes: int) -> bool:
    return len(np.unique(labels[chosen])) == num_classes


def make_split(
    dataset: GraphDataset,
    label_rate: float,
    seed: int,
    *,
    test_size: int = DEFAULT_TEST_SIZE,
    max_retries: int = 100,
) -> SplitSpec:
    """Sample round(label_rate * n) labeled nodes uniformly at random.

    Resamples (up to max_retries) until every class has at least one
    labeled node, then draws a fixed-size test set from the remainder;
    everything else is the unlabeled pool. Deterministic in (dataset,
    label_rate, seed).
    """
    n = dataset.num_nodes
    if not 0.0 < label_rate <= 1.0:
        raise ValueError(f"label_rate must be in (0, 1], got {label_rate}")
    n_labeled = int(np.floor(label_rate * n + 0.5))
    if n_labeled < dataset.num_classes:
        raise ValueError(
            f"label_rate {label_rate} yields {n_labeled} labeled nodes, "
            f"fewer than {dataset.num_classes} classes"
        )
    if n_labeled + test_size > n:
        raise ValueError(
            f"labeled ({n_labeled}) + test ({test_size}) exceeds {n} nodes"
        )
    rng = np.random.default_rng(seed)
    labeled = None
    for _ in range(max_retries):
        candidate = rng.choice(n, size=n_labeled, replace=False)
        if _class_coverage(dataset.labels, candidate, dataset.num_classes):
            labeled = candidate
            break
    if labeled is None:
        raise ValueError(
            f"could not cover all {dataset.num_classes} classes with "
            f"{n_labeled} labeled nodes after {max_retries} attempts"
        )
    rest = np.setdiff1d(np.arange(n), labeled)
    test = rng.choice(rest, size=test_size, replace=False) if test_size else np.empty(0, dtype=np.int64)
    unlabeled = np.setdiff1d(rest, test)
    return SplitSpec(np.sort(labeled), unlabeled, np.sort(test), seed).validate(dataset)


def standard_split(
    dataset: GraphDataset,
    per_class: int,
    seed: int,
    *,
    test_size: int = DEFAULT_TEST_SIZE,
) -> SplitSpec:
    """Sample exactly per_class labeled nodes from every class."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1 (labeled set would be empty)")
    n = dataset.num_nodes
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(dataset.num_classes):
        members = np.nonzero(dataset.labels == cls)[0]
        if len(members) < per_class:
            raise ValueError(f"class {cls} has only {len(members)} nodes, needs {per_class}")
        chosen.append(rng.choice(members, size=per_class, replace=False))
    labeled = np.sort(np.concatenate(chosen))
    if len(labeled) + test_size > n:
        raise ValueError(f"labeled ({len(labeled)}) + test ({test_size}) exceeds {n} nodes")
    rest = np.setdiff1d(np.arange(n), labeled)
    test = rng.choice(rest, size=test_size, replace=False) if test_size else np.empty(0, dtype=np.int64)
    unlabeled = np.setdiff1d(rest, test)
    return SplitSpec(labeled, unlabeled, np.sort(test), seed).validate(dataset)
