"""Graph container, canonical on-disk format, splits and synthetic SBM graphs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .tensor import Segments


class DatasetError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable CSR graph with node features, labels and split masks.

    ``offsets``/``targets`` store, for node ``v``, its neighbours in
    ``targets[offsets[v]:offsets[v+1]]`` sorted ascending. ``labels`` is an int
    vector for multiclass tasks or a 0/1 matrix for multilabel tasks.
    """

    num_nodes: int
    offsets: np.ndarray
    targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    name: str = "graph"

    def __post_init__(self):
        n = self.num_nodes
        if n <= 0:
            raise DatasetError("graph needs at least one node")
        off, tgt = self.offsets, self.targets
        if off.shape != (n + 1,) or off[0] != 0 or np.any(np.diff(off) < 0) or off[-1] != len(tgt):
            raise DatasetError("csr offsets must be non-decreasing from 0 to len(targets)")
        if len(tgt) and (tgt.min() < 0 or tgt.max() >= n):
            raise DatasetError(f"dangling edge target (valid range 0..{n - 1})")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DatasetError(f"features shape {self.features.shape} does not match {n} nodes")
        if self.labels.shape[0] != n:
            raise DatasetError(f"labels length {self.labels.shape[0]} does not match {n} nodes")
        masks = (self.train_mask, self.val_mask, self.test_mask)
        for m in masks:
            if m.shape != (n,) or m.dtype != bool:
                raise DatasetError("masks must be boolean vectors of length num_nodes")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise DatasetError("train/val/test masks overlap")
        for arr in (off, tgt, self.features, self.labels, *masks):
            arr.setflags(write=False)

    @property
    def num_entries(self) -> int:
        return len(self.targets)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1] if self.multilabel else int(self.labels.max()) + 1

    @cached_property
    def sources(self) -> np.ndarray:
        """Row (destination node) of each stored entry."""
        return np.repeat(np.arange(self.num_nodes), np.diff(self.offsets))

    @cached_property
    def segments(self) -> Segments:
        return Segments(self.sources, self.num_nodes)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @cached_property
    def has_self_loops(self) -> bool:
        loops = np.zeros(self.num_nodes, dtype=bool)
        loops[self.sources[self.sources == self.targets]] = True
        return bool(loops.all())

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v]:self.offsets[v + 1]]

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.sources.tolist(), self.targets.tolist()))

    def with_masks(self, train, val, test) -> Graph:
        return replace(self, train_mask=np.asarray(train, bool), val_mask=np.asarray(val, bool),
                       test_mask=np.asarray(test, bool))


@dataclass(frozen=True)
class InductiveDataset:
    """Disjoint lists of whole graphs for training, validation and testing."""

    train: list[Graph]
    val: list[Graph]
    test: list[Graph]
    name: str = "inductive"

    @property
    def num_features(self) -> int:
        return self.train[0].num_features

    @property
    def num_classes(self) -> int:
        return self.train[0].num_classes

    @property
    def multilabel(self) -> bool:
        return self.train[0].multilabel


def from_edges(num_nodes: int, edges, features, labels, *, undirected: bool = True,
               masks=None, name: str = "graph") -> Graph:
    """Build a CSR graph from an edge array of shape (E, 2).

    Duplicate entries are collapsed. With ``undirected`` both directions are stored.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(1) | (edges >= num_nodes).any(1)][0]
        raise DatasetError(f"dangling edge {tuple(bad.tolist())} for {num_nodes} nodes")
    if undirected:
        edges = np.concatenate([edges, edges[:, ::-1]])
    key = np.unique(edges[:, 0] * num_nodes + edges[:, 1])
    src, dst = key // num_nodes, key % num_nodes
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
    if masks is None:
        empty = np.zeros(num_nodes, dtype=bool)
        masks = (empty, empty.copy(), empty.copy())
    labels = np.asarray(labels)
    labels = labels.astype(np.int64) if labels.ndim == 1 else labels.astype(np.float64)
    return Graph(num_nodes, offsets, dst.astype(np.int64), np.asarray(features, dtype=np.float64),
                 labels, *(np.asarray(m, bool) for m in masks), name=name)


def add_self_loops(g: Graph) -> Graph:
    """Return the graph over Ñ(v): exactly one self-loop per node."""
    if g.has_self_loops:
        return g
    loops = np.arange(g.num_nodes)
    key = np.unique(np.concatenate([g.sources * g.num_nodes + g.targets, loops * g.num_nodes + loops]))
    src, dst = key // g.num_nodes, key % g.num_nodes
    offsets = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=g.num_nodes), out=offsets[1:])
    return replace(g, offsets=offsets, targets=dst.astype(np.int64))


def split_sizes(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Floor each fraction; the remainder goes to train."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    val = math.floor(fractions[1] * n)
    test = math.floor(fractions[2] * n)
    return n - val - test, val, test


def make_splits(g: Graph, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Graph:
    """Random train/val/test masks from a seeded uniform shuffle."""
    n_train, n_val, _ = split_sizes(g.num_nodes, fractions)
    perm = np.random.default_rng(seed).permutation(g.num_nodes)
    train = np.zeros(g.num_nodes, dtype=bool)
    val = np.zeros(g.num_nodes, dtype=bool)
    test = np.zeros(g.num_nodes, dtype=bool)
    train[perm[:n_train]] = True
    val[perm[n_train:n_train + n_val]] = True
    test[perm[n_train + n_val:]] = True
    return g.with_masks(train, val, test)


def sbm_generate(blocks: int, nodes_per_block: int, p_in: float, p_out: float,
                 feature_noise: float = 0.0, seed: int = 0, *, extra_features: int = 0,
                 name: str = "sbm") -> Graph:
    """Undirected stochastic block model with noisy one-hot block features.

    Features are the block indicator plus ``N(0, feature_noise^2)`` noise, followed by
    ``extra_features`` pure-noise columns. Labels are block ids. Masks are empty;
    call :func:`make_splits`.
    """
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if blocks < 1:
        raise ValueError("blocks and nodes_per_block must be positive")
    probs = np.full((blocks, blocks), p_out)
    np.fill_diagonal(probs, p_in)
    return sbm_from_matrix(probs, nodes_per_block, feature_noise, seed, extra_features=extra_features, name=name)


def sbm_from_matrix(block_probs, nodes_per_block: int, feature_noise: float = 0.0, seed: int = 0, *,
                    extra_features: int = 0, name: str = "sbm") -> Graph:
    """Block model with an arbitrary symmetric matrix of edge probabilities between blocks."""
    probs = np.asarray(block_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != probs.shape[1] or probs.shape[0] < 1:
        raise ValueError(f"block_probs must be a non-empty square matrix, got shape {probs.shape}")
    if not np.allclose(probs, probs.T) or np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("block_probs must be symmetric with entries in [0, 1]")
    if nodes_per_block < 1:
        raise ValueError("blocks and nodes_per_block must be positive")
    blocks = probs.shape[0]
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < probs[labels[iu], labels[ju]]
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    feats = np.zeros((n, blocks + extra_features))
    feats[np.arange(n), labels] = 1.0
    if feature_noise > 0:
        feats += rng.normal(0.0, feature_noise, size=feats.shape)
    return from_edges(n, edges, feats, labels, undirected=True, name=name)


def row_normalize(features: np.ndarray) -> np.ndarray:
    s = features.sum(axis=1, keepdims=True)
    return np.divide(features, s, out=features.copy(), where=s > 0)


# ---------------------------------------------------------------- canonical directory format

@dataclass
class DatasetManifest:
    """``manifest.json`` of a canonical dataset directory.

    Inductive datasets set ``graph_ids`` (a file with one graph id per node) and
    ``splits`` mapping ``train``/``val``/``test`` to lists of graph ids.
    """

    name: str
    task: str
    num_nodes: int
    num_features: int
    num_classes: int
    edges: str = "edges.txt"
    features: str = "features.csv"
    labels: str = "labels.txt"
    undirected: bool = True
    multilabel: bool = False
    row_normalize: bool = True
    graph_ids: str | None = None
    splits: dict | None = None
    root: Path = field(default=Path("."), repr=False)

    @classmethod
    def read(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON ({exc})") from None
        known = {f for f in cls.__dataclass_fields__ if f != "root"}
        unknown = set(raw) - known
        if unknown:
            raise DatasetError(f"{path}: unknown manifest keys {sorted(unknown)}")
        if raw.get("task") not in ("transductive", "inductive"):
            raise DatasetError(f"{path}: task must be 'transductive' or 'inductive'")
        return cls(**raw, root=path.parent)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "root"}
        return {k: v for k, v in out.items() if v is not None}


def _read_edges(path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected two integers, got {line!r}")
        try:
            rows.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: expected two integers, got {line!r}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _read_matrix(path: Path, sep: str | None) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in (line.split(sep) if sep else line.split())])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
        if len(rows[-1]) != len(rows[0]):
            raise DatasetError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
    return np.array(rows, dtype=np.float64)


def _check(name: str, expected, actual) -> None:
    if expected != actual:
        raise DatasetError(f"{name}: manifest declares {expected}, files contain {actual}")


def load_dataset(manifest: DatasetManifest | str | Path) -> Graph | InductiveDataset:
    """Load and validate a canonical dataset directory.

    Transductive datasets come back as one :class:`Graph` with empty masks
    (use :func:`make_splits`); inductive ones as an :class:`InductiveDataset`.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    m = manifest
    paths = {k: m.root / getattr(m, k) for k in ("edges", "features", "labels")}
    for key, p in paths.items():
        if not p.exists():
            raise DatasetError(f"missing {key} file: {p}")
    edges = _read_edges(paths["edges"])
    feats = _read_matrix(paths["features"], ",")
    if m.multilabel:
        labels = _read_matrix(paths["labels"], None)
    else:
        labels = _read_matrix(paths["labels"], None).reshape(-1)
        if np.any(labels != np.round(labels)):
            raise DatasetError(f"{paths['labels']}: labels must be integers")
    _check("num_nodes", m.num_nodes, feats.shape[0])
    _check("num_nodes (labels)", m.num_nodes, labels.shape[0])
    _check("num_features", m.num_features, feats.shape[1])
    n_classes = labels.shape[1] if m.multilabel else int(labels.max()) + 1 if len(labels) else 0
    _check("num_classes", m.num_classes, n_classes)
    if m.row_normalize:
        feats = row_normalize(feats)
    if m.task == "transductive":
        return from_edges(m.num_nodes, edges, feats, labels, undirected=m.undirected, name=m.name)

    if not m.graph_ids or not m.splits:
        raise DatasetError("inductive manifest needs graph_ids and splits")
    gid = _read_matrix(m.root / m.graph_ids, None).reshape(-1).astype(np.int64)
    _check("num_nodes (graph_ids)", m.num_nodes, len(gid))
    if len(edges) and np.any(gid[edges[:, 0]] != gid[edges[:, 1]]):
        raise DatasetError("edge crosses graph boundary")
    graphs: dict[int, Graph] = {}
    for k in np.unique(gid):
        nodes = np.flatnonzero(gid == k)
        local = np.full(m.num_nodes, -1)
        local[nodes] = np.arange(len(nodes))
        sel = edges[gid[edges[:, 0]] == k] if len(edges) else edges
        graphs[int(k)] = from_edges(len(nodes), local[sel], feats[nodes], labels[nodes],
                                    undirected=m.undirected, name=f"{m.name}-{k}")
    seen: set[int] = set()
    parts = {}
    for part in ("train", "val", "test"):
        ids = [int(i) for i in m.splits.get(part, [])]
        if not ids or seen & set(ids) or any(i not in graphs for i in ids):
            raise DatasetError(f"inductive split {part!r} must list unseen, existing graph ids")
        seen |= set(ids)
        parts[part] = [graphs[i] for i in ids]
    return InductiveDataset(parts["train"], parts["val"], parts["test"], name=m.name)


def save_dataset(g: Graph, directory, *, name: str | None = None) -> DatasetManifest:
    """Write a transductive graph in the canonical format (directed entries)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "edges.txt", np.stack([g.sources, g.targets], 1), fmt="%d")
    np.savetxt(d / "features.csv", g.features, delimiter=",", fmt="%.17g")
    np.savetxt(d / "labels.txt", g.labels, fmt="%d" if not g.multilabel else "%g")
    m = DatasetManifest(name=name or g.name, task="transductive", num_nodes=g.num_nodes,
                        num_features=g.num_features, num_classes=g.num_classes,
                        undirected=False, multilabel=g.multilabel, row_normalize=False, root=d)
    (d / "manifest.json").write_text(json.dumps(m.to_json(), indent=2) + "\n", encoding="utf-8")
    return m
