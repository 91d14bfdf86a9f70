"""Graphs, on-disk datasets, synthetic planted-partition graphs, splits, diffusion.

On-disk layout of a dataset directory (all little-endian)::

    graph.json      {"n": .., "d": .., "classes": .., "edges": ..}
    edges.u32le     two u32 per undirected edge, (u, v) with u < v
    features.f64le  n x d row-major f64
    labels.u32le    n u32
    splits.json     optional {"train": [...], "val": [...], "test": [...]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .numerics import check_finite, make_rng

__all__ = [
    "FormatError",
    "ProtocolError",
    "Graph",
    "Splits",
    "DiffusionConfig",
    "SynthSpec",
    "load_graph",
    "save_graph",
    "gen_synth",
    "make_splits",
    "edge_homophily",
    "adjacency",
    "sym_norm_adj",
    "ppr_diffusion",
]


class FormatError(ValueError):
    """A dataset directory is missing files or is internally inconsistent."""


class ProtocolError(ValueError):
    """A split protocol cannot be satisfied by the graph."""


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        a, b, c = set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())
        if a & b or a & c or b & c:
            raise ProtocolError("train/val/test masks overlap")

    def mask(self, name: str, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[getattr(self, name)] = True
        return m

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}


@dataclass(frozen=True)
class Graph:
    """Undirected, unweighted attributed graph; edges stored once as ``u < v``."""

    n: int
    edges: np.ndarray  # (m, 2) int64
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    splits: Splits | None = None

    def __post_init__(self):
        edges = _canonical_edges(np.asarray(self.edges).reshape(-1, 2), self.n)
        feats = check_finite(self.features, "features")
        if feats.ndim != 2 or feats.shape[0] != self.n:
            raise FormatError(f"features must be {self.n} x d, got {feats.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (self.n,):
            raise FormatError("one label per node required")
        if self.n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes})")
        edges.setflags(write=False)
        feats = feats.copy()
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def with_splits(self, splits: Splits | None) -> "Graph":
        return replace(self, splits=splits)


def _canonical_edges(edges: np.ndarray, n: int) -> np.ndarray:
    """Symmetrize, drop self-loops and duplicates, sort, orient as u < v."""
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = edges.astype(np.int64)
    if edges.min() < 0 or edges.max() >= n:
        raise FormatError("edge endpoint out of range")
    u = np.minimum(edges[:, 0], edges[:, 1])
    v = np.maximum(edges[:, 0], edges[:, 1])
    keep = u != v
    pairs = np.unique(np.stack([u[keep], v[keep]], axis=1), axis=0)
    return pairs.reshape(-1, 2)


# -- dataset I/O --------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_graph(g: Graph, path: str | os.PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    header = {"n": g.n, "d": g.d, "classes": g.num_classes, "edges": g.num_edges}
    _atomic_write(root / "edges.u32le", g.edges.astype("<u4").tobytes())
    _atomic_write(root / "features.f64le", np.ascontiguousarray(g.features, dtype="<f8").tobytes())
    _atomic_write(root / "labels.u32le", g.labels.astype("<u4").tobytes())
    if g.splits is not None:
        _atomic_write(root / "splits.json", json.dumps(g.splits.to_json()).encode())
    elif (root / "splits.json").exists():
        (root / "splits.json").unlink()
    _atomic_write(root / "graph.json", json.dumps(header).encode())


def _read_exact(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing file {path.name}")
    raw = path.read_bytes()
    width = np.dtype(dtype).itemsize
    if len(raw) != count * width:
        raise FormatError(f"{path.name}: {len(raw)} bytes, header implies {count * width}")
    return np.frombuffer(raw, dtype=dtype)


def load_graph(path: str | os.PathLike) -> Graph:
    """Load a dataset directory; directed or duplicated edges are symmetrized."""
    root = Path(path)
    head_path = root / "graph.json"
    if not head_path.exists():
        raise FormatError(f"missing file graph.json in {root}")
    try:
        header = json.loads(head_path.read_text())
        n, d, classes, m = (int(header[k]) for k in ("n", "d", "classes", "edges"))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad graph.json: {exc}") from exc
    edges = _read_exact(root / "edges.u32le", "<u4", 2 * m).astype(np.int64).reshape(m, 2)
    feats = _read_exact(root / "features.f64le", "<f8", n * d).astype(np.float64).reshape(n, d)
    labels = _read_exact(root / "labels.u32le", "<u4", n).astype(np.int64)
    if n and labels.max(initial=0) >= classes:
        raise FormatError(f"label {labels.max()} >= class count {classes}")
    splits = None
    if (root / "splits.json").exists():
        raw = json.loads((root / "splits.json").read_text())
        splits = Splits(raw.get("train", []), raw.get("val", []), raw.get("test", []))
    return Graph(n=n, edges=edges, features=feats, labels=labels,
                 num_classes=classes, splits=splits)


# -- synthetic graphs ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Planted-partition graph with class-Gaussian features.

    Target-graph distribution shift is expressed by ``rotation_deg`` (every
    consecutive coordinate pair is rotated by this angle, so each feature
    vector turns by exactly this angle when ``dim`` is even) and ``shift``
    (added along the normalized all-ones direction).
    """

    nodes_per_class: int = 200
    num_classes: int = 2
    p_intra: float = 0.1
    p_inter: float = 0.02
    dim: int = 16
    separation: float = 2.0
    noise: float = 1.0
    rotation_deg: float = 0.0
    shift: float = 0.0
    seed: int = 0
    feature_seed: int | None = None

    def validate(self) -> None:
        for p in (self.p_intra, self.p_inter):
            if not 0.0 <= p <= 1.0:
                raise ValueError("edge probabilities must lie in [0, 1]")
        if self.nodes_per_class < 1 or self.num_classes < 1 or self.dim < 1:
            raise ValueError("sizes must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def rotation_matrix(dim: int, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.eye(dim)
    for i in range(0, dim - 1, 2):
        rot[i, i], rot[i, i + 1] = c, -s
        rot[i + 1, i], rot[i + 1, i + 1] = s, c
    return rot


def gen_synth(spec: SynthSpec) -> Graph:
    """Sample a planted-partition graph; deterministic in ``spec.seed``.

    ``feature_seed`` (default: ``seed``) drives class means, so a source and
    a target graph can share class geometry while differing in structure.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    fs = spec.seed if spec.feature_seed is None else spec.feature_seed
    mean_rng = make_rng(fs ^ 0x5EED)
    n = spec.nodes_per_class * spec.num_classes
    labels = np.repeat(np.arange(spec.num_classes), spec.nodes_per_class)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, spec.p_intra, spec.p_inter)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    means = mean_rng.standard_normal((spec.num_classes, spec.dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= spec.separation
    feats = means[labels] + spec.noise * rng.standard_normal((n, spec.dim))
    feats = feats @ rotation_matrix(spec.dim, spec.rotation_deg).T
    feats = feats + spec.shift * np.ones(spec.dim) / np.sqrt(spec.dim)
    return Graph(n=n, edges=edges, features=feats, labels=labels,
                 num_classes=spec.num_classes)


def edge_homophily(g: Graph) -> float:
    """Fraction of edges joining same-class endpoints (1.0 for edgeless graphs)."""
    if g.num_edges == 0:
        return 1.0
    return float(np.mean(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]))


# -- splits -------------------------------------------------------------------

def make_splits(g: Graph, protocol: Literal["k-shot", "public"] = "k-shot", *, seed: int,
                k: int | None = None, train_per_class: int = 20, val: int = 500,
                test: int = 1000, test_frac: float = 0.8) -> Splits:
    """Build disjoint train/val/test index sets.

    ``k-shot``: exactly ``k`` training nodes per class, ``floor(test_frac * n)``
    test nodes drawn from the rest, everything else validation.
    ``public``: ``train_per_class`` per class, then ``val`` and ``test`` nodes.
    """
    rng = make_rng(seed)
    per_class = train_per_class if protocol == "public" else k
    if per_class is None or per_class < 0:
        raise ProtocolError("k must be given and non-negative for k-shot splits")
    if protocol not in ("k-shot", "public"):
        raise ProtocolError(f"unknown protocol {protocol!r}")
    train = []
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if members.size < per_class:
            raise ProtocolError(f"class {c} has {members.size} nodes, need {per_class}")
        train.append(rng.permutation(members)[:per_class])
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(g.n), train)
    rest = rng.permutation(rest)
    if protocol == "k-shot":
        n_test = min(int(np.floor(test_frac * g.n)), rest.size)
        test_idx, val_idx = rest[:n_test], rest[n_test:]
    else:
        if val + test > rest.size:
            raise ProtocolError(f"need {val + test} non-train nodes, have {rest.size}")
        val_idx, test_idx = rest[:val], rest[val:val + test]
    return Splits(train, np.sort(val_idx), np.sort(test_idx))


# -- adjacency and diffusion --------------------------------------------------

def adjacency(g: Graph, self_loops: bool = False, sparse: bool = False):
    u, v = g.edges[:, 0], g.edges[:, 1]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(g.n, g.n))
    if self_loops:
        a = a + sp.identity(g.n, format="csr")
    return a if sparse else a.toarray()


def _sym_normalize(a):
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    if sp.issparse(a):
        d = sp.diags(inv_sqrt)
        return (d @ a @ d).tocsr()
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def sym_norm_adj(g: Graph, sparse: bool = False, self_loops: bool = True):
    """Propagation matrix ``D^-1/2 (A + I) D^-1/2`` (self-loops on by default)."""
    return _sym_normalize(adjacency(g, self_loops=self_loops, sparse=sparse))


@dataclass(frozen=True)
class DiffusionConfig:
    alpha: float = 0.15
    mode: Literal["closed-form", "series"] = "closed-form"
    truncation_order: int = 200
    self_loops: bool = True

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if self.truncation_order < 1:
            raise ValueError("truncation_order must be >= 1")
        if self.mode not in ("closed-form", "series"):
            raise ValueError(f"unknown diffusion mode {self.mode!r}")


def ppr_diffusion(g: Graph, cfg: DiffusionConfig = DiffusionConfig()) -> np.ndarray:
    """Personalized-PageRank diffusion on the symmetric normalization.

    closed-form: ``alpha * (I - (1 - alpha) T)^-1``; series: the same sum
    truncated at ``truncation_order``. Isolated nodes without self-loops have
    zero rows in ``T``.
    """
    cfg.validate()
    t = sym_norm_adj(g, self_loops=cfg.self_loops)
    a = cfg.alpha
    if cfg.mode == "closed-form":
        system = np.eye(g.n) - (1.0 - a) * t
        try:
            s = a * np.linalg.solve(system, np.eye(g.n))
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError("singular diffusion system") from exc
    else:
        s = np.zeros((g.n, g.n))
        term = a * np.eye(g.n)
        for _ in range(cfg.truncation_order + 1):
            s += term
            term = (1.0 - a) * (t @ term)
    if not np.all(np.isfinite(s)):
        raise ArithmeticError("non-finite diffusion matrix")
    # clip roundoff negatives; exact values are non-negative
    return np.maximum(0.5 * (s + s.T), 0.0)
