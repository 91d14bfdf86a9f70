"""Loss terms for structure-aware low-rank transfer.

All losses accept plain arrays or :class:`~graphlora.numerics.Tensor` inputs
and return a scalar ``Tensor`` so they can be differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from .graphio import Graph
from .numerics import Tensor, as_tensor, no_grad_value

__all__ = [
    "KernelConfig",
    "LossWeights",
    "LossParts",
    "rbf_kernel",
    "rbf_gram",
    "median_bandwidth",
    "mmd",
    "smmd_gamma",
    "smmd",
    "cosine_matrix",
    "contrastive_loss",
    "sample_negatives",
    "structure_reg",
    "classification_loss",
    "param_norm",
    "total_loss",
    "sample_batch",
    "GAMMA_FLOOR",
]

GAMMA_FLOOR = 1e-8
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel; ``bandwidth=None`` selects the median heuristic per call."""

    bandwidth: float | None = None

    def __post_init__(self):
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class LossWeights:
    smmd: float = 1.0
    cl: float = 1.0
    str: float = 1.0
    reg: float = 1e-4
    tau: float = 0.5
    epsilon: float = 0.5
    batch_size: int = 256
    neg_samples: int = 1

    def __post_init__(self):
        if min(self.smmd, self.cl, self.str, self.reg) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class LossParts:
    cls: Tensor
    smmd: Tensor
    cl: Tensor
    str: Tensor
    reg: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("cls", "smmd", "cl", "str", "reg")}


def rbf_kernel(a, b, cfg: KernelConfig | float = KernelConfig(1.0)) -> float:
    """``exp(-|a - b|^2 / (2 sigma^2))`` for two vectors."""
    sigma = cfg if isinstance(cfg, (int, float)) else cfg.bandwidth
    if sigma is None:
        raise ValueError("a single kernel evaluation needs a fixed bandwidth")
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("kernel arguments must have equal dimension")
    return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * sigma * sigma)))


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    aa = (a * a).sum(axis=1, keepdims=True)
    bb = (b * b).sum(axis=1, keepdims=True).T
    d2 = aa + bb - (a @ b.T) * 2.0
    return d2.clamp_min(0.0)


def median_bandwidth(*sets) -> float:
    """Median pairwise Euclidean distance over the union of the given row sets."""
    rows = np.concatenate([np.atleast_2d(no_grad_value(s)) for s in sets], axis=0)
    sq = np.sum(rows * rows, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T, 0.0)
    iu = np.triu_indices(len(rows), k=1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def rbf_gram(a, b, sigma: float) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return (_sq_dists(a, b) * (-1.0 / (2.0 * sigma * sigma))).exp()


def _bandwidth(cfg: KernelConfig, *sets) -> float:
    return cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(*sets)


def mmd(z_t, x_s, cfg: KernelConfig = KernelConfig()) -> Tensor:
    """Biased squared MMD estimate: ``mean k_tt + mean k_ss - 2 mean k_ts``."""
    z_t, x_s = as_tensor(z_t), as_tensor(x_s)
    if z_t.shape[0] == 0 or x_s.shape[0] == 0:
        raise ValueError("mmd needs non-empty sample sets")
    sigma = _bandwidth(cfg, z_t, x_s)
    return (rbf_gram(z_t, z_t, sigma).mean() + rbf_gram(x_s, x_s, sigma).mean()
            - rbf_gram(z_t, x_s, sigma).mean() * 2.0)


def smmd_gamma(S, floor: float = GAMMA_FLOOR) -> np.ndarray:
    """Pair weights ``log(1 + 1/S)``; entries below ``floor`` are raised to it."""
    S = np.asarray(S, dtype=np.float64)
    if np.any(S < 0):
        raise ValueError("diffusion entries must be non-negative")
    return np.log1p(1.0 / np.maximum(S, floor))


def smmd(z_t, x_s, gamma, cfg: KernelConfig = KernelConfig(),
         batch: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Structure-aware MMD: the target-target term is gamma-weighted and normalized.

    ``batch=(target_idx, source_idx)`` restricts every sum to the sampled rows.
    """
    z_t, x_s = as_tensor(z_t), as_tensor(x_s)
    gamma = np.asarray(gamma, dtype=np.float64)
    if batch is not None:
        t_idx, s_idx = (np.asarray(i, dtype=np.int64) for i in batch)
        if t_idx.size == 0 or s_idx.size == 0:
            raise ValueError("empty batch")
        z_t, x_s = z_t[t_idx], x_s[s_idx]
        gamma = gamma[np.ix_(t_idx, t_idx)]
    if z_t.shape[0] == 0 or x_s.shape[0] == 0:
        raise ValueError("smmd needs non-empty sample sets")
    if gamma.shape != (z_t.shape[0], z_t.shape[0]):
        raise ValueError(f"gamma is {gamma.shape}, expected {(z_t.shape[0],) * 2}")
    sigma = _bandwidth(cfg, z_t, x_s)
    first = (rbf_gram(z_t, z_t, sigma) * gamma).sum() * (1.0 / gamma.sum())
    return first + rbf_gram(x_s, x_s, sigma).mean() - rbf_gram(z_t, x_s, sigma).mean() * 2.0


def cosine_matrix(a, b, floor: float = 1e-12) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na = (a * a).sum(axis=1, keepdims=True).clamp_min(floor * floor).sqrt()
    nb = (b * b).sum(axis=1, keepdims=True).clamp_min(floor * floor).sqrt()
    return (a / na) @ (b / nb).T


def _positive_sets(labels: np.ndarray, train_idx: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): train_idx[labels[train_idx] == c] for c in np.unique(labels[train_idx])}


def contrastive_loss(h, h_prime, labels, train_idx, weights: LossWeights = LossWeights(),
                     anchors: np.ndarray | None = None, reduction: str = "mean") -> Tensor:
    """Label-augmented cross-branch contrastive loss.

    For anchor ``i`` the denominator sums ``exp(rho/tau)`` over the self pair
    ``(h_i, h'_i)``, every ``(h_i, h'_j)`` and every ``(h_i, h_j)`` with
    ``j != i`` (cosine ``rho``). Each labeled same-class training node ``k != i``
    contributes one term with numerator ``e_ii + epsilon * e_ik``; anchors
    without such nodes (including unlabeled anchors) contribute the single
    self-pair term. ``reduction='mean'`` averages each anchor's terms, then
    anchors; ``'sum'`` adds all terms.
    """
    h, h_prime = as_tensor(h), as_tensor(h_prime)
    n = h.shape[0]
    labels = np.asarray(labels)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        raise ValueError("no anchors")
    inv_tau = 1.0 / weights.tau
    cross = cosine_matrix(h[anchors], h_prime) * inv_tau  # (b, n)
    same = cosine_matrix(h[anchors], h) * inv_tau

    rows = np.arange(anchors.size)
    not_self = np.ones((anchors.size, n))
    not_self[rows, anchors] = 0.0
    e_cross = cross.exp()
    e_same = same.exp()
    e_self = e_cross[rows, anchors]
    denom = (e_cross * not_self).sum(axis=1) + (e_same * not_self).sum(axis=1) + e_self
    log_denom = denom.log()

    train_set = set(train_idx.tolist())
    positives = _positive_sets(labels, train_idx)
    pos_rows, pos_cols, term_weight, self_rows, self_weight = [], [], [], [], []
    for r, i in enumerate(anchors.tolist()):
        ks = positives.get(int(labels[i]), np.zeros(0, dtype=np.int64)) if i in train_set else []
        ks = [k for k in np.asarray(ks).tolist() if k != i]
        if ks:
            w = 1.0 / len(ks) if reduction == "mean" else 1.0
            pos_rows.extend([r] * len(ks))
            pos_cols.extend(ks)
            term_weight.extend([w] * len(ks))
        else:
            self_rows.append(r)
            self_weight.append(1.0)
    total = None
    if pos_rows:
        pr = np.asarray(pos_rows)
        num = e_self[pr] + e_cross[pr, np.asarray(pos_cols)] * weights.epsilon
        terms = (num.log() - log_denom[pr]) * np.asarray(term_weight)
        total = terms.sum()
    if self_rows:
        sr = np.asarray(self_rows)
        terms = (cross[sr, anchors[sr]] - log_denom[sr]) * np.asarray(self_weight)
        s = terms.sum()
        total = s if total is None else total + s
    loss = -total
    if reduction == "mean":
        loss = loss * (1.0 / anchors.size)
    return loss


def sample_negatives(g: Graph, count: int, rng: np.random.Generator,
                     max_tries: int = 20) -> np.ndarray:
    """For each undirected edge ``(u, v)`` draw ``count`` non-neighbors of ``u``.

    Returns an ``(m * count', 2)`` array of disconnected pairs; candidates that
    stay adjacent after ``max_tries`` redraws are dropped.
    """
    if count <= 0 or g.num_edges == 0 or g.n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    edge_keys = set((g.edges[:, 0] * g.n + g.edges[:, 1]).tolist())
    src = np.repeat(g.edges[:, 0], count)
    dst = rng.integers(0, g.n, size=src.size)

    def bad(s, d):
        lo, hi = np.minimum(s, d), np.maximum(s, d)
        keys = lo * g.n + hi
        return (s == d) | np.fromiter((k in edge_keys for k in keys.tolist()), bool, keys.size)

    mask = bad(src, dst)
    for _ in range(max_tries):
        if not mask.any():
            break
        dst[mask] = rng.integers(0, g.n, size=int(mask.sum()))
        mask = bad(src, dst)
    keep = ~mask
    return np.stack([src[keep], dst[keep]], axis=1)


def structure_reg(probs, g: Graph, negatives: np.ndarray | None = None,
                  reduction: str = "mean") -> Tensor:
    """Homophily regularizer on prediction vectors (a loss, i.e. minimized).

    ``-sum log s(<y_i, y_j>)`` over both orientations of every edge, plus
    ``-sum log(1 - s(<y_i, y_j>))`` over the sampled disconnected pairs.
    ``reduction='mean'`` divides by the number of pairs.
    """
    probs = as_tensor(probs)
    pos = np.concatenate([g.edges, g.edges[:, ::-1]], axis=0)
    neg = np.zeros((0, 2), dtype=np.int64) if negatives is None else np.asarray(negatives)
    total = Tensor(0.0)
    count = len(pos) + len(neg)
    if len(pos):
        sim = (probs[pos[:, 0]] * probs[pos[:, 1]]).sum(axis=1)
        total = total - sim.log_sigmoid().sum()
    if len(neg):
        sim = (probs[neg[:, 0]] * probs[neg[:, 1]]).sum(axis=1)
        total = total - (-sim).log_sigmoid().sum()
    if reduction == "mean" and count:
        total = total * (1.0 / count)
    return total


def classification_loss(probs, labels, train_idx) -> Tensor:
    """Mean cross-entropy of softmax probabilities over the training nodes."""
    probs = as_tensor(probs)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty training mask")
    labels = np.asarray(labels)
    picked = probs[train_idx, labels[train_idx]]
    return -picked.clamp_min(PROB_FLOOR).log().mean()


def param_norm(params: Mapping[str, Tensor], frozen=frozenset()) -> Tensor:
    """Squared L2 norm over the trainable tensors."""
    total = Tensor(0.0)
    for k, v in params.items():
        if k in frozen:
            continue
        v = as_tensor(v)
        total = total + (v * v).sum()
    return total


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    out = (parts.cls + parts.smmd * weights.smmd + parts.cl * weights.cl
           + parts.str * weights.str + parts.reg * weights.reg)
    if not np.isfinite(out.data):
        bad = {k: v for k, v in parts.values().items() if not np.isfinite(v)}
        from .mpnn import TrainingError
        raise TrainingError(f"non-finite loss parts: {bad}")
    return out


def sample_batch(n_t: int, n_s: int, b: int, rng: np.random.Generator):
    """Uniform without-replacement index samples of size ``min(b, n)`` (sorted)."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    t = np.sort(rng.choice(n_t, size=min(b, n_t), replace=False))
    s = np.sort(rng.choice(n_s, size=min(b, n_s), replace=False))
    return t, s
