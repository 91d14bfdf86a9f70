"""Propagate/transform message-passing backbone and its pretraining.

Node-major orientation is used throughout: ``H`` is ``n x d`` and a layer is
``ReLU((P @ H) @ W + b)``. This is the transpose of the features-as-columns
form ``ReLU(W H P + B)`` and is equivalent for symmetric ``P``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .graphio import Graph, sym_norm_adj
from .numerics import AdamState, ContractError, Tensor, adam_step, as_tensor, grad_of, make_rng, spmm

log = logging.getLogger(__name__)

__all__ = [
    "TrainingError",
    "GnnConfig",
    "BackboneParams",
    "PretrainConfig",
    "init_backbone",
    "layer_forward",
    "forward",
    "infonce",
    "pretrain_supervised",
    "pretrain_contrastive",
    "drop_edges",
    "mask_features",
]


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class GnnConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (512, 256)
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("need at least one layer")
        if self.input_dim < 1 or min(self.hidden_dims) < 1:
            raise ValueError("layer widths must be positive")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims)


@dataclass
class BackboneParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    frozen: bool = False

    def __post_init__(self):
        for i in range(1, len(self.weights)):
            if self.weights[i - 1].shape[1] != self.weights[i].shape[0]:
                raise ContractError(f"layer {i} input width does not match layer {i - 1}")
        for w, b in zip(self.weights, self.biases):
            if b is not None and b.shape != (w.shape[1],):
                raise ContractError("bias width does not match weight")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{l}"] = w
            if b is not None:
                out[f"b{l}"] = b
        return out

    @classmethod
    def from_dict(cls, params: dict[str, np.ndarray], frozen: bool = False) -> "BackboneParams":
        count = sum(1 for k in params if k.startswith("W") and k[1:].isdigit())
        weights = [np.array(params[f"W{l}"], dtype=np.float64) for l in range(count)]
        biases = [np.array(params[f"b{l}"], dtype=np.float64).reshape(-1) if f"b{l}" in params else None
                  for l in range(count)]
        return cls(weights, biases, frozen)

    def freeze(self) -> "BackboneParams":
        weights = [w.copy() for w in self.weights]
        biases = [None if b is None else b.copy() for b in self.biases]
        for arr in (*weights, *(b for b in biases if b is not None)):
            arr.setflags(write=False)
        return BackboneParams(weights, biases, frozen=True)

    def num_entries(self) -> int:
        return sum(a.size for a in self.as_dict().values())


@dataclass(frozen=True)
class PretrainConfig:
    mode: Literal["supervised", "contrastive"] = "contrastive"
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    edge_drop: float = 0.2
    feature_mask: float = 0.2
    temperature: float = 0.5
    anchor_batch: int = 512
    seed: int = 0

    def __post_init__(self):
        for p in (self.edge_drop, self.feature_mask):
            if not 0.0 <= p < 1.0:
                raise ValueError("augmentation probabilities must lie in [0, 1)")
        if self.mode not in ("supervised", "contrastive"):
            raise ValueError(f"unknown pretraining mode {self.mode!r}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_backbone(cfg: GnnConfig, rng: np.random.Generator) -> BackboneParams:
    dims = cfg.dims
    weights = [glorot(rng, dims[l], dims[l + 1]) for l in range(cfg.num_layers)]
    biases = [np.zeros(dims[l + 1]) if cfg.use_bias else None for l in range(cfg.num_layers)]
    return BackboneParams(weights, biases)


def layer_forward(h_prev, P, weight, bias=None) -> Tensor:
    """One propagate + transform step: ``ReLU((P @ H) @ W + b)``."""
    h_prev = as_tensor(h_prev)
    weight = as_tensor(weight)
    n = h_prev.shape[0]
    if P.shape != (n, n):
        raise ContractError(f"propagation matrix is {P.shape}, expected {(n, n)}")
    if h_prev.shape[1] != weight.shape[0]:
        raise ContractError(f"features have width {h_prev.shape[1]}, weight expects {weight.shape[0]}")
    pre = spmm(P, h_prev) @ weight
    if bias is not None:
        pre = pre + as_tensor(bias)
    return pre.relu()


def forward(x, P, backbone: BackboneParams | dict, return_all: bool = False):
    """Apply every layer in order. With ``return_all`` the per-layer outputs are returned."""
    params = backbone.as_dict() if isinstance(backbone, BackboneParams) else backbone
    count = sum(1 for k in params if k.startswith("W") and k[1:].isdigit())
    h = as_tensor(x)
    acts = [h]
    for l in range(count):
        h = layer_forward(h, P, params[f"W{l}"], params.get(f"b{l}"))
        acts.append(h)
    return acts if return_all else h


def _row_normalize(h: Tensor, floor: float = 1e-12) -> Tensor:
    norms = ((h * h).sum(axis=1, keepdims=True)).clamp_min(floor * floor).sqrt()
    return h / norms


def infonce(h1, h2, temperature: float, anchors: np.ndarray | None = None) -> Tensor:
    """Symmetric cross-view InfoNCE with same-node pairs as positives.

    Anchors (default: all rows) are contrasted against every row of the
    other view.
    """
    z1 = _row_normalize(as_tensor(h1))
    z2 = _row_normalize(as_tensor(h2))
    idx = np.arange(z1.shape[0]) if anchors is None else np.asarray(anchors)
    total = None
    for a, b in ((z1, z2), (z2, z1)):
        logits = (a[idx] @ b.T) * (1.0 / temperature)
        pos = logits[np.arange(idx.size), idx]
        term = (logits.logsumexp(axis=1) - pos).mean()
        total = term if total is None else total + term
    return total * 0.5


def drop_edges(g: Graph, p: float, rng: np.random.Generator) -> Graph:
    if p <= 0 or g.num_edges == 0:
        return g
    keep = rng.random(g.num_edges) >= p
    return Graph(n=g.n, edges=g.edges[keep], features=g.features, labels=g.labels,
                 num_classes=g.num_classes)


def mask_features(x: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if p <= 0:
        return x
    keep = rng.random(x.shape[1]) >= p
    return x * keep


def _check_finite_loss(value: float, epoch: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{what}: non-finite loss {value!r} at epoch {epoch}")


def pretrain_supervised(g: Graph, gnn: GnnConfig, cfg: PretrainConfig,
                        return_history: bool = False, return_head: bool = False):
    """Train backbone + linear head with cross-entropy; return the frozen backbone.

    Uses the graph's training split if present, otherwise every node. The
    head is discarded unless ``return_head`` is set.
    """
    rng = make_rng(cfg.seed)
    backbone = init_backbone(gnn, rng)
    params = backbone.as_dict()
    params["head_W"] = glorot(rng, gnn.dims[-1], g.num_classes)
    params["head_b"] = np.zeros(g.num_classes)
    train = g.splits.train if g.splits is not None else np.arange(g.n)
    P = sym_norm_adj(g, sparse=True)
    onehot = np.eye(g.num_classes)[g.labels[train]]

    def loss_fn(p):
        h = forward(g.features, P, p)
        logits = h[train] @ p["head_W"] + p["head_b"]
        return -(logits.log_softmax(axis=1) * onehot).sum(axis=1).mean()

    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        value, grads = grad_of(loss_fn, params)
        _check_finite_loss(value, epoch, "supervised pretraining")
        history.append(value)
        adam_step(opt, params, grads)
    result = BackboneParams.from_dict({k: v for k, v in params.items() if not k.startswith("head")})
    out = [result.freeze()]
    if return_history:
        out.append(history)
    if return_head:
        out.append({k: v for k, v in params.items() if k.startswith("head")})
    return tuple(out) if len(out) > 1 else out[0]


def pretrain_contrastive(g: Graph, gnn: GnnConfig, cfg: PretrainConfig,
                         return_history: bool = False):
    """Label-free pretraining: two augmented views per epoch, cross-view InfoNCE."""
    rng = make_rng(cfg.seed)
    params = init_backbone(gnn, rng).as_dict()
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        g1 = drop_edges(g, cfg.edge_drop, rng)
        g2 = drop_edges(g, cfg.edge_drop, rng)
        x1 = mask_features(g.features, cfg.feature_mask, rng)
        x2 = mask_features(g.features, cfg.feature_mask, rng)
        p1 = sym_norm_adj(g1, sparse=True)
        p2 = sym_norm_adj(g2, sparse=True)
        anchors = None
        if cfg.anchor_batch and cfg.anchor_batch < g.n:
            anchors = np.sort(rng.choice(g.n, size=cfg.anchor_batch, replace=False))

        def loss_fn(p):
            return infonce(forward(x1, p1, p), forward(x2, p2, p), cfg.temperature, anchors)

        value, grads = grad_of(loss_fn, params)
        _check_finite_loss(value, epoch, "contrastive pretraining")
        history.append(value)
        adam_step(opt, params, grads)
    result = BackboneParams.from_dict(params).freeze()
    return (result, history) if return_history else result
