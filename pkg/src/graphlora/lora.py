"""Frozen backbone plus a parallel low-rank GNN branch, feature projector and classifier.

At every layer both branches read the same combined input ``H^{l-1}``::

    H^l = ReLU(P H^{l-1} W^l + b^l) + ReLU(P H^{l-1} W_B^l W_A^l)

The two final-layer branch outputs are returned separately (``H`` and
``H'``) for the contrastive loss, and their sum feeds the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mpnn import BackboneParams, glorot
from .numerics import ContractError, Tensor, as_tensor, make_rng, spmm

__all__ = [
    "LoraConfig",
    "AdaptedModel",
    "build_adapted_model",
    "project_features",
    "lora_forward",
    "classify",
    "trainable_parameter_fraction",
    "softmax_np",
]


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    init_scale_a: float = 0.01
    # W_B is not zero-initialized: a zero adapter product puts every adapter
    # pre-activation at the ReLU kink, where the subgradient 0 stalls training.
    init_scale_b: float = 0.01
    seed: int = 0
    use_projector: bool = True
    use_lora_branch: bool = True
    full_rank: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


@dataclass
class AdaptedModel:
    """Parameter store with an explicit frozen/trainable split."""

    params: dict[str, np.ndarray]
    frozen: frozenset[str]
    num_layers: int
    config: LoraConfig = field(default_factory=LoraConfig)

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def backbone(self) -> BackboneParams:
        return BackboneParams.from_dict({k: self.params[k] for k in self.frozen}, frozen=True)

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in self.trainable}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].copy() for k in self.trainable}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k] = v.copy()

    def adapter_delta(self, layer: int) -> np.ndarray:
        if f"dW{layer}" in self.params:
            return self.params[f"dW{layer}"]
        return self.params[f"B{layer}"] @ self.params[f"A{layer}"]


def build_adapted_model(backbone: BackboneParams, target_dim: int, num_classes: int,
                        cfg: LoraConfig = LoraConfig()) -> AdaptedModel:
    rng = make_rng(cfg.seed)
    frozen = backbone.freeze().as_dict()
    params: dict[str, np.ndarray] = dict(frozen)
    dims = backbone.dims
    source_dim = dims[0]
    if cfg.use_projector:
        if target_dim == source_dim:
            params["proj_W"] = np.eye(target_dim)
        else:
            params["proj_W"] = glorot(rng, target_dim, source_dim)
        params["proj_b"] = np.zeros(source_dim)
    elif target_dim != source_dim:
        raise ContractError(
            f"without a projector the target width {target_dim} must equal the source width {source_dim}")
    if cfg.use_lora_branch:
        for l in range(backbone.num_layers):
            b = cfg.init_scale_b * rng.standard_normal((dims[l], cfg.rank))
            a = cfg.init_scale_a * rng.standard_normal((cfg.rank, dims[l + 1]))
            if cfg.full_rank:
                params[f"dW{l}"] = b @ a
            else:
                params[f"B{l}"] = b
                params[f"A{l}"] = a
    params["cls_W"] = glorot(rng, dims[-1], num_classes)
    params["cls_b"] = np.zeros(num_classes)
    return AdaptedModel(params, frozenset(frozen), backbone.num_layers, cfg)


def project_features(x, params) -> Tensor:
    """Single linear projection ``X @ W + b``; identity when no projector is present."""
    x = as_tensor(x)
    if "proj_W" not in params:
        return x
    w = as_tensor(params["proj_W"])
    if x.shape[1] != w.shape[0]:
        raise ContractError(f"features have width {x.shape[1]}, projector expects {w.shape[0]}")
    out = x @ w
    if "proj_b" in params:
        out = out + as_tensor(params["proj_b"])
    return out


def lora_forward(z, P, params, num_layers: int):
    """Run both branches; returns ``(H, H_prime, H_sum)`` (``H_prime`` is None without adapters)."""
    h = as_tensor(z)
    n = h.shape[0]
    if P.shape != (n, n):
        raise ContractError(f"propagation matrix is {P.shape}, expected {(n, n)}")
    frozen_out = adapter_out = None
    for l in range(num_layers):
        w = as_tensor(params[f"W{l}"])
        if h.shape[1] != w.shape[0]:
            raise ContractError(f"layer {l}: input width {h.shape[1]} != {w.shape[0]}")
        ph = spmm(P, h)
        pre = ph @ w
        if f"b{l}" in params:
            pre = pre + as_tensor(params[f"b{l}"])
        frozen_out = pre.relu()
        if f"B{l}" in params:
            adapter_out = ((ph @ as_tensor(params[f"B{l}"])) @ as_tensor(params[f"A{l}"])).relu()
        elif f"dW{l}" in params:
            adapter_out = (ph @ as_tensor(params[f"dW{l}"])).relu()
        else:
            adapter_out = None
        h = frozen_out if adapter_out is None else frozen_out + adapter_out
    return frozen_out, adapter_out, h


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def classify(h_sum, params):
    """Linear head: returns ``(logits, probs, predictions)``; ties go to the lowest class."""
    h_sum = as_tensor(h_sum)
    logits = h_sum @ as_tensor(params["cls_W"])
    if "cls_b" in params:
        logits = logits + as_tensor(params["cls_b"])
    probs = logits.softmax(axis=1)
    preds = np.argmax(probs.data, axis=1)
    return logits, probs, preds


def trainable_parameter_fraction(model: AdaptedModel) -> float:
    total = sum(v.size for v in model.params.values())
    tuned = sum(model.params[k].size for k in model.trainable)
    return tuned / total if total else 0.0
