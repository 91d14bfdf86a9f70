"""End-to-end orchestration: pretraining, fine-tuning, evaluation, ablations, audits."""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .checkpoint import frozen_digest, load_checkpoint, save_checkpoint
from .graphio import DiffusionConfig, Graph, Splits, SynthSpec, gen_synth, load_graph, make_splits, \
    ppr_diffusion, save_graph, sym_norm_adj
from .lora import AdaptedModel, LoraConfig, build_adapted_model, classify, lora_forward, \
    project_features, trainable_parameter_fraction
from .mpnn import BackboneParams, GnnConfig, PretrainConfig, TrainingError, forward, \
    pretrain_contrastive, pretrain_supervised
from .numerics import AdamState, Tensor, adam_step, finite_diff_check, grad_of, make_rng, write_matrix
from .objectives import KernelConfig, LossParts, LossWeights, classification_loss, contrastive_loss, \
    mmd, param_norm, sample_batch, sample_negatives, smmd, smmd_gamma, structure_reg, total_loss

log = logging.getLogger(__name__)

OUTPUT_ENV = "GRAPHLORA_OUTPUT_DIR"
PART_NAMES = ("cls", "smmd", "cl", "str", "reg")


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    """Ablation switches; each one removes or swaps a single component."""

    use_mmd: bool = False
    disable_smmd: bool = False
    disable_cl: bool = False
    disable_str: bool = False
    disable_lowrank: bool = False
    disable_projector: bool = False
    disable_lora_branch: bool = False
    direct_transfer: bool = False

    @property
    def projector(self) -> bool:
        return not (self.disable_projector or self.direct_transfer)

    @property
    def branch(self) -> bool:
        return not (self.disable_lora_branch or self.direct_transfer)

    @property
    def smmd_on(self) -> bool:
        return not (self.disable_smmd or self.disable_projector or self.direct_transfer)

    @property
    def cl_on(self) -> bool:
        return self.branch and not self.disable_cl

    @property
    def str_on(self) -> bool:
        return not (self.disable_str or self.direct_transfer)


FULL = Variant()
DIRECT_TRANSFER = Variant(direct_transfer=True)

# name -> (variant, loss parts allowed to differ from the full model at step 0)
ABLATIONS: dict[str, tuple[Variant, frozenset[str]]] = {
    "w/ mmd": (Variant(use_mmd=True), frozenset({"smmd"})),
    "w/o smmd": (Variant(disable_smmd=True), frozenset({"smmd"})),
    "w/o cl": (Variant(disable_cl=True), frozenset({"cl"})),
    "w/o str": (Variant(disable_str=True), frozenset({"str"})),
    "w/o lrd": (Variant(disable_lowrank=True), frozenset({"reg"})),
    "w/o nfa": (Variant(disable_projector=True), frozenset({"smmd", "reg"})),
    "w/o sktl": (Variant(disable_lora_branch=True), frozenset({"cl", "cls", "str", "reg"})),
}


@dataclass
class RunConfig:
    source: str | None = None
    target: str | None = None
    checkpoint: str | None = None
    output_dir: str = "runs"
    model: str | None = None
    split_name: str = "test"
    synth_source: dict | None = None
    synth_target: dict | None = None
    hidden_dims: tuple[int, ...] = (512, 256)
    pretrain: dict = field(default_factory=dict)
    lora: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    kernel_bandwidth: float | None = None
    diffusion: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: {"protocol": "k-shot", "k": 10})
    epochs: int = 200
    patience: int = 50
    lr: float = 5e-3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ablation: dict = field(default_factory=dict)
    source_sample_rows: int = 2048
    log_steps: bool = False
    gradcheck_tol: float = 1e-5
    theory: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        out["seeds"] = list(self.seeds)
        return out

    @property
    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.pretrain)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.loss)

    @property
    def diffusion_config(self) -> DiffusionConfig:
        return DiffusionConfig(**self.diffusion)

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.kernel_bandwidth)

    @property
    def variant(self) -> Variant:
        return Variant(**self.ablation)

    def lora_config(self, seed: int, variant: Variant) -> LoraConfig:
        base = dict(self.lora)
        base.setdefault("seed", seed)
        return LoraConfig(**{**base, "use_projector": variant.projector,
                             "use_lora_branch": variant.branch,
                             "full_rank": variant.disable_lowrank})

    def check_paths(self, *names: str) -> None:
        """Every named path that is set must exist at run start."""
        for name in names:
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise FileNotFoundError(f"{name} path {value} does not exist")

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Apply ``dotted.key=json_value`` overrides to a nested config dict."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    return out


# -- pretraining --------------------------------------------------------------

@dataclass
class PretrainedSource:
    backbone: BackboneParams
    source_features: np.ndarray
    manifest: dict


def pretrain(source: Graph, cfg: RunConfig) -> PretrainedSource:
    pcfg = cfg.pretrain_config
    gnn = GnnConfig(source.d, cfg.hidden_dims)
    if pcfg.mode == "supervised":
        backbone = pretrain_supervised(source, gnn, pcfg)
    else:
        backbone = pretrain_contrastive(source, gnn, pcfg)
    rng = make_rng(pcfg.seed ^ 0xC0FFEE)
    rows = min(cfg.source_sample_rows, source.n)
    sample = np.sort(rng.choice(source.n, size=rows, replace=False))
    manifest = {"kind": "backbone", "layer_dims": list(gnn.dims), "use_bias": gnn.use_bias,
                "seed": pcfg.seed, "pretrain_mode": pcfg.mode,
                "pretrain": asdict(pcfg), "source_feature_rows": rows,
                "frozen": sorted(backbone.as_dict())}
    return PretrainedSource(backbone, source.features[sample].copy(), manifest)


def save_pretrained(pre: PretrainedSource, path) -> Path:
    tensors = {**pre.backbone.as_dict(), "source_features": pre.source_features}
    return save_checkpoint(path, pre.manifest, tensors)


def load_pretrained(path) -> PretrainedSource:
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "backbone":
        raise ValueError(f"{path} is not a pretrained backbone checkpoint")
    feats = tensors.pop("source_features")
    return PretrainedSource(BackboneParams.from_dict(tensors).freeze(), feats, manifest)


# -- fine-tuning --------------------------------------------------------------

@dataclass
class TargetContext:
    """Per-target-graph quantities that do not depend on the seed."""

    graph: Graph
    P: object
    gamma: np.ndarray

    @classmethod
    def build(cls, g: Graph, diffusion: DiffusionConfig = DiffusionConfig()) -> "TargetContext":
        return cls(g, sym_norm_adj(g, sparse=True), smmd_gamma(ppr_diffusion(g, diffusion)))


def compute_parts(p: Mapping, model: AdaptedModel, ctx: TargetContext, source_features: np.ndarray,
                  train_idx: np.ndarray, weights: LossWeights, kernel: KernelConfig,
                  variant: Variant, batch, negatives) -> tuple[LossParts, Tensor]:
    """Loss parts for one step; disabled or zero-weighted terms are 0."""
    g = ctx.graph
    z = project_features(g.features, p)
    h, h_prime, h_sum = lora_forward(z, ctx.P, p, model.num_layers)
    _, probs, _ = classify(h_sum, p)
    zero = Tensor(0.0)
    cls_part = classification_loss(probs, g.labels, train_idx)
    smmd_part = zero
    if variant.smmd_on and weights.smmd > 0:
        if variant.use_mmd:
            smmd_part = mmd(z[batch[0]], source_features[batch[1]], kernel)
        else:
            smmd_part = smmd(z, source_features, ctx.gamma, kernel, batch=batch)
    cl_part = zero
    if variant.cl_on and h_prime is not None and weights.cl > 0:
        cl_part = contrastive_loss(h, h_prime, g.labels, train_idx, weights, anchors=batch[0])
    str_part = zero
    if variant.str_on and weights.str > 0:
        str_part = structure_reg(probs, g, negatives)
    reg_part = param_norm({k: p[k] for k in model.trainable})
    return LossParts(cls_part, smmd_part, cl_part, str_part, reg_part), h_sum


def predict(model: AdaptedModel, ctx: TargetContext) -> tuple[np.ndarray, np.ndarray]:
    """``(predictions, H_sum)`` for every node, without building a gradient tape."""
    z = project_features(ctx.graph.features, model.params)
    _, _, h_sum = lora_forward(z, ctx.P, model.params, model.num_layers)
    _, _, preds = classify(h_sum, model.params)
    return preds, h_sum.data


def accuracy(preds: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("empty evaluation mask")
    return float(np.mean(preds[idx] == labels[idx]))


@dataclass
class FinetuneResult:
    model: AdaptedModel
    val_acc: float
    test_acc: float
    best_epoch: int
    history: list[dict]
    val_curve: list[float]
    frozen_digest_before: str
    frozen_digest_after: str
    probe_before: np.ndarray
    probe_after: np.ndarray
    wall_clock: float


def frozen_probe(model: AdaptedModel, rows: int = 32, seed: int = 0x9E37) -> np.ndarray:
    """Frozen backbone output on a fixed random probe batch (identity propagation)."""
    x = make_rng(seed).standard_normal((rows, model.backbone().dims[0]))
    return forward(x, np.eye(rows), model.backbone()).data.copy()


def finetune(pre: PretrainedSource, target: Graph, splits: Splits, cfg: RunConfig, seed: int,
             variant: Variant = FULL, ctx: TargetContext | None = None,
             max_epochs: int | None = None, on_step: Callable[[dict], None] | None = None
             ) -> FinetuneResult:
    """Minimize the combined objective over the trainable set with Adam; early-stop on validation accuracy."""
    started = time.perf_counter()
    ctx = ctx or TargetContext.build(target, cfg.diffusion_config)
    weights = cfg.loss_weights
    if variant.direct_transfer:
        weights = replace(weights, smmd=0.0, cl=0.0, str=0.0)
    kernel = cfg.kernel
    model = build_adapted_model(pre.backbone, target.d, target.num_classes, cfg.lora_config(seed, variant))
    digest_before = frozen_digest(model.params, model.frozen)
    probe_before = frozen_probe(model)
    rng = make_rng(seed)
    train_idx = splits.train
    src = pre.source_features
    opt = AdamState(lr=cfg.lr)
    frozen_consts = {k: Tensor(model.params[k]) for k in model.frozen}

    best_val, best_epoch, best_snap = -1.0, -1, model.snapshot()
    history, val_curve = [], []
    epochs = cfg.epochs if max_epochs is None else max_epochs
    stale = 0
    for epoch in range(epochs):
        batch = sample_batch(target.n, src.shape[0], weights.batch_size, rng)
        negatives = sample_negatives(target, weights.neg_samples, rng)

        def loss_fn(leaves):
            p = {**frozen_consts, **leaves}
            parts, _ = compute_parts(p, model, ctx, src, train_idx, weights, kernel, variant,
                                     batch, negatives)
            loss_fn.parts = parts
            return total_loss(parts, weights)

        value, grads = grad_of(loss_fn, model.trainable_params())
        record = {"step": epoch, **loss_fn.parts.values(), "total": value}
        history.append(record)
        if on_step is not None:
            on_step(record)
        adam_step(opt, model.params, grads, frozen=model.frozen)

        preds, _ = predict(model, ctx)
        val_acc = accuracy(preds, target.labels, splits.val) if splits.val.size else \
            accuracy(preds, target.labels, train_idx)
        val_curve.append(val_acc)
        if val_acc > best_val:
            best_val, best_epoch, best_snap = val_acc, epoch, model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.restore(best_snap)
    preds, _ = predict(model, ctx)
    test_acc = accuracy(preds, target.labels, splits.test)
    return FinetuneResult(model, best_val, test_acc, best_epoch, history, val_curve,
                          digest_before, frozen_digest(model.params, model.frozen),
                          probe_before, frozen_probe(model),
                          time.perf_counter() - started)


def step_zero_parts(pre: PretrainedSource, target: Graph, splits: Splits, cfg: RunConfig, seed: int,
                    variant: Variant, ctx: TargetContext | None = None) -> dict[str, float]:
    """Loss parts at initialization, using the same sampled batch as :func:`finetune`."""
    ctx = ctx or TargetContext.build(target, cfg.diffusion_config)
    weights = cfg.loss_weights
    model = build_adapted_model(pre.backbone, target.d, target.num_classes, cfg.lora_config(seed, variant))
    rng = make_rng(seed)
    batch = sample_batch(target.n, pre.source_features.shape[0], weights.batch_size, rng)
    negatives = sample_negatives(target, weights.neg_samples, rng)
    parts, _ = compute_parts(model.params, model, ctx, pre.source_features, splits.train, weights,
                             cfg.kernel, variant, batch, negatives)
    return parts.values()


# -- reports ------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracies: list[float]
    mean: float
    std: float
    trainable_fraction: float
    wall_clock: float
    loss_curves: list[list[dict]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @classmethod
    def from_runs(cls, runs: list[FinetuneResult], seeds, notes=None) -> "MetricsReport":
        accs = [r.test_acc for r in runs]
        return cls(accs, float(np.mean(accs)), float(np.std(accs)),
                   trainable_parameter_fraction(runs[0].model),
                   float(sum(r.wall_clock for r in runs)),
                   [r.history for r in runs], list(seeds), notes or {})

    def as_dict(self, with_curves: bool = True) -> dict:
        out = asdict(self)
        if not with_curves:
            out.pop("loss_curves")
        return out


def splits_for(target: Graph, cfg: RunConfig, seed: int) -> Splits:
    spec = dict(cfg.split)
    protocol = spec.pop("protocol", "k-shot")
    if protocol == "given":
        if target.splits is None:
            raise ValueError("split protocol 'given' needs splits.json in the target dataset")
        return target.splits
    return make_splits(target, protocol, seed=seed, **spec)


def run_seeds(pre: PretrainedSource, target: Graph, cfg: RunConfig, variant: Variant = FULL,
              ctx: TargetContext | None = None, keep_models: bool = False):
    ctx = ctx or TargetContext.build(target, cfg.diffusion_config)
    runs = [finetune(pre, target, splits_for(target, cfg, s), cfg, s, variant, ctx) for s in cfg.seeds]
    report = MetricsReport.from_runs(runs, cfg.seeds, notes={
        "source_feature_rows": int(pre.source_features.shape[0]),
        "variant": asdict(variant)})
    return (report, runs) if keep_models else report


def isolation_check(pre: PretrainedSource, target: Graph, cfg: RunConfig, seed: int | None = None,
                    ctx: TargetContext | None = None, tol: float = 1e-12) -> dict[str, dict]:
    """Compare step-0 loss parts of every ablation against the full model."""
    seed = cfg.seeds[0] if seed is None else seed
    ctx = ctx or TargetContext.build(target, cfg.diffusion_config)
    splits = splits_for(target, cfg, seed)
    base = step_zero_parts(pre, target, splits, cfg, seed, FULL, ctx)
    out = {}
    for name, (variant, allowed) in ABLATIONS.items():
        parts = step_zero_parts(pre, target, splits, cfg, seed, variant, ctx)
        changed = sorted(k for k in PART_NAMES if abs(parts[k] - base[k]) > tol * max(1.0, abs(base[k])))
        unexpected = sorted(set(changed) - allowed)
        out[name] = {"changed": changed, "allowed": sorted(allowed), "passed": not unexpected,
                     "unexpected": unexpected}
    return out


def ablate(pre: PretrainedSource, target: Graph, cfg: RunConfig) -> dict:
    """Full model plus the seven ablation variants on shared splits and seeds."""
    ctx = TargetContext.build(target, cfg.diffusion_config)
    rows = {"GraphLoRA": run_seeds(pre, target, cfg, FULL, ctx).as_dict(with_curves=False)}
    for name, (variant, _) in ABLATIONS.items():
        rows[name] = run_seeds(pre, target, cfg, variant, ctx).as_dict(with_curves=False)
    return {"variants": rows, "isolation": isolation_check(pre, target, cfg, ctx=ctx),
            "seeds": list(cfg.seeds)}


# -- model checkpoints and exports ---------------------------------------------

def save_model(model: AdaptedModel, path, extra: dict | None = None) -> Path:
    manifest = {"kind": "adapted", "num_layers": model.num_layers, "frozen": sorted(model.frozen),
                "lora": asdict(model.config), **(extra or {})}
    return save_checkpoint(path, manifest, model.params)


def load_model(path) -> AdaptedModel:
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "adapted":
        raise ValueError(f"{path} is not a fine-tuned model checkpoint")
    for name in manifest["frozen"]:
        tensors[name].setflags(write=False)
    return AdaptedModel(tensors, frozenset(manifest["frozen"]), int(manifest["num_layers"]),
                        LoraConfig(**manifest["lora"]))


def export_embeddings(model: AdaptedModel, g: Graph, path) -> Path:
    """Write final-layer ``H_sum`` rows and labels as matrix blobs in ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _, h_sum = predict(model, TargetContext(g, sym_norm_adj(g, sparse=True), np.zeros((0, 0))))
    write_matrix(h_sum, root / "embeddings.f64")
    write_matrix(g.labels.astype(np.float64).reshape(-1, 1), root / "labels.f64")
    return root


def class_separation(emb: np.ndarray, labels: np.ndarray) -> float:
    """Mean intra-class cosine minus mean inter-class cosine (self-pairs excluded)."""
    norms = np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    cos = (emb / norms) @ (emb / norms).T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra = cos[same & off]
    inter = cos[~same]
    if intra.size == 0 or inter.size == 0:
        return 0.0
    return float(intra.mean() - inter.mean())


# -- gradient audit ----------------------------------------------------------

def micro_instance(seed: int, n: int = 12, d: int = 6, classes: int = 3):
    """Tiny random graph, backbone and adapted model for gradient checks."""
    rng = make_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < 0.3
    labels = np.arange(n) % classes
    g = Graph(n=n, edges=np.stack([iu[keep], ju[keep]], axis=1),
              features=rng.standard_normal((n, d)), labels=labels, num_classes=classes)
    backbone = BackboneParams([rng.standard_normal((d, 5)) * 0.6, rng.standard_normal((5, 4)) * 0.6],
                              [rng.standard_normal(5) * 0.3 + 0.2, rng.standard_normal(4) * 0.3 + 0.2])
    model = build_adapted_model(backbone, d, classes, LoraConfig(rank=2, seed=seed,
                                                                  init_scale_a=0.5, init_scale_b=0.5))
    model.params["proj_W"] = np.eye(d) + 0.3 * rng.standard_normal((d, d))
    model.params["proj_b"] = 0.1 * rng.standard_normal(d)
    source = rng.standard_normal((8, d)) + 0.5
    train = np.flatnonzero(rng.random(n) < 0.6)
    if train.size == 0:
        train = np.arange(classes)
    return g, model, source, train, rng


def gradcheck_suite(seeds: Iterable[int] = range(10), tol: float = 1e-5, h: float = 1e-6) -> dict:
    """Finite-difference audit of every loss term and the combined objective."""
    results: dict[str, list[float]] = {}
    for seed in seeds:
        g, model, source, train, rng = micro_instance(seed)
        ctx = TargetContext.build(g)
        weights = LossWeights(smmd=1.0, cl=1.0, str=1.0, reg=0.1, tau=0.5, epsilon=0.5, batch_size=8,
                              neg_samples=2)
        kernel = KernelConfig(1.5)
        batch = sample_batch(g.n, source.shape[0], weights.batch_size, rng)
        negatives = sample_negatives(g, weights.neg_samples, rng)
        frozen = {k: Tensor(model.params[k]) for k in model.frozen}
        trainable = model.trainable_params()

        def part(name):
            def fn(leaves):
                p = {**frozen, **leaves}
                parts, _ = compute_parts(p, model, ctx, source, train, weights, kernel, FULL, batch, negatives)
                if name == "total":
                    return total_loss(parts, weights)
                if name == "mmd":
                    z = project_features(g.features, p)
                    return mmd(z[batch[0]], source[batch[1]], kernel)
                return getattr(parts, name)
            return fn

        for name in ("cls", "mmd", "smmd", "cl", "str", "reg", "total"):
            rep = finite_diff_check(part(name), trainable, tol=tol, h=h)
            results.setdefault(name, []).append(rep.worst)
    worst = {k: max(v) for k, v in results.items()}
    return {"tol": tol, "h": h, "worst": worst, "passed": all(v <= tol for v in worst.values())}


# -- synthetic benchmark -------------------------------------------------------

def default_synth_pair(seed: int = 0, dim: int = 16) -> tuple[SynthSpec, SynthSpec]:
    """Source/target planted-partition pair used for desk-scale transfer runs."""
    source = SynthSpec(nodes_per_class=200, num_classes=2, p_intra=0.1, p_inter=0.02, dim=dim,
                       separation=1.0, noise=1.0, seed=seed, feature_seed=seed)
    target = replace(source, p_intra=0.06, p_inter=0.03, rotation_deg=30.0, shift=5.0,
                     seed=seed + 1, feature_seed=seed)
    return source, target


def desk_config(**overrides) -> RunConfig:
    """Scaled-down settings for the synthetic transfer benchmark (64/32 hidden units)."""
    source, target = default_synth_pair()
    base = dict(synth_source=asdict(source), synth_target=asdict(target), hidden_dims=(64, 32),
                pretrain={"mode": "contrastive", "epochs": 100, "lr": 1e-2}, epochs=100, patience=30,
                lr=1e-2)
    return RunConfig(**{**base, **overrides})


def load_or_generate(path: str | None, spec: dict | None) -> Graph:
    if path:
        return load_graph(path)
    if spec is not None:
        return gen_synth(SynthSpec(**spec))
    raise ValueError("need a dataset path or a synthetic spec")
