"""
Transfer across a shifted graph
===============================

Pretrain a small GNN on one planted-partition graph, then adapt it to a
second graph whose features are rotated and shifted and whose edges are
less homophilous. Compare against training only a linear head.
"""

import numpy as np

from graphlora import pipeline as pl

# the desk configuration: 64/32 hidden units, 100 fine-tuning epochs
cfg = pl.desk_config(seeds=(0, 1))
source = pl.load_or_generate(None, cfg.synth_source)
target = pl.load_or_generate(None, cfg.synth_target)
print(f"source: {source.n} nodes, {source.num_edges} edges")
print(f"target: {target.n} nodes, {target.num_edges} edges")

# the two feature clouds barely overlap
gap = np.linalg.norm(source.features.mean(0) - target.features.mean(0))
print(f"distance between feature means: {gap:.2f}")

pre = pl.pretrain(source, cfg)
ctx = pl.TargetContext.build(target, cfg.diffusion_config)

full, runs = pl.run_seeds(pre, target, cfg, pl.FULL, ctx, keep_models=True)
direct = pl.run_seeds(pre, target, cfg, pl.DIRECT_TRANSFER, ctx)
print(f"adapted:         {full.mean:.3f} +- {full.std:.3f}")
print(f"head only:       {direct.mean:.3f} +- {direct.std:.3f}")
print(f"trainable share: {full.trainable_fraction:.3f}")

# the backbone never moved
r = runs[0]
print("frozen digest unchanged:", r.frozen_digest_before == r.frozen_digest_after)

# per-term losses at the first and last recorded step
first, last = r.history[0], r.history[-1]
for k in ("cls", "smmd", "cl", "str", "reg"):
    print(f"  {k:>4}: {first[k]:9.4f} -> {last[k]:9.4f}")

# embeddings separate the classes better after adaptation; all rows sit in
# the positive orthant, so center them before comparing angles
def separation(model):
    emb = pl.predict(model, ctx)[1]
    return pl.class_separation(emb - emb.mean(0), target.labels)


init = pl.build_adapted_model(pre.backbone, target.d, target.num_classes, cfg.lora_config(0, pl.FULL))
before, after = separation(init), separation(r.model)
print(f"class separation {before:.3f} -> {after:.3f}")
