"""Parameter-efficient graph transfer: frozen GNN backbone, low-rank branch, structure-aware alignment."""

from .graphio import Graph, Splits, SynthSpec, gen_synth, load_graph, make_splits, save_graph
from .lora import LoraConfig, build_adapted_model, lora_forward
from .mpnn import BackboneParams, GnnConfig, PretrainConfig
from .objectives import KernelConfig, LossWeights
from .pipeline import RunConfig, Variant, ablate, finetune, pretrain, run_seeds
from .theory import TheoryConfig, verify_expressivity

__version__ = "0.1.0"
