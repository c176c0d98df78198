"""Deep supervised hashing on a small numpy autodiff engine.

A CNN with channel/spatial attention and residual shortcuts maps images to
k-bit codes. Training reweights a contrastive pair loss by the classifier's
confidence so that confusable pairs dominate. Retrieval is exact Hamming
search over bit-packed codes, scored by MAP, Precision@k and precision
within a Hamming radius.
"""

from .data import LabeledDataset, SyntheticSpec, generate_synthetic, load_cifar10_bin, load_manifest, split
from .hashing import CodeDatabase, HammingIndex, HashCode, build_index, hamming_distance, quantize, radius_query, topk_query
from .losses import LossConfig, PairBatch, hard_pairwise_loss, total_loss
from .metrics import EvalConfig, EvalReport, evaluate
from .network import CbamConfig, LayerSpec, Network, NetworkConfig, ablation_variants
from .tensor import Tensor, backward, grad_check
from .trainer import TrainConfig, encode_dataset, train

__version__ = "0.1.0"

__all__ = [
    "CbamConfig", "CodeDatabase", "EvalConfig", "EvalReport", "HammingIndex", "HashCode", "LabeledDataset",
    "LayerSpec", "LossConfig", "Network", "NetworkConfig", "PairBatch", "SyntheticSpec", "Tensor", "TrainConfig",
    "ablation_variants", "backward", "build_index", "encode_dataset", "evaluate", "generate_synthetic",
    "grad_check", "hamming_distance", "hard_pairwise_loss", "load_cifar10_bin", "load_manifest", "quantize",
    "radius_query", "split", "topk_query", "total_loss", "train",
]
