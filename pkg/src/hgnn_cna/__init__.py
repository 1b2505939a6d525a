"""High-order (t-product) graph neural network with common-neighbour-aware aggregation."""

from .cna import CnaParams, cn_oracle, cn_scores, cna_forward, normalize_scores
from .graph_data import (
    DynamicGraph,
    SampleSet,
    build_snapshots,
    init_features,
    load_cache,
    normalize_adjacency,
    parse_edge_list,
    save_cache,
    split_temporal,
)
from .model import ModelParams, causal_predict, forward, load_checkpoint, save_checkpoint
from .tensor_core import Transform, facewise_product, t_product
from .train import EvalReport, TrainConfig, grad_check, train_loop

__version__ = "0.1.0"
