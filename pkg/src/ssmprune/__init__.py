"""Self-similarity based structured filter pruning for small CNNs.

Filters of each conv layer are flattened to vectors, scored against each
other with a distance metric (l2, cosine, cityblock or KL over softmax-
normalized weights), ranked by nearest-neighbor distance (greedy) or by
the trapezoidal area under their similarity row (area), and physically
removed epoch by epoch while the network trains. No finetuning phase.
"""

from .engine import (
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelGraph,
    PruneConfig,
    PruneReport,
    RatioBase,
    ReluLayer,
    SoftmaxXentLayer,
    conv_param_count,
    prune_conv_layer,
    prune_step,
)
from .io import DatasetSpec, load_checkpoint, load_cifar10, save_checkpoint
from .ranking import PruneSelection, Ranking, RankMethod, area_rank, greedy_rank, select_prune_set
from .similarity import Metric, SimilarityMatrix, build_ssm, distance, normalize_for_kl
from .tensor_core import FilterSet, Matrix, Tensor4, flatten_filters, remove_rows, unflatten_filters
from .trainer import EpochRecord, TrainConfig, backward, evaluate, forward, train_prune, vgg_mini

__version__ = "0.1.0"
