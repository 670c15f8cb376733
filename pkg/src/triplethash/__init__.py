"""Unsupervised binary image descriptors with Hamming-space retrieval."""

from .dataset import (
    Dataset,
    ImageSample,
    RotationConfig,
    Triplet,
    load_cifar10,
    load_mnist_idx,
    rotate_image,
    sample_triplets,
)
from .losses import (
    LossReport,
    LossWeights,
    TripletConfig,
    combined_loss,
    entropy_loss,
    euclidean_sq,
    quantization_loss,
    rotation_invariance_loss,
    triplet_loss,
)
from .network import (
    LayerSpec,
    NetworkParams,
    OptimizerState,
    backward,
    build_network,
    default_layer_spec,
    forward,
    load_params,
    save_params,
    sgd_step,
)
from .retrieval import (
    CodeDatabase,
    HashCode,
    Neighbor,
    binarize,
    encode_dataset,
    hamming_distance,
    knn_search,
    load_codes,
    lsh_encode,
    radius_search,
    save_codes,
)
from .training import TrainConfig, TrainLog, train, train_phase1, train_phase2
from .evaluation import (
    EvalConfig,
    EvalReport,
    PRPoint,
    average_precision,
    evaluate,
    export_report,
    mean_ap,
    pr_curve,
    split_query_gallery,
)

__version__ = "0.1.0"
