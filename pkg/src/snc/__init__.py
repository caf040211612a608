"""Locally competitive networks with bit-packed subnetwork codes.

Train small ReLU / LWTA / maxout / sigmoid networks, extract per-example
binary masks of which units were active, and run Hamming-distance nearest
neighbor classification and retrieval over the packed codes.
"""

from .codestore import CodeStore, Neighbor, build, knn_classify, load, save, topk
from .data import Dataset, load_idx, split, synthetic_blobs, write_idx
from .errors import (
    ConfigurationError,
    DimensionError,
    EmptyStoreError,
    FormatError,
    NumericError,
    SncError,
)
from .model import (
    ActivationKind,
    LayerSpec,
    NetworkParams,
    TrainConfig,
    activate,
    affine_forward,
    forward,
    init_network,
    load_checkpoint,
    loss_and_backward,
    save_checkpoint,
    sgd_momentum_step,
    test_error,
    train,
)
from .submask import (
    Submask,
    extract_submask,
    extract_submasks,
    hamming,
    pack,
    threshold_mask,
    unpack,
)

__version__ = "0.1.0"
