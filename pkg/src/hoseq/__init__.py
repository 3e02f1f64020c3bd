"""Multimodal temporal-sequence fusion with two complementary sub-networks.

The common network encodes each modality with an LSTM, fuses the final states
through a trilinear tensor, and distills it with a 3-D convolution and dense
stack; the unique network fuses the raw features the same way at every
timestep and sum-pools over time.  An elementwise mean of the two feature
vectors feeds one affine prediction head.  All differentiation is manual and
every source of randomness is seeded, so runs are bit-reproducible.
"""

from .autodiff_layers import (
    GradCheckReport,
    LstmState,
    Param,
    ParamStore,
    RngStream,
    adam_step,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .common_network import CommonConfig, CommonOutput, common_forward
from .data_io import (
    ModelDims,
    MultimodalDataset,
    MultimodalInstance,
    read_mmseq,
    synth_generate,
    write_mmseq,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    HoseqError,
    NumericError,
    TruncationError,
    UndefinedMetricError,
    UsageError,
)
from .hoseq_model import (
    EarlyStopper,
    HoseqConfig,
    TrainHistory,
    count_parameters,
    fuse,
    init_params,
    mse_loss,
    predict,
    train,
)
from .metrics import MetricsReport, compute_report
from .unique_network import UniqueConfig, UniqueOutput, unique_forward, unique_step

__version__ = "0.1.0"
