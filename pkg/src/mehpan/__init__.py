"""Attention models over coded medical histories (recurrent and convolutional),
built on a small numpy autodiff engine."""

from .autodiff import Tensor, backward, no_grad
from .data import (
    Batch,
    PatientHistory,
    SynthConfig,
    Vocab,
    build_vocab,
    compute_diag_duration,
    compute_med_duration,
    generate_synthetic,
    make_batch,
    read_records,
    split_ten_sets,
    write_records,
)
from .models import (
    MehpanModel,
    ModelConfig,
    forward_conv,
    forward_rnn,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from .training import (
    Adam,
    MetricsReport,
    TrainConfig,
    auc,
    binary_metrics,
    evaluate_protocol,
    predict,
    train,
)

__version__ = "0.1.0"
