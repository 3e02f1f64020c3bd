"""End-to-end model: mean-pooling fusion of the two sub-networks, MSE loss,
the Adam training loop with validation-MAE early stopping, ablation modes,
and parameter accounting.

Modes
-----
* ``full``         — prediction comes from the fusion head over the mean of
                     ``h_com`` and ``h_uni``; both sub-networks train.
* ``common_only``  — prediction is the common network's own head; unique
                     parameters receive no gradient.
* ``unique_only``  — symmetric to the above.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as _metrics
from .autodiff_layers import (
    ParamStore,
    RngStream,
    adam_step,
    dense,
    dense_backward,
    glorot_uniform,
)
from .common_network import (
    CommonConfig,
    common_backward,
    common_forward_batch,
    register_common_params,
)
from .data_io import ModelDims, MultimodalDataset
from .errors import ConfigError, DataError, NumericError, UsageError
from .unique_network import (
    UniqueConfig,
    register_unique_params,
    unique_backward,
    unique_forward_batch,
)

MODES = ("full", "common_only", "unique_only")


@dataclass
class HoseqConfig:
    """All architecture and training hyperparameters for one run.

    The Adam moment decay rates and epsilon are exposed here because only
    the learning rate and batch size are externally fixed; the remaining
    optimizer constants default to the standard 0.9 / 0.999 / 1e-8.
    """

    common: CommonConfig
    unique: UniqueConfig
    fused_dim: int
    mode: str = "full"
    learning_rate: float = 6e-3
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    batchnorm: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        self.common.validate()
        self.unique.validate()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fused_dim < 1:
            raise ConfigError("fused_dim must be positive")
        if self.common.fc_widths[-1] != self.fused_dim:
            raise ConfigError(
                f"common fc_widths must end at fused_dim={self.fused_dim}, "
                f"got {self.common.fc_widths}"
            )
        if self.unique.pool_fc_width != self.fused_dim:
            raise ConfigError(
                f"unique pool_fc_width must equal fused_dim={self.fused_dim}, "
                f"got {self.unique.pool_fc_width}"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    seconds: float


@dataclass
class TrainHistory:
    """Per-epoch records plus where training stopped and which epoch won."""

    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_table(self) -> str:
        """Tab-separated table: epoch, train_loss, val_mae, seconds."""
        lines = ["epoch\ttrain_loss\tval_mae\tseconds"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{r.train_loss!r}\t{r.val_mae!r}\t{r.seconds:.3f}")
        return "\n".join(lines) + "\n"


class EarlyStopper:
    """Stop once validation MAE has not strictly improved for ``patience``
    consecutive epochs; ties count as non-improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.streak = 0

    def update(self, epoch: int, val_mae: float) -> bool:
        """Record one epoch's validation MAE; returns True when training
        should stop after this epoch."""
        if val_mae < self.best:
            self.best = val_mae
            self.best_epoch = epoch
            self.streak = 0
            return False
        self.streak += 1
        return self.streak >= self.patience


# ---------------------------------------------------------------------------
# parameters


def init_params(config: HoseqConfig, dims: ModelDims, rng: RngStream | None = None) -> ParamStore:
    """Build the full parameter store for ``config`` on data of shape ``dims``.

    Initialization is a pure function of (seed, parameter name, shape):
    repeated construction is bit-identical and independent of registration
    order.
    """
    config.validate()
    if rng is None:
        rng = RngStream(config.seed).child("init")
    store = ParamStore()
    register_common_params(store, config.common, dims, rng, config.batchnorm)
    register_unique_params(store, config.unique, dims, rng, config.batchnorm)
    W = glorot_uniform(rng.child("fuse.W"), (config.fused_dim, 1), config.fused_dim, 1)
    store.register("fuse.W", W)
    store.register("fuse.b", np.zeros(1))
    return store


def param_group(name: str) -> str:
    """Logical grouping for counts and gradient tables: the parameter name
    minus its leaf and any per-step ``kNN`` component."""
    parts = name.split(".")[:-1]
    if parts and re.fullmatch(r"k\d+", parts[-1]):
        parts = parts[:-1]
    return ".".join(parts) if parts else name


def count_parameters(store: ParamStore, breakdown: bool = False):
    """Total trainable parameter count, optionally with per-group counts."""
    total = store.total_parameter_count()
    if not breakdown:
        return total
    groups: dict[str, int] = {}
    for name, p in store.items():
        key = param_group(name)
        groups[key] = groups.get(key, 0) + p.value.size
    return total, groups


# ---------------------------------------------------------------------------
# fusion and loss


def fuse(h_com: np.ndarray, h_uni: np.ndarray, store: ParamStore):
    """Parameter-free elementwise mean of the two feature vectors followed by
    one affine head: ``y = dense((h_com + h_uni) / 2)``."""
    h_com = np.asarray(h_com, dtype=np.float64)
    h_uni = np.asarray(h_uni, dtype=np.float64)
    if h_com.shape != h_uni.shape:
        raise ConfigError(
            f"fused widths differ: h_com {h_com.shape} vs h_uni {h_uni.shape}"
        )
    h_combined = 0.5 * (h_com + h_uni)
    y, d_cache = dense(h_combined, store.value("fuse.W"), store.value("fuse.b"))
    return y[..., 0], d_cache


def fuse_backward(d_y, cache, store: ParamStore):
    """Route the prediction gradient back; the mean splits it equally, so
    the gradients delivered to ``h_com`` and ``h_uni`` are identical."""
    d_y = np.asarray(d_y, dtype=np.float64)
    dx, dW, db = dense_backward(d_y[..., None], cache)
    store.add_grad("fuse.W", dW)
    store.add_grad("fuse.b", db)
    d_h = 0.5 * dx
    return d_h, d_h


def mse_loss(predictions, targets) -> float:
    """Mean squared error ``(1/n) * sum((pred - target)^2)``."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise DataError(
            f"predictions {predictions.shape} and targets {targets.shape} "
            "must be equal-length vectors"
        )
    if predictions.size == 0:
        raise DataError("mse_loss needs at least one sample")
    return float(np.mean((predictions - targets) ** 2))


def mse_loss_grad(predictions, targets) -> np.ndarray:
    """dL/dpred_i = 2 * (pred_i - target_i) / n."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.size == 0:
        raise DataError("mse_loss_grad needs at least one sample")
    return 2.0 * (predictions - targets) / predictions.size


# ---------------------------------------------------------------------------
# full-model forward/backward over stacked batches


@dataclass
class ModelCache:
    mode: str
    common: object = None
    unique: object = None
    fuse: object = None


def forward_batch(
    language: np.ndarray,
    visual: np.ndarray,
    acoustic: np.ndarray,
    store: ParamStore,
    config: HoseqConfig,
    training: bool = False,
    dropout_rng: RngStream | None = None,
):
    """Mode-dispatched forward pass over stacked ``(batch, t_k, d)`` arrays;
    returns ``(predictions, cache)`` with predictions of shape ``(batch,)``."""
    cache = ModelCache(mode=config.mode)
    h_com = h_uni = None
    if config.mode in ("full", "common_only"):
        h_com, y_com, cache.common = common_forward_batch(
            language,
            visual,
            acoustic,
            store,
            config.common,
            training=training,
            dropout_rng=dropout_rng,
            batchnorm_enabled=config.batchnorm,
        )
        if config.mode == "common_only":
            return y_com, cache
    if config.mode in ("full", "unique_only"):
        h_uni, y_uni, cache.unique = unique_forward_batch(
            language,
            visual,
            acoustic,
            store,
            config.unique,
            training=training,
            dropout_rng=dropout_rng,
            batchnorm_enabled=config.batchnorm,
        )
        if config.mode == "unique_only":
            return y_uni, cache
    preds, cache.fuse = fuse(h_com, h_uni, store)
    return preds, cache


def backward_batch(d_preds, cache: ModelCache, store: ParamStore, config: HoseqConfig) -> None:
    """Accumulate gradients for the prediction path selected by the mode."""
    if cache.mode != config.mode:
        raise UsageError(f"cache was built for mode {cache.mode!r}, config says {config.mode!r}")
    if config.mode == "common_only":
        common_backward(None, d_preds, cache.common, store, config.common)
        return
    if config.mode == "unique_only":
        unique_backward(None, d_preds, cache.unique, store, config.unique)
        return
    d_h_com, d_h_uni = fuse_backward(d_preds, cache.fuse, store)
    common_backward(d_h_com, None, cache.common, store, config.common)
    unique_backward(d_h_uni, None, cache.unique, store, config.unique)


# ---------------------------------------------------------------------------
# training and prediction


def _check_dims(dataset: MultimodalDataset, dims: ModelDims, what: str) -> None:
    if dataset.dims != dims:
        raise DataError(f"{what} dims {dataset.dims} do not match training dims {dims}")


def train(
    train_set: MultimodalDataset,
    val_set: MultimodalDataset,
    config: HoseqConfig,
) -> tuple[ParamStore, TrainHistory]:
    """Minibatch Adam on the selected mode's prediction with early stopping.

    Each epoch reshuffles the training set from the seeded stream, runs
    forward/backward over minibatches (the final partial batch is kept), and
    measures validation MAE in eval mode.  Training stops when validation MAE
    fails to strictly improve for ``patience`` consecutive epochs or when
    ``max_epochs`` is reached; the returned parameters are those of the best
    validation epoch.
    """
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("train and validation sets must be non-empty")
    dims = train_set.dims
    _check_dims(val_set, dims, "validation set")
    rng = RngStream(config.seed)
    store = init_params(config, dims, rng.child("init"))
    shuffle_rng = rng.child("shuffle")
    dropout_rng = rng.child("dropout")
    n = len(train_set)
    batch_size = min(config.batch_size, n)
    history = TrainHistory()
    stopper = EarlyStopper(config.patience)
    best_snapshot = None
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sq_error_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            preds, cache = forward_batch(
                train_set.language[idx],
                train_set.visual[idx],
                train_set.acoustic[idx],
                store,
                config,
                training=True,
                dropout_rng=dropout_rng,
            )
            targets = train_set.labels[idx]
            loss = mse_loss(preds, targets)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            sq_error_sum += loss * idx.size
            backward_batch(mse_loss_grad(preds, targets), cache, store, config)
            adam_step(
                store,
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            )
        train_loss = sq_error_sum / n
        val_mae = _metrics.mae(predict(val_set, store, config), val_set.labels)
        history.records.append(
            EpochRecord(epoch, train_loss, val_mae, time.perf_counter() - started)
        )
        stop = stopper.update(epoch, val_mae)
        if stopper.best_epoch == epoch:
            best_snapshot = store.snapshot()
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    if best_snapshot is not None:
        store.restore(best_snapshot)
    return store, history


def predict(dataset: MultimodalDataset, store: ParamStore, config: HoseqConfig) -> np.ndarray:
    """Order-preserving eval-mode predictions for every instance."""
    preds = []
    n = len(dataset)
    step = max(1, config.batch_size)
    for start in range(0, n, step):
        stop = min(start + step, n)
        batch_preds, _ = forward_batch(
            dataset.language[start:stop],
            dataset.visual[start:stop],
            dataset.acoustic[start:stop],
            store,
            config,
            training=False,
        )
        preds.append(batch_preds)
    return np.concatenate(preds)
