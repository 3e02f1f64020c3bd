"""Common sub-network: per-modality LSTM encoders, dense projections into a
shared latent space, a trilinear tensor of the three latent vectors, and a
3-D convolution + fully-connected stack producing the common feature vector
``h_com`` and a standalone scalar prediction ``y_com``.

Hidden activations are relu throughout; prediction heads are affine
(identity activation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff_layers import (
    BatchNormState,
    ParamStore,
    RngStream,
    activation,
    activation_backward,
    batchnorm,
    batchnorm_backward,
    conv3d_backward_batch,
    dense,
    dense_backward,
    dropout,
    dropout_backward,
    glorot_uniform,
    init_conv_params,
    init_dense_params,
    init_lstm_params,
    lstm_run,
    lstm_run_backward,
)
from .data_io import ModelDims, MultimodalInstance
from .errors import ConfigError, UsageError
from .tensor_core import conv3d_batch, outer3_batch

MODALITY_TAGS = ("v", "a", "l")  # visual, acoustic, language

HIDDEN_ACTIVATION = "relu"


def conv_output_extent(in_extent: int, kernel: int, stride: int) -> int:
    return (in_extent - kernel) // stride + 1


@dataclass
class CommonConfig:
    """Architecture knobs for the common sub-network."""

    lstm_hidden: int
    latent_dim: int
    conv_kernel: int
    conv_stride: int = 1
    num_filters: int = 2
    fc_widths: tuple[int, ...] = (16, 8)
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.fc_widths = tuple(int(w) for w in self.fc_widths)

    def validate(self) -> None:
        if self.lstm_hidden < 1 or self.latent_dim < 1:
            raise ConfigError("lstm_hidden and latent_dim must be positive")
        if self.conv_kernel < 1 or self.conv_kernel > self.latent_dim:
            raise ConfigError(
                f"conv_kernel must lie in [1, latent_dim={self.latent_dim}], "
                f"got {self.conv_kernel}"
            )
        if self.conv_stride < 1:
            raise ConfigError("conv_stride must be >= 1")
        if not (1 <= self.num_filters <= 3):
            raise ConfigError(f"num_filters must lie in [1, 3], got {self.num_filters}")
        if not self.fc_widths or any(w < 1 for w in self.fc_widths):
            raise ConfigError("fc_widths must be a non-empty list of positive widths")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def flat_dim(self) -> int:
        out = conv_output_extent(self.latent_dim, self.conv_kernel, self.conv_stride)
        return self.num_filters * out**3


@dataclass
class CommonOutput:
    h_com: np.ndarray
    y_com: float


@dataclass
class CommonCache:
    """Forward intermediates needed by :func:`common_backward`."""

    lstm: dict = field(default_factory=dict)
    proj: dict = field(default_factory=dict)
    latents: dict = field(default_factory=dict)
    tensor: np.ndarray | None = None
    conv_shape: tuple | None = None
    bn: tuple | None = None
    conv_act: tuple | None = None
    fc: list = field(default_factory=list)
    head: tuple | None = None
    h_com: np.ndarray | None = None
    batchnorm: bool = False


def register_common_params(
    store: ParamStore,
    cfg: CommonConfig,
    dims: ModelDims,
    rng: RngStream,
    batchnorm_enabled: bool = False,
    prefix: str = "common",
) -> None:
    """Register all common-network parameters; each weight is initialized
    from a sub-stream derived from its own name, so values depend only on
    (seed, name, shape)."""
    cfg.validate()
    feature_dims = {"v": dims.d_v, "a": dims.d_a, "l": dims.d_l}
    for tag in MODALITY_TAGS:
        W, b = init_lstm_params(
            rng.child(f"{prefix}.lstm_{tag}.W"), feature_dims[tag], cfg.lstm_hidden
        )
        store.register(f"{prefix}.lstm_{tag}.W", W)
        store.register(f"{prefix}.lstm_{tag}.b", b)
        W, b = init_dense_params(
            rng.child(f"{prefix}.proj_{tag}.W"), cfg.lstm_hidden, cfg.latent_dim
        )
        store.register(f"{prefix}.proj_{tag}.W", W)
        store.register(f"{prefix}.proj_{tag}.b", b)
    kernels, bias = init_conv_params(
        rng.child(f"{prefix}.conv.kernels"), cfg.num_filters, cfg.conv_kernel
    )
    store.register(f"{prefix}.conv.kernels", kernels)
    if not batchnorm_enabled:
        # under batch normalization a conv bias is redundant (the batch mean
        # absorbs it exactly, leaving it gradient-free), so it only exists
        # on the plain path
        store.register(f"{prefix}.conv.bias", bias)
    if batchnorm_enabled:
        store.register(f"{prefix}.bn.gamma", np.ones(cfg.flat_dim))
        store.register(f"{prefix}.bn.beta", np.zeros(cfg.flat_dim))
        store.register_buffer(f"{prefix}.bn.running_mean", np.zeros(cfg.flat_dim))
        store.register_buffer(f"{prefix}.bn.running_var", np.ones(cfg.flat_dim))
    in_width = cfg.flat_dim
    for i, width in enumerate(cfg.fc_widths, start=1):
        W, b = init_dense_params(rng.child(f"{prefix}.fc{i}.W"), in_width, width)
        store.register(f"{prefix}.fc{i}.W", W)
        store.register(f"{prefix}.fc{i}.b", b)
        in_width = width
    W = glorot_uniform(rng.child(f"{prefix}.head.W"), (in_width, 1), in_width, 1)
    store.register(f"{prefix}.head.W", W)
    store.register(f"{prefix}.head.b", np.zeros(1))


def common_forward_batch(
    language: np.ndarray,
    visual: np.ndarray,
    acoustic: np.ndarray,
    store: ParamStore,
    cfg: CommonConfig,
    training: bool = False,
    dropout_rng: RngStream | None = None,
    batchnorm_enabled: bool = False,
    prefix: str = "common",
):
    """Batched forward pass over ``(batch, t_k, d)`` sequences.

    Returns ``(h_com, y_com, cache)`` with ``h_com`` of shape
    ``(batch, fc_widths[-1])`` and ``y_com`` of shape ``(batch,)``.
    """
    sequences = {"v": visual, "a": acoustic, "l": language}
    cache = CommonCache(batchnorm=batchnorm_enabled)
    for tag in MODALITY_TAGS:
        state, run_cache = lstm_run(
            sequences[tag],
            store.value(f"{prefix}.lstm_{tag}.W"),
            store.value(f"{prefix}.lstm_{tag}.b"),
        )
        z, d_cache = dense(
            state.hidden,
            store.value(f"{prefix}.proj_{tag}.W"),
            store.value(f"{prefix}.proj_{tag}.b"),
        )
        h, a_cache = activation(z, HIDDEN_ACTIVATION)
        cache.lstm[tag] = run_cache
        cache.proj[tag] = (d_cache, a_cache)
        cache.latents[tag] = h
    t_val = outer3_batch(cache.latents["v"], cache.latents["a"], cache.latents["l"])
    conv_bias = (
        store.value(f"{prefix}.conv.bias") if f"{prefix}.conv.bias" in store else None
    )
    conv_out = conv3d_batch(
        t_val, store.value(f"{prefix}.conv.kernels"), cfg.conv_stride, conv_bias
    )
    cache.tensor = t_val
    cache.conv_shape = conv_out.shape
    flat = conv_out.reshape(conv_out.shape[0], -1)
    if batchnorm_enabled:
        bn_state = BatchNormState(
            store.buffer(f"{prefix}.bn.running_mean"),
            store.buffer(f"{prefix}.bn.running_var"),
        )
        flat, bn_cache = batchnorm(
            flat,
            store.value(f"{prefix}.bn.gamma"),
            store.value(f"{prefix}.bn.beta"),
            bn_state,
            training,
        )
        cache.bn = bn_cache
    x, cache.conv_act = activation(flat, HIDDEN_ACTIVATION)
    for i in range(1, len(cfg.fc_widths) + 1):
        z, d_cache = dense(
            x, store.value(f"{prefix}.fc{i}.W"), store.value(f"{prefix}.fc{i}.b")
        )
        y, a_cache = activation(z, HIDDEN_ACTIVATION)
        x, drop_cache = dropout(y, cfg.dropout_rate, dropout_rng, training)
        cache.fc.append((d_cache, a_cache, drop_cache))
    h_com = x
    y_head, head_cache = dense(
        h_com, store.value(f"{prefix}.head.W"), store.value(f"{prefix}.head.b")
    )
    cache.head = head_cache
    cache.h_com = h_com
    return h_com, y_head[:, 0], cache


def common_forward(
    instance: MultimodalInstance,
    store: ParamStore,
    cfg: CommonConfig,
    mode: str = "eval",
    dropout_rng: RngStream | None = None,
    batchnorm_enabled: bool = False,
):
    """Single-instance forward pass; ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and cfg.dropout_rate > 0 and dropout_rng is None:
        raise ConfigError("train-mode forward with dropout_rate > 0 requires dropout_rng")
    h_com, y_com, cache = common_forward_batch(
        instance.language[None],
        instance.visual[None],
        instance.acoustic[None],
        store,
        cfg,
        training=training,
        dropout_rng=dropout_rng,
        batchnorm_enabled=batchnorm_enabled,
    )
    return CommonOutput(h_com[0], float(y_com[0])), cache


def common_backward(
    d_h_com: np.ndarray | None,
    d_y_com: np.ndarray | None,
    cache: CommonCache,
    store: ParamStore,
    cfg: CommonConfig,
    prefix: str = "common",
) -> None:
    """Accumulate parameter gradients for the common network.

    ``d_h_com`` is the upstream gradient at the feature vector (from the
    fusion layer) and ``d_y_com`` the gradient at the standalone prediction;
    either may be None.
    """
    if cache.h_com is None:
        raise UsageError("common_backward needs the cache of a matching forward pass")
    if d_h_com is None and d_y_com is None:
        raise UsageError("common_backward needs at least one upstream gradient")
    g = np.zeros_like(cache.h_com)
    if d_y_com is not None:
        dx, dW, db = dense_backward(np.asarray(d_y_com)[:, None], cache.head)
        store.add_grad(f"{prefix}.head.W", dW)
        store.add_grad(f"{prefix}.head.b", db)
        g += dx
    if d_h_com is not None:
        g = g + d_h_com
    for i in range(len(cfg.fc_widths), 0, -1):
        d_cache, a_cache, drop_cache = cache.fc[i - 1]
        g = dropout_backward(g, drop_cache)
        g = activation_backward(g, a_cache)
        g, dW, db = dense_backward(g, d_cache)
        store.add_grad(f"{prefix}.fc{i}.W", dW)
        store.add_grad(f"{prefix}.fc{i}.b", db)
    g = activation_backward(g, cache.conv_act)
    if cache.batchnorm:
        g, d_gamma, d_beta = batchnorm_backward(g, cache.bn)
        store.add_grad(f"{prefix}.bn.gamma", d_gamma)
        store.add_grad(f"{prefix}.bn.beta", d_beta)
    d_conv = g.reshape(cache.conv_shape)
    d_tensor, d_kernels, d_bias = conv3d_backward_batch(
        d_conv, cache.tensor, store.value(f"{prefix}.conv.kernels"), cfg.conv_stride
    )
    store.add_grad(f"{prefix}.conv.kernels", d_kernels)
    if f"{prefix}.conv.bias" in store:
        store.add_grad(f"{prefix}.conv.bias", d_bias)
    h_v, h_a, h_l = (cache.latents[t] for t in MODALITY_TAGS)
    d_latent = {
        "v": np.einsum("bijk,bj,bk->bi", d_tensor, h_a, h_l),
        "a": np.einsum("bijk,bi,bk->bj", d_tensor, h_v, h_l),
        "l": np.einsum("bijk,bi,bj->bk", d_tensor, h_v, h_a),
    }
    for tag in MODALITY_TAGS:
        d_cache, a_cache = cache.proj[tag]
        dz = activation_backward(d_latent[tag], a_cache)
        d_hidden, dW, db = dense_backward(dz, d_cache)
        store.add_grad(f"{prefix}.proj_{tag}.W", dW)
        store.add_grad(f"{prefix}.proj_{tag}.b", db)
        _, dW, db = lstm_run_backward(d_hidden, None, cache.lstm[tag])
        store.add_grad(f"{prefix}.lstm_{tag}.W", dW)
        store.add_grad(f"{prefix}.lstm_{tag}.b", db)
