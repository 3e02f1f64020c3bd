"""Unique sub-network: per-timestep dense projections into a latent space,
a trilinear tensor + 3-D convolution + dense stage at every step, and an
unweighted temporal sum-pool feeding the unique feature vector ``h_uni`` and
a standalone scalar prediction ``y_uni``.

Step weights are shared across timesteps by default; with
``share_step_weights=False`` every step owns its own projection, convolution
and dense parameters (names carry a ``kNN`` component).
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
)
from .common_network import HIDDEN_ACTIVATION, MODALITY_TAGS, conv_output_extent
from .data_io import ModelDims, MultimodalInstance
from .errors import ConfigError, UsageError
from .tensor_core import conv3d_batch, outer3_batch


@dataclass
class UniqueConfig:
    """Architecture knobs for the unique sub-network."""

    latent_dim: int
    conv_kernel: int
    conv_stride: int = 1
    num_filters: int = 2
    step_fc_width: int = 16
    pool_fc_width: int = 8
    dropout_rate: float = 0.0
    share_step_weights: bool = True

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.conv_kernel < 1 or self.conv_kernel > self.latent_dim:
            raise ConfigError(
                f"conv_kernel must lie in [1, latent_dim={self.latent_dim}], "
                f"got {self.conv_kernel}"
            )
        if self.conv_stride < 1:
            raise ConfigError("conv_stride must be >= 1")
        if not (1 <= self.num_filters <= 3):
            raise ConfigError(f"num_filters must lie in [1, 3], got {self.num_filters}")
        if self.step_fc_width < 1 or self.pool_fc_width < 1:
            raise ConfigError("step_fc_width and pool_fc_width must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def flat_dim(self) -> int:
        out = conv_output_extent(self.latent_dim, self.conv_kernel, self.conv_stride)
        return self.num_filters * out**3


@dataclass
class UniqueOutput:
    h_uni: np.ndarray
    y_uni: float


@dataclass
class UniqueCache:
    steps: list = field(default_factory=list)
    pool_fc: tuple | None = None
    drop: tuple | None = None
    head: tuple | None = None
    h_pool: np.ndarray | None = None
    h_uni: np.ndarray | None = None
    batchnorm: bool = False


def _step_param(prefix: str, layer: str, leaf: str, k: int, shared: bool) -> str:
    if shared:
        return f"{prefix}.{layer}.{leaf}"
    return f"{prefix}.{layer}.k{k:02d}.{leaf}"


def register_unique_params(
    store: ParamStore,
    cfg: UniqueConfig,
    dims: ModelDims,
    rng: RngStream,
    batchnorm_enabled: bool = False,
    prefix: str = "unique",
) -> None:
    """Register unique-network parameters (per-name seeded initialization).

    With unshared step weights the per-step stack is replicated ``t_k``
    times, so its parameter count scales linearly in the sequence length.
    """
    cfg.validate()
    feature_dims = {"v": dims.d_v, "a": dims.d_a, "l": dims.d_l}
    steps = [None] if cfg.share_step_weights else list(range(dims.t_k))
    for k in steps:
        k_idx = 0 if k is None else k
        shared = cfg.share_step_weights
        for tag in MODALITY_TAGS:
            name = _step_param(prefix, f"proj_{tag}", "W", k_idx, shared)
            W, b = init_dense_params(rng.child(name), feature_dims[tag], cfg.latent_dim)
            store.register(name, W)
            store.register(_step_param(prefix, f"proj_{tag}", "b", k_idx, shared), b)
        name = _step_param(prefix, "conv", "kernels", k_idx, shared)
        kernels, bias = init_conv_params(rng.child(name), cfg.num_filters, cfg.conv_kernel)
        store.register(name, kernels)
        if not batchnorm_enabled:
            # conv bias is redundant (and gradient-free) under batchnorm
            store.register(_step_param(prefix, "conv", "bias", k_idx, shared), bias)
        name = _step_param(prefix, "step_fc", "W", k_idx, shared)
        W, b = init_dense_params(rng.child(name), cfg.flat_dim, cfg.step_fc_width)
        store.register(name, W)
        store.register(_step_param(prefix, "step_fc", "b", k_idx, shared), b)
    if batchnorm_enabled:
        store.register(f"{prefix}.bn.gamma", np.ones(cfg.flat_dim))
        store.register(f"{prefix}.bn.beta", np.zeros(cfg.flat_dim))
        store.register_buffer(f"{prefix}.bn.running_mean", np.zeros(cfg.flat_dim))
        store.register_buffer(f"{prefix}.bn.running_var", np.ones(cfg.flat_dim))
    W, b = init_dense_params(
        rng.child(f"{prefix}.pool_fc.W"), cfg.step_fc_width, cfg.pool_fc_width
    )
    store.register(f"{prefix}.pool_fc.W", W)
    store.register(f"{prefix}.pool_fc.b", b)
    W = glorot_uniform(
        rng.child(f"{prefix}.head.W"), (cfg.pool_fc_width, 1), cfg.pool_fc_width, 1
    )
    store.register(f"{prefix}.head.W", W)
    store.register(f"{prefix}.head.b", np.zeros(1))


def unique_step_batch(
    x_v: np.ndarray,
    x_a: np.ndarray,
    x_l: np.ndarray,
    store: ParamStore,
    cfg: UniqueConfig,
    k: int,
    training: bool = False,
    batchnorm_enabled: bool = False,
    prefix: str = "unique",
):
    """One timestep of the per-step pipeline over a ``(batch, d)`` slice."""
    shared = cfg.share_step_weights
    inputs = {"v": x_v, "a": x_a, "l": x_l}
    proj_caches = {}
    latents = {}
    for tag in MODALITY_TAGS:
        W = store.value(_step_param(prefix, f"proj_{tag}", "W", k, shared))
        b = store.value(_step_param(prefix, f"proj_{tag}", "b", k, shared))
        z, d_cache = dense(inputs[tag], W, b)
        h, a_cache = activation(z, HIDDEN_ACTIVATION)
        proj_caches[tag] = (d_cache, a_cache)
        latents[tag] = h
    t_val = outer3_batch(latents["v"], latents["a"], latents["l"])
    kernels = store.value(_step_param(prefix, "conv", "kernels", k, shared))
    bias_name = _step_param(prefix, "conv", "bias", k, shared)
    conv_bias = store.value(bias_name) if bias_name in store else None
    conv_out = conv3d_batch(t_val, kernels, cfg.conv_stride, conv_bias)
    flat = conv_out.reshape(conv_out.shape[0], -1)
    bn_cache = None
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
    conv_act_out, conv_act_cache = activation(flat, HIDDEN_ACTIVATION)
    z, fc_cache = dense(
        conv_act_out,
        store.value(_step_param(prefix, "step_fc", "W", k, shared)),
        store.value(_step_param(prefix, "step_fc", "b", k, shared)),
    )
    h_k, fc_act_cache = activation(z, HIDDEN_ACTIVATION)
    step_cache = (
        k,
        proj_caches,
        latents,
        t_val,
        conv_out.shape,
        bn_cache,
        conv_act_cache,
        fc_cache,
        fc_act_cache,
    )
    return h_k, step_cache


def unique_step(x_v, x_a, x_l, store: ParamStore, cfg: UniqueConfig, k: int = 0):
    """Single-sample step: vectors in, the step feature vector h_k out."""
    h, cache = unique_step_batch(
        np.asarray(x_v, dtype=np.float64)[None],
        np.asarray(x_a, dtype=np.float64)[None],
        np.asarray(x_l, dtype=np.float64)[None],
        store,
        cfg,
        k,
    )
    return h[0], cache


def unique_step_backward(
    d_h_k: np.ndarray,
    step_cache,
    store: ParamStore,
    cfg: UniqueConfig,
    prefix: str = "unique",
) -> None:
    """Backward through one step; gradients accumulate into the step's
    parameters (the shared set, or step k's own set)."""
    (
        k,
        proj_caches,
        latents,
        t_val,
        conv_shape,
        bn_cache,
        conv_act_cache,
        fc_cache,
        fc_act_cache,
    ) = step_cache
    shared = cfg.share_step_weights
    g = activation_backward(d_h_k, fc_act_cache)
    g, dW, db = dense_backward(g, fc_cache)
    store.add_grad(_step_param(prefix, "step_fc", "W", k, shared), dW)
    store.add_grad(_step_param(prefix, "step_fc", "b", k, shared), db)
    g = activation_backward(g, conv_act_cache)
    if bn_cache is not None:
        g, d_gamma, d_beta = batchnorm_backward(g, bn_cache)
        store.add_grad(f"{prefix}.bn.gamma", d_gamma)
        store.add_grad(f"{prefix}.bn.beta", d_beta)
    d_conv = g.reshape(conv_shape)
    kernels = store.value(_step_param(prefix, "conv", "kernels", k, shared))
    d_tensor, d_kernels, d_bias = conv3d_backward_batch(
        d_conv, t_val, kernels, cfg.conv_stride
    )
    store.add_grad(_step_param(prefix, "conv", "kernels", k, shared), d_kernels)
    bias_name = _step_param(prefix, "conv", "bias", k, shared)
    if bias_name in store:
        store.add_grad(bias_name, d_bias)
    h_v, h_a, h_l = (latents[t] for t in MODALITY_TAGS)
    d_latent = {
        "v": np.einsum("bijk,bj,bk->bi", d_tensor, h_a, h_l),
        "a": np.einsum("bijk,bi,bk->bj", d_tensor, h_v, h_l),
        "l": np.einsum("bijk,bi,bj->bk", d_tensor, h_v, h_a),
    }
    for tag in MODALITY_TAGS:
        d_cache, a_cache = proj_caches[tag]
        dz = activation_backward(d_latent[tag], a_cache)
        _, dW, db = dense_backward(dz, d_cache)
        store.add_grad(_step_param(prefix, f"proj_{tag}", "W", k, shared), dW)
        store.add_grad(_step_param(prefix, f"proj_{tag}", "b", k, shared), db)


def unique_forward_batch(
    language: np.ndarray,
    visual: np.ndarray,
    acoustic: np.ndarray,
    store: ParamStore,
    cfg: UniqueConfig,
    training: bool = False,
    dropout_rng: RngStream | None = None,
    batchnorm_enabled: bool = False,
    prefix: str = "unique",
):
    """Batched forward pass; ``h_pool`` is the plain sum of the per-step
    features (no normalization by sequence length)."""
    t_k = language.shape[1]
    cache = UniqueCache(batchnorm=batchnorm_enabled)
    h_pool = None
    for k in range(t_k):
        h_k, step_cache = unique_step_batch(
            visual[:, k, :],
            acoustic[:, k, :],
            language[:, k, :],
            store,
            cfg,
            k,
            training=training,
            batchnorm_enabled=batchnorm_enabled,
            prefix=prefix,
        )
        cache.steps.append(step_cache)
        h_pool = h_k if h_pool is None else h_pool + h_k
    z, cache.pool_fc = dense(
        h_pool, store.value(f"{prefix}.pool_fc.W"), store.value(f"{prefix}.pool_fc.b")
    )
    h_act, pool_act_cache = activation(z, HIDDEN_ACTIVATION)
    h_uni, drop_cache = dropout(h_act, cfg.dropout_rate, dropout_rng, training)
    cache.drop = (pool_act_cache, drop_cache)
    y_head, cache.head = dense(
        h_uni, store.value(f"{prefix}.head.W"), store.value(f"{prefix}.head.b")
    )
    cache.h_pool = h_pool
    cache.h_uni = h_uni
    return h_uni, y_head[:, 0], cache


def unique_forward(
    instance: MultimodalInstance,
    store: ParamStore,
    cfg: UniqueConfig,
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
    h_uni, y_uni, cache = unique_forward_batch(
        instance.language[None],
        instance.visual[None],
        instance.acoustic[None],
        store,
        cfg,
        training=training,
        dropout_rng=dropout_rng,
        batchnorm_enabled=batchnorm_enabled,
    )
    return UniqueOutput(h_uni[0], float(y_uni[0])), cache


def unique_backward(
    d_h_uni: np.ndarray | None,
    d_y_uni: np.ndarray | None,
    cache: UniqueCache,
    store: ParamStore,
    cfg: UniqueConfig,
    prefix: str = "unique",
) -> None:
    """Accumulate unique-network gradients.

    The sum-pool backward broadcasts the pooled gradient to every step;
    per-step gradients then accumulate (in fixed reverse-step order) into the
    shared weights, or into each step's own weights when unshared.
    """
    if cache.h_uni is None or not cache.steps:
        raise UsageError("unique_backward needs the cache of a matching forward pass")
    if d_h_uni is None and d_y_uni is None:
        raise UsageError("unique_backward needs at least one upstream gradient")
    g = np.zeros_like(cache.h_uni)
    if d_y_uni is not None:
        dx, dW, db = dense_backward(np.asarray(d_y_uni)[:, None], cache.head)
        store.add_grad(f"{prefix}.head.W", dW)
        store.add_grad(f"{prefix}.head.b", db)
        g += dx
    if d_h_uni is not None:
        g = g + d_h_uni
    pool_act_cache, drop_cache = cache.drop
    g = dropout_backward(g, drop_cache)
    g = activation_backward(g, pool_act_cache)
    d_pool, dW, db = dense_backward(g, cache.pool_fc)
    store.add_grad(f"{prefix}.pool_fc.W", dW)
    store.add_grad(f"{prefix}.pool_fc.b", db)
    for step_cache in reversed(cache.steps):
        unique_step_backward(d_pool, step_cache, store, cfg, prefix=prefix)
