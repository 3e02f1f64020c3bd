import numpy as np
import pytest

from hoseq.autodiff_layers import RngStream, grad_check
from hoseq.common_network import (
    CommonConfig,
    common_backward,
    common_forward,
    common_forward_batch,
    conv_output_extent,
    register_common_params,
)
from hoseq.data_io import ModelDims, synth_generate
from hoseq.errors import ConfigError
from hoseq.hoseq_model import mse_loss, mse_loss_grad
from hoseq.tensor_core import outer3
from oracles import naive_conv3d, naive_dense, scalar_lstm_step

DIMS = ModelDims(t_k=3, d_l=4, d_v=3, d_a=2)


def tiny_config(**overrides):
    base = dict(
        lstm_hidden=3,
        latent_dim=3,
        conv_kernel=2,
        conv_stride=1,
        num_filters=2,
        fc_widths=(5, 4),
        dropout_rate=0.0,
    )
    base.update(overrides)
    return CommonConfig(**base)


def make_store(cfg, dims=DIMS, seed=0, batchnorm=False):
    from hoseq.autodiff_layers import ParamStore

    store = ParamStore()
    register_common_params(store, cfg, dims, RngStream(seed).child("init"), batchnorm)
    return store


def make_instance(dims=DIMS, seed=1):
    return synth_generate(1, dims.t_k, dims.d_l, dims.d_v, dims.d_a, 0.5, 0.1, seed)[0]


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(num_filters=4).validate()
    with pytest.raises(ConfigError):
        tiny_config(conv_kernel=9).validate()  # kernel > latent_dim
    with pytest.raises(ConfigError):
        tiny_config(dropout_rate=1.0).validate()
    tiny_config().validate()


def test_zero_parameters_propagate_to_zero_outputs():
    cfg = tiny_config()
    store = make_store(cfg)
    for name in store.names():
        store[name].value[...] = 0.0
    out, _ = common_forward(make_instance(), store, cfg)
    assert not out.h_com.any()
    assert out.y_com == 0.0


def test_full_tensor_kernel_gives_singleton_conv_output():
    cfg = tiny_config(latent_dim=3, conv_kernel=3, num_filters=1, fc_widths=(4, 2))
    assert conv_output_extent(3, 3, 1) == 1
    assert cfg.flat_dim == 1
    store = make_store(cfg)
    out, _ = common_forward(make_instance(), store, cfg)
    assert out.h_com.shape == (2,)


def test_forward_matches_composition_of_oracle_operations():
    """Forward equals chaining the module-level oracles: per-modality LSTM
    (scalar oracle) -> dense -> relu -> outer product -> naive conv -> relu ->
    dense chain."""
    cfg = tiny_config(latent_dim=5, conv_kernel=2, num_filters=2, fc_widths=(8,))
    dims = ModelDims(t_k=4, d_l=6, d_v=4, d_a=5)
    store = make_store(cfg, dims, seed=9)
    inst = make_instance(dims, seed=5)

    def relu(v):
        return np.maximum(v, 0.0)

    latents = {}
    for tag, seq in (("v", inst.visual), ("a", inst.acoustic), ("l", inst.language)):
        h = np.zeros(cfg.lstm_hidden)
        c = np.zeros(cfg.lstm_hidden)
        W = store.value(f"common.lstm_{tag}.W")
        b = store.value(f"common.lstm_{tag}.b")
        for k in range(dims.t_k):
            h, c = scalar_lstm_step(seq[k], h, c, W, b)
        z = naive_dense(h, store.value(f"common.proj_{tag}.W"), store.value(f"common.proj_{tag}.b"))
        latents[tag] = relu(z)
    t_val = outer3(latents["v"], latents["a"], latents["l"])
    conv = naive_conv3d(
        t_val, store.value("common.conv.kernels"), cfg.conv_stride, store.value("common.conv.bias")
    )
    x = relu(conv.reshape(-1))
    x = relu(naive_dense(x, store.value("common.fc1.W"), store.value("common.fc1.b")))
    y_want = naive_dense(x, store.value("common.head.W"), store.value("common.head.b"))[0]

    out, _ = common_forward(inst, store, cfg)
    assert np.allclose(out.h_com, x, atol=1e-12)
    assert abs(out.y_com - y_want) < 1e-12


def test_eval_forward_is_deterministic():
    cfg = tiny_config(dropout_rate=0.3)
    store = make_store(cfg)
    inst = make_instance()
    a, _ = common_forward(inst, store, cfg, mode="eval")
    b, _ = common_forward(inst, store, cfg, mode="eval")
    assert np.array_equal(a.h_com, b.h_com)
    assert a.y_com == b.y_com


def test_train_mode_with_dropout_requires_rng():
    cfg = tiny_config(dropout_rate=0.5)
    store = make_store(cfg)
    with pytest.raises(ConfigError):
        common_forward(make_instance(), store, cfg, mode="train")
    out, _ = common_forward(
        make_instance(), store, cfg, mode="train", dropout_rng=RngStream(0)
    )
    assert np.isfinite(out.y_com)


def test_latent_scaling_scales_tensor_multilinearly():
    cfg = tiny_config()
    store = make_store(cfg)
    inst = make_instance()
    _, cache = common_forward(inst, store, cfg)
    h_v, h_a, h_l = (cache.latents[t] for t in ("v", "a", "l"))
    alpha = 2.5
    from hoseq.tensor_core import outer3_batch

    scaled = outer3_batch(alpha * h_v, h_a, h_l)
    assert np.allclose(scaled, alpha * cache.tensor, atol=1e-12)


def test_shape_chain():
    cfg = tiny_config(latent_dim=4, conv_kernel=2, conv_stride=2, num_filters=3, fc_widths=(6, 5))
    store = make_store(cfg)
    inst = make_instance()
    out, cache = common_forward(inst, store, cfg)
    for tag in ("v", "a", "l"):
        assert cache.latents[tag].shape == (1, 4)
    extent = conv_output_extent(4, 2, 2)
    assert cache.conv_shape == (1, 3, extent, extent, extent)
    assert cfg.flat_dim == 3 * extent**3
    assert out.h_com.shape == (5,)


def test_zero_upstream_gradient_gives_zero_parameter_gradients():
    cfg = tiny_config()
    store = make_store(cfg)
    _, cache = common_forward(make_instance(), store, cfg)
    common_backward(np.zeros((1, 4)), np.zeros(1), cache, store, cfg)
    for name in store.names():
        assert not store[name].grad.any(), name


def test_outer3_gradient_path_matches_finite_differences():
    """Gradient through the tensor product alone, via the projection bias."""
    cfg = tiny_config(fc_widths=(4,))
    store = make_store(cfg, seed=2)
    inst = make_instance(seed=3)
    target = np.array([0.7])

    def loss_value():
        out, _ = common_forward(inst, store, cfg)
        return mse_loss(np.array([out.y_com]), target)

    out, cache = common_forward(inst, store, cfg)
    store.zero_grads()
    d_pred = mse_loss_grad(np.array([out.y_com]), target)
    common_backward(None, d_pred, cache, store, cfg)
    from oracles import fd_gradient, max_rel_err

    for name in ("common.proj_v.b", "common.proj_a.b", "common.proj_l.b"):
        analytic = store[name].grad.copy()
        numeric = fd_gradient(loss_value, store[name].value, eps=1e-6)
        assert max_rel_err(analytic, numeric) < 1e-6, name


def test_end_to_end_gradient_check():
    cfg = tiny_config()
    dims = ModelDims(t_k=3, d_l=4, d_v=3, d_a=3)
    store = make_store(cfg, dims, seed=4)
    data = synth_generate(2, dims.t_k, dims.d_l, dims.d_v, dims.d_a, 0.5, 0.1, seed=6)

    def model_fn(s):
        s.zero_grads()
        h_com, y_com, cache = common_forward_batch(
            data.language, data.visual, data.acoustic, s, cfg
        )
        loss = mse_loss(y_com, data.labels)
        common_backward(None, mse_loss_grad(y_com, data.labels), cache, s, cfg)
        return loss

    report = grad_check(model_fn, store, epsilon=3e-5)
    assert report.max_error < 1e-4, report.worst()


def test_batchnorm_path_gradients(tmp_path):
    cfg = tiny_config()
    dims = ModelDims(t_k=2, d_l=3, d_v=2, d_a=2)
    store = make_store(cfg, dims, seed=8, batchnorm=True)
    data = synth_generate(3, dims.t_k, dims.d_l, dims.d_v, dims.d_a, 0.5, 0.1, seed=2)

    def model_fn(s):
        s.zero_grads()
        h_com, y_com, cache = common_forward_batch(
            data.language, data.visual, data.acoustic, s, cfg,
            training=True, batchnorm_enabled=True,
        )
        loss = mse_loss(y_com, data.labels)
        common_backward(None, mse_loss_grad(y_com, data.labels), cache, s, cfg)
        return loss

    report = grad_check(model_fn, store, epsilon=3e-5)
    assert report.max_error < 1e-4, report.worst()
