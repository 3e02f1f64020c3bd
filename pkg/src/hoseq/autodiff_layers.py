"""Differentiable building blocks with explicit forward and backward passes.

Conventions
-----------
* Every layer returns ``(output, cache)``; the matching ``*_backward`` takes
  the upstream gradient plus that cache and returns input and parameter
  gradients computed analytically.
* Vector arguments may be a single sample ``(d,)`` or a batch ``(batch, d)``.
  Outputs and input-gradients keep the rank of the forward input.
* The packed LSTM weight matrix has shape ``(input_dim + hidden, 4 * hidden)``
  with gate columns ordered [input, candidate, forget, output].  This order is
  part of the checkpoint format and must not change.
* All computation is float64.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    NumericError,
    TruncationError,
    UsageError,
)
from .tensor_core import conv3d_batch

ACTIVATION_KINDS = ("sigmoid", "tanh", "relu", "identity")

CHECKPOINT_MAGIC = "HOSEQCKPT1"


# ---------------------------------------------------------------------------
# deterministic randomness


class RngStream:
    """Seeded deterministic random stream (PCG64) with named sub-streams.

    The same seed yields the same draw sequence on every run and platform.
    ``child(name)`` derives an independent stream whose seed is the first 8
    bytes of ``blake2b("<seed>:<name>")``; it depends only on (seed, name),
    so drawing more from a parent never perturbs any child.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, name: str) -> "RngStream":
        digest = hashlib.blake2b(
            f"{self.seed}:{name}".encode("utf-8"), digest_size=8
        ).digest()
        return RngStream(int.from_bytes(digest, "little"))

    def normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def random(self, shape=None):
        return self._gen.random(shape)

    def integers(self, low: int, high: int) -> int:
        """One integer drawn uniformly from [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# parameter storage


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray


class ParamStore:
    """Named trainable parameters with paired gradient and Adam moment buffers.

    Iteration order is registration order everywhere (updates, checkpoints),
    which keeps training bit-reproducible.  Non-trainable state (e.g. batch
    normalization running statistics) goes in ``buffers``: saved alongside
    parameters but excluded from gradient updates and parameter counts.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.step_count = 0

    def register(self, name: str, value) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise UsageError(f"duplicate parameter name: '{name}'")
        if " " in name:
            raise UsageError(f"parameter names must not contain spaces: '{name}'")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self._params[name] = Param(
            value=arr,
            grad=np.zeros_like(arr),
            adam_m=np.zeros_like(arr),
            adam_v=np.zeros_like(arr),
        )
        return arr

    def register_buffer(self, name: str, value) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise UsageError(f"duplicate parameter name: '{name}'")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        try:
            return self._params[name]
        except KeyError:
            raise UsageError(f"unknown parameter: '{name}'") from None

    def value(self, name: str) -> np.ndarray:
        return self[name].value

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self._buffers[name]
        except KeyError:
            raise UsageError(f"unknown buffer: '{name}'") from None

    def add_grad(self, name: str, grad) -> None:
        p = self[name]
        if np.shape(grad) != p.value.shape:
            raise DimensionError(
                f"gradient shape {np.shape(grad)} != parameter shape "
                f"{p.value.shape} for '{name}'"
            )
        p.grad += grad

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def buffer_names(self) -> list[str]:
        return list(self._buffers)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def total_parameter_count(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of all parameter values and buffers (for best-epoch restore)."""
        out = {name: p.value.copy() for name, p in self._params.items()}
        out.update({name: arr.copy() for name, arr in self._buffers.items()})
        return out

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in snapshot.items():
            target = self._params[name].value if name in self._params else self._buffers[name]
            target[...] = arr


# ---------------------------------------------------------------------------
# checkpoint file format
#
# UTF-8 text header, then raw data:
#   line 0: "HOSEQCKPT1"
#   line 1: entry count
#   lines : "<name> <dim0,dim1,...>"   (parameters in registration order,
#                                       then buffers)
# followed immediately by the concatenated little-endian float64 values in
# manifest order.


def save_checkpoint(store: ParamStore, path) -> None:
    entries = [(name, p.value) for name, p in store.items()]
    entries += [(name, store.buffer(name)) for name in store.buffer_names()]
    lines = [CHECKPOINT_MAGIC, str(len(entries))]
    lines += [f"{name} {','.join(str(d) for d in arr.shape)}" for name, arr in entries]
    header = ("\n".join(lines) + "\n").encode("utf-8")
    blob = b"".join(arr.astype("<f8").tobytes() for _, arr in entries)
    Path(path).write_bytes(header + blob)


def load_checkpoint(store: ParamStore, path) -> None:
    """Load values saved by :func:`save_checkpoint` into an existing store.

    The manifest must name exactly the store's parameters and buffers with
    matching shapes; mismatches raise :class:`DimensionError` naming the
    expected and found shapes.
    """
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0 or raw[:newline].decode("utf-8", "replace") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic line)")
    pos = newline + 1
    newline = raw.find(b"\n", pos)
    if newline < 0:
        raise TruncationError(f"{path}: header ends before entry count")
    try:
        count = int(raw[pos:newline])
    except ValueError:
        raise FormatError(f"{path}: malformed entry count") from None
    pos = newline + 1
    entries: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        newline = raw.find(b"\n", pos)
        if newline < 0:
            raise TruncationError(f"{path}: manifest ends after {len(entries)} of {count} entries")
        line = raw[pos:newline].decode("utf-8")
        pos = newline + 1
        try:
            name, shape_csv = line.split(" ")
            shape = tuple(int(d) for d in shape_csv.split(","))
        except ValueError:
            raise FormatError(f"{path}: malformed manifest line: {line!r}") from None
        entries.append((name, shape))

    expected_names = set(store.names()) | set(store.buffer_names())
    manifest_names = {name for name, _ in entries}
    if manifest_names != expected_names:
        missing = sorted(expected_names - manifest_names)
        extra = sorted(manifest_names - expected_names)
        raise DimensionError(
            f"{path}: checkpoint does not match model "
            f"(missing {missing or 'none'}, unexpected {extra or 'none'})"
        )
    total = sum(int(np.prod(shape)) for _, shape in entries)
    if len(raw) - pos != total * 8:
        raise TruncationError(
            f"{path}: data section is {len(raw) - pos} bytes, expected {total * 8}"
        )
    for name, shape in entries:
        target = store[name].value if name in store else store.buffer(name)
        if target.shape != shape:
            raise DimensionError(
                f"parameter '{name}': checkpoint shape {shape}, model expects {target.shape}"
            )
        n = target.size
        target[...] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += n * 8


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(rng: RngStream, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def init_dense_params(rng: RngStream, in_dim: int, out_dim: int):
    # Biases draw from the same uniform range as the weights: exact zeros
    # would park relu pre-activations on the kink whenever an input vector is
    # all dead, which makes finite-difference checks meaningless there.
    W = glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim)
    b = glorot_uniform(rng, (out_dim,), in_dim, out_dim)
    return W, b


def init_lstm_params(rng: RngStream, input_dim: int, hidden_dim: int):
    """Packed LSTM weights; biases zero except the forget gate's, set to 1."""
    W = glorot_uniform(
        rng, (input_dim + hidden_dim, 4 * hidden_dim), input_dim + hidden_dim, 4 * hidden_dim
    )
    b = np.zeros(4 * hidden_dim)
    b[2 * hidden_dim : 3 * hidden_dim] = 1.0
    return W, b


def init_conv_params(rng: RngStream, num_filters: int, kernel: int):
    kernels = glorot_uniform(
        rng, (num_filters, kernel, kernel, kernel), kernel**3, num_filters
    )
    bias = glorot_uniform(rng, (num_filters,), kernel**3, num_filters)
    return kernels, bias


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable on both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str):
    """Elementwise nonlinearity; ``kind`` is one of sigmoid/tanh/relu/identity."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        y = _sigmoid(x)
        return y, (kind, y)
    if kind == "tanh":
        y = np.tanh(x)
        return y, (kind, y)
    if kind == "relu":
        # derivative at exactly 0 is defined as 0
        mask = x > 0
        return np.where(mask, x, 0.0), (kind, mask)
    if kind == "identity":
        return x, (kind, None)
    raise ConfigError(f"unknown activation kind: {kind!r}")


def activation_backward(d_out, cache):
    kind, saved = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    if kind == "sigmoid":
        return d_out * saved * (1.0 - saved)
    if kind == "tanh":
        return d_out * (1.0 - saved * saved)
    if kind == "relu":
        return d_out * saved
    return d_out


# ---------------------------------------------------------------------------
# dense


def dense(x, W, b):
    """Affine map ``out = x @ W + b`` (activation applied separately)."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"W must be a matrix, got shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"b shape {b.shape} != (cols(W),) = ({W.shape[1]},)")
    if x.ndim not in (1, 2) or x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"x shape {x.shape} incompatible with W shape {W.shape}"
        )
    return x @ W + b, (x, W)


def dense_backward(d_out, cache):
    x, W = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    if x.ndim == 1:
        dW = np.outer(x, d_out)
        db = d_out.copy()
        dx = W @ d_out
    else:
        dW = x.T @ d_out
        db = d_out.sum(axis=0)
        dx = d_out @ W.T
    return dx, dW, db


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmState:
    """Hidden and cell vectors of one LSTM; shapes always match."""

    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        self.hidden = np.asarray(self.hidden, dtype=np.float64)
        self.cell = np.asarray(self.cell, dtype=np.float64)
        if self.hidden.shape != self.cell.shape:
            raise DimensionError(
                f"hidden shape {self.hidden.shape} != cell shape {self.cell.shape}"
            )


def zero_lstm_state(hidden_dim: int, batch: int | None = None) -> LstmState:
    shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
    return LstmState(np.zeros(shape), np.zeros(shape))


def _split_gates(z: np.ndarray, h: int):
    return z[:, :h], z[:, h : 2 * h], z[:, 2 * h : 3 * h], z[:, 3 * h :]


def lstm_step(x, prev: LstmState, W, b):
    """One LSTM cell update from ``prev`` under input ``x``.

    Gates: i (input), f (forget), o (output) are sigmoid; the candidate g is
    tanh.  New cell c' = f*c + i*g and new hidden h' = o*tanh(c').  Gate
    columns in W and b are packed [i, g, f, o].
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    H = prev.hidden[None] if single else prev.hidden
    C = prev.cell[None] if single else prev.cell
    if X.ndim != 2 or H.ndim != 2 or X.shape[0] != H.shape[0]:
        raise DimensionError("x and prev state must agree on batch shape")
    d, h = X.shape[1], H.shape[1]
    if W.shape != (d + h, 4 * h) or b.shape != (4 * h,):
        raise DimensionError(
            f"LSTM params for input_dim={d}, hidden={h} must be "
            f"W ({d + h}, {4 * h}) and b ({4 * h},); got {W.shape} and {b.shape}"
        )
    z = np.concatenate([X, H], axis=1) @ W + b
    zi, zg, zf, zo = _split_gates(z, h)
    i = _sigmoid(zi)
    g = np.tanh(zg)
    f = _sigmoid(zf)
    o = _sigmoid(zo)
    c_new = f * C + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    cache = (X, H, C, i, g, f, o, tanh_c, W, single)
    if single:
        return LstmState(h_new[0], c_new[0]), cache
    return LstmState(h_new, c_new), cache


def lstm_step_backward(d_hidden, d_cell, cache):
    """Gradients of one cell update.

    Returns ``(dx, d_prev, dW, db)`` where ``d_prev`` is an LstmState holding
    the gradients flowing into the previous hidden and cell vectors.
    ``d_cell`` may be None when no gradient arrives at the new cell directly.
    """
    X, H, C, i, g, f, o, tanh_c, W, single = cache
    h = H.shape[1]
    dh = np.asarray(d_hidden, dtype=np.float64)
    dh = dh[None] if single else dh
    if d_cell is None:
        dc_in = np.zeros_like(dh)
    else:
        dc_in = np.asarray(d_cell, dtype=np.float64)
        dc_in = dc_in[None] if single else dc_in
    do = dh * tanh_c
    dc = dc_in + dh * o * (1.0 - tanh_c * tanh_c)
    di = dc * g
    dg = dc * i
    df = dc * C
    dc_prev = dc * f
    dz = np.concatenate(
        [
            di * i * (1.0 - i),
            dg * (1.0 - g * g),
            df * f * (1.0 - f),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    xh = np.concatenate([X, H], axis=1)
    dW = xh.T @ dz
    db = dz.sum(axis=0)
    dxh = dz @ W.T
    dx, dh_prev = dxh[:, : X.shape[1]], dxh[:, X.shape[1] :]
    if single:
        return dx[0], LstmState(dh_prev[0], dc_prev[0]), dW, db
    return dx, LstmState(dh_prev, dc_prev), dW, db


def lstm_run(seq, W, b):
    """Run the cell over a whole sequence from a zero initial state.

    ``seq`` is ``(t, d)`` for one sample or ``(batch, t, d)``; returns the
    final state plus per-step caches for backpropagation through time.
    """
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 2
    S = seq[None] if single else seq
    if S.ndim != 3:
        raise DimensionError(f"sequence must be (t, d) or (batch, t, d), got {seq.shape}")
    batch, t, _ = S.shape
    if t < 1:
        raise DimensionError("empty sequence")
    h = W.shape[1] // 4
    state = zero_lstm_state(h, batch)
    caches = []
    for k in range(t):
        state, cache = lstm_step(S[:, k, :], state, W, b)
        caches.append(cache)
    if single:
        return LstmState(state.hidden[0], state.cell[0]), (caches, single)
    return state, (caches, single)


def lstm_run_backward(d_hidden, d_cell, run_cache):
    """Full backpropagation through time (no truncation).

    ``d_hidden``/``d_cell`` are the gradients at the final state; returns
    ``(d_seq, dW, db)`` with parameter gradients summed over all steps.
    """
    caches, single = run_cache
    if not caches:
        raise UsageError("lstm_run_backward called without forward caches")
    dh = np.asarray(d_hidden, dtype=np.float64)
    if single:
        dh = dh[None]
    dc = None
    if d_cell is not None:
        dc = np.asarray(d_cell, dtype=np.float64)
        if single:
            dc = dc[None]
    dW = None
    db = None
    d_steps = []
    for cache in reversed(caches):
        dx, d_prev, dW_k, db_k = lstm_step_backward(dh, dc, (*cache[:-1], False))
        dW = dW_k if dW is None else dW + dW_k
        db = db_k if db is None else db + db_k
        d_steps.append(dx)
        dh, dc = d_prev.hidden, d_prev.cell
    d_seq = np.stack(d_steps[::-1], axis=1)
    if single:
        return d_seq[0], dW, db
    return d_seq, dW, db


# ---------------------------------------------------------------------------
# dropout


def dropout(x, rate: float, rng: RngStream | None, training: bool):
    """Inverted dropout: zero with probability ``rate`` and scale survivors
    by 1/(1-rate) in training mode; identity in eval mode."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x, (None, 1.0)
    if rng is None:
        raise ConfigError("training-mode dropout with rate > 0 requires an rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * keep * scale, (keep, scale)


def dropout_backward(d_out, cache):
    keep, scale = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    if keep is None:
        return d_out
    return d_out * keep * scale


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics; arrays are updated in place so they can be store buffers."""

    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm(
    x,
    gamma,
    beta,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
):
    """Per-feature batch normalization over a (batch, features) array.

    Training mode normalizes by the batch mean/variance (biased, ddof=0) and
    updates the running statistics as ``running = momentum * running +
    (1 - momentum) * batch``; eval mode normalizes by the running statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"batchnorm input must be (batch, features), got {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise ConfigError("batchnorm in training mode needs batch size >= 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        state.running_mean *= momentum
        state.running_mean += (1.0 - momentum) * mean
        state.running_var *= momentum
        state.running_var += (1.0 - momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    y = gamma * x_hat + beta
    return y, (x_hat, inv_std, np.asarray(gamma, dtype=np.float64), training)


def batchnorm_backward(d_out, cache):
    x_hat, inv_std, gamma, training = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    d_gamma = (d_out * x_hat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_xhat = d_out * gamma
    if not training:
        return d_xhat * inv_std, d_gamma, d_beta
    n = d_out.shape[0]
    dx = (inv_std / n) * (
        n * d_xhat - d_xhat.sum(axis=0) - x_hat * (d_xhat * x_hat).sum(axis=0)
    )
    return dx, d_gamma, d_beta


# ---------------------------------------------------------------------------
# 3-D convolution backward (forward lives in tensor_core)


def conv3d_backward_batch(d_out, inputs, kernels, stride: int = 1):
    """Gradients of :func:`hoseq.tensor_core.conv3d_batch`.

    Returns ``(d_inputs, d_kernels, d_bias)`` for upstream gradient ``d_out``
    of shape (batch, channels, D', H', W').
    """
    from numpy.lib.stride_tricks import sliding_window_view

    inputs = np.asarray(inputs, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    kd, kh, kw = kernels.shape[1:]
    windows = sliding_window_view(inputs, (kd, kh, kw), axis=(1, 2, 3))
    windows = windows[:, ::stride, ::stride, ::stride]
    d_bias = d_out.sum(axis=(0, 2, 3, 4))
    d_kernels = np.einsum("bcdhw,bdhwxyz->cxyz", d_out, windows)
    d_inputs = np.zeros_like(inputs)
    od, oh, ow = d_out.shape[2:]
    for x in range(kd):
        for y in range(kh):
            for z in range(kw):
                patch = np.einsum("bcdhw,c->bdhw", d_out, kernels[:, x, y, z])
                d_inputs[
                    :,
                    x : x + stride * od : stride,
                    y : y + stride * oh : stride,
                    z : z + stride * ow : stride,
                ] += patch
    return d_inputs, d_kernels, d_bias


# ---------------------------------------------------------------------------
# Adam


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter, in registration
    order; increments the shared step count and clears all gradients."""
    for name, p in store.items():
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    t = store.step_count + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for _, p in store.items():
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)
        p.grad[...] = 0.0
    store.step_count = t


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients."""

    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def worst(self) -> str:
        return max(self.per_param, key=self.per_param.get)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def grad_check(
    model_fn, store: ParamStore, epsilon: float = 1e-5, loss_fn=None
) -> GradCheckReport:
    """Check ``store``'s analytic gradients against central finite differences.

    ``model_fn(store)`` must return a scalar loss and, as a side effect,
    populate ``store``'s gradients (zeroing them first).  The loss must be
    deterministic: two evaluations are compared exactly and a mismatch raises
    :class:`UsageError`.  ``loss_fn``, when given, must compute the identical
    loss without the backward pass; it is used for the finite-difference
    probes only (a pure speed-up).  On return the store's gradients are
    unspecified.
    """
    if loss_fn is None:
        loss_fn = model_fn
    loss_a = float(model_fn(store))
    analytic = {name: p.grad.copy() for name, p in store.items()}
    loss_b = float(model_fn(store))
    if loss_a != loss_b:
        raise UsageError(
            "model_fn is not deterministic (double evaluation mismatch); "
            "disable dropout or freeze its mask before gradient checking"
        )
    report = GradCheckReport()
    for name, p in store.items():
        flat = p.value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            plus = float(loss_fn(store))
            flat[idx] = orig - epsilon
            minus = float(loss_fn(store))
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            worst = max(worst, relative_error(a_flat[idx], numeric))
        report.per_param[name] = worst
    return report
