"""Minimal neural-network engine: dense and conv layers, Adam, plateau LR.

Everything runs in float64 so analytic gradients can be validated against
central finite differences at tight tolerance. Layers cache what their
backward pass needs; gradients accumulate into per-layer buffers that the
optimizer consumes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ParameterError, TrainingError

# cap on the im2col buffer; larger batches are processed in chunks
_COL_BYTES_LIMIT = 192 * 1024 * 1024


def _uniform_init(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    """Affine map y = x W' + b on (batch, in_dim) inputs."""

    def __init__(self, in_dim, out_dim, rng=None):
        if in_dim < 1 or out_dim < 1:
            raise ParameterError("dense layer dimensions must be positive")
        rng = rng or np.random.default_rng(0)
        self.weights = _uniform_init(rng, (out_dim, in_dim), in_dim, out_dim)
        self.bias = np.zeros(out_dim)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def infer(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ParameterError(
                f"dense layer expects (batch, {self.in_dim}), got {x.shape}"
            )
        return x @ self.weights.T + self.bias

    def forward(self, x):
        y = self.infer(x)
        self._x = x
        return y

    def backward(self, gy):
        self.grad_weights += gy.T @ self._x
        self.grad_bias += gy.sum(axis=0)
        return gy @ self.weights

    def parameters(self):
        return [(self.weights, self.grad_weights), (self.bias, self.grad_bias)]


class ReluLayer:
    """Elementwise max(x, 0)."""

    def __init__(self):
        self._mask = None

    def infer(self, x):
        return np.where(x > 0, x, 0.0)

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, gy):
        return np.where(self._mask, gy, 0.0)

    def parameters(self):
        return []


class ConvLayer:
    """2D convolution, odd kernel, zero 'same' padding, (B, C, H, W) layout.

    The forward pass gathers k*k shifted views into a column buffer and runs
    one batched matmul; batches are chunked so the buffer stays within a
    fixed memory budget.
    """

    def __init__(self, in_channels, out_channels, kernel_size, rng=None):
        k = int(kernel_size)
        if k % 2 != 1 or k < 1:
            raise ParameterError(f"kernel size must be odd, got {kernel_size}")
        if in_channels < 1 or out_channels < 1:
            raise ParameterError("channel counts must be positive")
        rng = rng or np.random.default_rng(0)
        fan_in, fan_out = in_channels * k * k, out_channels * k * k
        self.weights = _uniform_init(rng, (out_channels, in_channels, k, k), fan_in, fan_out)
        self.bias = np.zeros(out_channels)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    def _col_chunks(self, x):
        c, k = x.shape[1], self.kernel_size
        h, w = x.shape[2], x.shape[3]
        per_sample = c * k * k * h * w * 8
        chunk = max(1, _COL_BYTES_LIMIT // per_sample)
        for start in range(0, len(x), chunk):
            yield start, _im2col(x[start : start + chunk], k)

    def infer(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ParameterError(
                f"conv layer expects (batch, {self.in_channels}, H, W), got {x.shape}"
            )
        b, _, h, w = x.shape
        o, k = self.out_channels, self.kernel_size
        wmat = self.weights.reshape(o, -1)
        out = np.empty((b, o, h * w))
        for start, col in self._col_chunks(x):
            np.matmul(wmat, col, out=out[start : start + len(col)])
        return out.reshape(b, o, h, w) + self.bias[None, :, None, None]

    def forward(self, x):
        y = self.infer(x)
        self._x = x
        return y

    def backward(self, gy):
        x = self._x
        b, _, h, w = x.shape
        o, c, k = self.out_channels, self.in_channels, self.kernel_size
        gy_flat = gy.reshape(b, o, h * w)
        self.grad_bias += gy.sum(axis=(0, 2, 3))
        gw = np.zeros((o, c * k * k))
        for start, col in self._col_chunks(x):
            stop = start + len(col)
            gw += np.einsum("bof,bcf->oc", gy_flat[start:stop], col, optimize=True)
        self.grad_weights += gw.reshape(self.weights.shape)
        # input gradient: correlate gy with the flipped kernels, channels swapped
        wflip = self.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gx = np.empty((b, c, h * w))
        per_sample = o * k * k * h * w * 8
        chunk = max(1, _COL_BYTES_LIMIT // per_sample)
        for start in range(0, b, chunk):
            col = _im2col(gy[start : start + chunk], k)
            np.matmul(wflip, col, out=gx[start : start + len(col)])
        return gx.reshape(b, c, h, w)

    def parameters(self):
        return [(self.weights, self.grad_weights), (self.bias, self.grad_bias)]


def _im2col(x, k):
    """Gather k*k shifted views of zero-padded x into (B, C*k*k, H*W)."""
    b, c, h, w = x.shape
    pad = k // 2
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    col = np.empty((b, c, k, k, h, w))
    for dy in range(k):
        for dx in range(k):
            col[:, :, dy, dx] = xp[:, :, dy : dy + h, dx : dx + w]
    return col.reshape(b, c * k * k, h * w)


class Network:
    """An ordered layer stack with shared forward/backward plumbing."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def infer(self, x):
        """Forward pass that leaves no backward caches; safe to call concurrently."""
        for layer in self.layers:
            x = layer.infer(x)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def zero_grads(self):
        for _, grad in self.parameters():
            grad[...] = 0.0

    def get_state(self):
        return [np.array(p, copy=True) for p, _ in self.parameters()]

    def set_state(self, state):
        params = self.parameters()
        if len(state) != len(params):
            raise ParameterError("state does not match the network's parameter list")
        for (p, _), saved in zip(params, state):
            p[...] = saved


def make_mlp(dims, seed=0):
    """Dense stack with ReLU between layers and identity on the final output."""
    if len(dims) < 2:
        raise ParameterError("an MLP needs at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        layers.append(DenseLayer(dims[i], dims[i + 1], rng))
        if i < len(dims) - 2:
            layers.append(ReluLayer())
    return Network(layers)


def make_cnn(channels, kernel_size=5, seed=0):
    """Conv stack with ReLU between layers and identity on the final output."""
    if len(channels) < 2:
        raise ParameterError("a CNN needs at least input and output channel counts")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(channels) - 1):
        layers.append(ConvLayer(channels[i], channels[i + 1], kernel_size, rng))
        if i < len(channels) - 2:
            layers.append(ReluLayer())
    return Network(layers)


def count_parameters(model):
    return sum(p.size for p, _ in model.parameters())


def loss_and_grad(model, x, y, l2_penalty=0.0):
    """MSE plus l2_penalty * ||theta||^2; leaves gradients in the layers."""
    pred = model.forward(x)
    if pred.shape != y.shape:
        raise ParameterError(f"prediction shape {pred.shape} vs target {y.shape}")
    resid = pred - y
    loss = float(np.mean(resid**2))
    model.zero_grads()
    model.backward(2.0 * resid / resid.size)
    if l2_penalty:
        for p, g in model.parameters():
            loss += l2_penalty * float(np.sum(p * p))
            g += 2.0 * l2_penalty * p
    return loss


class AdamOptimizer:
    """Standard Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p, _ in self.params]
        self.v = [np.zeros_like(p) for p, _ in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (p, g), m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauScheduler:
    """Multiply lr by factor after `patience` epochs without improvement.

    Improvement means the monitored loss dropped by at least `threshold`
    below the best seen so far; lr never goes below min_lr.
    """

    def __init__(self, initial_lr, patience, factor, min_lr, threshold=1e-8):
        if not 0 < factor < 1:
            raise ParameterError(f"plateau factor must lie in (0, 1), got {factor}")
        self.lr = float(initial_lr)
        self.patience = int(patience)
        self.factor = float(factor)
        self.min_lr = float(min_lr)
        self.threshold = float(threshold)
        self.best = np.inf
        self.stale = 0

    def step(self, loss):
        if loss < self.best - self.threshold:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale = 0
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for mini-batch Adam with the plateau scheduler."""

    batch_size: int = 32
    initial_lr: float = 1e-3
    l2_penalty: float = 1e-4
    epochs: int = 500
    plateau_patience: int = 30
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ParameterError("plateau_factor must lie in (0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise ParameterError("validation_fraction must lie in [0, 1)")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")


@dataclass
class TrainHistory:
    """Per-epoch training record; wall times stay out of serialized payloads."""

    train_loss: list = dc_field(default_factory=list)
    val_loss: list = dc_field(default_factory=list)
    learning_rate: list = dc_field(default_factory=list)
    epoch_seconds: list = dc_field(default_factory=list)
    best_epoch: int = -1
    config: TrainConfig | None = None

    @property
    def epochs_run(self):
        return len(self.train_loss)


def train(model, inputs, targets, config=TrainConfig()):
    """Shuffled mini-batch Adam with a validation plateau scheduler.

    The validation split is carved deterministically from config.seed. The
    model is left holding the parameters with the best validation loss (the
    final training-set loss when validation_fraction is 0).
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(x) != len(y):
        raise ParameterError(f"sample counts differ: {len(x)} inputs, {len(y)} targets")
    if len(x) < 1:
        raise ParameterError("training needs at least one sample")

    history = TrainHistory(config=config)
    if config.epochs == 0:
        return model, history

    rng = np.random.default_rng(config.seed)
    n = len(x)
    n_val = int(round(n * config.validation_fraction))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ParameterError("validation split leaves no training samples")
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]

    optimizer = AdamOptimizer(model.parameters())
    scheduler = PlateauScheduler(
        config.initial_lr, config.plateau_patience, config.plateau_factor, config.min_lr
    )
    best_state = None
    best_monitor = np.inf

    for epoch in range(config.epochs):
        tic = time.monotonic()
        order = rng.permutation(len(x_train))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = loss_and_grad(model, x_train[idx], y_train[idx], config.l2_penalty)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}", epoch=epoch
                )
            optimizer.step(scheduler.lr)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))

        if n_val > 0:
            val_pred = model.forward(x_val)
            monitor = float(np.mean((val_pred - y_val) ** 2))
        else:
            monitor = train_loss
        if not np.isfinite(monitor):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)

        if monitor < best_monitor:
            best_monitor = monitor
            best_state = model.get_state()
            history.best_epoch = epoch

        history.train_loss.append(train_loss)
        history.val_loss.append(monitor)
        history.learning_rate.append(scheduler.lr)
        history.epoch_seconds.append(time.monotonic() - tic)
        scheduler.step(monitor)

    if best_state is not None:
        model.set_state(best_state)
    return model, history
