"""
Small dense networks with hand-derived gradients.

Three networks make up the model:
  mapper      a(y) -> a'(y)      two FC layers + ReLU (semantic -> visual)
  psi mapper  x    -> phi        two FC layers + ReLU (visual -> semantic part of psi)
  classifier  omega -> V(omega)  two 1-D conv layers + two FC layers, output in
                                 the class-embedding space so it can be dotted
                                 with a(y) inside the semantic softmax

Every forward/gradient function accepts a single vector or a batch of row
vectors and returns the same rank it was given. All arithmetic is float64.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax

from errors import InvalidProbability, MalformedRecord, NonFiniteValue, ShapeMismatch
from utils import format_vector, get_logger, parse_vector, save_output

log = get_logger(__name__)

PROBABILITY_FLOOR = 1e-12
CHECKPOINT_HEADER = "claster-checkpoint"
CHECKPOINT_VERSION = "v1"


# ── Domain Types ───────────────────────────────────────────────────

@dataclass
class DenseLayer:
    weights: np.ndarray     # (out, in)
    bias: np.ndarray        # (out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(
                f"dense layer weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def forward(self, x):
        return x @ self.weights.T + self.bias


@dataclass
class Conv1dLayer:
    weights: np.ndarray     # (out_channels, in_channels, kernel)
    bias: np.ndarray        # (out_channels,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(
                f"conv layer weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )
        if self.kernel_size % 2 == 0:
            raise ShapeMismatch(f"kernel size must be odd, got {self.kernel_size}")

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def kernel_size(self):
        return self.weights.shape[2]


def _layer_tensors(layer, prefix):
    return {f"{prefix}weights": layer.weights, f"{prefix}bias": layer.bias}


@dataclass
class MlpParams:
    layer1: DenseLayer
    layer2: DenseLayer

    def __post_init__(self):
        if self.layer1.out_dim != self.layer2.in_dim:
            raise ShapeMismatch(
                f"layer1 outputs {self.layer1.out_dim} values, layer2 expects {self.layer2.in_dim}"
            )

    @property
    def in_dim(self):
        return self.layer1.in_dim

    @property
    def out_dim(self):
        return self.layer2.out_dim

    def tensors(self, prefix=""):
        return {
            **_layer_tensors(self.layer1, f"{prefix}layer1."),
            **_layer_tensors(self.layer2, f"{prefix}layer2."),
        }

    def weight_matrices(self):
        return [self.layer1.weights, self.layer2.weights]

    @classmethod
    def from_tensors(cls, tensors, prefix=""):
        return cls(
            layer1=DenseLayer(tensors[f"{prefix}layer1.weights"], tensors[f"{prefix}layer1.bias"]),
            layer2=DenseLayer(tensors[f"{prefix}layer2.weights"], tensors[f"{prefix}layer2.bias"]),
        )


@dataclass
class ClassifierParams:
    conv1: Conv1dLayer
    conv2: Conv1dLayer
    fc1: DenseLayer
    fc2: DenseLayer

    def __post_init__(self):
        if self.conv1.in_channels != 1:
            raise ShapeMismatch("first conv layer must read a single channel")
        if self.conv2.in_channels != self.conv1.out_channels:
            raise ShapeMismatch("conv2 input channels must equal conv1 output channels")
        if self.fc1.in_dim % self.conv2.out_channels:
            raise ShapeMismatch("fc1 input size must be a multiple of conv2 channels")
        if self.fc2.in_dim != self.fc1.out_dim:
            raise ShapeMismatch("fc2 input size must equal fc1 output size")

    @property
    def input_length(self):
        return self.fc1.in_dim // self.conv2.out_channels

    @property
    def out_dim(self):
        return self.fc2.out_dim

    def tensors(self, prefix=""):
        return {
            **_layer_tensors(self.conv1, f"{prefix}conv1."),
            **_layer_tensors(self.conv2, f"{prefix}conv2."),
            **_layer_tensors(self.fc1, f"{prefix}fc1."),
            **_layer_tensors(self.fc2, f"{prefix}fc2."),
        }

    def weight_matrices(self):
        return [self.conv1.weights, self.conv2.weights, self.fc1.weights, self.fc2.weights]

    @classmethod
    def from_tensors(cls, tensors, prefix=""):
        def _get(name, kind):
            return kind(tensors[f"{prefix}{name}.weights"], tensors[f"{prefix}{name}.bias"])
        return cls(
            conv1=_get("conv1", Conv1dLayer),
            conv2=_get("conv2", Conv1dLayer),
            fc1=_get("fc1", DenseLayer),
            fc2=_get("fc2", DenseLayer),
        )


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


# ── Initialization ─────────────────────────────────────────────────

def init_dense(in_dim, out_dim, rng, gain=2.0):
    """He-normal weights (gain 2 for ReLU layers, 1 for linear outputs), zero bias."""
    weights = rng.standard_normal((out_dim, in_dim)) * np.sqrt(gain / in_dim)
    return DenseLayer(weights, np.zeros(out_dim))


def init_conv(in_channels, out_channels, kernel_size, rng):
    fan_in = in_channels * kernel_size
    weights = rng.standard_normal((out_channels, in_channels, kernel_size)) * np.sqrt(2.0 / fan_in)
    return Conv1dLayer(weights, np.zeros(out_channels))


def init_mlp(in_dim, hidden, out_dim, rng):
    return MlpParams(
        layer1=init_dense(in_dim, hidden, rng),
        layer2=init_dense(hidden, out_dim, rng, gain=1.0),
    )


def init_classifier(input_length, out_dim, rng, kernel_size=3, channels=4, fc_hidden=32):
    return ClassifierParams(
        conv1=init_conv(1, channels, kernel_size, rng),
        conv2=init_conv(channels, channels, kernel_size, rng),
        fc1=init_dense(channels * input_length, fc_hidden, rng),
        fc2=init_dense(fc_hidden, out_dim, rng, gain=1.0),
    )


# ── Helpers ────────────────────────────────────────────────────────

def _as_batch(values, dim, what):
    array = np.asarray(values, dtype=np.float64)
    single = array.ndim == 1
    batch = array[None, :] if single else array
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeMismatch(f"{what}: expected length {dim}, got shape {array.shape}")
    return batch, single


def _as_upstream(values, n, dim, what):
    array = np.asarray(values, dtype=np.float64)
    batch = array[None, :] if array.ndim == 1 else array
    if batch.shape != (n, dim):
        raise ShapeMismatch(f"{what}: expected shape {(n, dim)}, got {array.shape}")
    return batch


def _relu(x):
    return np.maximum(x, 0.0)


def _unbatch(batch, single):
    return batch[0] if single else batch


# ── MLP ────────────────────────────────────────────────────────────

def mlp_forward(params, input):
    """layer2(relu(layer1(input)))."""
    x, single = _as_batch(input, params.in_dim, "MLP input")
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue("non-finite MLP input")
    out = params.layer2.forward(_relu(params.layer1.forward(x)))
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue("non-finite MLP output")
    return _unbatch(out, single)


def mlp_gradient(params, input, upstream):
    """
    Gradients of a scalar loss through the MLP.

    Args:
        params: MlpParams
        input: vector or batch fed to mlp_forward
        upstream: dLoss/dOutput, same rank as the output

    Returns:
        (GradientSet keyed like params.tensors(), dLoss/dInput)
    """
    x, single = _as_batch(input, params.in_dim, "MLP input")
    up = _as_upstream(upstream, x.shape[0], params.out_dim, "MLP upstream gradient")

    pre = params.layer1.forward(x)
    hidden = _relu(pre)

    grads = {
        "layer2.weights": up.T @ hidden,
        "layer2.bias":    up.sum(axis=0),
    }
    d_pre = (up @ params.layer2.weights) * (pre > 0)
    grads["layer1.weights"] = d_pre.T @ x
    grads["layer1.bias"] = d_pre.sum(axis=0)
    d_input = d_pre @ params.layer1.weights
    return grads, _unbatch(d_input, single)


def least_squares_loss(prediction, target):
    """Mean squared difference and its gradient w.r.t. prediction."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeMismatch(f"prediction {prediction.shape} vs target {target.shape}")
    diff = prediction - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ── Classifier head V ──────────────────────────────────────────────
# omega is read as a single-channel sequence. Convolutions use stride 1
# and zero padding of kernel//2 on both sides, so the length never changes.

def _conv_forward(layer, x):
    pad = layer.kernel_size // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(padded, layer.kernel_size, axis=2)
    out = np.einsum("nclk,ock->nol", windows, layer.weights) + layer.bias[None, :, None]
    return out, windows


def _conv_backward(layer, windows, up):
    n, _, length = up.shape
    k_size = layer.kernel_size
    pad = k_size // 2
    d_weights = np.einsum("nol,nclk->ock", up, windows)
    d_bias = up.sum(axis=(0, 2))
    d_windows = np.einsum("nol,ock->nclk", up, layer.weights)
    d_padded = np.zeros((n, layer.in_channels, length + 2 * pad))
    for k in range(k_size):
        d_padded[:, :, k:k + length] += d_windows[:, :, :, k]
    return d_weights, d_bias, d_padded[:, :, pad:pad + length]


def _classifier_pass(params, x):
    z1, win1 = _conv_forward(params.conv1, x[:, None, :])
    a1 = _relu(z1)
    z2, win2 = _conv_forward(params.conv2, a1)
    a2 = _relu(z2)
    flat = a2.reshape(x.shape[0], -1)
    z3 = params.fc1.forward(flat)
    a3 = _relu(z3)
    out = params.fc2.forward(a3)
    cache = (z1, win1, z2, win2, flat, z3, a3)
    return out, cache


def classifier_forward(params, omega):
    """V(omega), a vector in the class-embedding space."""
    x, single = _as_batch(omega, params.input_length, "classifier input")
    out, _ = _classifier_pass(params, x)
    return _unbatch(out, single)


def classifier_gradient(params, omega, upstream):
    """Analytic gradients of classifier_forward; returns (GradientSet, dLoss/dOmega)."""
    x, single = _as_batch(omega, params.input_length, "classifier input")
    up = _as_upstream(upstream, x.shape[0], params.out_dim, "classifier upstream gradient")
    z1, win1, z2, win2, flat, z3, a3 = _classifier_pass(params, x)[1]

    grads = {
        "fc2.weights": up.T @ a3,
        "fc2.bias":    up.sum(axis=0),
    }
    d_z3 = (up @ params.fc2.weights) * (z3 > 0)
    grads["fc1.weights"] = d_z3.T @ flat
    grads["fc1.bias"] = d_z3.sum(axis=0)

    d_z2 = (d_z3 @ params.fc1.weights).reshape(z2.shape) * (z2 > 0)
    grads["conv2.weights"], grads["conv2.bias"], d_a1 = _conv_backward(params.conv2, win2, d_z2)
    d_z1 = d_a1 * (z1 > 0)
    grads["conv1.weights"], grads["conv1.bias"], d_x = _conv_backward(params.conv1, win1, d_z1)
    return grads, _unbatch(d_x[:, 0, :], single)


# ── Semantic softmax and loss ──────────────────────────────────────

def semantic_softmax(seen_embeddings, projected):
    """
    Probabilities over seen classes: softmax of a(y_j)ᵀ·v.

    `seen_embeddings` is (S, d_s); `projected` is v, a vector or a batch.
    """
    embeddings = np.atleast_2d(np.asarray(seen_embeddings, dtype=np.float64))
    v, single = _as_batch(projected, embeddings.shape[1], "projected vector")
    logits = v @ embeddings.T
    if not np.all(np.isfinite(logits)):
        raise NonFiniteValue("non-finite logits in semantic softmax")
    probs = softmax(logits, axis=1)
    return _unbatch(probs, single)


def check_distribution(probabilities, tol=1e-6):
    """Raise InvalidProbability unless every row is a probability vector."""
    probs = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    if (probs.size == 0 or not np.all(np.isfinite(probs))
            or np.any(probs < 0) or np.any(probs > 1 + tol)
            or np.any(np.abs(probs.sum(axis=1) - 1.0) > tol)):
        raise InvalidProbability("not a probability distribution")
    return probs


def frobenius_penalty(weights):
    """Sum of squared Frobenius norms."""
    return float(sum(np.sum(np.square(w)) for w in weights))


@dataclass
class LossValue:
    loss: float
    gradient: np.ndarray
    clamped: bool

    def __iter__(self):
        return iter((self.loss, self.gradient))


def semantic_loss(probabilities, true_class_index, all_weights, lam, seen_embeddings=None):
    """
    Cross-entropy on the true class plus lam * sum of squared weight norms.

    The gradient is taken w.r.t. the projected vector v of the semantic
    softmax, Σ_j (ŷ_j − 1[j=true])·a(y_j), averaged over a batch. Without
    `seen_embeddings` the gradient w.r.t. the logits is returned instead.
    A true-class probability below 1e-12 is clamped and flagged.
    """
    single = np.ndim(probabilities) == 1
    probs = check_distribution(probabilities)
    targets = np.atleast_1d(np.asarray(true_class_index, dtype=int))
    n = probs.shape[0]
    if targets.shape != (n,) or np.any(targets < 0) or np.any(targets >= probs.shape[1]):
        raise ShapeMismatch("true class index out of range for the probability vector")

    p_true = probs[np.arange(n), targets]
    clamped = bool(np.any(p_true < PROBABILITY_FLOOR))
    if clamped:
        log.warning("⚠️  True-class probability below 1e-12, clamped inside the log")
    cross_entropy = float(np.mean(-np.log(np.maximum(p_true, PROBABILITY_FLOOR))))
    loss = cross_entropy + lam * frobenius_penalty(all_weights)

    residual = probs.copy()
    residual[np.arange(n), targets] -= 1.0
    residual /= n
    gradient = residual if seen_embeddings is None else residual @ np.atleast_2d(seen_embeddings)
    return LossValue(loss=loss, gradient=_unbatch(gradient, single), clamped=clamped)


# ── Adam ───────────────────────────────────────────────────────────

def adam_step(state, params, grads):
    """
    One Adam step with bias correction over a name -> array mapping.

    Weight decay is the classic L2 coupling: g <- g + weight_decay * theta
    before the moment updates. Returns (new params, new state); the inputs
    are left untouched.
    """
    if set(params) != set(grads):
        raise ShapeMismatch(
            f"gradient names do not match parameters: {sorted(set(params) ^ set(grads))}"
        )
    step = state.step_count + 1
    first, second, updated = {}, {}, {}
    for name in sorted(params):
        theta = np.asarray(params[name], dtype=np.float64)
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient {grad.shape} vs parameter {theta.shape}")
        grad = grad + state.weight_decay * theta
        m = state.beta1 * state.first_moment.get(name, 0.0) + (1 - state.beta1) * grad
        v = state.beta2 * state.second_moment.get(name, 0.0) + (1 - state.beta2) * grad ** 2
        m_hat = m / (1 - state.beta1 ** step)
        v_hat = v / (1 - state.beta2 ** step)
        updated[name] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        first[name], second[name] = m, v
    return updated, replace(state, step_count=step, first_moment=first, second_moment=second)


# ── Checkpoints ────────────────────────────────────────────────────
# Header line, then one line per tensor: name<TAB>shape<TAB>values, with
# shape written as 4x3. Text metadata uses the shape field "text".
# Lines are sorted by name.

def save_checkpoint(path, tensors, meta=None):
    rows = []
    for name, value in tensors.items():
        value = np.asarray(value, dtype=np.float64)
        shape = "x".join(str(d) for d in value.shape)
        rows.append((name, shape, format_vector(value)))
    for name, text in (meta or {}).items():
        text = str(text)
        if "\t" in text or "\n" in text:
            raise MalformedRecord(f"metadata '{name}' contains a tab or newline")
        rows.append((name, "text", text))
    rows.sort(key=lambda row: row[0])
    body = "".join(f"{name}\t{shape}\t{values}\n" for name, shape, values in rows)
    return save_output(f"{CHECKPOINT_HEADER}\t{CHECKPOINT_VERSION}\n{body}", path)


def load_checkpoint(path):
    """Returns (tensors, meta)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != [CHECKPOINT_HEADER, CHECKPOINT_VERSION]:
        raise MalformedRecord(f"{path}: not a {CHECKPOINT_VERSION} checkpoint", line=1)
    tensors, meta = {}, {}
    for number, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise MalformedRecord("expected name, shape and values", line=number)
        name, shape, values = parts
        if shape == "text":
            meta[name] = values
            continue
        try:
            dims = tuple(int(d) for d in shape.split("x"))
            tensors[name] = parse_vector(values).reshape(dims)
        except ValueError as e:
            raise MalformedRecord(f"bad tensor '{name}': {e}", line=number)
    return tensors, meta
