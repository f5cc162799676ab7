"""Minimal dense feed-forward network engine.

Supports exactly what the novelty scorers need: a forward pass that can hand
back every hidden activation, backpropagation for mean-squared-error and
binary-cross-entropy losses, and deterministic mini-batch training with SGD
or Adam. Everything is float64 numpy; same seed + same data = bitwise-equal
trained weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng

ACTIVATIONS = ("identity", "sigmoid", "leaky_relu")
LOSSES = ("mse", "bce")
OPTIMIZERS = ("adam", "sgd")

# Logits are clamped to this band before the cross-entropy log; keeps
# sigmoid(z) away from exact 0/1 in float64.
BCE_LOGIT_CLAMP = 30.0


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training (learning rate too high?)."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: neuron count plus the activation applied to its output."""

    width: int
    activation: str = "identity"
    slope: float = 0.01  # leaky_relu only

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError(f"layer width must be >= 1, got {self.width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not (0.0 < self.slope < 1.0):
            raise ValueError(f"leaky_relu slope must be in (0, 1), got {self.slope}")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mse"
    epochs: int = 30
    minibatch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


@dataclass
class MlpModel:
    """Fully-connected network: weights[i] maps layer i to layer i+1."""

    layers: list[LayerSpec]
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)
    seed: int = 0

    @property
    def input_width(self) -> int:
        return self.layers[0].width

    @property
    def output_width(self) -> int:
        return self.layers[-1].width

    @property
    def hidden_widths(self) -> list[int]:
        return [s.width for s in self.layers[1:-1]]


def init_model(layers: list[LayerSpec], seed: int) -> MlpModel:
    """Fresh model with scaled-uniform weights and zero biases.

    Weights for a (fan_in, fan_out) matrix are uniform in
    +-sqrt(6 / (fan_in + fan_out)); stable for both sigmoid and leaky-relu
    stacks.
    """
    if len(layers) < 2:
        raise ValueError("a model needs at least an input and an output layer")
    rng = derive_rng(seed)
    weights, biases = [], []
    for a, b in zip(layers[:-1], layers[1:]):
        limit = np.sqrt(6.0 / (a.width + b.width))
        weights.append(rng.uniform(-limit, limit, size=(a.width, b.width)))
        biases.append(np.zeros(b.width))
    return MlpModel(layers=list(layers), weights=weights, biases=biases, seed=seed)


def clone_model(model: MlpModel) -> MlpModel:
    return MlpModel(
        layers=list(model.layers),
        weights=[w.copy() for w in model.weights],
        biases=[b.copy() for b in model.biases],
        seed=model.seed,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, spec: LayerSpec) -> np.ndarray:
    if spec.activation == "identity":
        return z
    if spec.activation == "sigmoid":
        return _sigmoid(z)
    return np.where(z > 0.0, z, spec.slope * z)


def _activate_grad(z: np.ndarray, a: np.ndarray, spec: LayerSpec) -> np.ndarray:
    if spec.activation == "identity":
        return np.ones_like(z)
    if spec.activation == "sigmoid":
        return a * (1.0 - a)
    return np.where(z > 0.0, 1.0, spec.slope)


def _forward_all(model: MlpModel, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Pre-activations and post-activations for every non-input layer."""
    pre, post = [], []
    a = x
    for w, b, spec in zip(model.weights, model.biases, model.layers[1:]):
        z = a @ w + b
        a = _activate(z, spec)
        pre.append(z)
        post.append(a)
    return pre, post


def forward_batch(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run rows of ``x`` through the model.

    Returns the output matrix and one post-activation matrix per hidden
    layer (input and output layers excluded). Never mutates the model.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.input_width:
        raise ValueError(
            f"input has shape {x.shape}, expected (n, {model.input_width})"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    _, post = _forward_all(model, x)
    return post[-1], post[:-1]


def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Single-vector forward pass: (output, per-hidden-layer activations)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward expects a 1-D input vector")
    out, hidden = forward_batch(model, x[None, :])
    return out[0], [h[0] for h in hidden]


def _loss_and_output_delta(
    pre_out: np.ndarray, post_out: np.ndarray, targets: np.ndarray, loss: str
) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the output pre-activations.

    For bce the gradient is taken directly on the (clamped) logits, so the
    sigmoid never appears in a log argument.
    """
    n = targets.size
    if loss == "mse":
        diff = post_out - targets
        return float(np.mean(diff * diff)), None  # delta built by caller via act grad
    zc = np.clip(pre_out, -BCE_LOGIT_CLAMP, BCE_LOGIT_CLAMP)
    a = _sigmoid(zc)
    value = float(-np.mean(targets * np.log(a) + (1.0 - targets) * np.log(1.0 - a)))
    inside = np.abs(pre_out) < BCE_LOGIT_CLAMP
    delta = (a - targets) * inside / n
    return value, delta


def loss_and_gradients(
    model: MlpModel, inputs: np.ndarray, targets: np.ndarray, loss: str = "mse"
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Batch loss and its analytic gradients w.r.t. every weight and bias."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    pre, post = _forward_all(model, inputs)
    out_spec = model.layers[-1]
    value, delta = _loss_and_output_delta(pre[-1], post[-1], targets, loss)
    if delta is None:  # mse: chain through the output activation
        delta = (2.0 * (post[-1] - targets) / targets.size) * _activate_grad(
            pre[-1], post[-1], out_spec
        )
    acts = [inputs] + post
    grads_w = [np.empty(0)] * len(model.weights)
    grads_b = [np.empty(0)] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * _activate_grad(
                pre[i - 1], post[i - 1], model.layers[i]
            )
    return value, grads_w, grads_b


def train(
    model: MlpModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
) -> tuple[MlpModel, float]:
    """Mini-batch gradient training; returns a new model and the mean
    per-sample loss over the final epoch.

    Sample order is reshuffled every epoch by a generator derived from the
    model seed, so the result is a pure function of (seed, layers, data, cfg).
    """
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if inputs.ndim != 2 or targets.ndim != 2:
        raise ValueError("inputs and targets must be 2-D")
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets row counts differ")
    if inputs.shape[0] < 1:
        raise ValueError("training set is empty")
    if inputs.shape[1] != model.input_width:
        raise ValueError("input width does not match model")
    if targets.shape[1] != model.output_width:
        raise ValueError("target width does not match model output layer")
    if cfg.loss == "bce":
        if model.layers[-1].activation != "sigmoid":
            raise ValueError("bce loss requires a sigmoid output layer")
        if np.any((targets < 0.0) | (targets > 1.0)):
            raise ValueError("bce targets must lie in [0, 1]")

    model = clone_model(model)
    n = inputs.shape[0]
    shuffle_rng = derive_rng(model.seed, 1)

    adam_m = adam_v = None
    if cfg.optimizer == "adam":
        adam_m = [np.zeros_like(p) for p in model.weights + model.biases]
        adam_v = [np.zeros_like(p) for p in model.weights + model.biases]
    step = 0

    epoch_loss = 0.0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.minibatch_size):
            batch = order[start : start + cfg.minibatch_size]
            value, grads_w, grads_b = loss_and_gradients(
                model, inputs[batch], targets[batch], cfg.loss
            )
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {start}; "
                    f"try a lower learning rate than {cfg.learning_rate}"
                )
            loss_sum += value * len(batch)
            params = model.weights + model.biases
            grads = grads_w + grads_b
            if cfg.optimizer == "sgd":
                for p, g in zip(params, grads):
                    p -= cfg.learning_rate * g
            else:
                step += 1
                correct1 = 1.0 - cfg.beta1**step
                correct2 = 1.0 - cfg.beta2**step
                for p, g, m, v in zip(params, grads, adam_m, adam_v):
                    m *= cfg.beta1
                    m += (1.0 - cfg.beta1) * g
                    v *= cfg.beta2
                    v += (1.0 - cfg.beta2) * g * g
                    p -= cfg.learning_rate * (m / correct1) / (
                        np.sqrt(v / correct2) + cfg.epsilon
                    )
        epoch_loss = loss_sum / n
    return model, epoch_loss


def save_model(model: MlpModel, path) -> None:
    """Write a self-describing checkpoint; round-trips every value exactly."""
    meta = {
        "format": "covsel-mlp-v1",
        "seed": model.seed,
        "layers": [
            {"width": s.width, "activation": s.activation, "slope": s.slope}
            for s in model.layers
        ],
    }
    arrays = {f"w{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> MlpModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "covsel-mlp-v1":
            raise ValueError(f"unrecognized model format {meta.get('format')!r}")
        layers = [
            LayerSpec(width=s["width"], activation=s["activation"], slope=s["slope"])
            for s in meta["layers"]
        ]
        weights = [data[f"w{i}"] for i in range(len(layers) - 1)]
        biases = [data[f"b{i}"] for i in range(len(layers) - 1)]
    model = MlpModel(layers=layers, weights=weights, biases=biases, seed=meta["seed"])
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        expect = (layers[i].width, layers[i + 1].width)
        if w.shape != expect or b.shape != (expect[1],):
            raise ValueError(f"checkpoint weight {i} has shape {w.shape}, expected {expect}")
    return model
