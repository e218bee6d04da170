"""Dense multi-layer perceptron with exact forward/backward passes and SGD.

All arithmetic is float64. Models are treated as values: ``sgd_step`` returns
a new :class:`Model` and never mutates its argument.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError, ShapeError, SpecError, StateError

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str = "relu"

    @property
    def param_count(self) -> int:
        return self.in_width * self.out_width + self.out_width


@dataclass(frozen=True)
class ModelSpec:
    """Ordered dense layers.

    A spec produced by cutting a classifier may end in a ``relu`` layer;
    only full classifiers (see :meth:`check_classifier`) can be initialised
    or trained end to end.
    """

    layers: tuple[LayerSpec, ...]
    param_dtype_bytes: int = 4
    loss: str = "softmax-cross-entropy"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise SpecError("a model needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.in_width < 1 or layer.out_width < 1:
                raise SpecError(f"layer {i} has a non-positive width")
            if layer.activation not in ACTIVATIONS:
                raise SpecError(f"layer {i}: unknown activation {layer.activation!r}")
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_width != self.layers[i + 1].in_width:
                raise SpecError(
                    f"layer {i} output width {self.layers[i].out_width} does not match "
                    f"layer {i + 1} input width {self.layers[i + 1].in_width}"
                )
        if self.param_dtype_bytes < 1:
            raise SpecError("param_dtype_bytes must be positive")
        if self.loss != "softmax-cross-entropy":
            raise SpecError(f"unsupported loss {self.loss!r}")

    @classmethod
    def mlp(cls, widths: Sequence[int], activation: str = "relu", param_dtype_bytes: int = 4) -> "ModelSpec":
        """Classifier with hidden ``activation`` and identity logits."""
        if len(widths) < 2:
            raise SpecError("an MLP needs at least an input and an output width")
        layers = []
        for i in range(len(widths) - 1):
            act = "identity" if i == len(widths) - 2 else activation
            layers.append(LayerSpec(int(widths[i]), int(widths[i + 1]), act))
        return cls(tuple(layers), param_dtype_bytes)

    def check_classifier(self) -> None:
        if self.layers[-1].activation != "identity":
            raise SpecError("final layer must be identity (logits)")

    @property
    def input_width(self) -> int:
        return self.layers[0].in_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].out_width

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    @property
    def model_bytes(self) -> int:
        """Model data size |W| in bytes."""
        return self.param_count * self.param_dtype_bytes

    def sub(self, start: int, stop: int) -> "ModelSpec":
        return ModelSpec(self.layers[start:stop], self.param_dtype_bytes, self.loss)

    def fingerprint(self) -> bytes:
        desc = ";".join(f"{l.in_width}x{l.out_width}:{l.activation}" for l in self.layers)
        desc += f"|{self.param_dtype_bytes}|{self.loss}"
        return hashlib.sha256(desc.encode()).digest()[:8]


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    weights: list[np.ndarray]  # (out_width, in_width) per layer
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.spec.layers) or len(self.biases) != len(self.spec.layers):
            raise ShapeError("layer count does not match spec")
        for i, layer in enumerate(self.spec.layers):
            if self.weights[i].shape != (layer.out_width, layer.in_width):
                raise ShapeError(f"layer {i} weight shape {self.weights[i].shape} does not match spec")
            if self.biases[i].shape != (layer.out_width,):
                raise ShapeError(f"layer {i} bias shape {self.biases[i].shape} does not match spec")

    def copy(self) -> "Model":
        return Model(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params_equal(self, other: "Model") -> bool:
        return (
            self.spec == other.spec
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeError("batch inputs must be a non-empty matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError("one label per input row is required")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases])


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations, bound to the model that made them."""

    model: Model
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Uniform Glorot weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    spec.check_classifier()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    weights, biases = [], []
    for layer in spec.layers:
        limit = np.sqrt(6.0 / (layer.in_width + layer.out_width))
        weights.append(rng.uniform(-limit, limit, size=(layer.out_width, layer.in_width)))
        biases.append(np.zeros(layer.out_width))
    return Model(spec, weights, biases)


def forward(model: Model, inputs) -> tuple[ForwardCache, np.ndarray]:
    """Run ``inputs`` (matrix or :class:`Batch`) through every layer."""
    x = inputs.inputs if isinstance(inputs, Batch) else np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_width:
        raise ShapeError(
            f"input width {x.shape[-1] if x.ndim else None} does not match model input width "
            f"{model.spec.input_width}"
        )
    cache = ForwardCache(model)
    for layer, w, b in zip(model.spec.layers, model.weights, model.biases):
        cache.inputs.append(x)
        z = x @ w.T + b
        cache.pre.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return cache, x


def loss_and_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("logits must be (batch, classes) with one label per row")
    n, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"label out of range for {classes} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def backprop(model: Model, cache: ForwardCache, grad_out: np.ndarray) -> tuple[Gradients, np.ndarray]:
    """Gradients for every parameter plus the gradient w.r.t. the model input."""
    if cache.model is not model or len(cache.inputs) != len(model.spec.layers):
        raise StateError("forward cache was not produced by this model")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} does not match {cache.pre[-1].shape}")
    n_layers = len(model.spec.layers)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        if model.spec.layers[i].activation == "relu":
            g = g * (cache.pre[i] > 0.0)
        gw[i] = g.T @ cache.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ model.weights[i]
    return Gradients(gw, gb), g


def backward(model: Model, cache: ForwardCache, grad_logits: np.ndarray) -> Gradients:
    return backprop(model, cache, grad_logits)[0]


def sgd_step(model: Model, grads: Gradients, lr: float) -> Model:
    if lr <= 0:
        raise NumericError("learning rate must be positive")
    if len(grads.weights) != len(model.weights):
        raise ShapeError("gradient structure does not match model")
    for g in (*grads.weights, *grads.biases):
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
    weights, biases = [], []
    for w, b, gw, gb in zip(model.weights, model.biases, grads.weights, grads.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError("gradient shape does not match parameter shape")
        weights.append(w - lr * gw)
        biases.append(b - lr * gb)
    return Model(model.spec, weights, biases)


def train_step(model: Model, batch: Batch, lr: float) -> tuple[Model, float]:
    cache, logits = forward(model, batch)
    loss, g = loss_and_grad(logits, batch.labels)
    return sgd_step(model, backward(model, cache, g), lr), loss


def predict(model_or_parts, inputs) -> np.ndarray:
    """Argmax class for a model or a sequence of stacked sub-models."""
    parts = model_or_parts if isinstance(model_or_parts, (list, tuple)) else [model_or_parts]
    x = np.asarray(inputs, dtype=np.float64)
    for part in parts:
        _, x = forward(part, x)
    return x.argmax(axis=1)


def forward_flops(spec: ModelSpec, samples: int) -> int:
    """2 * in * out multiply-adds per dense layer per sample."""
    if samples < 0:
        raise ValueError("samples must be non-negative")
    return sum(2 * l.in_width * l.out_width for l in spec.layers) * samples


def count_flops(spec: ModelSpec, samples: int) -> int:
    """Training FLOPs: forward plus a backward pass costing twice the forward."""
    return 3 * forward_flops(spec, samples)


# -- gradient checking ------------------------------------------------------


def _loss_at(model: Model, batch: Batch) -> tuple[float, list[np.ndarray]]:
    cache, logits = forward(model, batch)
    loss, _ = loss_and_grad(logits, batch.labels)
    return loss, [z > 0.0 for z, l in zip(cache.pre, model.spec.layers) if l.activation == "relu"]


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckResult:
    max_relative_error: float
    worst: tuple[str, int, tuple[int, ...]] | None
    checked: int
    skipped_kinks: int
    analytic: float = 0.0
    numeric: float = 0.0


def grad_check_detail(
    model: Model,
    batch: Batch,
    eps: float = 1e-4,
    max_coords: int = 2000,
    seed: int = 0,
    grads: Gradients | None = None,
    floor: float | None = None,
) -> GradCheckResult:
    """Compare analytic gradients to central finite differences.

    Relative error per coordinate is ``|analytic - numeric| / max(|numeric|, floor)``.
    The floor defaults to ``max(1e-6, eps)``: central differences carry an
    O(eps**2) truncation error, which would otherwise dominate coordinates
    whose true gradient is zero.
    Coordinates whose +-eps perturbation flips a ReLU are skipped, since the
    loss is not differentiable across the kink. Models above 10,000
    parameters are checked on a seeded subsample of ``max_coords``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    if floor is None:
        floor = max(1e-6, eps)
    if grads is None:
        cache, logits = forward(model, batch)
        _, g = loss_and_grad(logits, batch.labels)
        grads = backward(model, cache, g)
    coords = [
        (kind, i, idx)
        for i in range(len(model.weights))
        for kind, arr in (("weight", model.weights[i]), ("bias", model.biases[i]))
        for idx in np.ndindex(arr.shape)
    ]
    if len(coords) > 10_000:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max(1, min(max_coords, len(coords))), replace=False))
        coords = [coords[j] for j in pick]
    _, base_pattern = _loss_at(model, batch)
    worst_err, worst, worst_a, worst_n = -1.0, None, 0.0, 0.0
    checked = skipped = 0
    probe = model.copy()
    for kind, i, idx in coords:
        arr = probe.weights[i] if kind == "weight" else probe.biases[i]
        orig = arr[idx]
        arr[idx] = orig + eps
        lp, pat_p = _loss_at(probe, batch)
        arr[idx] = orig - eps
        lm, pat_m = _loss_at(probe, batch)
        arr[idx] = orig
        if not (_same_pattern(pat_p, base_pattern) and _same_pattern(pat_m, base_pattern)):
            skipped += 1
            continue
        numeric = (lp - lm) / (2.0 * eps)
        analytic = float((grads.weights[i] if kind == "weight" else grads.biases[i])[idx])
        err = abs(analytic - numeric) / max(abs(numeric), floor)
        checked += 1
        if err > worst_err:
            worst_err, worst, worst_a, worst_n = err, (kind, i, tuple(int(v) for v in idx)), analytic, numeric
    if checked == 0:
        # every coordinate sat on a kink; check the first one regardless
        kind, i, idx = coords[0]
        arr = probe.weights[i] if kind == "weight" else probe.biases[i]
        orig = arr[idx]
        arr[idx] = orig + eps
        lp, _ = _loss_at(probe, batch)
        arr[idx] = orig - eps
        lm, _ = _loss_at(probe, batch)
        arr[idx] = orig
        numeric = (lp - lm) / (2.0 * eps)
        analytic = float((grads.weights[i] if kind == "weight" else grads.biases[i])[idx])
        worst_err = abs(analytic - numeric) / max(abs(numeric), floor)
        worst, worst_a, worst_n, checked = (kind, i, tuple(int(v) for v in idx)), analytic, numeric, 1
    return GradCheckResult(worst_err, worst, checked, skipped, worst_a, worst_n)


def grad_check(model: Model, batch: Batch, eps: float = 1e-4, **kwargs) -> float:
    return grad_check_detail(model, batch, eps, **kwargs).max_relative_error
