"""Minimal dense-network engine: forward, manual backprop, Adam training,
and finite-difference Hessian-vector products.

Everything runs on float64 numpy arrays.  Matrices are C-order with shape
(fan_in, fan_out); a model's trainable parameters flatten canonically as
layer 0 weights (row-major), layer 0 bias, layer 1 weights, ... which every
gradient and checkpoint in the package relies on.  Batch-norm records, when
present, are inference-time affine transforms using running statistics; they
are not trainable and are excluded from the flattening.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset

ACTIVATIONS = ("relu", "softmax", "none")


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}: non-finite loss")
        self.epoch = epoch


@dataclass
class BNRecord:
    """Batch-norm parameters with running statistics (inference form)."""
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray | None
    var: np.ndarray | None
    eps: float = 1e-5

    @property
    def populated(self) -> bool:
        return (self.mean is not None and self.var is not None
                and np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.var))
                and np.all(np.asarray(self.var) > 0))


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    bn: BNRecord | None = None

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class MLPModel:
    layers: list[DenseLayer]

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].fan_in] + [l.fan_out for l in self.layers]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)

    def copy(self) -> "MLPModel":
        return MLPModel(layers=[
            DenseLayer(weights=l.weights.copy(), bias=l.bias.copy(),
                       activation=l.activation, bn=l.bn)
            for l in self.layers
        ])


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    l1: float = 0.0
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


def mlp(sizes: list[int], seed: int = 0, output_activation: str = "softmax") -> MLPModel:
    """Build a ReLU MLP with the given layer widths, e.g. [16, 64, 32, 32, 5].

    Hidden weights use He initialization, the output layer uses 1/fan_in
    scaling; biases start at zero.  Deterministic in the seed.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output widths")
    if any(int(s) < 1 for s in sizes):
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        last = i == len(sizes) - 2
        scale = math.sqrt(1.0 / fan_in) if last else math.sqrt(2.0 / fan_in)
        w = rng.standard_normal((fan_in, fan_out)) * scale
        layers.append(DenseLayer(
            weights=w, bias=np.zeros(fan_out),
            activation=output_activation if last else "relu"))
    return MLPModel(layers=layers)


def check_matrix(x: np.ndarray, cols: int | None = None, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {x.shape}")
    if cols is not None and x.shape[1] != cols:
        raise ShapeError(f"{name} must have {cols} columns, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _apply_bn(bn: BNRecord, u: np.ndarray) -> np.ndarray:
    if not bn.populated:
        raise ValueError("batch-norm record has no populated running statistics")
    return bn.gamma * (u - bn.mean) / np.sqrt(bn.var + bn.eps) + bn.beta


def forward_logits(model: MLPModel, x: np.ndarray) -> np.ndarray:
    """Pre-softmax outputs; hidden activations applied along the way."""
    h = check_matrix(x, cols=model.layers[0].fan_in)
    for i, layer in enumerate(model.layers):
        u = h @ layer.weights + layer.bias
        if layer.bn is not None:
            u = _apply_bn(layer.bn, u)
        if i < model.n_layers - 1:
            if layer.activation == "relu":
                u = np.maximum(u, 0.0)
            elif layer.activation != "none":
                raise ValueError(f"unsupported hidden activation {layer.activation!r}")
        h = u
    return h


def forward(model: MLPModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities (rows sum to 1)."""
    logits = forward_logits(model, x)
    last = model.layers[-1].activation
    if last == "softmax":
        return softmax(logits)
    if last == "none":
        return logits
    raise ValueError(f"unsupported output activation {last!r}")


def loss(model: MLPModel, batch: Dataset, l1: float = 0.0) -> float:
    """Mean cross-entropy plus l1 times the sum of weight-matrix L1 norms."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits = forward_logits(model, batch.features)
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    ce = float(np.mean(lse - logits[np.arange(len(batch)), batch.labels]))
    penalty = l1 * sum(float(np.abs(l.weights).sum()) for l in model.layers)
    return ce + penalty


def parameter_vector(model: MLPModel) -> np.ndarray:
    """Canonical flattening: per layer, weights row-major then bias."""
    parts = []
    for layer in model.layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    return np.concatenate(parts)


def replace_parameters(model: MLPModel, theta: np.ndarray) -> MLPModel:
    """A model copy with parameters taken from a canonical flat vector."""
    layers = []
    off = 0
    for layer in model.layers:
        nw = layer.weights.size
        w = theta[off:off + nw].reshape(layer.weights.shape).copy()
        off += nw
        b = theta[off:off + layer.bias.size].copy()
        off += layer.bias.size
        layers.append(DenseLayer(weights=w, bias=b, activation=layer.activation, bn=layer.bn))
    if off != theta.size:
        raise ShapeError(f"parameter vector has {theta.size} entries, model needs {off}")
    return MLPModel(layers=layers)


def _forward_caches(model: MLPModel, x: np.ndarray):
    """Layer inputs and relu masks needed by backprop."""
    hs = [x]
    masks = []
    h = x
    for i, layer in enumerate(model.layers):
        u = h @ layer.weights + layer.bias
        if layer.bn is not None:
            u = _apply_bn(layer.bn, u)
        if i < model.n_layers - 1 and layer.activation == "relu":
            masks.append(u > 0)
            h = np.maximum(u, 0.0)
        else:
            masks.append(None)
            h = u
        hs.append(h)
    return hs, masks


def _backprop(model: MLPModel, batch: Dataset, l1: float,
              caches=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (dW, db) for the loss; softmax cross-entropy output."""
    x = check_matrix(batch.features, cols=model.layers[0].fan_in)
    n = len(batch)
    hs, masks = caches if caches is not None else _forward_caches(model, x)
    probs = softmax(hs[-1])
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), batch.labels] = 1.0
    dz = (probs - onehot) / n

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * model.n_layers
    for i in reversed(range(model.n_layers)):
        layer = model.layers[i]
        if masks[i] is not None:
            dz = dz * masks[i]
        if layer.bn is not None:
            dz = dz * (layer.bn.gamma / np.sqrt(layer.bn.var + layer.bn.eps))
        dw = hs[i].T @ dz
        if l1 != 0.0:
            dw = dw + l1 * np.sign(layer.weights)
        db = dz.sum(axis=0)
        grads[i] = (dw, db)
        if i > 0:
            dz = dz @ layer.weights.T
    return grads


def grad(model: MLPModel, batch: Dataset, l1: float = 0.0) -> np.ndarray:
    """Flat gradient in the canonical parameter order.

    The L1 term uses the sign subgradient, taken as 0 at exactly 0.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    parts = []
    for dw, db in _backprop(model, batch, l1):
        parts.append(dw.ravel())
        parts.append(db)
    return np.concatenate(parts)


def fd_hvp(grad_fn, theta: np.ndarray, v: np.ndarray, eps_scale: float = 1e-4) -> np.ndarray:
    """Hessian-vector product by central differences of a gradient function.

    The step is eps_scale * max(1, ||theta||) / max(||v||, 1e-12), so probe
    vectors of any magnitude see a comparable relative perturbation.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ShapeError(f"v has shape {v.shape}, parameters have {theta.shape}")
    eps = eps_scale * max(1.0, float(np.linalg.norm(theta))) / max(float(np.linalg.norm(v)), 1e-12)
    gp = grad_fn(theta + eps * v)
    gm = grad_fn(theta - eps * v)
    return (gp - gm) / (2.0 * eps)


def layer_weight_count(model: MLPModel, layer: int) -> int:
    return model.layers[layer].weights.size


def hvp(model: MLPModel, batch: Dataset, layer: int, v: np.ndarray,
        eps_scale: float = 1e-4) -> np.ndarray:
    """Product of the layer-restricted weight Hessian with v.

    The Hessian block covers only the chosen layer's weight matrix (biases
    and other layers stay fixed), and the L1 penalty is excluded since its
    curvature is zero almost everywhere.  Uses central finite differences of
    the data-loss gradient.
    """
    if not 0 <= layer < model.n_layers:
        raise IndexError(f"layer {layer} out of range")
    if len(batch) == 0:
        raise ValueError("empty batch")
    w0 = model.layers[layer].weights
    v = np.asarray(v, dtype=np.float64)
    if v.size != w0.size:
        raise ShapeError(f"v must have {w0.size} entries for layer {layer}, got {v.size}")

    def layer_grad(theta_w: np.ndarray) -> np.ndarray:
        trial = model.copy()
        trial.layers[layer].weights = theta_w.reshape(w0.shape)
        return _backprop(trial, batch, l1=0.0)[layer][0].ravel()

    return fd_hvp(layer_grad, w0.ravel(), v, eps_scale=eps_scale)


def _adam_step(theta, g, state, cfg: TrainConfig):
    m, v, t = state
    t += 1
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    mhat = m / (1 - cfg.beta1 ** t)
    vhat = v / (1 - cfg.beta2 ** t)
    theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return theta, (m, v, t)


def train(model: MLPModel, data: Dataset, cfg: TrainConfig,
          val: Dataset | None = None) -> tuple[MLPModel, TrainHistory]:
    """Mini-batch training; bit-for-bit reproducible for a fixed seed.

    Shuffling, batching, and optimizer state all derive from cfg.seed.  The
    history records the full-set training loss after each epoch and accuracy
    on `val` (on the training data itself when no validation set is given).
    Raises TrainingDiverged when the epoch loss stops being finite.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    theta = parameter_vector(model)
    state = (np.zeros_like(theta), np.zeros_like(theta), 0)
    history = TrainHistory()
    current = replace_parameters(model, theta)
    eval_set = val if val is not None else data
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g = grad(current, data.take(idx), l1=cfg.l1)
            if cfg.optimizer == "adam":
                theta, state = _adam_step(theta, g, state, cfg)
            else:
                theta = theta - cfg.learning_rate * g
            current = replace_parameters(current, theta)
        epoch_loss = loss(current, data, l1=cfg.l1)
        # the log-sum-exp keeps cross entropy finite even for absurd logits,
        # so a runaway-but-finite loss counts as divergence too
        if not math.isfinite(epoch_loss) or epoch_loss > 1e8:
            raise TrainingDiverged(epoch)
        history.train_loss.append(epoch_loss)
        history.val_accuracy.append(accuracy(current, eval_set))
    return current, history


def accuracy(model, data: Dataset) -> float:
    """Fraction of argmax-correct predictions; model is anything with
    predict_proba (float model, fake-quant wrapper, or lowered model)."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    probs = model.predict_proba(data.features)
    return float(np.mean(probs.argmax(axis=1) == data.labels))


def sparsity(model: MLPModel, eps: float = 1e-6) -> list[float]:
    """Per-layer fraction of weight entries with |w| <= eps."""
    return [float(np.mean(np.abs(l.weights) <= eps)) for l in model.layers]


def fold_bn(model: MLPModel) -> MLPModel:
    """Fold batch-norm records into the preceding affine layer.

    W' = gamma * W / sqrt(var + eps), b' = gamma * (b - mean) / sqrt(var + eps)
    + beta.  Layers without a record are copied unchanged, so the operation is
    idempotent.  Records must carry populated running statistics.
    """
    layers = []
    for i, layer in enumerate(model.layers):
        if layer.bn is None:
            layers.append(DenseLayer(weights=layer.weights.copy(), bias=layer.bias.copy(),
                                     activation=layer.activation))
            continue
        bn = layer.bn
        if not bn.populated:
            raise ValueError(f"layer {i}: batch-norm statistics are unpopulated")
        inv = bn.gamma / np.sqrt(bn.var + bn.eps)
        layers.append(DenseLayer(weights=layer.weights * inv, bias=(layer.bias - bn.mean) * inv + bn.beta,
                                 activation=layer.activation))
    return MLPModel(layers=layers)


def save_model(model: MLPModel, path: str, mean: np.ndarray | None = None,
               std: np.ndarray | None = None) -> None:
    """JSON checkpoint: layer widths, activations, flat parameters, and the
    standardization statistics the model expects its inputs to be in."""
    from .ioutil import write_json_atomic

    if any(l.bn is not None for l in model.layers):
        raise ValueError("fold batch-norm records before saving")
    doc = {
        "format": "hessquant-model",
        "version": 1,
        "sizes": model.sizes,
        "activations": [l.activation for l in model.layers],
        "params": [float(v) for v in parameter_vector(model)],
        "standardization": None if mean is None else {
            "mean": [float(v) for v in mean],
            "std": [float(v) for v in std],
        },
    }
    write_json_atomic(path, doc)


def load_model(path: str) -> tuple[MLPModel, np.ndarray | None, np.ndarray | None]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "hessquant-model":
        raise ValueError(f"{path}: not a model checkpoint")
    sizes = doc["sizes"]
    skeleton = mlp(sizes, seed=0)
    for layer, act in zip(skeleton.layers, doc["activations"]):
        layer.activation = act
    model = replace_parameters(skeleton, np.array(doc["params"], dtype=np.float64))
    stats = doc.get("standardization")
    if stats is None:
        return model, None, None
    return model, np.array(stats["mean"]), np.array(stats["std"])
