"""Uniform affine quantization and integer-only lowering.

Real values map to integer codes as q = clip(round(r / S - Z), qmin, qmax)
and back as r ~ S * (q + Z), with S = (beta - alpha) / (2^b - 1) for the
calibrated clipping range [alpha, beta].  Rounding is half-to-even.  Weights
calibrate symmetrically (Z = 0, alpha = -beta), post-ReLU activations use an
unsigned range starting at zero, so the whole lowered path runs with zero
zero-points.

Lowering produces an IntegerModel whose per-layer rescaling multipliers are
dyadic rationals (mantissa / 2^shift).  Requantization is then a single
integer multiply, an additive rounding term of 2^(shift-1), and an arithmetic
right shift.  Activation scales are snapped to powers of two and multiplier
mantissas are kept small enough that the reference float64 evaluation of an
exported graph reproduces the integer pipeline exactly at the bit widths the
tool targets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .nn import MLPModel, TrainConfig, TrainHistory, TrainingDiverged, fold_bn  # noqa: F401

MIN_BITS = 2
MAX_BITS = 32
MAX_SHIFT = 31
MAX_MANTISSA_BITS = 31
# Mantissa budget for lowered multipliers; small enough that acc * mantissa
# stays exactly representable in float64 for the supported accumulators.
DEFAULT_MULTIPLIER_BITS = 24


class LoweringError(RuntimeError):
    pass


def _int_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero point, and clip range for one tensor."""
    scale: float
    zero_point: int
    bits: int
    signed: bool
    symmetric: bool
    alpha: float
    beta: float

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in {MIN_BITS}..{MAX_BITS}, got {self.bits}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.beta < self.alpha:
            raise ValueError("beta < alpha")
        expected = (self.beta - self.alpha) / (2 ** self.bits - 1)
        if abs(expected - self.scale) > 1e-12 * max(1.0, abs(self.scale)):
            raise ValueError("scale inconsistent with clip range")
        if self.symmetric and (self.zero_point != 0 or abs(self.alpha + self.beta) > 1e-12):
            raise ValueError("symmetric params need zero_point 0 and alpha = -beta")

    @property
    def qmin(self) -> int:
        return _int_range(self.bits, self.signed)[0]

    @property
    def qmax(self) -> int:
        return _int_range(self.bits, self.signed)[1]


def calibrate(values: np.ndarray, bits: int, symmetric: bool = True) -> QuantParams:
    """Min/max calibration of QuantParams over an array of observed values.

    Symmetric mode (weights): beta = max|v| = -alpha, signed codes, Z = 0.
    Asymmetric mode (activations): the range is widened to include zero and
    codes are unsigned, which makes Z = 0 whenever min(v) >= 0.  A degenerate
    (zero-width) range falls back to [0, 1] (symmetric: beta = 1).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty array")
    if not np.all(np.isfinite(values)):
        raise ValueError("calibration values contain non-finite entries")
    levels = 2 ** bits - 1
    if symmetric:
        beta = float(np.max(np.abs(values)))
        if beta == 0.0:
            beta = 1.0
        params = QuantParams(scale=2 * beta / levels, zero_point=0, bits=bits,
                             signed=True, symmetric=True, alpha=-beta, beta=beta)
        return params
    lo = min(0.0, float(values.min()))
    hi = max(0.0, float(values.max()))
    if hi == lo:
        lo, hi = 0.0, 1.0
    scale = (hi - lo) / levels
    zero = int(round(lo / scale))  # qmin is 0 for unsigned codes
    return QuantParams(scale=scale, zero_point=zero, bits=bits, signed=False,
                       symmetric=False, alpha=lo, beta=hi)


def quantize(r: np.ndarray, params: QuantParams) -> np.ndarray:
    """Integer codes: clip(round_half_even(r / S - Z), qmin, qmax)."""
    r = np.asarray(r, dtype=np.float64)
    q = np.rint(r / params.scale - params.zero_point)
    q = np.clip(q, params.qmin, params.qmax)
    return q.astype(np.int64)


def dequantize(q: np.ndarray, params: QuantParams) -> np.ndarray:
    """Back to the real domain: S * (q + Z)."""
    return (np.asarray(q, dtype=np.float64) + params.zero_point) * params.scale


def fake_quant(r: np.ndarray, params: QuantParams) -> np.ndarray:
    return dequantize(quantize(r, params), params)


# ---------------------------------------------------------------------------
# Dyadic scales


@dataclass(frozen=True)
class DyadicScale:
    """A non-negative rational mantissa / 2^shift with shift in 0..31.

    Canonical form keeps the mantissa odd (or zero) unless shift is already 0,
    where even integers such as 6 have no smaller representation.
    """
    mantissa: int
    shift: int

    def __post_init__(self):
        if not 0 <= self.shift <= MAX_SHIFT:
            raise ValueError(f"shift must be in 0..{MAX_SHIFT}, got {self.shift}")
        if not 0 <= self.mantissa < (1 << 32):
            raise ValueError("mantissa must fit in 32 bits and be non-negative")
        if self.mantissa != 0 and self.shift > 0 and self.mantissa % 2 == 0:
            raise ValueError("mantissa must be odd in canonical form")

    @property
    def value(self) -> float:
        # Exact: the mantissa has at most 32 significant bits.
        return self.mantissa / (1 << self.shift)


def _canonical_dyadic(mantissa: int, shift: int) -> DyadicScale:
    while mantissa != 0 and mantissa % 2 == 0 and shift > 0:
        mantissa //= 2
        shift -= 1
    return DyadicScale(mantissa=mantissa, shift=shift)


def to_dyadic(s: float, max_shift: int = MAX_SHIFT,
              mantissa_bits: int = MAX_MANTISSA_BITS) -> DyadicScale:
    """Best dyadic approximation of a positive real scale.

    Scans shifts 0..max_shift, rounding the mantissa at each, and keeps the
    candidate minimizing |s - mantissa/2^shift| subject to the mantissa limit;
    ties prefer the smaller shift.  The result is canonicalized.
    """
    if not (s > 0 and math.isfinite(s)):
        raise ValueError(f"scale must be positive and finite, got {s}")
    if max_shift > MAX_SHIFT:
        raise ValueError(f"max_shift cannot exceed {MAX_SHIFT}")
    limit = (1 << mantissa_bits) - 1
    best: tuple[float, int, int] | None = None
    for c in range(max_shift + 1):
        m = int(round(s * (1 << c)))
        m = min(m, limit)
        err = abs(s - m / (1 << c))
        if best is None or err < best[0]:
            best = (err, m, c)
    _, m, c = best
    return _canonical_dyadic(m, c)


def _rescale_dyadic(mantissa: int, shift: int, mantissa_bits: int) -> DyadicScale:
    """Fit an exact dyadic (possibly out of range) into mantissa/shift budgets."""
    if shift < 0:
        mantissa <<= -shift
        shift = 0
    drop = 0
    if mantissa > 0:
        drop = max(drop, mantissa.bit_length() - mantissa_bits)
    drop = max(drop, shift - MAX_SHIFT)
    if drop > 0:
        if drop > shift:
            raise LoweringError("rescaling multiplier cannot be represented")
        mantissa = (mantissa + (1 << (drop - 1))) >> drop
        shift -= drop
        if mantissa.bit_length() > mantissa_bits:  # rounding carried over
            mantissa >>= 1
            shift -= 1
            if shift < 0:
                raise LoweringError("rescaling multiplier cannot be represented")
    return _canonical_dyadic(mantissa, shift)


def requantize(acc, scale: DyadicScale):
    """Multiply-and-shift requantization of integer accumulator values.

    Computes (acc * mantissa + 2^(shift-1)) >> shift with an arithmetic right
    shift; the additive term makes it round-half-up for non-negative inputs.
    Works elementwise on integer arrays and on plain ints.
    """
    m, c = scale.mantissa, scale.shift
    if c == 0:
        return acc * m
    return (acc * m + (1 << (c - 1))) >> c


# ---------------------------------------------------------------------------
# Quantization schemas


@dataclass(frozen=True)
class QuantSchema:
    """Per-layer weight and activation bit widths plus the input width.

    activation_bits[i] is the width of layer i's output activation; the last
    entry only matters through the coupling convention since final logits are
    dequantized rather than requantized.
    """
    weight_bits: tuple[int, ...]
    activation_bits: tuple[int, ...]
    input_bits: int = 16

    def __post_init__(self):
        if len(self.weight_bits) != len(self.activation_bits):
            raise ValueError("weight_bits and activation_bits must have equal arity")
        if not self.weight_bits:
            raise ValueError("schema needs at least one layer")
        for b in (*self.weight_bits, *self.activation_bits, self.input_bits):
            if not MIN_BITS <= int(b) <= MAX_BITS:
                raise ValueError(f"bit width {b} outside {MIN_BITS}..{MAX_BITS}")

    @property
    def n_layers(self) -> int:
        return len(self.weight_bits)

    def input_act_bits(self, layer: int) -> int:
        """Bit width of the activations entering a layer (input width for 0)."""
        return self.input_bits if layer == 0 else self.activation_bits[layer - 1]

    @classmethod
    def coupled(cls, weight_bits, input_bits: int = 16, offset: int = 3) -> "QuantSchema":
        """Activation widths follow the weights: b_a = b_w + offset, capped."""
        wb = tuple(int(b) for b in weight_bits)
        ab = tuple(min(int(b) + offset, MAX_BITS) for b in wb)
        return cls(weight_bits=wb, activation_bits=ab, input_bits=input_bits)

    @classmethod
    def homogeneous(cls, bits: int, n_layers: int, input_bits: int | None = None) -> "QuantSchema":
        """Every weight and activation at the same width (inputs too, unless given)."""
        return cls(weight_bits=(bits,) * n_layers, activation_bits=(bits,) * n_layers,
                   input_bits=bits if input_bits is None else input_bits)


# ---------------------------------------------------------------------------
# Quantization-aware training


@dataclass
class FakeQuantModel:
    """A float model plus the schema and frozen ranges of its fake-quant path."""
    model: MLPModel
    schema: QuantSchema
    input_max: float
    act_max: list[float]
    history: TrainHistory | None = None
    ema_updates: list[int] = field(default_factory=list)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        h, _, _ = _fq_forward(self.model, self.schema, self.input_max, self.act_max,
                              x, with_caches=False)
        return nn.softmax(h)


def _fq_weight(w: np.ndarray, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor fake-quant of a weight matrix; returns scale too."""
    params = calibrate(w, bits, symmetric=True)
    return fake_quant(w, params), params.scale


def _fq_unsigned(a: np.ndarray, bits: int, amax: float) -> np.ndarray:
    """Fake-quant of non-negative activations onto [0, amax]."""
    qmax = 2 ** bits - 1
    scale = max(amax, 1e-12) / qmax
    return np.clip(np.rint(a / scale), 0, qmax) * scale


def _fq_signed(x: np.ndarray, bits: int, xmax: float) -> np.ndarray:
    scale = 2 * max(xmax, 1e-12) / (2 ** bits - 1)
    lo, hi = _int_range(bits, signed=True)
    return np.clip(np.rint(x / scale), lo, hi) * scale


def _fq_forward(model: MLPModel, schema: QuantSchema, input_max: float,
                act_max: list[float], x: np.ndarray, with_caches: bool = True):
    """Fake-quantized forward pass; optionally returns backprop caches.

    Mirrors the lowered pipeline: inputs quantize at input_bits, each layer's
    weights at weight_bits[i], each hidden ReLU output at activation_bits[i].
    Final logits stay unquantized because the integer path dequantizes them.
    """
    hq = _fq_signed(nn.check_matrix(x, cols=model.layers[0].fan_in),
                    schema.input_bits, input_max)
    hs = [hq] if with_caches else None
    relu_masks = []
    act_masks = []
    wqs = []
    for i, layer in enumerate(model.layers):
        wq, _ = _fq_weight(layer.weights, schema.weight_bits[i])
        wqs.append(wq)
        u = hq @ wq + layer.bias
        if i < model.n_layers - 1:
            if with_caches:
                relu_masks.append(u > 0)
            a = np.maximum(u, 0.0)
            if with_caches:
                act_masks.append(a <= act_max[i])
            hq = _fq_unsigned(a, schema.activation_bits[i], act_max[i])
        else:
            hq = u
        if with_caches:
            hs.append(hq)
    if not with_caches:
        return hq, None, None
    return hq, (hs, relu_masks, act_masks, wqs), None


def _fq_grad(model: MLPModel, schema: QuantSchema, input_max: float,
             act_max: list[float], batch: Dataset, l1: float) -> np.ndarray:
    """Straight-through-estimator gradient of the fake-quantized loss.

    Rounding passes gradients unchanged; values outside a clip range get
    zero.  Weight fake-quant recalibrates from the tensor itself, so its
    range always covers every entry and only the activation clip masks bite.
    """
    logits, caches, _ = _fq_forward(model, schema, input_max, act_max, batch.features)
    hs, relu_masks, act_masks, wqs = caches
    n = len(batch)
    probs = nn.softmax(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), batch.labels] = 1.0
    dz = (probs - onehot) / n

    parts: list[np.ndarray] = [None] * (2 * model.n_layers)
    for i in reversed(range(model.n_layers)):
        layer = model.layers[i]
        if i < model.n_layers - 1:
            dz = dz * act_masks[i] * relu_masks[i]
        dw = hs[i].T @ dz
        if l1 != 0.0:
            dw = dw + l1 * np.sign(layer.weights)
        parts[2 * i] = dw.ravel()
        parts[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            dz = dz @ wqs[i].T
    return np.concatenate(parts)


def qat_train(model: MLPModel, data: Dataset, schema: QuantSchema, cfg: TrainConfig,
              val: Dataset | None = None) -> FakeQuantModel:
    """Quantization-aware training under a schema.

    The forward pass fake-quantizes weights and activations; gradients use
    the straight-through estimator.  Activation ranges track per-batch maxima
    with EMA momentum 0.95 and freeze for the final fifth of the epochs, so
    the quantization is static by the end.  The input range is calibrated
    once from the training data.  Deterministic in cfg.seed.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if schema.n_layers != model.n_layers:
        raise ValueError(f"schema has {schema.n_layers} layers, model has {model.n_layers}")
    if any(l.bn is not None for l in model.layers):
        raise ValueError("fold batch-norm records before quantization-aware training")

    momentum = 0.95
    rng = np.random.default_rng(cfg.seed)
    theta = parameter_vector = nn.parameter_vector(model)
    state = (np.zeros_like(theta), np.zeros_like(theta), 0)
    current = nn.replace_parameters(model, theta)
    input_max = float(np.max(np.abs(data.features)))
    act_max: list[float] = [0.0] * (model.n_layers - 1)
    seeded = False
    history = TrainHistory()
    ema_updates: list[int] = []
    eval_set = val if val is not None else data

    frozen_from = cfg.epochs - max(1, cfg.epochs // 5) if cfg.epochs >= 2 else cfg.epochs
    for epoch in range(cfg.epochs):
        updates = 0
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            if epoch < frozen_from:
                maxima = _observe_act_maxima(current, schema, input_max, act_max, batch.features,
                                             seeded)
                if not seeded:
                    act_max[:] = maxima
                    seeded = True
                else:
                    for j, m in enumerate(maxima):
                        act_max[j] = momentum * act_max[j] + (1 - momentum) * m
                updates += 1
            g = _fq_grad(current, schema, input_max, act_max, batch, cfg.l1)
            if cfg.optimizer == "adam":
                theta, state = _adam(theta, g, state, cfg)
            else:
                theta = theta - cfg.learning_rate * g
            current = nn.replace_parameters(current, theta)
        fq = FakeQuantModel(model=current, schema=schema, input_max=input_max,
                            act_max=list(act_max))
        epoch_loss = _fq_loss(fq, data, cfg.l1)
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        history.train_loss.append(epoch_loss)
        history.val_accuracy.append(nn.accuracy(fq, eval_set))
        ema_updates.append(updates)
    return FakeQuantModel(model=current, schema=schema, input_max=input_max,
                          act_max=list(act_max), history=history, ema_updates=ema_updates)


def _observe_act_maxima(model, schema, input_max, act_max, x, seeded) -> list[float]:
    """Hidden-layer post-ReLU maxima of the fake-quant forward on one batch.

    Before the ranges are seeded the pass uses the batch's own running maxima
    so early quantization is sane.
    """
    hq = _fq_signed(np.asarray(x, dtype=np.float64), schema.input_bits, input_max)
    maxima = []
    for i, layer in enumerate(model.layers):
        wq, _ = _fq_weight(layer.weights, schema.weight_bits[i])
        u = hq @ wq + layer.bias
        if i == model.n_layers - 1:
            break
        a = np.maximum(u, 0.0)
        m = float(a.max()) if a.size else 0.0
        maxima.append(m)
        rng_max = m if not seeded else act_max[i]
        hq = _fq_unsigned(a, schema.activation_bits[i], rng_max)
    return maxima


def _fq_loss(fq: FakeQuantModel, batch: Dataset, l1: float) -> float:
    logits, _, _ = _fq_forward(fq.model, fq.schema, fq.input_max, fq.act_max,
                               batch.features, with_caches=False)
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    ce = float(np.mean(lse - logits[np.arange(len(batch)), batch.labels]))
    return ce + l1 * sum(float(np.abs(l.weights).sum()) for l in fq.model.layers)


def _adam(theta, g, state, cfg: TrainConfig):
    m, v, t = state
    t += 1
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    mhat = m / (1 - cfg.beta1 ** t)
    vhat = v / (1 - cfg.beta2 ** t)
    return theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps), (m, v, t)


def calibrate_fake_quant(model: MLPModel, schema: QuantSchema, calib: Dataset) -> FakeQuantModel:
    """Post-training calibration: build a FakeQuantModel from one float pass.

    Ranges come from the float forward activations on the calibration batch;
    useful for lowering a model that skipped quantization-aware training.
    """
    if len(calib) == 0:
        raise ValueError("calibration batch is empty")
    if schema.n_layers != model.n_layers:
        raise ValueError("schema arity does not match the model")
    input_max = float(np.max(np.abs(calib.features)))
    h = nn.check_matrix(calib.features, cols=model.layers[0].fan_in)
    act_max = []
    for i, layer in enumerate(model.layers[:-1]):
        h = np.maximum(h @ layer.weights + layer.bias, 0.0)
        act_max.append(float(h.max()))
    return FakeQuantModel(model=model.copy(), schema=schema,
                          input_max=input_max, act_max=act_max)


# ---------------------------------------------------------------------------
# Integer lowering


@dataclass
class IntLayer:
    q_weights: np.ndarray          # int64 codes, shape (fan_in, fan_out)
    weight_bits: int
    weight_scale: DyadicScale
    q_bias: np.ndarray             # accumulator-precision integer codes
    act_bits: int                  # output activation width (unused on the last layer)
    requant: DyadicScale | None    # None on the last layer
    act_exp: int | None            # output activation scale is 2^(-act_exp)


@dataclass
class IntegerModel:
    """Everything needed for integer-only inference.

    Between input quantization and final dequantization the pipeline is pure
    integer arithmetic: matmul and bias add in the accumulator, then
    multiply-and-shift requantization clipped to the activation range (the
    clip at zero doubles as ReLU since all multipliers are positive).
    """
    layers: list[IntLayer]
    input_params: QuantParams
    input_scale: DyadicScale
    output_scale: DyadicScale
    accumulator_bits: int
    schema: QuantSchema

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits, _ = int_forward(self, x)
        return nn.softmax(logits)


def _pow2_act_exp(amax: float, bits: int) -> int:
    """Largest e with 2^-e * (2^bits - 1) >= amax, clamped to +-MAX_SHIFT."""
    amax = max(amax, 1e-12)
    qmax = 2 ** bits - 1
    e = math.floor(math.log2(qmax / amax))
    while 2.0 ** (-e) * qmax < amax:  # guard against log2 rounding
        e -= 1
    return int(min(max(e, -MAX_SHIFT), MAX_SHIFT))


def _dyadic_product(a: DyadicScale, b: DyadicScale) -> tuple[int, int]:
    """Exact mantissa/shift of a*b, unnormalized."""
    return a.mantissa * b.mantissa, a.shift + b.shift


def _pow2_dyadic(exp: int) -> DyadicScale:
    """2^-exp as a DyadicScale (negative exp becomes a large mantissa)."""
    if exp >= 0:
        return DyadicScale(mantissa=1, shift=exp)
    return DyadicScale(mantissa=1 << (-exp), shift=0)


def lower(fq: FakeQuantModel, accumulator_bits: int = 32,
          multiplier_bits: int = DEFAULT_MULTIPLIER_BITS) -> IntegerModel:
    """Turn a fake-quantized model into an integer-only one.

    Weight and input scales become dyadic rationals; activation scales snap
    to powers of two (widening the range, never shrinking it).  Each hidden
    layer stores the dyadic multiplier weight_scale * in_scale / act_scale;
    the final layer stores the plain dequantization scale.  Biases quantize
    to accumulator precision at weight_scale * in_scale.

    Raises LoweringError when a layer's worst-case accumulator width
    (weight bits + incoming activation bits + ceil(log2 fan_in)) exceeds
    accumulator_bits; pass a wider accumulator for wide schemas.
    """
    model, schema = fq.model, fq.schema
    if any(l.bn is not None for l in model.layers):
        model = fold_bn(model)

    in_real = 2 * max(fq.input_max, 1e-12) / (2 ** schema.input_bits - 1)
    input_scale = to_dyadic(in_real, mantissa_bits=multiplier_bits)
    beta_in = input_scale.value * (2 ** schema.input_bits - 1) / 2
    input_params = QuantParams(scale=input_scale.value, zero_point=0,
                               bits=schema.input_bits, signed=True, symmetric=True,
                               alpha=-beta_in, beta=beta_in)

    acc_lo, acc_hi = _int_range(accumulator_bits, signed=True)
    layers: list[IntLayer] = []
    prev_scale = input_scale
    output_scale = None
    for i, layer in enumerate(model.layers):
        b_w = schema.weight_bits[i]
        b_in = schema.input_act_bits(i)
        required = b_w + b_in + math.ceil(math.log2(max(layer.fan_in, 2)))
        if accumulator_bits < required:
            raise LoweringError(
                f"layer {i}: accumulator needs {required} bits "
                f"(weights {b_w} + activations {b_in} + log2 fan-in), "
                f"have {accumulator_bits}")

        w_real = calibrate(layer.weights, b_w, symmetric=True).scale
        w_scale = to_dyadic(w_real, mantissa_bits=multiplier_bits)
        lo, hi = _int_range(b_w, signed=True)
        q_w = np.clip(np.rint(layer.weights / w_scale.value), lo, hi).astype(np.int64)

        bias_scale = w_scale.value * prev_scale.value
        if accumulator_bits <= 62:
            q_b = np.clip(np.rint(layer.bias / bias_scale), acc_lo, acc_hi).astype(np.int64)
        else:
            q_b = np.array([min(max(int(round(v / bias_scale)), acc_lo), acc_hi)
                            for v in layer.bias], dtype=object)

        last = i == model.n_layers - 1
        # Mantissa budget that keeps acc * mantissa exact in float64 when the
        # reference graph evaluator replays the same arithmetic.
        budget = min(multiplier_bits, 52 - (required + 1))
        if budget < 2:
            budget = 2
        if last:
            m, c = _dyadic_product(w_scale, prev_scale)
            output_scale = _rescale_dyadic(m, c, budget)
            layers.append(IntLayer(q_weights=q_w, weight_bits=b_w, weight_scale=w_scale,
                                   q_bias=q_b, act_bits=schema.activation_bits[i],
                                   requant=None, act_exp=None))
        else:
            b_a = schema.activation_bits[i]
            e_a = _pow2_act_exp(fq.act_max[i], b_a)
            m, c = _dyadic_product(w_scale, prev_scale)
            requant = _rescale_dyadic(m, c - e_a, budget)
            if requant.mantissa == 0:
                raise LoweringError(f"layer {i}: requantization multiplier underflowed")
            layers.append(IntLayer(q_weights=q_w, weight_bits=b_w, weight_scale=w_scale,
                                   q_bias=q_b, act_bits=b_a, requant=requant, act_exp=e_a))
            prev_scale = _pow2_dyadic(e_a)
    return IntegerModel(layers=layers, input_params=input_params, input_scale=input_scale,
                        output_scale=output_scale, accumulator_bits=accumulator_bits,
                        schema=schema)


def _log(op_log, op: str, domain: str) -> None:
    if op_log is not None:
        op_log.append((op, domain))


def _int_matmul(h: np.ndarray, layer: IntLayer, b_in: int, acc_bits: int, op_log):
    """Exact integer h @ W + bias, in int64 when bounds allow, else split into
    16-bit weight limbs whose partial products fit int64 and recombined as
    arbitrary-precision Python integers."""
    n = layer.q_weights.shape[0]
    w_mag = 1 << (layer.weight_bits - 1)
    h_mag = 1 << b_in  # covers signed and unsigned incoming codes
    bound = n * w_mag * h_mag
    if bound < (1 << 62):
        acc = h.astype(np.int64) @ layer.q_weights
        _log(op_log, "matmul", "int")
        if layer.q_bias.dtype == object:
            acc = acc.astype(object) + layer.q_bias
        else:
            acc = acc + layer.q_bias
        _log(op_log, "add_bias", "int")
        return acc
    lo_limb = (layer.q_weights & 0xFFFF).astype(np.int64)
    hi_limb = layer.q_weights >> 16  # arithmetic shift keeps the sign in the top limb
    h64 = h.astype(np.int64) if h.dtype != object else h
    acc_lo = h64 @ lo_limb
    acc_hi = h64 @ hi_limb
    _log(op_log, "matmul", "int")
    acc = (acc_hi.astype(object) << 16) + acc_lo.astype(object)
    acc = acc + (layer.q_bias if layer.q_bias.dtype == object else layer.q_bias.astype(object))
    _log(op_log, "add_bias", "int")
    return acc


def int_forward(im: IntegerModel, x: np.ndarray, op_log: list | None = None):
    """Integer-only inference; returns (real logits, integer logit codes).

    The input is quantized once, every layer then runs matmul, bias add, and
    multiply-shift requantization on integers (the clip at zero realizes
    ReLU because multipliers are positive and zero points are zero), and the
    final accumulator is dequantized by the stored output scale.  Softmax is
    left to the caller.  Pass op_log to record each operation with the
    arithmetic domain it ran in.
    """
    x = nn.check_matrix(x, cols=im.layers[0].q_weights.shape[0])
    _log(op_log, "quantize_input", "real")
    h = quantize(x, im.input_params)
    for i, layer in enumerate(im.layers):
        b_in = im.schema.input_act_bits(i)
        acc = _int_matmul(h, layer, b_in, im.accumulator_bits, op_log)
        if layer.requant is not None:
            q = requantize(acc, layer.requant)
            _log(op_log, "requantize", "int")
            qmax = (1 << layer.act_bits) - 1
            h = np.minimum(np.maximum(q, 0), qmax)  # clip at 0 doubles as ReLU
            _log(op_log, "clip_relu", "int")
            if h.dtype == object and qmax < (1 << 62):
                h = h.astype(np.int64)
        else:
            q_logits = acc
    _log(op_log, "dequantize_output", "real")
    if q_logits.dtype == object:
        logits = np.array([[float(v) for v in row] for row in q_logits]) * im.output_scale.value
    else:
        logits = q_logits.astype(np.float64) * im.output_scale.value
    return logits, q_logits


# ---------------------------------------------------------------------------
# Integer model serialization


def save_integer_model(im: IntegerModel, path: str) -> None:
    from .ioutil import write_json_atomic

    doc = {
        "format": "hessquant-integer-model",
        "version": 1,
        "accumulator_bits": im.accumulator_bits,
        "input": {
            "bits": im.input_params.bits,
            "mantissa": im.input_scale.mantissa,
            "shift": im.input_scale.shift,
        },
        "output_scale": {"mantissa": im.output_scale.mantissa, "shift": im.output_scale.shift},
        "schema": {
            "weight_bits": list(im.schema.weight_bits),
            "activation_bits": list(im.schema.activation_bits),
            "input_bits": im.schema.input_bits,
        },
        "layers": [
            {
                "weight_bits": l.weight_bits,
                "act_bits": l.act_bits,
                "weight_scale": {"mantissa": l.weight_scale.mantissa, "shift": l.weight_scale.shift},
                "requant": None if l.requant is None else
                    {"mantissa": l.requant.mantissa, "shift": l.requant.shift},
                "act_exp": l.act_exp,
                "q_weights": [[int(v) for v in row] for row in l.q_weights],
                "q_bias": [int(v) for v in l.q_bias],
            }
            for l in im.layers
        ],
    }
    write_json_atomic(path, doc)


def load_integer_model(path: str) -> IntegerModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "hessquant-integer-model":
        raise ValueError(f"{path}: not an integer model file")
    schema = QuantSchema(weight_bits=tuple(doc["schema"]["weight_bits"]),
                         activation_bits=tuple(doc["schema"]["activation_bits"]),
                         input_bits=doc["schema"]["input_bits"])
    acc_bits = doc["accumulator_bits"]
    input_scale = DyadicScale(mantissa=doc["input"]["mantissa"], shift=doc["input"]["shift"])
    b_in = doc["input"]["bits"]
    beta_in = input_scale.value * (2 ** b_in - 1) / 2
    input_params = QuantParams(scale=input_scale.value, zero_point=0, bits=b_in,
                               signed=True, symmetric=True, alpha=-beta_in, beta=beta_in)
    layers = []
    for entry in doc["layers"]:
        bias_dtype = np.int64 if acc_bits <= 62 else object
        layers.append(IntLayer(
            q_weights=np.array(entry["q_weights"], dtype=np.int64),
            weight_bits=entry["weight_bits"],
            weight_scale=DyadicScale(**entry["weight_scale"]),
            q_bias=np.array([int(v) for v in entry["q_bias"]], dtype=bias_dtype),
            act_bits=entry["act_bits"],
            requant=None if entry["requant"] is None else DyadicScale(**entry["requant"]),
            act_exp=entry["act_exp"],
        ))
    return IntegerModel(layers=layers, input_params=input_params, input_scale=input_scale,
                        output_scale=DyadicScale(**doc["output_scale"]),
                        accumulator_bits=acc_bits, schema=schema)
