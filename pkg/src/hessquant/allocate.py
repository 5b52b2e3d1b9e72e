"""Bit-operations cost model and sensitivity-guided bit-width allocation.

A layer computing an m-output dense product over n inputs at b_w-bit weights
and b_a-bit incoming activations costs

    m * n * ((1 - f_p) * b_a * b_w + b_a + b_w + log2(n))

bit operations, where f_p is the fraction of pruned (zero) weights.  The
allocation objective weighs each layer's quantization damage by its Hessian
sensitivity: omega = sum_i avg_trace_i * ||Q(W_i) - W_i||^2.  The search for
the omega-minimizing bit assignment under a BOPs budget is solved exactly,
by enumeration for small spaces and depth-first branch-and-bound otherwise.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn, quantize
from .data import Dataset
from .nn import MLPModel, TrainConfig
from .quantize import QuantSchema

DEFAULT_CANDIDATES = (4, 5, 6, 7, 8)
EXHAUSTIVE_LIMIT = 2000


@dataclass(frozen=True)
class ArchSpec:
    """Dense-network shape plus the sparsity and input width the cost model needs."""
    dims: tuple[tuple[int, int], ...]     # per-layer (fan_in, fan_out)
    sparsities: tuple[float, ...] | None = None
    input_bits: int = 16

    def __post_init__(self):
        if not self.dims:
            raise ValueError("architecture needs at least one layer")
        if self.sparsities is None:
            object.__setattr__(self, "sparsities", (0.0,) * len(self.dims))
        if len(self.sparsities) != len(self.dims):
            raise ValueError("one sparsity per layer required")
        for (n, m) in self.dims:
            if n < 1 or m < 1:
                raise ValueError(f"invalid layer dims ({n}, {m})")
        for a, b in zip(self.dims, self.dims[1:]):
            if a[1] != b[0]:
                raise ValueError(f"layer dims do not chain: {a} then {b}")
        for f in self.sparsities:
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"sparsity {f} outside [0, 1]")

    @property
    def n_layers(self) -> int:
        return len(self.dims)

    @classmethod
    def from_sizes(cls, sizes, sparsities=None, input_bits: int = 16) -> "ArchSpec":
        dims = tuple(zip(sizes[:-1], sizes[1:]))
        if sparsities is None:
            sparsities = (0.0,) * len(dims)
        return cls(dims=dims, sparsities=tuple(float(f) for f in sparsities),
                   input_bits=input_bits)

    @classmethod
    def from_model(cls, model: MLPModel, sparsities=None, input_bits: int = 16) -> "ArchSpec":
        return cls.from_sizes(model.sizes, sparsities=sparsities, input_bits=input_bits)


def layer_bops(n: int, m: int, b_a: int, b_w: int, f_p: float = 0.0) -> float:
    """Bit operations of one dense layer; log2(n) is exact for powers of two."""
    if n < 1 or m < 1:
        raise ValueError("dims must be >= 1")
    if b_a < 1 or b_w < 1:
        raise ValueError("bit widths must be >= 1")
    if not 0.0 <= f_p <= 1.0:
        raise ValueError("sparsity outside [0, 1]")
    return m * n * ((1.0 - f_p) * b_a * b_w + b_a + b_w + math.log2(n))


def model_bops(arch: ArchSpec, schema: QuantSchema) -> float:
    """Total BOPs under a schema; layer i sees the activation width of layer i-1.

    Layer 0's incoming width is the schema's input width.
    """
    if schema.n_layers != arch.n_layers:
        raise ValueError(f"schema has {schema.n_layers} layers, architecture {arch.n_layers}")
    total = 0.0
    for i, (n, m) in enumerate(arch.dims):
        total += layer_bops(n, m, schema.input_act_bits(i), schema.weight_bits[i],
                            arch.sparsities[i])
    return total


def perturbation(w: np.ndarray, bits: int) -> float:
    """Squared Frobenius norm of the symmetric quantization error of w at b bits."""
    w = np.asarray(w, dtype=np.float64)
    params = quantize.calibrate(w, bits, symmetric=True)
    d = quantize.fake_quant(w, params) - w
    return float(np.sum(d * d))


def omega(traces, weights, schema: QuantSchema) -> float:
    """Sensitivity objective: sum of avg_trace_i * perturbation(W_i, b_w_i)."""
    if not (len(traces) == len(weights) == schema.n_layers):
        raise ValueError("traces, weights, and schema must have equal arity")
    return sum(float(t) * perturbation(w, b)
               for t, w, b in zip(traces, weights, schema.weight_bits))


@dataclass
class AllocationProblem:
    """Inputs of one allocation run.

    candidates are the weight bit widths available to every layer; activation
    widths follow the coupling rule b_a = b_w + coupling_offset.  traces are
    the per-layer average Hessian traces and weights the float tensors whose
    quantization damage omega measures.
    """
    arch: ArchSpec
    traces: list[float]
    weights: list[np.ndarray]
    budget: float
    candidates: tuple[int, ...] = DEFAULT_CANDIDATES
    coupling_offset: int = 3

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate set is empty")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if not (len(self.traces) == len(self.weights) == self.arch.n_layers):
            raise ValueError("traces/weights arity does not match the architecture")
        # sampled traces can dip below zero on barely-trained models; a
        # negative sensitivity would reward quantization error, so floor at 0
        self.traces = [max(0.0, float(t)) for t in self.traces]
        self.candidates = tuple(sorted(set(int(b) for b in self.candidates)))

    def schema_for(self, bits) -> QuantSchema:
        return QuantSchema.coupled(bits, input_bits=self.arch.input_bits,
                                   offset=self.coupling_offset)


@dataclass
class AllocationSolution:
    weight_bits: tuple[int, ...]
    activation_bits: tuple[int, ...]
    omega_value: float
    bops: float
    feasible: bool
    budget: float
    input_bits: int = 16
    explored: int = 0

    @property
    def schema(self) -> QuantSchema:
        return QuantSchema(weight_bits=self.weight_bits,
                           activation_bits=self.activation_bits,
                           input_bits=self.input_bits)


def _solution(problem: AllocationProblem, bits: tuple[int, ...], feasible: bool,
              explored: int) -> AllocationSolution:
    schema = problem.schema_for(bits)
    return AllocationSolution(
        weight_bits=schema.weight_bits,
        activation_bits=schema.activation_bits,
        omega_value=omega(problem.traces, problem.weights, schema),
        bops=model_bops(problem.arch, schema),
        feasible=feasible,
        budget=problem.budget,
        input_bits=problem.arch.input_bits,
        explored=explored,
    )


def _layer_cost_tables(problem: AllocationProblem):
    """Precomputed per-layer perturbation-weighted omega terms and BOPs pieces."""
    cands = problem.candidates
    pert = [{b: problem.traces[i] * perturbation(problem.weights[i], b) for b in cands}
            for i in range(problem.arch.n_layers)]

    def bops_of(layer: int, prev_b: int | None, b: int) -> float:
        n, m = problem.arch.dims[layer]
        if layer == 0:
            b_in = problem.arch.input_bits
        else:
            b_in = min(prev_b + problem.coupling_offset, quantize.MAX_BITS)
        return layer_bops(n, m, b_in, b, problem.arch.sparsities[layer])

    return pert, bops_of


def solve_ilp(problem: AllocationProblem) -> AllocationSolution:
    """Exact omega minimizer subject to the BOPs budget.

    Enumerates every configuration when the space is small (at most
    EXHAUSTIVE_LIMIT points) and otherwise runs depth-first branch-and-bound
    with independent per-layer lower bounds.  Ties break by lower BOPs, then
    the lexicographically smaller bit vector.  An unsatisfiable budget yields
    feasible=False carrying the minimum-BOPs configuration.
    """
    L = problem.arch.n_layers
    cands = problem.candidates
    pert, bops_of = _layer_cost_tables(problem)
    space = len(cands) ** L

    best_key = None
    best_bits = None
    min_bops_key = None
    min_bops_bits = None
    explored = 0

    if space <= EXHAUSTIVE_LIMIT:
        for bits in itertools.product(cands, repeat=L):
            explored += 1
            total_bops = sum(bops_of(i, bits[i - 1] if i else None, bits[i])
                             for i in range(L))
            total_omega = sum(pert[i][bits[i]] for i in range(L))
            bkey = (total_bops, total_omega, bits)
            if min_bops_key is None or bkey < min_bops_key:
                min_bops_key, min_bops_bits = bkey, bits
            if total_bops <= problem.budget:
                key = (total_omega, total_bops, bits)
                if best_key is None or key < best_key:
                    best_key, best_bits = key, bits
        if best_bits is not None:
            return _solution(problem, best_bits, feasible=True, explored=explored)
        return _solution(problem, min_bops_bits, feasible=False, explored=explored)

    # Branch and bound.  Lower bounds use per-layer minima taken independently
    # of neighbor choices, which is valid because the coupling only tightens
    # actual costs above those minima.
    omega_suffix = [0.0] * (L + 1)
    bops_suffix = [0.0] * (L + 1)
    for i in reversed(range(L)):
        omega_suffix[i] = omega_suffix[i + 1] + min(pert[i].values())
        bops_suffix[i] = bops_suffix[i + 1] + min(
            bops_of(i, p, b) for b in cands for p in (cands if i else (None,)))

    def dfs_omega(prefix, pre_omega, pre_bops):
        nonlocal best_key, best_bits, explored
        i = len(prefix)
        if i == L:
            explored += 1
            key = (pre_omega, pre_bops, prefix)
            if best_key is None or key < best_key:
                best_key, best_bits = key, prefix
            return
        if best_key is not None and pre_omega + omega_suffix[i] > best_key[0]:
            return
        prev = prefix[-1] if i else None
        for b in cands:
            nb = pre_bops + bops_of(i, prev, b)
            if nb + bops_suffix[i + 1] > problem.budget:
                continue
            dfs_omega(prefix + (b,), pre_omega + pert[i][b], nb)

    dfs_omega((), 0.0, 0.0)
    if best_bits is not None:
        return _solution(problem, best_bits, feasible=True, explored=explored)

    # Nothing fits the budget: find the minimum-BOPs configuration instead.
    def dfs_bops(prefix, pre_bops):
        nonlocal min_bops_key, min_bops_bits, explored
        i = len(prefix)
        if i == L:
            explored += 1
            key = (pre_bops, prefix)
            if min_bops_key is None or key < min_bops_key:
                min_bops_key, min_bops_bits = key, prefix
            return
        if min_bops_key is not None and pre_bops + bops_suffix[i] > min_bops_key[0]:
            return
        prev = prefix[-1] if i else None
        for b in cands:
            dfs_bops(prefix + (b,), pre_bops + bops_of(i, prev, b))

    dfs_bops((), 0.0)
    return _solution(problem, min_bops_bits, feasible=False, explored=explored)


def tightest_feasible_budget(problem_factory, budgets) -> float | None:
    """Smallest budget in the grid whose allocation is feasible, or None."""
    for budget in sorted(budgets):
        if solve_ilp(problem_factory(budget)).feasible:
            return budget
    return None


# ---------------------------------------------------------------------------
# Brute-force accuracy sweep


@dataclass
class SweepRecord:
    config_id: int
    weight_bits: tuple[int, ...]
    activation_bits: tuple[int, ...]
    accuracy: float
    bops: float
    sparsities: tuple[float, ...]
    seed: int
    error: str = ""


def sweep(arch: ArchSpec, candidates, data: Dataset, cfg: TrainConfig,
          val: Dataset | None = None, sample: int | None = None,
          seed: int = 0, jobs: int = 1,
          coupling_offset: int = 3) -> list[SweepRecord]:
    """Train-and-measure over (a sample of) the bit-width configuration grid.

    Each configuration gets a fresh model and a per-config training seed
    (cfg.seed + config_id), is trained with quantization-aware training under
    the coupled schema, and is recorded with its accuracy, measured per-layer
    sparsity, and BOPs recomputed from that measured sparsity.  A failing
    configuration produces a record with the error message instead of
    aborting the sweep.  sample draws that many configs without replacement
    using the given seed; jobs > 1 fans configurations across threads with
    results kept in config order.
    """
    cands = tuple(sorted(set(int(b) for b in candidates)))
    sizes = (arch.dims[0][0], *[m for _, m in arch.dims])
    grid = list(itertools.product(cands, repeat=arch.n_layers))
    ids = list(range(len(grid)))
    if sample is not None and sample < len(grid):
        rng = np.random.default_rng(seed)
        ids = sorted(rng.choice(len(grid), size=sample, replace=False).tolist())

    def run_one(config_id: int) -> SweepRecord:
        bits = grid[config_id]
        schema = QuantSchema.coupled(bits, input_bits=arch.input_bits,
                                     offset=coupling_offset)
        run_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                              learning_rate=cfg.learning_rate, l1=cfg.l1,
                              seed=cfg.seed + config_id, optimizer=cfg.optimizer)
        try:
            model = nn.mlp(list(sizes), seed=run_cfg.seed)
            fq = quantize.qat_train(model, data, schema, run_cfg, val=val)
            acc = nn.accuracy(fq, val if val is not None else data)
            sp = tuple(nn.sparsity(fq.model))
            measured = ArchSpec(dims=arch.dims, sparsities=sp, input_bits=arch.input_bits)
            return SweepRecord(config_id=config_id, weight_bits=schema.weight_bits,
                               activation_bits=schema.activation_bits, accuracy=acc,
                               bops=model_bops(measured, schema), sparsities=sp,
                               seed=run_cfg.seed)
        except Exception as exc:  # recorded, not fatal
            return SweepRecord(config_id=config_id, weight_bits=schema.weight_bits,
                               activation_bits=schema.activation_bits,
                               accuracy=float("nan"), bops=float("nan"),
                               sparsities=(float("nan"),) * arch.n_layers,
                               seed=cfg.seed + config_id, error=str(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_one, ids))
    else:
        records = [run_one(i) for i in ids]
    return records


def sweep_csv(records: list[SweepRecord]) -> str:
    """Render sweep records as CSV (stable column order, one row per config)."""
    if not records:
        return ""
    L = len(records[0].weight_bits)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = (["config_id"]
              + [f"b_w_{i}" for i in range(L)]
              + [f"b_a_{i}" for i in range(L)]
              + ["accuracy", "bops"]
              + [f"sparsity_{i}" for i in range(L)]
              + ["seed", "error"])
    writer.writerow(header)
    for r in records:
        writer.writerow([r.config_id, *r.weight_bits, *r.activation_bits,
                         repr(r.accuracy), repr(r.bops),
                         *[repr(s) for s in r.sparsities], r.seed, r.error])
    return buf.getvalue()


def parse_sweep_csv(text: str) -> list[SweepRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header = rows[0]
    L = sum(1 for c in header if c.startswith("b_w_"))
    records = []
    for row in rows[1:]:
        vals = dict(zip(header, row))
        records.append(SweepRecord(
            config_id=int(vals["config_id"]),
            weight_bits=tuple(int(vals[f"b_w_{i}"]) for i in range(L)),
            activation_bits=tuple(int(vals[f"b_a_{i}"]) for i in range(L)),
            accuracy=float(vals["accuracy"]),
            bops=float(vals["bops"]),
            sparsities=tuple(float(vals[f"sparsity_{i}"]) for i in range(L)),
            seed=int(vals["seed"]),
            error=vals.get("error", ""),
        ))
    return records


def save_allocation(sol: AllocationSolution, path: str) -> None:
    from .ioutil import write_json_atomic

    write_json_atomic(path, {
        "format": "hessquant-allocation",
        "version": 1,
        "weight_bits": list(sol.weight_bits),
        "activation_bits": list(sol.activation_bits),
        "omega": sol.omega_value,
        "bops": sol.bops,
        "feasible": sol.feasible,
        "budget": sol.budget,
        "input_bits": sol.input_bits,
        "explored": sol.explored,
    })


def load_allocation(path: str) -> AllocationSolution:
    import json

    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "hessquant-allocation":
        raise ValueError(f"{path}: not an allocation file")
    return AllocationSolution(
        weight_bits=tuple(doc["weight_bits"]),
        activation_bits=tuple(doc["activation_bits"]),
        omega_value=float(doc["omega"]),
        bops=float(doc["bops"]),
        feasible=bool(doc["feasible"]),
        budget=float(doc["budget"]),
        input_bits=int(doc.get("input_bits", 16)),
        explored=int(doc.get("explored", 0)),
    )
