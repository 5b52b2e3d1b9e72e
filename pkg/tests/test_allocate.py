import itertools
import math

import numpy as np
import pytest

from hessquant import allocate as al
from hessquant import data, nn
from hessquant import quantize as qz


REF_SIZES = [16, 64, 32, 32, 5]


def ref_arch(input_bits=16, sparsities=None):
    return al.ArchSpec.from_sizes(REF_SIZES, sparsities=sparsities,
                                  input_bits=input_bits)


# --- BOPs --------------------------------------------------------------------

def test_layer_bops_closed_form():
    # m * n * ((1 - f) * ba * bw + ba + bw + log2(n))
    got = al.layer_bops(16, 64, 32, 32)
    assert got == 64 * 16 * (32 * 32 + 32 + 32 + 4)
    assert got == 1118208


def test_layer_bops_known_values():
    assert al.layer_bops(16, 64, 16, 8) == 159744
    assert al.layer_bops(64, 32, 32, 32) == 2240512


def test_layer_bops_sparsity_removes_multiplier_term():
    dense = al.layer_bops(64, 32, 8, 8, f_p=0.0)
    empty = al.layer_bops(64, 32, 8, 8, f_p=1.0)
    # at f=1 only the adder/accumulator terms remain
    assert empty == 32 * 64 * (8 + 8 + 6)
    assert empty < dense


def test_layer_bops_log_term_is_exact():
    # the accumulator-growth term is the analytic log2, not a rounded
    # hardware width (see hwest for that)
    got = al.layer_bops(17, 4, 8, 8)
    assert got == pytest.approx(4 * 17 * (64 + 8 + 8 + math.log2(17)))


def test_model_bops_all_32_reference_value():
    arch = ref_arch(input_bits=32)
    schema = qz.QuantSchema.homogeneous(32, 4, input_bits=32)
    assert al.model_bops(arch, schema) == 4652832


def test_model_bops_chains_activation_widths():
    arch = ref_arch(input_bits=16)
    for bits, expected in [(4, 234368), (8, 523776), (5, 297024)]:
        schema = qz.QuantSchema.coupled((bits,) * 4, input_bits=16)
        assert al.model_bops(arch, schema) == expected
    mixed = qz.QuantSchema.coupled((4, 4, 5, 4), input_bits=16)
    assert al.model_bops(arch, mixed) == 243360


def test_model_bops_respects_measured_sparsity():
    dense = al.model_bops(ref_arch(), qz.QuantSchema.coupled((8, 8, 8, 8)))
    sparse = al.model_bops(ref_arch(sparsities=[0.5] * 4),
                           qz.QuantSchema.coupled((8, 8, 8, 8)))
    assert sparse < dense


def test_arch_spec_validates_chaining():
    with pytest.raises(ValueError):
        al.ArchSpec(dims=((16, 64), (32, 32)))  # 64 -> 32 mismatch
    with pytest.raises(ValueError):
        al.ArchSpec(dims=((16, 64),), sparsities=(0.1, 0.2))
    with pytest.raises(ValueError):
        al.ArchSpec(dims=((16, 64),), sparsities=(1.5,))


def test_arch_spec_from_model():
    m = nn.mlp(REF_SIZES, seed=0)
    arch = al.ArchSpec.from_model(m)
    assert arch.dims == ((16, 64), (64, 32), (32, 32), (32, 5))


# --- perturbation and the objective -------------------------------------------

def test_perturbation_is_zero_for_exactly_representable_weights():
    w = np.zeros((4, 4))
    assert al.perturbation(w, 4) == 0.0


def test_perturbation_matches_direct_computation(rng):
    w = rng.normal(size=(8, 6))
    for bits in (2, 4, 8):
        p = qz.calibrate(w, bits, symmetric=True)
        direct = float(np.sum((qz.fake_quant(w, p) - w) ** 2))
        assert al.perturbation(w, bits) == pytest.approx(direct, rel=1e-12)


def test_perturbation_decreases_with_bits(rng):
    w = rng.normal(size=(10, 10))
    vals = [al.perturbation(w, b) for b in (2, 4, 6, 8, 12)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-4 * vals[0]


def test_omega_is_trace_weighted_sum(rng):
    weights = [rng.normal(size=(4, 3)), rng.normal(size=(3, 2))]
    traces = [2.0, 5.0]
    schema = qz.QuantSchema.coupled((4, 8))
    direct = (2.0 * al.perturbation(weights[0], 4)
              + 5.0 * al.perturbation(weights[1], 8))
    assert al.omega(traces, weights, schema) == pytest.approx(direct, rel=1e-12)


# --- the solver ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_problem():
    rng = np.random.default_rng(17)
    weights = [rng.normal(size=(a, b)) for a, b in
               [(16, 64), (64, 32), (32, 32), (32, 5)]]
    traces = [3.0, 1.2, 0.7, 5.0]
    def make(budget, candidates=(4, 5, 6, 7, 8)):
        return al.AllocationProblem(arch=ref_arch(), traces=traces,
                                    weights=weights, budget=budget,
                                    candidates=candidates)
    return make


def exhaustive_best(problem):
    best = None
    fallback = None
    arch = problem.arch
    for bits in itertools.product(problem.candidates, repeat=len(arch.dims)):
        schema = problem.schema_for(bits)
        bops = al.model_bops(arch, schema)
        om = al.omega(problem.traces, problem.weights, schema)
        if bops <= problem.budget and (best is None or (om, bops, bits) < best):
            best = (om, bops, bits)
        if fallback is None or (bops, om, bits) < fallback:
            fallback = (bops, om, bits)
    return best, fallback


@pytest.mark.parametrize("budget", [250_000, 300_000, 400_000, 550_000])
def test_solver_matches_exhaustive_scan(small_problem, budget):
    problem = small_problem(budget)
    sol = al.solve_ilp(problem)
    best, _ = exhaustive_best(problem)
    assert sol.feasible
    assert sol.weight_bits == best[2]
    assert sol.omega_value == pytest.approx(best[0], rel=1e-12)
    assert sol.bops == best[1]
    assert sol.bops <= budget


def test_solver_flags_infeasible_budget_with_cheapest_config(small_problem):
    problem = small_problem(100_000)
    sol = al.solve_ilp(problem)
    _, fallback = exhaustive_best(problem)
    assert not sol.feasible
    assert sol.weight_bits == fallback[2]
    assert sol.bops == fallback[0]
    assert sol.bops > problem.budget


def test_solver_unbounded_budget_takes_max_bits(small_problem):
    sol = al.solve_ilp(small_problem(math.inf))
    assert sol.feasible
    assert sol.weight_bits == (8, 8, 8, 8)


def test_solver_branch_and_bound_agrees_with_exhaustive(small_problem):
    # candidate set large enough to cross the exhaustive cutoff
    candidates = (2, 3, 4, 5, 6, 7, 8, 9)
    assert len(candidates) ** 4 > al.EXHAUSTIVE_LIMIT
    for budget in (260_000, 350_000):
        problem = small_problem(budget, candidates)
        sol = al.solve_ilp(problem)
        best, _ = exhaustive_best(problem)
        assert sol.weight_bits == best[2]
        assert sol.omega_value == pytest.approx(best[0], rel=1e-12)
        assert sol.explored < len(candidates) ** 4


def test_solver_invariant_to_trace_rescaling(small_problem):
    # multiplying every trace by a constant cannot change the argmin
    problem = small_problem(300_000)
    scaled = al.AllocationProblem(arch=problem.arch,
                                  traces=[t * 37.5 for t in problem.traces],
                                  weights=problem.weights,
                                  budget=problem.budget,
                                  candidates=problem.candidates)
    assert al.solve_ilp(problem).weight_bits == al.solve_ilp(scaled).weight_bits


def test_solver_prefers_bits_for_sensitive_layers():
    # one layer dominates the objective; it should get the most bits when
    # the budget forces a choice
    rng = np.random.default_rng(23)
    weights = [rng.normal(size=(16, 16)) for _ in range(3)]
    arch = al.ArchSpec(dims=((16, 16), (16, 16), (16, 16)))
    traces = [100.0, 0.01, 0.01]
    problem = al.AllocationProblem(arch=arch, traces=traces, weights=weights,
                                   budget=60_000, candidates=(2, 4, 6, 8))
    sol = al.solve_ilp(problem)
    assert sol.feasible
    assert sol.weight_bits[0] == max(sol.weight_bits)


def test_solution_schema_property_round_trips(small_problem):
    sol = al.solve_ilp(small_problem(300_000))
    schema = sol.schema
    assert schema.weight_bits == sol.weight_bits
    assert schema.activation_bits == sol.activation_bits
    assert schema.input_bits == sol.input_bits


def test_tightest_feasible_budget(small_problem):
    budgets = [150_000, 200_000, 234_368, 250_000, 400_000]
    tight = al.tightest_feasible_budget(small_problem, budgets)
    assert tight == 234_368  # all-4 floor for this architecture


def test_allocation_json_round_trip(tmp_path, small_problem):
    sol = al.solve_ilp(small_problem(250_000))
    path = tmp_path / "a.json"
    al.save_allocation(sol, str(path))
    back = al.load_allocation(str(path))
    assert back == sol


# --- sweep --------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_data():
    ds = data.generate_synthetic(700, seed=60, separation=1.8)
    ds = data.standardize(ds)
    return data.split(ds, 0.2, 0)


def test_sweep_sample_runs_and_is_reproducible(sweep_data):
    tr, va = sweep_data
    arch = al.ArchSpec.from_sizes([16, 8, 5])
    cfg = nn.TrainConfig(epochs=2, batch_size=64, learning_rate=1e-3, seed=0)
    recs1 = al.sweep(arch, (4, 8), tr, cfg, val=va, sample=3, seed=1)
    recs2 = al.sweep(arch, (4, 8), tr, cfg, val=va, sample=3, seed=1)
    assert len(recs1) == 3
    assert [r.config_id for r in recs1] == [r.config_id for r in recs2]
    assert [r.accuracy for r in recs1] == [r.accuracy for r in recs2]
    for r in recs1:
        assert 0.0 <= r.accuracy <= 1.0
        assert r.bops > 0
        assert len(r.sparsities) == 2


def test_sweep_full_grid_covers_every_config(sweep_data):
    tr, va = sweep_data
    arch = al.ArchSpec.from_sizes([16, 6, 5])
    cfg = nn.TrainConfig(epochs=1, batch_size=64, learning_rate=1e-3, seed=0)
    recs = al.sweep(arch, (4, 6), tr, cfg, val=va)
    assert len(recs) == 4
    assert sorted(r.weight_bits for r in recs) == [
        (4, 4), (4, 6), (6, 4), (6, 6)]


def test_sweep_threaded_matches_serial(sweep_data):
    tr, va = sweep_data
    arch = al.ArchSpec.from_sizes([16, 6, 5])
    cfg = nn.TrainConfig(epochs=1, batch_size=64, learning_rate=1e-3, seed=0)
    serial = al.sweep(arch, (4, 8), tr, cfg, val=va, sample=2, seed=0, jobs=1)
    threaded = al.sweep(arch, (4, 8), tr, cfg, val=va, sample=2, seed=0, jobs=2)
    assert [(r.config_id, r.accuracy, r.bops) for r in serial] == \
           [(r.config_id, r.accuracy, r.bops) for r in threaded]


def test_sweep_csv_round_trip(sweep_data):
    tr, va = sweep_data
    arch = al.ArchSpec.from_sizes([16, 6, 5])
    cfg = nn.TrainConfig(epochs=1, batch_size=64, learning_rate=1e-3, seed=0)
    recs = al.sweep(arch, (4, 8), tr, cfg, val=va, sample=3, seed=2)
    text = al.sweep_csv(recs)
    back = al.parse_sweep_csv(text)
    assert back == recs
    # serialization is stable
    assert al.sweep_csv(back) == text


def test_sweep_records_failures_without_aborting(sweep_data, monkeypatch):
    tr, va = sweep_data
    arch = al.ArchSpec.from_sizes([16, 6, 5])
    cfg = nn.TrainConfig(epochs=1, batch_size=64, learning_rate=1e-3, seed=0)

    real = qz.qat_train
    def sometimes_fails(model, dataset, schema, cfg, val=None):
        if schema.weight_bits == (4, 4):
            raise nn.TrainingDiverged(0, "synthetic failure")
        return real(model, dataset, schema, cfg, val=val)
    monkeypatch.setattr(qz, "qat_train", sometimes_fails)

    recs = al.sweep(arch, (4, 6), tr, cfg, val=va)
    failed = [r for r in recs if r.error]
    ok = [r for r in recs if not r.error]
    assert len(failed) == 1 and math.isnan(failed[0].accuracy)
    assert len(ok) == 3
