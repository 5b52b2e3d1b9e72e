import numpy as np
import pytest

from hessquant import data, hessian, nn


def test_identity_surrogate_is_exact_per_probe():
    # v^T I v = ||v||^2 = d for Rademacher probes, so every sample equals d
    # and the standard error is zero
    est, stderr, samples = hessian.hutchinson_estimate(lambda v: v, 23, 8, seed=0)
    assert est == 23.0
    assert stderr == 0.0
    assert np.all(samples == 23.0)


def test_diagonal_surrogate_is_exact_per_probe():
    diag = np.arange(1.0, 11.0)
    est, stderr, _ = hessian.hutchinson_estimate(lambda v: diag * v, 10, 64, seed=1)
    assert est == pytest.approx(55.0, abs=1e-12)
    assert stderr == pytest.approx(0.0, abs=1e-12)


def test_off_diagonal_surrogate_converges():
    # a dense symmetric matrix: per-sample estimates fluctuate, the mean
    # approaches the true trace as k grows
    rng = np.random.default_rng(2)
    a = rng.normal(size=(30, 30))
    a = a @ a.T
    true = float(np.trace(a))
    est, stderr, _ = hessian.hutchinson_estimate(lambda v: a @ v, 30, 4000, seed=3)
    assert stderr > 0
    assert abs(est - true) < 4 * stderr
    assert abs(est - true) / abs(true) < 0.1


def test_hutchinson_is_unbiased_across_seeds():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(12, 12))
    a = a @ a.T
    true = float(np.trace(a))
    means = [hessian.hutchinson_estimate(lambda v: a @ v, 12, 16, seed=s)[0]
             for s in range(200)]
    # the average over independent runs should tighten by sqrt(200)
    assert np.mean(means) == pytest.approx(true, rel=0.02)


def test_hutchinson_deterministic_per_seed():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(9, 9))
    a = a @ a.T
    r1 = hessian.hutchinson_estimate(lambda v: a @ v, 9, 32, seed=7)
    r2 = hessian.hutchinson_estimate(lambda v: a @ v, 9, 32, seed=7)
    r3 = hessian.hutchinson_estimate(lambda v: a @ v, 9, 32, seed=8)
    assert r1[0] == r2[0] and np.array_equal(r1[2], r2[2])
    assert r1[0] != r3[0]


def test_probes_are_rademacher():
    seen = []
    hessian.hutchinson_estimate(lambda v: (seen.append(v.copy()), v)[1], 40, 6, seed=0)
    flat = np.concatenate(seen)
    assert set(np.unique(flat)) == {-1.0, 1.0}


def test_stderr_uses_sample_std():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(8, 8))
    a = a @ a.T
    est, stderr, samples = hessian.hutchinson_estimate(lambda v: a @ v, 8, 50, seed=1)
    assert stderr == pytest.approx(np.std(samples, ddof=1) / np.sqrt(50))
    assert est == pytest.approx(np.mean(samples))


def test_hutchinson_rejects_bad_arguments():
    with pytest.raises(ValueError):
        hessian.hutchinson_estimate(lambda v: v, 5, 0, seed=0)
    with pytest.raises(ValueError):
        hessian.hutchinson_estimate(lambda v: v, 0, 3, seed=0)


@pytest.fixture(scope="module")
def toy_model():
    # overlapping classes keep the loss curved at the optimum so layer
    # traces are comfortably nonzero
    ds = data.generate_synthetic(900, seed=50, separation=0.8)
    ds = data.standardize(ds)
    model = nn.mlp([16, 10, 5], seed=1)
    cfg = nn.TrainConfig(epochs=8, batch_size=32, learning_rate=1e-3,
                         l1=0.0, seed=1)
    model, _ = nn.train(model, ds, cfg)
    return model, ds


@pytest.fixture(scope="module")
def converged_tiny_model():
    # trained long enough that the loss surface is smooth at the iterate;
    # finite differences across fresh ReLU kinks would otherwise swamp the
    # comparison below
    ds = data.generate_synthetic(400, seed=50, separation=0.8)
    toy = data.Dataset(features=data.standardize(ds).features[:, :4],
                       labels=(ds.labels % 2).astype(np.int64))
    model = nn.mlp([4, 3, 2], seed=1)
    cfg = nn.TrainConfig(epochs=60, batch_size=32, learning_rate=3e-3,
                         l1=0.0, seed=1)
    model, _ = nn.train(model, toy, cfg)
    return model, toy


def test_model_trace_matches_exact_diagonalization(converged_tiny_model):
    model, ds = converged_tiny_model
    batch = hessian.calibration_batch(ds, 256)
    for layer in range(model.n_layers):
        exact = hessian.exact_trace(model, batch, layer)
        est, stderr = hessian.hutchinson_trace(model, batch, layer, k=1500, seed=0)
        assert abs(est - exact) <= max(5 * stderr, 0.08 * abs(exact))


def test_exact_trace_guards_dimension():
    model = nn.mlp([16, 400, 200, 5], seed=0)
    ds = data.generate_synthetic(64, seed=0)
    with pytest.raises(ValueError):
        hessian.exact_trace(model, ds, 1)  # 400*200 weights > limit


def test_layer_sensitivities_report(toy_model):
    model, ds = toy_model
    batch = hessian.calibration_batch(ds, 200)
    rep = hessian.layer_sensitivities(model, batch, k=24, seed=5)
    assert len(rep.traces) == model.n_layers
    assert rep.k == 24
    assert rep.seeds == [5, 6]
    assert rep.weight_counts == [160, 50]
    for tr, avg, wc in zip(rep.traces, rep.avg_traces, rep.weight_counts):
        assert avg == pytest.approx(tr / wc)
    assert rep.batch_sha256 == hessian.batch_digest(batch)
    assert all(s >= 0 for s in rep.stderrs)


def test_layer_sensitivities_layers_use_distinct_seeds(toy_model):
    model, ds = toy_model
    batch = hessian.calibration_batch(ds, 128)
    r1 = hessian.layer_sensitivities(model, batch, k=8, seed=0)
    r2 = hessian.layer_sensitivities(model, batch, k=8, seed=0)
    assert r1.traces == r2.traces
    r3 = hessian.layer_sensitivities(model, batch, k=8, seed=99)
    assert r1.traces != r3.traces


def test_calibration_batch_takes_leading_slice(toy_model):
    _, ds = toy_model
    batch = hessian.calibration_batch(ds, 100)
    assert len(batch) == 100
    assert np.array_equal(batch.features, ds.features[:100])
    # asking for more than available returns everything
    big = hessian.calibration_batch(ds, 10**6)
    assert len(big) == len(ds)


def test_batch_digest_tracks_content(toy_model):
    _, ds = toy_model
    a = hessian.calibration_batch(ds, 50)
    d1 = hessian.batch_digest(a)
    assert d1 == hessian.batch_digest(a)
    mutated = data.Dataset(features=a.features + 1e-9, labels=a.labels)
    assert hessian.batch_digest(mutated) != d1


def test_trace_report_round_trip(tmp_path, toy_model):
    model, ds = toy_model
    batch = hessian.calibration_batch(ds, 64)
    rep = hessian.layer_sensitivities(model, batch, k=4, seed=2)
    path = tmp_path / "traces.json"
    hessian.save_trace_report(rep, str(path))
    back = hessian.load_trace_report(str(path))
    assert back.traces == rep.traces
    assert back.stderrs == rep.stderrs
    assert back.batch_sha256 == rep.batch_sha256
    assert back.sizes == rep.sizes


def test_fd_hvp_eps_scale_changes_little_on_smooth_problems():
    # the estimate should be stable to the step size on a well-scaled
    # quadratic; this is the knob for ill-conditioned cases
    rng = np.random.default_rng(8)
    a = rng.normal(size=(10, 10))
    a = a @ a.T
    theta = rng.normal(size=10)
    v = rng.normal(size=10)
    h1 = nn.fd_hvp(lambda t: a @ t, theta, v, eps_scale=1e-4)
    h2 = nn.fd_hvp(lambda t: a @ t, theta, v, eps_scale=5e-5)
    assert np.allclose(h1, h2, rtol=1e-4, atol=1e-8)
