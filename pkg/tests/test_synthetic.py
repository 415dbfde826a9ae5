import numpy as np
import pytest

from msbo._qmc import sobol
from msbo.synthetic import (CascadeConfig, SyntheticCascade, cached_preset_cascade, evaluate_chunked,
                            find_ground_truth_optimum, generate_cascade, generate_stage, preset, preset_names)
from msbo.synthetic.weights import dumps, export_weights, import_weights, loads


def _same_weights(f, g):
    return (f.layer_dims == g.layer_dims
            and all(np.array_equal(a, b) for a, b in zip(f.weights, g.weights))
            and all(np.array_equal(a, b) for a, b in zip(f.biases, g.biases)))


def test_generate_stage_bit_exact():
    a = generate_stage(2, 1, 15, seed=123)
    b = generate_stage(2, 1, 15, seed=123)
    assert _same_weights(a, b)
    assert a.layer_dims == (2, 64, 128, 32, 1)
    assert not _same_weights(a, generate_stage(2, 1, 15, seed=124))


def test_generate_stage_rejects_empty_seed_set():
    with pytest.raises(ValueError):
        generate_stage(2, 1, 0, seed=0)


def test_sigmoid_outputs_in_open_unit_interval():
    f = generate_stage(3, 2, 8, seed=5, scaling="sigmoid")
    q = np.random.default_rng(0).uniform(-0.5, 1.5, (10_000, 3))
    out = f(q)
    assert out.shape == (10_000, 2)
    assert np.all(out > 0) and np.all(out < 1)


def test_boundary_penalty_gives_interior_maxima():
    g = np.linspace(0, 1, 201)
    grids = {1: g[:, None], 2: np.array(np.meshgrid(g, g)).reshape(2, -1).T}
    for d, grid in grids.items():
        interior = 0
        for seed in range(10):
            x = grid[np.argmax(generate_stage(d, 1, 8, seed=1000 + seed)(grid)[:, 0])]
            interior += bool(np.all((x >= 0.02) & (x <= 0.98)))
        assert interior >= 9, (d, interior)


# -- stage execution ---------------------------------------------------------------


@pytest.fixture(scope="module")
def masked():
    cfg = CascadeConfig("masked", x_dims=(2, 1), h_dims=(4, 1), seed_sizes=(5, 2), observed=((0, 1), (0,)))
    return generate_cascade(cfg, 3, with_optimum=False, epochs=100)


def test_noiseless_stage_returns_function_output():
    cfg = CascadeConfig("plain", x_dims=(2, 1), h_dims=(2, 1), seed_sizes=(5, 2))
    c = generate_cascade(cfg, 1, with_optimum=False, epochs=100)
    rng = np.random.default_rng(0)
    h1, m1 = c.run_stage(1, [0.3, 0.8], None, rng)
    assert np.array_equal(h1, c.stages[0](np.array([[0.3, 0.8]]))[0])
    assert np.array_equal(m1, h1)
    h2, m2 = c.run_stage(2, [0.4], h1, rng)
    assert np.array_equal(m2, c.stages[1](np.array([[0.4, *h1]]))[0])


def test_mask_selects_observed_components(masked):
    h, m = masked.run_stage(1, [0.2, 0.6], None, np.random.default_rng(0))
    assert h.shape == (4,) and m.shape == (2,)
    assert np.array_equal(m, h[:2])


def test_run_stage_requires_previous_state_iff_later_stage(masked):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        masked.run_stage(2, [0.5], None, rng)
    with pytest.raises(ValueError):
        masked.run_stage(1, [0.5, 0.5], np.zeros(4), rng)


def test_measurement_noise_statistics():
    cfg = CascadeConfig("noisy", x_dims=(2, 1), h_dims=(2, 1), seed_sizes=(5, 2),
                        measurement_noise_std=(0.1, 0.0))
    c = generate_cascade(cfg, 2, with_optimum=False, epochs=100)
    rng = np.random.default_rng(7)
    ms = np.array([c.run_stage(1, [0.4, 0.4], None, rng)[1] for _ in range(100_000)])
    hs = c.stages[0](np.array([[0.4, 0.4]]))[0]
    std = ms.std(axis=0, ddof=1)
    assert np.all((std >= 0.098) & (std <= 0.102)), std
    assert np.allclose(ms.mean(axis=0), hs, atol=4 * 0.1 / np.sqrt(100_000))


def test_process_noise_propagates_measurement_noise_does_not():
    cfg = CascadeConfig("pn", x_dims=(1, 1), h_dims=(1, 1), seed_sizes=(4, 2),
                        process_noise_std=(0.2, 0.0), measurement_noise_std=(0.3, 0.0))
    c = generate_cascade(cfg, 4, with_optimum=False, epochs=100)
    rng = np.random.default_rng(1)
    h, m = c.run_stage(1, [0.5], None, rng)
    h2, _ = c.run_stage(2, [0.5], h, rng)
    # the downstream input is the noisy latent state, not the noisier measurement
    assert np.array_equal(h2, c.stages[1](np.array([[0.5, *h]]))[0])
    assert not np.array_equal(h, m)


# -- ground-truth optimum ----------------------------------------------------------


def test_single_stage_optimum_matches_dense_grid():
    cfg = CascadeConfig("one", x_dims=(1,), h_dims=(1,), seed_sizes=(2,))
    c = generate_cascade(cfg, 11)
    grid = np.linspace(0, 1, 1_000_000)[:, None]
    assert abs(c.y_opt - evaluate_chunked(c, grid).max()) <= 1e-4


def test_more_restarts_never_worse():
    c = generate_cascade(preset("demo2d"), 5, with_optimum=False)
    _, y50 = find_ground_truth_optimum(c, restarts=50, probe_size=1000)
    _, y200 = find_ground_truth_optimum(c, restarts=200, probe_size=1000)
    assert y200 >= y50


def test_optimum_deterministic_and_exact():
    a = cached_preset_cascade("demo2d", 0)
    b = generate_cascade(preset("demo2d"), 0)
    assert np.array_equal(a.x_opt, b.x_opt) and a.y_opt == b.y_opt
    assert all(_same_weights(f, g) for f, g in zip(a.stages, b.stages))
    assert a.evaluate(a.x_opt[None, :])[0] == a.y_opt


def test_random_probes_never_exceed_optimum():
    c = cached_preset_cascade("demo2d", 0)
    probe = np.random.default_rng(3).random((100_000, c.total_x_dim))
    assert evaluate_chunked(c, probe).max() <= c.y_opt + 1e-6


def test_gradient_matches_finite_differences():
    c = cached_preset_cascade("demo2d", 0)
    x = np.array([[0.31, 0.62]])
    g = c.gradient(x)[0]
    eps = 1e-6
    fd = [(c.evaluate(x + eps * e)[0] - c.evaluate(x - eps * e)[0]) / (2 * eps) for e in np.eye(2)]
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


# -- presets -----------------------------------------------------------------------


def test_preset_examples():
    s = preset("sweep(50,2)")
    assert s.seed_sizes == (50, 2) and s.x_dims == (4, 2) and s.h_dims == (2, 1)
    assert preset("sweep_50_2") == s
    assert preset("demo2d").x_dims == (1, 1) and preset("demo2d").seed_sizes == (8, 2)
    assert preset("noisy2").process_noise_std == (0.05, 0.1)
    assert preset("three_stage").seed_sizes == (15, 15, 5)
    m = preset("three_stage_masked")
    assert m.seed_sizes == (50, 15, 2) and m.observed == ((0, 1), (0,), (0,))
    with pytest.raises(KeyError):
        preset("nope")
    for name in preset_names():
        assert preset(name).h_dims[-1] == 1


def test_noise_reference_linearisation_vs_monte_carlo():
    c = generate_cascade(preset("noisy2"), 0, restarts=8)
    lin = c.output_noise_std()
    mc = c.mc_output_std(c.x_opt, 100_000, np.random.default_rng(0))
    assert lin > 0
    assert abs(lin - mc) <= 0.15 * mc
    assert c.noise_adjusted_optimum() == pytest.approx(c.y_opt + 3 * lin)


# -- weight file -------------------------------------------------------------------


def test_weight_file_round_trip(tmp_path):
    c = cached_preset_cascade("demo2d", 0)
    path = tmp_path / "demo.bin"
    export_weights(c, path)
    back = import_weights(path)
    assert isinstance(back, SyntheticCascade)
    assert all(_same_weights(f, g) for f, g in zip(c.stages, back.stages))
    assert back.y_opt == c.y_opt and np.array_equal(back.x_opt, c.x_opt)
    q = sobol(256, 2, seed=1)
    assert np.array_equal(back.evaluate(q), c.evaluate(q))
    assert dumps(back) == path.read_bytes()


def test_weight_file_rejects_corruption():
    data = dumps(cached_preset_cascade("demo2d", 0))
    with pytest.raises(ValueError):
        loads(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError):
        loads(data[:-5])
    with pytest.raises(ValueError):
        loads(data + b"\0")
