import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _util import KIND_PROCS, loss_batch, random_model
from ambient_lab.corruption import CorruptionProcess, Mask, apply, sample_corruption
from ambient_lab.denoiser import DenoiserModel, deserialize
from ambient_lab.errors import ContractError
from ambient_lab.oracle import FiniteDistribution, GMMDistribution, finite_posterior_mean, restorer_for
from ambient_lab.schedule import NoiseSchedule
from ambient_lab.training import (
    METRIC_COLUMNS, OptimizerState, OracleProbe, TrainingDiverged, TrainSettings, adam_step,
    ambient_loss, clean_loss, clip_gradient, fit_tabular, gauss_hermite_queries, naive_loss,
    population_minimizer, population_objective, train,
)

FIN = FiniteDistribution([[1.0, -0.5], [-1.0, 0.7], [0.3, 1.2]], [0.3, 0.3, 0.4])


def small_data(proc, N=300, seed=0):
    rng = np.random.default_rng(seed)
    x0 = GMMDistribution.canonical().sample(N, rng)
    A = sample_corruption(proc, rng, size=N)
    return apply(A, x0), A


@given(g=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), c=st.floats(0.01, 10))
def test_clip_norm_and_direction(g, c):
    g = np.array(g)
    out, norm = clip_gradient(g, c)
    assert norm == pytest.approx(np.linalg.norm(g))
    assert np.linalg.norm(out) <= c * (1 + 1e-12) or np.allclose(out, g)
    if np.linalg.norm(g) > 0:
        cos = out @ g / (np.linalg.norm(out) * np.linalg.norm(g))
        assert cos == pytest.approx(1.0)


def test_adam_first_step_is_sign_times_lr():
    theta = np.zeros(3)
    st_ = OptimizerState(lr=0.01, clip_max_norm=None)
    adam_step(theta, np.array([2.0, -0.5, 0.0]), st_)
    assert np.allclose(theta, [-0.01, 0.01, 0.0], atol=1e-7)


def test_zero_model_loss_is_half_energy():
    proc = KIND_PROCS["random_inpainting"]
    model = DenoiserModel(random_model(proc).arch)
    y0, A, At, eta = loss_batch(proc)
    loss, _ = ambient_loss(model, y0, A, At, np.full(len(y0), 0.5), eta)
    assert loss == pytest.approx(0.5 * np.mean(np.sum(y0**2, axis=1)))


def test_naive_equals_ambient_when_delta_zero():
    proc = KIND_PROCS["random_inpainting"]
    model = random_model(proc)
    y0, A, _, eta = loss_batch(proc)
    s = np.full(len(y0), 0.4)
    a = ambient_loss(model, y0, A, A, s, eta)
    b = naive_loss(model, y0, A, s, eta)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_clean_loss_equals_identity_masks():
    proc = KIND_PROCS["random_inpainting"]
    model = random_model(proc)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 6))
    eta = rng.standard_normal((4, 6))
    I = Mask(np.ones((4, 6)))
    s = np.full(4, 0.3)
    assert clean_loss(model, x0, s, eta)[0] == ambient_loss(model, x0, I, I, s, eta)[0]


def test_loss_rejects_resurrected_pixels():
    proc = KIND_PROCS["random_inpainting"]
    model = random_model(proc)
    y0, A, At, eta = loss_batch(proc)
    bad = Mask(np.ones_like(At.diag))
    with pytest.raises(ContractError):
        ambient_loss(model, y0, A, bad, np.full(len(y0), 0.3), eta)
    y_bad = y0.copy()
    y_bad[A.diag == 0] = 1.0
    if np.any(A.diag == 0):
        with pytest.raises(ContractError):
            ambient_loss(model, y_bad, A, At, np.full(len(y0), 0.3), eta)


def test_loss_ignores_noise_on_erased_pixels():
    proc = KIND_PROCS["random_inpainting"]
    model = random_model(proc)
    y0, A, At, eta = loss_batch(proc)
    s = np.full(len(y0), 0.3)
    eta2 = np.where(At.diag == 1, eta, 100.0)
    assert ambient_loss(model, y0, A, At, s, eta)[0] == ambient_loss(model, y0, A, At, s, eta2)[0]


def test_lr_zero_keeps_parameters():
    proc = CorruptionProcess(n=2, p=0.5, delta=0.1)
    y0, A = small_data(proc)
    model = DenoiserModel(random_model(proc).arch, rng=np.random.default_rng(1))
    before = model.theta.copy()
    train(y0, A, proc, NoiseSchedule(), TrainSettings(steps=20, lr=0.0, hidden=(16, 16)),
          model=model)
    assert np.array_equal(model.theta, before)


def test_training_deterministic_and_writes_artifacts(tmp_path):
    proc = CorruptionProcess(n=2, p=0.5, delta=0.1)
    y0, A = small_data(proc)
    s = TrainSettings(steps=30, log_every=10, hidden=(16, 16), seed=3, checkpoint_every=15)
    a = train(y0, A, proc, NoiseSchedule(), s, out_dir=tmp_path, config_digest="d1")
    b = train(y0, A, proc, NoiseSchedule(), s)
    assert np.array_equal(a.model.theta, b.model.theta)
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 4
    back = deserialize((tmp_path / "model.ckpt").read_bytes())
    assert np.array_equal(back.theta, a.model.theta) and back.config_digest == "d1"
    assert (tmp_path / "model_0000015.ckpt").exists()


def test_zero_steps_gives_initial_checkpoint(tmp_path):
    proc = CorruptionProcess(n=2, p=0.5, delta=0.1)
    y0, A = small_data(proc)
    res = train(y0, A, proc, NoiseSchedule(), TrainSettings(steps=0, hidden=(8,)), out_dir=tmp_path)
    assert res.metrics == []
    assert np.all(res.model.forward(Mask(np.ones(2)), np.ones(2), 0.5) == 0)
    assert (tmp_path / "model.ckpt").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_good(tmp_path):
    proc = CorruptionProcess(n=2, p=0.0, delta=0.0)
    y0, A = small_data(proc, N=50)
    model = random_model(proc, hidden=(8,))
    with pytest.raises(TrainingDiverged) as info:
        train(y0 * 1e200, A, proc, NoiseSchedule(), TrainSettings(steps=5, hidden=(8,)),
              model=model, out_dir=tmp_path)
    assert info.value.step == 1
    assert (tmp_path / "model.ckpt").exists()


def test_clean_objective_needs_identity():
    proc = CorruptionProcess(n=2, p=0.5, delta=0.1)
    y0, A = small_data(proc, N=20)
    with pytest.raises(ContractError):
        train(y0, A, proc, NoiseSchedule(), TrainSettings(objective="clean", steps=1, hidden=(8,)))


def test_cosine_schedule_endpoints():
    s = TrainSettings(steps=100, lr=1e-3, lr_floor=0.01)
    assert s.lr_at(1) == pytest.approx(1e-3)
    assert s.lr_at(100) == pytest.approx(1e-5)
    assert TrainSettings(lr_schedule="constant", steps=100).lr_at(77) == 1e-3


def test_probe_gap_of_oracle_is_zero():
    d = GMMDistribution.canonical()
    probe = OracleProbe.build(d, CorruptionProcess(n=2), [0.05, 0.2, 1.0], 300, 0)
    assert probe.gap(restorer_for(d)) == 0.0
    assert set(probe.gap(restorer_for(d), by_sigma=True)) == {0.05, 0.2, 1.0}


# -- finite-support population analysis ---------------------------------------

@pytest.mark.parametrize("keep", [(1, 1), (1, 0), (0, 1), (0, 0)])
def test_population_minimizer_is_posterior_mean(keep):
    proc = CorruptionProcess(n=2, p=0.5, delta=0.5)
    y, _ = gauss_hermite_queries(FIN, keep, 0.3, nodes=5)
    h, det = population_minimizer(FIN, proc, keep, y, 0.3)
    assert det.all()
    expect = finite_posterior_mean(FIN, Mask(np.array(keep)), y, 0.3)
    assert np.allclose(h, expect, rtol=1e-10, atol=1e-12)


def test_naive_minimizer_undetermined_off_support():
    proc = CorruptionProcess(n=2, p=0.5, delta=0.5)
    y, _ = gauss_hermite_queries(FIN, (1, 0), 0.3, nodes=3)
    h, det = population_minimizer(FIN, proc, (1, 0), y, 0.3, objective="naive")
    assert det[:, 0].all() and not det[:, 1].any()
    assert np.isnan(h[:, 1]).all()


def test_population_objective_minimized_by_oracle():
    proc = CorruptionProcess(n=2, p=0.4, delta=0.3)
    oracle = lambda T, y: finite_posterior_mean(FIN, Mask(np.broadcast_to(T, y.shape)), y, 0.3)
    best = population_objective(oracle, FIN, proc, 0.3, nodes=8)
    for shift in ([0.05, 0.0], [0.0, -0.05]):
        worse = population_objective(lambda T, y: oracle(T, y) + shift, FIN, proc, 0.3, nodes=8)
        assert worse > best


def test_tabular_fit_converges_and_naive_keeps_init():
    proc = CorruptionProcess(n=2, p=0.5, delta=0.5)
    y, _ = gauss_hermite_queries(FIN, (1, 0), 0.3, nodes=3)
    h_amb = fit_tabular(FIN, proc, (1, 0), y, 0.3, steps=4000)
    target = finite_posterior_mean(FIN, Mask(np.array([1, 0])), y, 0.3)
    assert np.allclose(h_amb, target, atol=1e-4)
    a = fit_tabular(FIN, proc, (1, 0), y, 0.3, objective="naive", rng=np.random.default_rng(1))
    b = fit_tabular(FIN, proc, (1, 0), y, 0.3, objective="naive", rng=np.random.default_rng(2))
    assert np.allclose(a[:, 0], b[:, 0], atol=1e-4)
    assert not np.allclose(a[:, 1], b[:, 1], atol=1e-2)
