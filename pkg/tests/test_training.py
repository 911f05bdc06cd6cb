import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frameinterp import networks as N
from frameinterp import tensor as T
from frameinterp.data import FrameTriplet, make_synthetic_set
from frameinterp.state import TrainState
from frameinterp.tensor import Tape, Tensor
from frameinterp.training import (
    TrainConfig,
    TrainingDiverged,
    alpha_schedule,
    discriminator_loss,
    generator_loss,
    load_training_checkpoint,
    mse_loss,
    parse_config,
    sgd_adam_update,
    train,
    train_adversarial,
    train_joint_implicit_flow,
    train_mse,
)

TINY = dict(channels=(4, 8), depth=2, flow_channels=(4, 8), disc_channels=(4,), batch=2, crop=16, dtype="float64")


def tiny_set(n=4, size=24, seed=0):
    return make_synthetic_set(n, size=size, max_speed=2.0, seed=seed).triplets


# --- losses ------------------------------------------------------------------


def test_mse_loss_is_a_sum():
    a = np.zeros((1, 2, 2))
    b = a.copy()
    b[0, 1, 1] = 0.5
    assert mse_loss(a, a).item() == 0.0
    assert mse_loss(a, b).item() == 0.25
    assert mse_loss(np.zeros((1, 2, 2)), np.ones((1, 2, 2))).item() == 4.0
    with pytest.raises(ValueError):
        mse_loss(np.zeros(3), np.zeros(4))


def test_alpha_schedule_values():
    assert alpha_schedule(0.001, 0) == 1.0
    assert abs(alpha_schedule(0.001, 1000) - math.exp(-1)) < 1e-15
    with pytest.raises(ValueError):
        alpha_schedule(0.0, 1)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 0.05), st.integers(0, 10_000))
def test_alpha_schedule_properties(gamma, n):
    # gamma * n stays below 500, so exp(-gamma * n) does not underflow
    a = alpha_schedule(gamma, n)
    assert 0 < a <= 1
    assert alpha_schedule(gamma, n + 1) < a
    assert math.isclose(a, alpha_schedule(gamma / 2, 2 * n), rel_tol=1e-12)


def test_generator_loss_examples():
    img = np.random.default_rng(0).random((3, 4, 4))
    r = generator_loss(img, img + 0.1, 0.5, alpha=0.0)
    assert r.total == pytest.approx(-math.log(0.5 + 1e-8), abs=1e-12)
    assert r.total == pytest.approx(0.693147, abs=1e-6)
    r = generator_loss(img, img, 0.5, alpha=1.0)
    assert r.mse_term == 0.0 and r.total == pytest.approx(0.693147, abs=1e-6)
    with pytest.raises(ValueError):
        generator_loss(img, img, 1.5, alpha=1.0)


def test_generator_loss_increases_with_detection_probability():
    img = np.zeros((3, 4, 4))
    totals = [generator_loss(img, img + 0.1, p, 0.3).total for p in np.linspace(0.01, 0.99, 50)]
    assert np.all(np.diff(totals) > 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.001, 0.999), st.integers(0, 1000))
def test_loss_report_consistency(alpha, p, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    r = generator_loss(a, b, np.full((2, 1), p), alpha)
    assert abs(r.total - (r.alpha * r.mse_term + r.adversarial_term)) <= 1e-12 * max(1.0, abs(r.total))


def test_discriminator_loss_examples():
    assert discriminator_loss(0.5, 0.5).item() == pytest.approx(-2 * math.log(0.5 + 1e-8), abs=1e-12)
    assert discriminator_loss(0.5, 0.5).item() == pytest.approx(1.386294, abs=1e-6)
    assert discriminator_loss(1e-12, 1 - 1e-12).item() == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(ValueError):
        discriminator_loss(-0.1, 0.5)


def test_discriminator_loss_blind_optimum_at_half():
    ps = np.linspace(0.01, 0.99, 99)
    losses = [discriminator_loss(p, p).item() for p in ps]
    assert ps[int(np.argmin(losses))] == pytest.approx(0.5)


# --- optimizer ---------------------------------------------------------------


def scalar_store(value=1.0):
    store = N.ParamStore()
    store.add("w", np.array([value]))
    return store


def test_sgd_step():
    store = scalar_store()
    store["w"].grad = np.array([1.0])
    sgd_adam_update(store, TrainState(learning_rate=0.1, optimizer="sgd"))
    assert store["w"].data[0] == pytest.approx(0.9)


def test_zero_gradient_and_zero_lr_change_nothing():
    for opt in ("sgd", "adam"):
        store = scalar_store()
        store["w"].grad = np.array([0.0])
        sgd_adam_update(store, TrainState(optimizer=opt))
        assert store["w"].data[0] == 1.0
        store["w"].grad = np.array([3.0])
        sgd_adam_update(store, TrainState(learning_rate=0.0, optimizer=opt))
        assert store["w"].data[0] == 1.0


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e6])
def test_adam_first_step_is_about_lr(scale):
    store = scalar_store()
    store["w"].grad = np.array([scale])
    state = TrainState(learning_rate=1e-3)
    sgd_adam_update(store, state)
    assert 1.0 - store["w"].data[0] == pytest.approx(1e-3, rel=1e-2)
    assert state.moments["w"][2] == 1


def test_missing_gradient_is_an_error():
    with pytest.raises(ValueError, match="w"):
        sgd_adam_update(scalar_store(), TrainState())


# --- config ------------------------------------------------------------------


def test_parse_config_keys_and_overrides():
    text = """
    # desk run
    mode = adversarial+flow-external
    channels = 8,16,32
    lr = 0.0005
    gamma = 0.002
    batch = 4
    steps = 10
    seed = 3
    dataset = frames.txt
    checkpoint = out/model.ckpt
    """
    cfg = parse_config(text, steps=20)
    assert cfg.loss == "adversarial" and cfg.prior == "external"
    assert cfg.channels == (8, 16, 32) and cfg.depth == 3
    assert cfg.steps == 20 and cfg.seed == 3 and cfg.lr == 0.0005
    assert parse_config("flow_mode = implicit").prior == "implicit"


def test_parse_config_errors():
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config("colour = red")
    with pytest.raises(ValueError):
        parse_config("mode = dreaming")
    with pytest.raises(ValueError):
        parse_config("depth = 4\nchannels = 4,8")


# --- loops -------------------------------------------------------------------


def test_mse_overfits_one_triplet():
    data = tiny_set(1, size=16)
    cfg = TrainConfig(mode="mse", steps=200, lr=3e-3, seed=0, **{**TINY, "batch": 1, "crop": 0})
    hist = train_mse(data, cfg).history
    assert hist[-1].total <= hist[0].total / 10


def test_constant_colour_dataset_converges():
    img = np.full((3, 16, 16), 0.3)
    data = [FrameTriplet(img, img, img)]
    cfg = TrainConfig(mode="mse", steps=300, lr=1e-2, seed=0, **{**TINY, "batch": 1, "crop": 0})
    hist = train(data, cfg).history
    assert hist[-1].total < 1e-3 * hist[0].total


def test_runs_are_deterministic():
    cfg = TrainConfig(mode="adversarial", steps=5, seed=4, **TINY)
    a = train(tiny_set(), cfg)
    b = train(tiny_set(), cfg)
    assert [r.total for r in a.history] == [r.total for r in b.history]
    assert a.disc_history == b.disc_history


def test_adversarial_log_and_alpha(tmp_path):
    log = tmp_path / "train.log"
    cfg = TrainConfig(mode="adversarial", steps=4, gamma=0.5, seed=1, log=str(log), **TINY)
    result = train_adversarial(tiny_set(), cfg)
    lines = log.read_text().splitlines()
    assert lines[0] == "n\talpha\tmse_term\tadv_term\ttotal"
    first = lines[1].split("\t")
    assert first[0] == "0" and float(first[1]) == 1.0
    alphas = [r.alpha for r in result.history]
    assert all(b < a for a, b in zip(alphas, alphas[1:]))
    assert result.state.step == 4
    for r in result.history:
        assert abs(r.total - (r.alpha * r.mse_term + r.adversarial_term)) <= 1e-12 * max(1.0, r.total)


def test_large_gamma_is_pure_adversarial_after_first_step():
    cfg = TrainConfig(mode="adversarial", steps=3, gamma=1e3, seed=1, **TINY)
    hist = train(tiny_set(), cfg).history
    assert hist[0].alpha == 1.0
    assert all(r.alpha < 1e-300 or r.total == pytest.approx(r.adversarial_term) for r in hist[1:])


def test_updates_touch_only_their_own_network(monkeypatch):
    from frameinterp import training as tr

    calls = []
    real = tr.sgd_adam_update

    def spy(store, state, prefix="", lr=None):
        before = {n: t.data.copy() for n, t in store.items()}
        real(store, state, prefix, lr)
        calls.append((prefix, before, store))

    monkeypatch.setattr(tr, "sgd_adam_update", spy)
    result = train(tiny_set(), TrainConfig(mode="adversarial", steps=2, seed=0, **TINY))
    gen_store, disc_store = result.generator[1], result.discriminator[1]
    assert [c[0] for c in calls] == ["discriminator/", "generator/"] * 2
    for prefix, _, store in calls:
        assert store is (disc_store if prefix == "discriminator/" else gen_store)
    assert not set(gen_store.names()) & {f"x/{n}" for n in disc_store.names()}


def test_generator_step_leaves_discriminator_unchanged():
    data = tiny_set()
    cfg = TrainConfig(mode="adversarial", steps=1, seed=0, lr=0.0, **{**TINY, "disc_lr": 0.0})
    result = train(data, cfg)
    cfg2 = TrainConfig(mode="adversarial", steps=0, seed=0, **TINY)
    fresh = train(data, cfg2)
    for name, t in result.discriminator[1].items():
        assert np.array_equal(t.data, fresh.discriminator[1][name].data)


def test_mode_collapse_is_logged_not_fatal(monkeypatch, caplog):
    from frameinterp import training as tr

    monkeypatch.setattr(tr, "discriminator_loss", lambda pr, pg: T.scale(T.reduce_sum(T.mul(pr, T.sub(pg, pg))), 1.0))
    with caplog.at_level(logging.WARNING, logger="frameinterp.training"):
        result = train(tiny_set(), TrainConfig(mode="adversarial", steps=101, seed=0, **TINY))
    assert result.state.step == 101
    assert any("collapse" in rec.message for rec in caplog.records)


def test_divergence_aborts_with_diagnostic():
    data = tiny_set()
    cfg = TrainConfig(mode="mse", steps=3, lr=1e308, optimizer="sgd", seed=0, **TINY)
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(data, cfg)
    broken = [FrameTriplet(t.first, np.full_like(t.middle_truth, np.inf), t.second) for t in data]
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(broken, TrainConfig(mode="mse", steps=1, seed=0, **TINY))


def test_implicit_flow_predictor_gets_gradient_at_step_one():
    spec, store = N.build_generator_with_flow_prior(
        N.GeneratorConfig(channels=(4, 8), predictor=N.FlowPredictorConfig(channels=(4, 8))), "implicit"
    )
    rng = np.random.default_rng(0)
    a, b, m = rng.random((3, 3, 16, 16)), rng.random((3, 3, 16, 16)), rng.random((3, 3, 16, 16))
    with Tape():
        out = N.forward(spec, store, first=a, second=b)
        T.backward(mse_loss(out, Tensor(m)))
    grads = [t.grad for n, t in store.items() if n.startswith("p_")]
    assert all(g is not None and np.any(g != 0) for g in grads)


def test_joint_training_updates_predictor():
    cfg = TrainConfig(mode="mse", steps=2, seed=0, **TINY)
    result = train_joint_implicit_flow(tiny_set(), cfg)
    assert result.config.prior == "implicit" and result.config.loss == "mse"
    spec, store = result.generator
    _, initial = N.build_generator_with_flow_prior(result.config.generator_config(), "implicit")
    changed = [n for n in store.names() if n.startswith("p_") and not np.array_equal(store[n].data, initial[n].data)]
    assert changed


def test_external_mode_requires_flows():
    rng = np.random.default_rng(0)
    img = rng.random((3, 16, 16))
    with pytest.raises(ValueError, match="flow"):
        train([FrameTriplet(img, img, img)], TrainConfig(mode="mse+flow-external", steps=1, **{**TINY, "crop": 0}))


def test_training_checkpoint_round_trip(tmp_path):
    path = tmp_path / "run.ckpt"
    cfg = TrainConfig(mode="adversarial+flow-implicit", steps=3, seed=2, checkpoint=str(path), **TINY)
    result = train(tiny_set(), cfg)
    loaded = load_training_checkpoint(path, cfg, 16)
    assert loaded.state.step == 3
    assert set(loaded.state.moments) == set(result.state.moments)
    for name, t in result.generator[1].items():
        assert np.array_equal(t.data, loaded.generator[1][name].data)
    for name, t in result.discriminator[1].items():
        assert np.array_equal(t.data, loaded.discriminator[1][name].data)


def test_cosine_rate_decays_to_zero():
    cfg = TrainConfig(steps=100, lr_schedule="cosine")
    assert cfg.rate(1e-3, 0) == 1e-3
    assert cfg.rate(1e-3, 50) == pytest.approx(5e-4)
    assert cfg.rate(1e-3, 100) == pytest.approx(0.0, abs=1e-18)
    rates = [cfg.rate(1.0, n) for n in range(101)]
    assert all(x >= y for x, y in zip(rates, rates[1:]))
    assert TrainConfig(steps=100).rate(1e-3, 77) == 1e-3
    with pytest.raises(ValueError, match="lr schedule"):
        TrainConfig(lr_schedule="step").validate()


def test_gradient_hook_sees_every_step():
    calls = []

    def hook(n, store):
        calls.append((n, all(t.grad is not None for _, t in store.items())))

    train(tiny_set(), TrainConfig(mode="mse", steps=3, seed=0, **TINY), on_gradients=hook)
    assert calls == [(0, True), (1, True), (2, True)]
