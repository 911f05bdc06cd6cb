"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line before asserting.
Criteria 6-8 share one run of the desk-scale protocol (tens of minutes).
"""

import math
import struct
import time

import numpy as np
import pytest

from frameinterp import networks as N
from frameinterp.benchmark import DeskProtocol, run_protocol
from frameinterp.data import Shape, SynthSpec, extract_triplets, make_synthetic_set, motion_interior, save_image, synth_sequence
from frameinterp.flow import FLO_MAGIC, FlowField, average_frames, read_flo, warp_middle, write_flo
from frameinterp.gradcheck import gradcheck, run_suite, suite_cases
from frameinterp.layers import conv2d_forward, dcl_forward
from frameinterp.metrics import psnr
from frameinterp.state import TrainState
from frameinterp.training import TrainConfig, alpha_schedule, train, train_joint_implicit_flow


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return say


def test_criterion_01_psnr_rows(verdict):
    rows = [(0.0079, 21.0), (0.0050, 23.0), (0.0053, 22.8), (0.0052, 22.8), (0.0023, 26.4)]
    worst = max(abs(psnr(m) - db) for m, db in rows)
    assert verdict(1, worst <= 0.05, f"max |psnr - table| = {worst:.4f} dB (tol 0.05)")


def test_criterion_02_dcl_zero_flow_is_conv(verdict):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k = int(rng.choice([1, 3, 5]))
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(k, 12), rng.integers(k, 12)
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal(o)
        got = dcl_forward(x, wt, b, np.zeros((n, 2, h, w)))
        worst = max(worst, float(np.max(np.abs(got - conv2d_forward(x, wt, b, 1, k // 2)))))
    seconds = time.perf_counter() - start
    ok = worst < 1e-12 and seconds < 10
    assert verdict(2, ok, f"max diff {worst:.2e} over 100 cases in {seconds:.1f}s")


def test_criterion_03_gradient_suite(verdict):
    start = time.perf_counter()
    cases = suite_cases(0)
    errors = run_suite(0)
    fn, arrays = cases["dcl"]
    flow = arrays[3]
    dcl_each = gradcheck(fn, arrays)
    seconds = time.perf_counter() - start
    frac = np.abs(flow - np.round(flow))
    ok = (
        max(errors.values()) < 1e-4
        and len(dcl_each) == 4
        and max(dcl_each) < 1e-4
        and frac.min() > 0
        and {"conv2d", "conv_transpose2d", "dcl", "dense", "maxpool2d"} <= set(errors)
        and seconds < 120
    )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    assert verdict(3, ok, f"{detail}; dcl x/w/b/flow {[f'{e:.1e}' for e in dcl_each]}; {seconds:.1f}s")


def test_criterion_04_generator_symmetry(verdict):
    spec, store = N.build_generator()
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    exact = 0
    for _ in range(20):
        a, b = rng.random((3, 32, 32)), rng.random((3, 32, 32))
        ab = N.forward(spec, store, first=a, second=b).data
        ba = N.forward(spec, store, first=b, second=a).data
        exact += ab.tobytes() == ba.tobytes()
    seconds = time.perf_counter() - start
    assert verdict(4, exact == 20 and seconds < 30, f"{exact}/20 pairs bit-exact in {seconds:.1f}s")


def test_criterion_05_warping_oracle(verdict):
    start = time.perf_counter()
    square = Shape("rect", (14.3, 15.0), (6.0, 6.0), (0.8, 0.3, 0.2), (2.4, -1.2))
    spec = SynthSpec(40, 40, [square], frames=3, background=(0.2, 0.4, 0.6), texture=0.1, seed=3)
    frames, flows = synth_sequence(spec)
    mask = motion_interior(flows, 4)
    out = warp_middle(frames[0], frames[2], flows[0].scaled(2.0))
    interior = float(np.mean((out - frames[1])[:, mask] ** 2))
    rng = np.random.default_rng(5)
    a, b = rng.random((3, 40, 40)), rng.random((3, 40, 40))
    zero = float(np.max(np.abs(warp_middle(a, b, FlowField.zeros(40, 40)) - average_frames(a, b))))
    seconds = time.perf_counter() - start
    ok = interior < 1e-6 and zero < 1e-12 and mask.sum() > 0 and seconds < 30
    assert verdict(5, ok, f"interior MSE {interior:.2e} over {int(mask.sum())} px, zero-flow diff {zero:.1e}")


@pytest.fixture(scope="module")
def desk_run():
    start = time.perf_counter()
    result = run_protocol(DeskProtocol())
    return result, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_06_desk_ordering(desk_run, verdict):
    result, seconds = desk_run
    r = result.reports
    nn, avg, warp = r["nn_external"].mse, r["average"].mse, r["warp_noisy_flow"].mse
    steps = sum(res.state.step for res in result.results.values())
    ok = nn < avg and nn < warp and seconds <= 3600
    print(result.table())
    assert verdict(6, ok, f"nn_external {nn:.6f} vs average {avg:.6f}, noisy warp {warp:.6f}; "
                          f"{steps} generator steps total in {seconds:.0f}s")


@pytest.mark.slow
def test_criterion_07_blur_proxy(desk_run, verdict):
    result, _ = desk_run
    e = result.gradient_energy
    mse_ratio = e["nn_mse"] / e["truth"]
    adv_ratio = e["nn_adversarial"] / e["truth"]
    ok = mse_ratio <= 0.8 and 0.5 <= adv_ratio <= 1.5
    assert verdict(7, ok, f"gradient energy / truth: mse model {mse_ratio:.3f} (need <= 0.8), "
                          f"adversarial model {adv_ratio:.3f} (need 0.5..1.5)")


@pytest.mark.slow
def test_criterion_08_implicit_flow(desk_run, verdict):
    data = make_synthetic_set(8, size=32, max_speed=3.0, seed=8)
    seen = {}

    def grab(n, store):
        if n == 0:
            seen.update({k: float(np.abs(t.grad).sum()) for k, t in store.items() if k.startswith("p_")})

    train_joint_implicit_flow(data.triplets, TrainConfig(steps=1, batch=2, depth=2, channels=(4, 8), flow_channels=(4, 8)), grab)
    connected = bool(seen) and all(v > 0 for v in seen.values())
    result, _ = desk_run
    cosine = result.implicit_flow_cosine
    ok = connected and cosine is not None and cosine > 0.8
    assert verdict(8, ok, f"step-1 predictor grads nonzero on {sum(v > 0 for v in seen.values())}/{len(seen)} "
                          f"tensors; flow cosine {cosine:.3f} (need > 0.8), "
                          f"per-pixel mean {result.implicit_flow_cosine_per_pixel:.3f}")


def test_criterion_09_alpha_schedule(tmp_path, verdict):
    data = make_synthetic_set(4, size=32, max_speed=3.0, seed=9)
    log = tmp_path / "train.log"
    cfg = TrainConfig(mode="adversarial", steps=3, batch=2, depth=2, channels=(4, 8), gamma=1e-3, log=str(log))
    train(data.triplets, cfg)
    rows = [line.split("\t") for line in log.read_text().splitlines()[1:]]
    logged = [float(r[1]) for r in rows]
    ns = np.arange(0, 20001, 50)
    alphas = [alpha_schedule(1e-3, int(n)) for n in ns]
    decreasing = all(x > y for x, y in zip(alphas, alphas[1:]))
    at_1000 = alpha_schedule(0.001, 1000)
    ok = logged[0] == 1.0 and logged[1] < 1.0 and decreasing and abs(at_1000 - math.exp(-1)) <= 1e-9
    assert verdict(9, ok, f"logged alpha(0) = {logged[0]}, alpha(1000) - 1/e = {at_1000 - math.exp(-1):.1e}")


def test_criterion_10_formats(tmp_path, verdict):
    rng = np.random.default_rng(10)
    flo_ok = 0
    for _ in range(100):
        w, h = rng.integers(1, 20, size=2)
        values = rng.normal(0, 50, size=2 * w * h).astype("<f4")
        raw = struct.pack("<fii", FLO_MAGIC, w, h) + values.tobytes()
        flo_ok += write_flo(read_flo(raw)) == raw

    spec, store = N.build_generator_with_flow_prior(N.GeneratorConfig(channels=(4, 6)), "implicit")
    state = TrainState(step=3, gamma=1e-3, learning_rate=1e-3, rng_seed=1)
    path = tmp_path / "g.ckpt"
    N.checkpoint_save(store, path, state)
    _, fresh = N.build_generator_with_flow_prior(N.GeneratorConfig(channels=(4, 6), seed=5), "implicit")
    loaded = N.checkpoint_load(path, fresh)
    N.checkpoint_save(fresh, tmp_path / "again.ckpt", loaded)
    ckpt_ok = (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    frame = tmp_path / "f.ppm"
    save_image(np.zeros((3, 1, 1)), frame)
    counts = {}
    for n in (3, 10, 21312):
        counts[n] = sum(1 for _ in extract_triplets([frame] * n))
    count_ok = all(c == n - 2 for n, c in counts.items())
    ok = flo_ok == 100 and ckpt_ok and count_ok
    assert verdict(10, ok, f".flo {flo_ok}/100 bit-exact, checkpoint bit-exact {ckpt_ok}, triplets {counts}")
