"""Acceptance suite: one test per criterion, each printing a PASS line.

The synthetic ablation (criteria 6 and 7) trains two networks on the
fixed-seed 40/80 dataset at 128x128 and is by far the slowest part of the
whole test run; everything else completes in seconds.
"""

import subprocess
import sys
import warnings
from pathlib import Path

import mpmath
import numpy as np
import pytest

from milseg.backbone import (BackboneConfig, build_network, forward,
                             load_checkpoint, receptive_field_report,
                             save_checkpoint)
from milseg.evaluation import evaluate, f_measure
from milseg.gradcheck import end_to_end_check
from milseg.losses import Bag, LossWeights, mil_loss, total_loss
from milseg.pooling import EPSILON, gm_pool, gm_pool_grad
from milseg.superpixels import slic
from milseg.synth import SynthSpec, TextureParams, generate
from milseg.trainer import TrainConfig, train


def _report(criterion, text):
    print(f"\n[criterion {criterion:>2}] PASS  {text}")


def test_criterion_01_receptive_field_table():
    report = receptive_field_report(BackboneConfig())
    assert report == [("c1_2", 5, 1), ("c2_2", 14, 2), ("c3_3", 40, 4)]
    _report(1, "receptive fields (5,1), (14,2), (40,4) reproduced exactly")


def test_criterion_02_gm_pooling():
    # frozen pair against a 50-digit direct evaluation of the power mean
    with mpmath.workdps(50):
        reference = float(((mpmath.mpf("0.1") ** 4 + mpmath.mpf("0.9") ** 4) / 2)
                          ** mpmath.mpf("0.25"))
    assert abs(gm_pool([0.1, 0.9], 4) - reference) <= 1e-12

    rng = np.random.default_rng(2024)
    worst_grad = 0.0
    sizes = np.unique(np.geomspace(2, 4096, 100).astype(int))
    draws = 0
    while draws < 100:
        size = int(sizes[draws % len(sizes)])
        probs = rng.uniform(0.01, 0.99, size=size)
        clamped = np.clip(probs, EPSILON, 1 - EPSILON)
        values = [gm_pool(probs, r) for r in (1, 2, 4, 8)]
        for v in values:
            assert clamped.min() <= v <= clamped.max()
        assert values == sorted(values) and len(set(values)) == 4
        assert values[0] == pytest.approx(clamped.mean(), abs=1e-13)

        for r in (1, 2, 4, 8):
            analytic = gm_pool_grad(probs, r)
            if size <= 16:
                step = 1e-5
                for k in range(size):
                    plus, minus = probs.copy(), probs.copy()
                    plus[k] += step
                    minus[k] -= step
                    numeric = (gm_pool(plus, r) - gm_pool(minus, r)) / (2 * step)
                    err = abs(analytic[k] - numeric) / max(abs(numeric), 1e-6)
                    worst_grad = max(worst_grad, err)
            else:
                step = 1e-6
                direction = rng.standard_normal(size)
                direction /= np.linalg.norm(direction)
                numeric = (gm_pool(probs + step * direction, r)
                           - gm_pool(probs - step * direction, r)) / (2 * step)
                err = abs(float(analytic @ direction) - numeric) / max(abs(numeric), 1e-6)
                worst_grad = max(worst_grad, err)
        draws += 1
    assert worst_grad <= 1e-5
    _report(2, f"GM value to 1e-12; bounds/monotonicity/mean exact on 100 vectors; "
               f"gradient FD error {worst_grad:.2e} <= 1e-5")


def test_criterion_03_end_to_end_gradient():
    result = end_to_end_check(seed=0, n_params=10)
    assert result.passed, str(result)
    _report(3, f"full-objective gradients match finite differences "
               f"(max rel err {result.max_rel_err:.2e} <= 1e-3)")


def test_criterion_04_baseline_reduction():
    # T = 1, eta = 0, fusion weight 1: the degenerate network has a single
    # probability map (the fused map IS the side map), and both the side
    # and the fusion term equal the plain MIL cross-entropy on that map's
    # bag probability to 1e-12.
    rng = np.random.default_rng(4)
    config = BackboneConfig(stages=((2, 8),), fusion_weights=(1.0,))
    weights = LossWeights(eta_side=(0.0,), eta_fuse=0.0)
    worst = 0.0
    for trial in range(5):
        net = build_network(config, seed=trial)
        bags = [Bag(image=rng.uniform(0, 1, (3, 16, 16)).astype(np.float32),
                    label=1, area=0.3),
                Bag(image=rng.uniform(0, 1, (3, 16, 16)).astype(np.float32),
                    label=0)]
        outs = [forward(net, b.image) for b in bags]
        bd = total_loss(bags, outs, weights, r=4.0)
        baseline = sum(mil_loss(b.label, gm_pool(o.side_maps[0].data, 4.0))
                       for b, o in zip(bags, outs))
        worst = max(worst, abs(bd.side_sum - baseline), abs(bd.fuse_sum - baseline),
                    abs(bd.total - 2 * baseline))
        np.testing.assert_array_equal(outs[0].fused.data, outs[0].side_maps[0].data)
    assert worst <= 1e-12
    _report(4, f"single-layer unconstrained objective equals the plain MIL "
               f"cross-entropy (max dev {worst:.1e})")


def test_criterion_05_ac_gating_on_negatives():
    spec = SynthSpec(image_size=16, positive_count=0, negative_count=6, seed=5)
    bags = generate(spec)
    net = build_network(BackboneConfig(stages=((1, 4), (1, 6), (1, 8))), seed=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # single-class warning is expected
        log = train(net, bags, TrainConfig(iterations=30, seed=5, plateau_window=0))
    assert len(log.entries) == 30
    for entry in log.entries:
        assert entry.ac_side == (0.0, 0.0, 0.0)
        assert entry.ac_fuse == 0.0
    _report(5, "all area-constraint terms exactly 0 over a 30-iteration "
               "all-negative run")


def test_criterion_08_slic_properties():
    from PIL import Image
    import skimage.data
    from scipy import ndimage as ndi

    from tests.test_superpixels import assert_connected_partition

    images = [b.image for b in generate(SynthSpec(image_size=64, positive_count=10,
                                                  negative_count=10, seed=8))]
    for photo in (skimage.data.astronaut(), skimage.data.coffee(),
                  skimage.data.chelsea(), skimage.data.rocket(),
                  skimage.data.cat()):
        small = np.asarray(Image.fromarray(photo).resize((128, 128)))
        images.append((small.astype(np.float32) / 255.0).transpose(2, 0, 1))
    assert len(images) == 25

    checked = 0
    for image in images:
        for k in (16, 64, 256):
            sp = slic(image, k)
            assert_connected_partition(sp)
            assert abs(sp.region_count - k) / k <= 0.2
            checked += 1
    _report(8, f"{checked} superpixel maps: connected partitions, region "
               f"count within 20% of k")


def test_criterion_09_f_measure_oracle():
    from tests.test_evaluation import brute_force_counts

    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        density_p = rng.uniform(0.05, 0.95)
        density_t = rng.uniform(0.05, 0.95)
        pred = rng.uniform(size=(24, 32)) > density_p
        truth = rng.uniform(size=(24, 32)) > density_t
        got = f_measure(pred, truth)
        expected = brute_force_counts(pred, truth)
        worst = max(worst, *(abs(a - b) for a, b in zip(got, expected)))
    assert worst <= 1e-12
    _report(9, f"f_measure matches the set-counting oracle on 1000 mask pairs "
               f"(max dev {worst:.1e})")


def test_criterion_10_cli_determinism(tmp_path):
    data = tmp_path / "data"
    env_args = [sys.executable, "-m", "milseg.cli"]
    subprocess.run(env_args + ["synth", "--out", str(data), "--seed", "10",
                               "--image-size", "24", "--positives", "2",
                               "--negatives", "3"], check=True,
                   capture_output=True)
    artifacts = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        subprocess.run(env_args + ["train", "--data", str(data), "--out", str(out),
                                   "--seed", "10", "--iterations", "3",
                                   "--conv-counts", "1,1", "--channels", "4,6",
                                   "--fusion-weights", "0.5,0.5",
                                   "--eta-side", "2.5,5"],
                       check=True, capture_output=True)
        artifacts.append(((out / "checkpoint.dwsm").read_bytes(),
                          (out / "trainlog.tsv").read_bytes()))
    assert artifacts[0][0] == artifacts[1][0]
    assert artifacts[0][1] == artifacts[1][1]
    _report(10, "two cmd_train runs produced bit-identical checkpoints and logs")


def test_criterion_11_checkpoint_round_trip(tmp_path):
    net = build_network(BackboneConfig(), seed=11)
    first = tmp_path / "a.dwsm"
    second = tmp_path / "b.dwsm"
    save_checkpoint(net, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()
    _report(11, "save -> load -> save is byte-identical")


# ---------------------------------------------------------------------------
# criteria 6 and 7: the synthetic ablation (fixed seed, 40/80 at 128x128)

EXPERIMENT_SEED = 20240807
EXPERIMENT_ITERATIONS = 150


def _experiment_spec():
    return SynthSpec(
        image_size=128, positive_count=40, negative_count=80,
        area_range=(0.1, 0.4), area_quantization=0.05, seed=EXPERIMENT_SEED,
        background=TextureParams((0.86, 0.74, 0.82), 7.0, 0.1, 0.5),
        lesion=TextureParams((0.72, 0.60, 0.72), 11.0, 0.1, 2.1),
    )


@pytest.fixture(scope="module")
def ablation():
    bags = generate(_experiment_spec())
    nets = {}
    for name, weights in (("constrained", LossWeights()),
                          ("unconstrained", LossWeights((0.0, 0.0, 0.0), 0.0))):
        net = build_network(BackboneConfig(), seed=EXPERIMENT_SEED)
        config = TrainConfig(iterations=EXPERIMENT_ITERATIONS, seed=EXPERIMENT_SEED,
                             weights=weights)
        train(net, bags, config)
        nets[name] = net
    return bags, nets


def _positive_fraction_error(net, bags):
    errors = []
    for bag in bags:
        if bag.label == 1:
            out = forward(net, bag.image)
            fraction = float((out.fused_array() > 0.5).mean())
            errors.append(abs(fraction - bag.true_area))
    return float(np.mean(errors))


def test_criterion_06_constrained_ablation(ablation):
    bags, nets = ablation
    rep_c = evaluate(nets["constrained"], bags)
    rep_u = evaluate(nets["unconstrained"], bags)
    err_c = _positive_fraction_error(nets["constrained"], bags)
    err_u = _positive_fraction_error(nets["unconstrained"], bags)

    assert rep_c.mean_f_ca >= rep_u.mean_f_ca + 0.02, (
        f"constrained CA F {rep_c.mean_f_ca:.4f} vs unconstrained "
        f"{rep_u.mean_f_ca:.4f}")
    assert err_c < err_u, (
        f"area tracking: constrained {err_c:.4f} vs unconstrained {err_u:.4f}")
    assert rep_c.mean_f_nc >= 0.95 and rep_u.mean_f_nc >= 0.95
    _report(6, f"CA F {rep_c.mean_f_ca:.4f} (constrained) > "
               f"{rep_u.mean_f_ca:.4f} + 0.02 (unconstrained); "
               f"|area error| {err_c:.4f} < {err_u:.4f}; "
               f"NC F {rep_c.mean_f_nc:.3f}/{rep_u.mean_f_nc:.3f} >= 0.95")


def test_criterion_07_side_output_trend(ablation):
    bags, nets = ablation
    net = nets["constrained"]
    fused = evaluate(net, bags).mean_f_ca
    sides = [evaluate(net, bags, map_index=t).mean_f_ca for t in range(3)]
    for t, side in enumerate(sides, start=1):
        assert fused >= side - 0.01, f"fused {fused:.4f} vs side{t} {side:.4f}"
    assert sides[2] >= sides[0], f"side3 {sides[2]:.4f} < side1 {sides[0]:.4f}"
    _report(7, f"fused CA F {fused:.4f} >= each side output "
               f"({', '.join(f'{s:.4f}' for s in sides)}); side3 >= side1")
