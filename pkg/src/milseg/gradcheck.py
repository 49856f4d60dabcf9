"""Finite-difference verification of tape gradients.

Each check perturbs inputs with a central difference (default step 1e-3),
compares against the gradients produced by one backward pass, and reports
the worst relative error.  Checks run in float64 so the difference
quotient itself is trustworthy at the stated tolerances; input values are
drawn in float32 range [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, build_network, forward
from .losses import Bag, LossWeights, total_loss
from .tensor import Tape, Tensor, backward


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.0e})"


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def check_gradients(fn: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray],
                    step: float = 1e-3) -> float:
    """Max relative error between tape and central-difference gradients.

    ``fn`` maps the tensor inputs to a scalar tensor.  Every element of
    every input is perturbed.
    """
    inputs = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape():
        loss = fn(inputs)
        backward(loss)
    analytic = [inp.grad.copy() for inp in inputs]

    worst = 0.0
    for arr_i, inp in enumerate(inputs):
        flat = inp.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = fn(inputs).item()
            flat[j] = orig - step
            f_minus = fn(inputs).item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_err(analytic[arr_i].reshape(-1)[j], numeric))
    return worst


def _rand(rng, *shape):
    # float32 draws cast up, so the same values are exactly representable
    # in both storage precisions.
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32).astype(np.float64)


def run_suite(seed: int = 0) -> list[CheckResult]:
    """The per-operation and end-to-end finite-difference checks."""
    rng = np.random.default_rng(seed)
    results = []

    x, k, b = _rand(rng, 1, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    err = check_gradients(
        lambda t: T.tsum(T.conv2d(t[0], t[1], t[2], stride=1, padding=1)), [x, k, b])
    results.append(CheckResult("conv2d", err, 1e-3))

    x = _rand(rng, 1, 1, 6, 6)
    err = check_gradients(lambda t: T.tsum(T.maxpool2x2(t[0])), [x])
    results.append(CheckResult("maxpool2x2", err, 1e-3))

    x = _rand(rng, 1, 1, 5, 5)
    err = check_gradients(lambda t: T.tsum(T.maxpool2x2(t[0])), [x])
    results.append(CheckResult("maxpool2x2 (odd dims)", err, 1e-3))

    x = _rand(rng, 2, 3, 4)
    err = check_gradients(lambda t: T.tsum(T.sigmoid(t[0])), [x])
    results.append(CheckResult("sigmoid", err, 1e-4))

    # Keep draws off the kink so the difference quotient stays two-sided.
    x = _rand(rng, 2, 3, 4)
    x = np.sign(x) * (0.05 + 0.95 * np.abs(x))
    weight = Tensor(_rand(rng, 2, 3, 4))
    err = check_gradients(lambda t: T.tsum(T.mul(T.relu(t[0]), weight)), [x])
    results.append(CheckResult("relu", err, 1e-4))

    x = _rand(rng, 1, 1, 3, 4)
    err = check_gradients(lambda t: T.tsum(T.bilinear_upsample(t[0], 7, 9)), [x])
    results.append(CheckResult("bilinear_upsample", err, 1e-3))

    from .losses import gm_pool_node
    p = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4)).astype(np.float32).astype(np.float64)
    err = check_gradients(lambda t: gm_pool_node(t[0], 4.0), [p], step=1e-5)
    results.append(CheckResult("gm_pool (r=4)", err, 1e-5))

    x, k, b = _rand(rng, 1, 1, 6, 6), _rand(rng, 1, 1, 3, 3), _rand(rng, 1)
    err = check_gradients(
        lambda t: T.tsum(T.sigmoid(T.maxpool2x2(T.conv2d(t[0], t[1], t[2], padding=1)))),
        [x, k, b])
    results.append(CheckResult("conv -> pool -> sigmoid chain", err, 1e-3))

    results.append(end_to_end_check(seed))
    return results


def end_to_end_check(seed: int = 0, n_params: int = 10) -> CheckResult:
    """Full-objective gradient check on a tiny two-bag problem.

    A small-width network runs on one positive and one negative 16x16
    bag with the default loss weights; ``n_params`` randomly sampled
    parameters are verified against central differences.
    """
    rng = np.random.default_rng(seed)
    config = BackboneConfig(stages=((2, 3), (2, 4), (3, 5)))
    network = build_network(config, seed=seed, dtype=np.float64)
    bags = [
        Bag(image=rng.uniform(0, 1, size=(3, 16, 16)).astype(np.float32), label=1, area=0.3),
        Bag(image=rng.uniform(0, 1, size=(3, 16, 16)).astype(np.float32), label=0),
    ]
    weights = LossWeights()

    def objective() -> float:
        outs = [forward(network, bag.image) for bag in bags]
        return total_loss(bags, outs, weights, r=4.0).loss.item()

    with Tape():
        outs = [forward(network, bag.image) for bag in bags]
        loss = total_loss(bags, outs, weights, r=4.0).loss
        backward(loss)

    names = list(network.params)
    worst = 0.0
    step = 1e-5
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        param = network.params[name]
        j = int(rng.integers(param.size))
        flat = param.data.reshape(-1)
        analytic = float(param.grad.reshape(-1)[j])
        orig = flat[j]
        flat[j] = orig + step
        f_plus = objective()
        flat[j] = orig - step
        f_minus = objective()
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        worst = max(worst, _rel_err(analytic, numeric))
    return CheckResult("end-to-end objective (10 sampled parameters)", worst, 1e-3)
