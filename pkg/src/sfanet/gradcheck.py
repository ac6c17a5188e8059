"""Finite-difference verification of the autodiff adjoints.

Central differences in double precision are the independent oracle for every
backward formula in :mod:`sfanet.autograd`. The objective is a fixed random
projection of the op output, so permutation and routing mistakes cannot
cancel the way a plain sum would let them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import (
    BatchNormState,
    Tensor,
    backward,
    batchnorm2d,
    bce_with_logits,
    concat_channels,
    conv2d,
    maxpool2x2,
    mul_broadcast_channel,
    no_grad,
    relu,
    sigmoid,
    upsample2x,
)

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-7


@dataclass
class CheckResult:
    name: str
    n_checked: int
    max_rel_err: float
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.n_checked} coords, max rel err {self.max_rel_err:.3e}"


def _rel_err(a: float, b: float, atol: float) -> float:
    denom = max(abs(a), abs(b))
    diff = abs(a - b)
    if diff <= atol:
        return 0.0
    return diff / max(denom, atol)


def check_op(name: str, fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
             n_coords: int = 50, h: float = DEFAULT_STEP, rtol: float = DEFAULT_RTOL,
             atol: float = DEFAULT_ATOL, rng: np.random.Generator | None = None) -> CheckResult:
    """Compare autodiff input gradients of ``fn`` against central differences.

    ``fn`` must accept one Tensor per entry of ``arrays`` (float64 copies are
    made) and be a pure function of them. A random coordinate sample of at
    least ``n_coords`` per input is probed.
    """
    rng = rng or np.random.default_rng(0)
    work = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in work]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    loss = (out * Tensor(proj)).sum()
    backward(loss)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    def objective() -> float:
        with no_grad():
            o = fn(*[Tensor(a) for a in work])
        return float((o.data * proj).sum())

    max_err = 0.0
    checked = 0
    for ti, arr in enumerate(work):
        flat = arr.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for c in coords:
            saved = flat[c]
            flat[c] = saved + h
            f_plus = objective()
            flat[c] = saved - h
            f_minus = objective()
            flat[c] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _rel_err(analytic[ti].reshape(-1)[c], numeric, atol)
            max_err = max(max_err, err)
            checked += 1
    return CheckResult(name, checked, max_err, max_err < rtol)


def check_parameters(name: str, loss_fn: Callable[[], Tensor], params: Sequence,
                     n_coords: int = 50, h: float = DEFAULT_STEP,
                     rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                     rng: np.random.Generator | None = None) -> CheckResult:
    """Finite-difference sweep over a random sample of parameter coordinates.

    ``loss_fn`` recomputes the scalar loss from current parameter values;
    parameters are nudged in place and restored. Expects float64 parameters.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)

    flat_index = []
    for pi, p in enumerate(params):
        for c in range(p.size):
            flat_index.append((pi, c))
    sample = rng.choice(len(flat_index), size=min(n_coords, len(flat_index)), replace=False)

    max_err = 0.0
    for si in sample:
        pi, c = flat_index[si]
        p = params[pi]
        flat = p.data.reshape(-1)
        saved = flat[c]
        flat[c] = saved + h
        with no_grad():
            f_plus = loss_fn().item()
        flat[c] = saved - h
        with no_grad():
            f_minus = loss_fn().item()
        flat[c] = saved
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = p.grad.reshape(-1)[c] if p.grad is not None else 0.0
        max_err = max(max_err, _rel_err(analytic, numeric, atol))
    return CheckResult(name, len(sample), max_err, max_err < rtol)


def run_op_suite(seed: int = 0, n_coords: int = 50) -> list[CheckResult]:
    """Finite-difference checks for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    results = []

    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    results.append(check_op("conv2d(3x3)", lambda t, u, v: conv2d(t, u, v),
                            [x, w, b], n_coords, rng=rng))
    w1 = rng.standard_normal((2, 3, 1, 1))
    results.append(check_op("conv2d(1x1)", lambda t, u: conv2d(t, u),
                            [x, w1], n_coords, rng=rng))

    gamma = 1.0 + 0.1 * rng.standard_normal(3)
    beta = 0.1 * rng.standard_normal(3)
    results.append(check_op(
        "batchnorm2d(train)",
        lambda t, gm, bt: batchnorm2d(t, gm, bt, BatchNormState.create(3, np.float64), True),
        [x, gamma, beta], n_coords, rng=rng))
    primed = BatchNormState.create(3, np.float64)
    primed.running_mean = rng.standard_normal(3)
    primed.running_var = 0.5 + rng.random(3)
    primed.num_batches = 1
    results.append(check_op(
        "batchnorm2d(eval)",
        lambda t, gm, bt: batchnorm2d(t, gm, bt, primed, False),
        [x, gamma, beta], n_coords, rng=rng))

    # keep relu/maxpool inputs away from kink points and pooling ties
    xs = rng.standard_normal((2, 3, 4, 4))
    xs += 0.05 * np.sign(xs)
    results.append(check_op("relu", relu, [xs], n_coords, rng=rng))
    results.append(check_op("sigmoid", sigmoid, [rng.standard_normal((3, 7))],
                            n_coords, rng=rng))
    xp = rng.standard_normal((1, 2, 6, 6))
    results.append(check_op("maxpool2x2", maxpool2x2, [xp], n_coords, rng=rng))
    results.append(check_op("upsample2x", upsample2x, [rng.standard_normal((2, 2, 3, 3))],
                            n_coords, rng=rng))
    results.append(check_op("concat_channels", concat_channels,
                            [rng.standard_normal((2, 2, 4, 4)),
                             rng.standard_normal((2, 3, 4, 4))], n_coords, rng=rng))
    results.append(check_op("mul_broadcast_channel", mul_broadcast_channel,
                            [rng.standard_normal((2, 4, 5, 5)),
                             rng.standard_normal((2, 1, 5, 5))], n_coords, rng=rng))
    tgt = rng.integers(0, 2, size=(2, 1, 4, 4)).astype(np.float64)
    results.append(check_op("bce_with_logits",
                            lambda z: bce_with_logits(z, Tensor(tgt)),
                            [rng.standard_normal((2, 1, 4, 4))], n_coords, rng=rng))
    return results


def run_model_suite(seed: int = 0, n_coords: int = 50) -> list[CheckResult]:
    """End-to-end sweep: combined training loss of a narrow model on a
    32x32 input, gradients of a random parameter sample vs central FD."""
    from .model import ModelConfig, build_model
    from .training import attention_loss, combined_loss, density_loss

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(width_multiplier=0.125, init_seed=seed, dtype="float64")
    model = build_model(cfg)
    images = Tensor(rng.standard_normal((1, 3, 32, 32)))
    dtarget = Tensor(np.abs(rng.standard_normal((1, 1, 16, 16))) * 0.05)
    atarget = Tensor(rng.integers(0, 2, size=(1, 1, 16, 16)).astype(np.float64))

    def loss_fn():
        out = model.forward(images, training=True)
        dl = density_loss(out.density, dtarget)
        al = attention_loss(out.attention_logits, atarget)
        return combined_loss(dl, al, alpha=0.1)

    return [check_parameters("mini-model combined loss", loss_fn,
                             model.parameters(), n_coords, rng=rng)]


def run_full_suite(seed: int = 0, n_coords: int = 50, verbose: bool = True) -> bool:
    """Run every gradient check; returns True when all pass."""
    results = run_op_suite(seed, n_coords) + run_model_suite(seed, n_coords)
    ok = True
    for r in results:
        if verbose:
            print(r)
        ok = ok and r.passed
    return ok
