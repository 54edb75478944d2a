"""Finite-difference verification suites for the autodiff engine.

``run_gradcheck("small")`` exercises every registered operation on random
64-bit inputs; ``"full"`` additionally differentiates a complete small
generator through the L1 loss parameter by parameter and checks the
second-order gradient-penalty path on a toy critic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, finite_difference_gradient, grad
from .models import (
    DiscriminatorConfig, GeneratorConfig, ModelParams, build_discriminator,
    build_generator, discriminator_forward, generator_forward,
)
from .training import gradient_penalty, l1_loss


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    """Elementwise |got-want| / (|want| + guard).

    The guard is one thousandth of the largest reference entry (at least
    1e-3), so the metric reads as a relative error on meaningful entries and
    as a scaled absolute error where the true gradient is (near) zero; a
    result below 1e-5 corresponds to agreement at atol 1e-8 / rtol 1e-5 on
    unit-scale gradients."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    guard = max(1e-3, 1e-3 * float(np.max(np.abs(want), initial=0.0)))
    return float(np.max(np.abs(got - want) / (np.abs(want) + guard)))


def _check_scalar_fn(name: str, f: Callable[[Tensor], Tensor], x: np.ndarray,
                     tol: float, h: float = 1e-5) -> CheckResult:
    x_t = Tensor(x, requires_grad=True)
    analytic = grad(f(x_t), x_t).data
    numeric = finite_difference_gradient(f, Tensor(x), h).data
    return CheckResult(name, relative_error(analytic, numeric), tol)


def _away_from_kinks(rng, shape, margin=0.05):
    """Random values resampled so no entry sits within ``margin`` of zero."""
    x = rng.standard_normal(shape)
    low = np.abs(x) < margin
    x[low] = np.sign(x[low] + 1e-12) * (margin + np.abs(x[low]))
    return x


def _op_checks(rng) -> list[CheckResult]:
    results = []
    x3 = rng.standard_normal((2, 3, 4, 4, 4))

    results.append(_check_scalar_fn(
        "pointwise abs/square/sqrt chain",
        lambda t: ad.reduce_mean(ad.sqrt(ad.add_scalar(ad.square(t), 1.0))),
        _away_from_kinks(rng, (3, 5)), 1e-5))
    results.append(_check_scalar_fn(
        "binary add/sub/mul",
        lambda t: ad.reduce_sum(ad.mul(ad.sub(t, ad.mul_scalar(t, 0.25)),
                                       ad.add_scalar(t, 2.0))),
        rng.standard_normal((4, 3)), 1e-5))
    results.append(_check_scalar_fn(
        "relu (off-kink)",
        lambda t: ad.reduce_sum(ad.relu(t)),
        _away_from_kinks(rng, (5, 5)), 1e-5))
    results.append(_check_scalar_fn(
        "leaky_relu (off-kink)",
        lambda t: ad.reduce_mean(ad.leaky_relu(t, 0.2)),
        _away_from_kinks(rng, (5, 5)), 1e-5))
    results.append(_check_scalar_fn(
        "elu",
        lambda t: ad.reduce_mean(ad.elu(t)),
        rng.standard_normal((5, 5)), 1e-5))
    results.append(_check_scalar_fn(
        "concat + narrow",
        lambda t: ad.reduce_sum(ad.square(ad.concat_channels(
            [ad.reshape(t, (1, 4, 2, 2, 2)), ad.mul_scalar(ad.reshape(t, (1, 4, 2, 2, 2)), 0.5)]))),
        rng.standard_normal(32), 1e-5))

    w = rng.standard_normal((3, 3, 3, 3, 3))
    results.append(_check_scalar_fn(
        "conv3d same s1 wrt x",
        lambda t: ad.reduce_mean(ad.conv3d(t, Tensor(w), padding="same")),
        x3, 1e-5))
    results.append(_check_scalar_fn(
        "conv3d valid s1 wrt w",
        lambda t: ad.reduce_mean(ad.conv3d(Tensor(x3), t, padding="valid")),
        w, 1e-5))
    w2 = rng.standard_normal((2, 3, 3, 3, 3))
    results.append(_check_scalar_fn(
        "conv3d same s2 wrt x",
        lambda t: ad.reduce_mean(ad.square(ad.conv3d(t, Tensor(w2), stride=2, padding="same"))),
        x3, 1e-5))
    b = rng.standard_normal(2)
    results.append(_check_scalar_fn(
        "conv3d wrt bias",
        lambda t: ad.reduce_mean(ad.square(ad.conv3d(Tensor(x3), Tensor(w2), t, padding="same"))),
        b, 1e-5))

    gain = Tensor(rng.uniform(0.5, 1.5, 3))
    bias = Tensor(rng.standard_normal(3))
    probe = Tensor(rng.standard_normal(x3.shape))  # breaks the symmetry that
    # makes plain means of normalized outputs (near-)constant in x
    results.append(_check_scalar_fn(
        "layer_norm wrt x",
        lambda t: ad.reduce_mean(ad.mul(ad.normalize(t, "layer_norm", gain, bias), probe)),
        x3, 1e-5))
    results.append(_check_scalar_fn(
        "batch_norm train wrt x",
        lambda t: ad.reduce_mean(ad.mul(ad.normalize(
            t, "batch_norm", gain, bias, mode="train"), probe)),
        x3, 1e-5))
    results.append(_check_scalar_fn(
        "layer_norm wrt gain",
        lambda t: ad.reduce_mean(ad.square(ad.normalize(
            Tensor(x3), "layer_norm", t, bias))),
        rng.standard_normal(3), 1e-5))

    xw = rng.standard_normal((4, 6))
    ww = rng.standard_normal((2, 6))
    bw = Tensor(rng.standard_normal(2))
    results.append(_check_scalar_fn(
        "linear wrt x",
        lambda t: ad.reduce_mean(ad.square(ad.linear(t, Tensor(ww), bw))),
        xw, 1e-5))
    results.append(_check_scalar_fn(
        "linear wrt w",
        lambda t: ad.reduce_mean(ad.square(ad.linear(Tensor(xw), t))),
        ww, 1e-5))
    return results


def _second_order_checks(rng) -> list[CheckResult]:
    """Gradient-penalty parameter gradients via double reverse mode vs finite
    differences of the numerically evaluated penalty."""
    results = []

    # linear critic D(x) = w . x: penalty (|w|-1)^2, analytic d/dw available
    w0 = rng.standard_normal(12)
    hr = Tensor(rng.standard_normal((2, 1, 2, 2, 3)))
    sr = Tensor(rng.standard_normal((2, 1, 2, 2, 3)))
    eps = rng.uniform(0, 1, 2)

    def penalty_of(wv: Tensor) -> Tensor:
        def critic(x):
            flat = ad.reshape(x, (x.shape[0], 12))
            return ad.reshape(ad.matmul(flat, ad.reshape(wv, (12, 1))), (x.shape[0],))
        return gradient_penalty(critic, hr, sr, eps)

    w_t = Tensor(w0, requires_grad=True)
    analytic = grad(penalty_of(w_t), w_t).data
    norm = float(np.linalg.norm(w0))
    closed = 2.0 * (norm - 1.0) * w0 / norm
    results.append(CheckResult("penalty wrt linear critic (closed form)",
                               relative_error(analytic, closed), 1e-6))
    numeric = finite_difference_gradient(lambda t: penalty_of(t), Tensor(w0), 1e-5).data
    results.append(CheckResult("penalty wrt linear critic (finite diff)",
                               relative_error(analytic, numeric), 1e-3))

    # two-layer nonlinear critic: conv + leaky + dense
    cw = rng.standard_normal((2, 1, 3, 3, 3)) * 0.5
    dw = rng.standard_normal(2 * 2 * 2 * 3) * 0.5
    hr2 = Tensor(rng.standard_normal((2, 1, 2, 2, 3)))
    sr2 = Tensor(rng.standard_normal((2, 1, 2, 2, 3)))
    eps2 = rng.uniform(0, 1, 2)

    def penalty_two_layer(theta: Tensor) -> Tensor:
        wc = ad.reshape(ad.narrow(theta, 0, 0, cw.size), cw.shape)
        wd = ad.reshape(ad.narrow(theta, 0, cw.size, dw.size), (1, dw.size))

        def critic(x):
            h = ad.leaky_relu(ad.conv3d(x, wc, padding="same"), 0.2)
            flat = ad.reshape(h, (x.shape[0], dw.size))
            return ad.reshape(ad.linear(flat, wd), (x.shape[0],))
        return gradient_penalty(critic, hr2, sr2, eps2)

    theta0 = np.concatenate([cw.ravel(), dw.ravel()])
    theta_t = Tensor(theta0, requires_grad=True)
    analytic2 = grad(penalty_two_layer(theta_t), theta_t).data
    numeric2 = finite_difference_gradient(penalty_two_layer, Tensor(theta0), 1e-5).data
    results.append(CheckResult("penalty wrt 2-layer critic params",
                               relative_error(analytic2, numeric2), 1e-3))
    return results


def _full_generator_check(rng) -> CheckResult:
    """Every parameter gradient of a b1u2 k4 generator under L1 loss."""
    cfg = GeneratorConfig(blocks=1, units_per_block=2, growth=4)
    model = build_generator(cfg, seed=11, dtype=np.float64)
    # jitter away from the all-zeros/ones init so norms see realistic stats
    jitter = np.random.default_rng(5)
    for t in model.params.values():
        t.data = t.data + 0.05 * jitter.standard_normal(t.shape)
    x = rng.standard_normal((2, 1, 5, 5, 5))
    # keep |sr - target| bounded away from the abs() kink so the finite
    # differences never step across a subgradient discontinuity
    base = generator_forward(model, Tensor(x), mode="train").data
    offset = rng.uniform(0.5, 1.5, base.shape) * np.where(
        rng.random(base.shape) < 0.5, -1.0, 1.0)
    target = base - offset

    def loss_for(params: ModelParams) -> Tensor:
        return l1_loss(generator_forward(params, Tensor(x), mode="train"),
                       Tensor(target))

    grads = backward(loss_for(model))
    worst = 0.0
    for name, p in model.params.items():
        analytic = grads[p].data

        def f(t: Tensor, name=name) -> Tensor:
            trial = ModelParams(model.config,
                                {k: (t if k == name else v)
                                 for k, v in model.params.items()},
                                model.states)
            return loss_for(trial)

        numeric = finite_difference_gradient(f, p.detach(), h=1e-4).data
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult("b1u2 k4 generator, all parameters", worst, 1e-4)


def _toy_critic_check(rng) -> list[CheckResult]:
    cfg = DiscriminatorConfig(base_width=2, stages=1, head_width=4, input_size=4)
    model = build_discriminator(cfg, seed=3, dtype=np.float64)
    hr = Tensor(rng.standard_normal((2, 1, 4, 4, 4)))
    sr = Tensor(rng.standard_normal((2, 1, 4, 4, 4)))
    eps = rng.uniform(0, 1, 2)
    x = Tensor(rng.standard_normal((2, 1, 4, 4, 4)), requires_grad=True)

    score = ad.reduce_mean(discriminator_forward(model, x))
    analytic_x = grad(score, x).data
    numeric_x = finite_difference_gradient(
        lambda t: ad.reduce_mean(discriminator_forward(model, t)), x.detach(), 1e-5).data
    results = [CheckResult("critic score wrt input", relative_error(analytic_x, numeric_x), 1e-4)]

    def penalty_for(params: ModelParams) -> Tensor:
        return gradient_penalty(lambda v: discriminator_forward(params, v), hr, sr, eps)

    grads_map = backward(penalty_for(model))
    worst = 0.0
    for name, p in model.params.items():
        # a purely additive parameter (e.g. the last bias) never reaches the
        # critic's input gradient, so its penalty gradient is identically zero
        entry = grads_map.get(p)
        analytic = entry.data if entry is not None else np.zeros(p.shape)

        def f(t: Tensor, name=name) -> Tensor:
            trial = ModelParams(model.config,
                                {k: (t if k == name else v)
                                 for k, v in model.params.items()})
            return penalty_for(trial)

        numeric = finite_difference_gradient(f, p.detach(), h=1e-4).data
        worst = max(worst, relative_error(analytic, numeric))
    results.append(CheckResult("penalty wrt toy critic, all parameters", worst, 1e-3))
    return results


def run_gradcheck(size: str = "small", seed: int = 7) -> list[CheckResult]:
    if size not in ("small", "full"):
        raise ValueError(f"gradcheck size must be 'small' or 'full', got {size!r}")
    rng = np.random.default_rng(seed)
    results = _op_checks(rng)
    results.extend(_second_order_checks(rng))
    if size == "full":
        results.append(_full_generator_check(rng))
        results.extend(_toy_critic_check(rng))
    return results


def render_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok  " if r.ok else "FAIL"
        lines.append(f"{status} {r.name:<44} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
    worst = max((r.max_rel_err for r in results), default=0.0)
    passed = sum(r.ok for r in results)
    lines.append(f"{passed}/{len(results)} checks passed; worst relative error {worst:.3e}")
    return "\n".join(lines)
