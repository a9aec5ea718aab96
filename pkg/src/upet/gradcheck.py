"""Finite-difference verification of analytic gradients.

The checker runs in 64-bit only; central differences in 32-bit are dominated
by rounding noise.  ``operator_suite`` builds the table of checks used by the
``grad-check`` CLI command: one entry per differentiable operator plus the
end-to-end tiny network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import ComputationRecord, Tensor


def finite_difference_check(f: Callable[[Tensor], Tensor], theta: Tensor,
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic (verified by two evaluations) and must route
    ``theta`` itself into the computation so backward can reach it.  The
    relative error per element is |ga - gn| / max(1e-8, |ga| + |gn|).
    """
    if theta.dtype != np.float64:
        raise ValueError("finite_difference_check requires a float64 parameter")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not theta.requires_grad:
        raise ValueError("parameter must have requires_grad=True")

    v1 = f(theta).item()
    v2 = f(theta).item()
    if np.float64(v1) != np.float64(v2):
        raise ValueError("function is not deterministic: two evaluations differ")

    theta.zero_grad()
    with ComputationRecord():
        loss = f(theta)
        if loss.data.size != 1:
            raise ValueError("f must produce a scalar")
        loss.backward()
    analytic = theta.grad.copy()

    numeric = np.zeros_like(theta.data)
    flat = theta.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(theta).item()
        flat[i] = orig - eps
        fm = f(theta).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class CheckEntry:
    name: str
    run: Callable[[], float]
    threshold: float = 1e-5


def _p(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64, requires_grad=True)


def _const(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def operator_suite(seed: int = 7) -> list[CheckEntry]:
    """Finite-difference checks covering every differentiable operator."""
    entries: list[CheckEntry] = []

    def entry(name, make, threshold=1e-5):
        def run():
            rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
            f, theta = make(rng)
            return finite_difference_check(f, theta, eps=1e-5)
        entries.append(CheckEntry(name, run, threshold))

    entry("quadratic (sum of squares)",
          lambda rng: (lambda t: ops.tsum(ops.mul(t, t)), _p(rng, 3, 4)), 1e-7)
    entry("relu", lambda rng: (lambda t: ops.mean(ops.relu(t)), _p(rng, 4, 5)))
    entry("sigmoid", lambda rng: (lambda t: ops.mean(ops.sigmoid(t)), _p(rng, 4, 5)))

    def make_add(rng):
        other = _const(rng, 2, 3, 2, 2, 2)
        return lambda t: ops.mean(ops.mul(ops.add(t, other), ops.add(t, other))), _p(rng, 2, 3, 2, 2, 2)
    entry("add", make_add)

    def make_mul_broadcast(rng):
        other = _const(rng, 2, 1, 2, 2, 2)
        return lambda t: ops.mean(ops.mul(t, other)), _p(rng, 2, 3, 2, 2, 2)
    entry("mul (channel broadcast)", make_mul_broadcast)

    entry("scale", lambda rng: (lambda t: ops.mean(ops.scale(t, -1.7)), _p(rng, 3, 3)))
    entry("abs", lambda rng: (lambda t: ops.mean(ops.absolute(t)), _p(rng, 4, 4)))

    def make_conv_w(rng):
        x = _const(rng, 1, 2, 4, 4, 4)
        b = _const(rng, 3)
        return lambda t: ops.mean(ops.conv3d(x, t, b, stride=1, padding=1)), _p(rng, 3, 2, 3, 3, 3)
    entry("conv3d (weights)", make_conv_w, 1e-6)

    def make_conv_x(rng):
        w = _const(rng, 3, 2, 3, 3, 3)
        return lambda t: ops.mean(ops.conv3d(t, w, None, stride=1, padding=0)), _p(rng, 1, 2, 4, 4, 4)
    entry("conv3d (input)", make_conv_x, 1e-6)

    def make_conv_b(rng):
        x = _const(rng, 1, 2, 4, 4, 4)
        w = _const(rng, 3, 2, 3, 3, 3)
        return lambda t: ops.mean(ops.conv3d(x, w, t, stride=1, padding=1)), _p(rng, 3)
    entry("conv3d (bias)", make_conv_b, 1e-6)

    def make_conv_strided(rng):
        x = _const(rng, 1, 3, 4, 4, 4)
        return lambda t: ops.mean(ops.conv3d(x, t, None, stride=2, padding=0)), _p(rng, 2, 3, 1, 1, 1)
    entry("conv3d (stride 2, 1x1x1)", make_conv_strided, 1e-6)

    entry("maxpool3d", lambda rng: (lambda t: ops.mean(ops.maxpool3d(t)), _p(rng, 1, 2, 4, 4, 4)))
    entry("upsample_trilinear",
          lambda rng: (lambda t: ops.mean(ops.mul(ops.upsample_trilinear(t, 2),
                                                  ops.upsample_trilinear(t, 2))),
                       _p(rng, 1, 2, 3, 3, 3)))

    def make_concat(rng):
        other = _const(rng, 1, 2, 2, 2, 2)
        return (lambda t: ops.mean(ops.mul(ops.concat_channels(t, other),
                                           ops.concat_channels(t, other))),
                _p(rng, 1, 3, 2, 2, 2))
    entry("concat_channels", make_concat)

    entry("global_avg_pool",
          lambda rng: (lambda t: ops.mean(ops.mul(ops.global_avg_pool(t),
                                                  ops.global_avg_pool(t))),
                       _p(rng, 2, 3, 2, 2, 2)))

    def make_linear(rng):
        x = _const(rng, 4, 3)
        b = _const(rng, 2)
        return lambda t: ops.mean(ops.linear(x, t, b)), _p(rng, 3, 2)
    entry("linear (weights)", make_linear)

    def make_softmax(rng):
        v = _const(rng, 3, 4)
        return lambda t: ops.mean(ops.mul(ops.softmax(t), v)), _p(rng, 3, 4)
    entry("softmax", make_softmax)

    def make_instance_norm(rng):
        # project onto a random constant: the raw squared norm is almost
        # input-independent and ill-conditioned for central differences
        v = _const(rng, 2, 2, 3, 3, 3)
        return lambda t: ops.mean(ops.mul(ops.instance_norm(t), v)), _p(rng, 2, 2, 3, 3, 3)
    entry("instance_norm", make_instance_norm)

    def make_ce(rng):
        labels = rng.integers(0, 3, size=5)
        return lambda t: ops.cross_entropy_logits(t, labels), _p(rng, 5, 3)
    entry("cross_entropy_logits", make_ce)

    def make_select(rng):
        return lambda t: ops.mean(ops.mul(ops.select_batch(t, [0, 2]),
                                          ops.select_batch(t, [0, 2]))), _p(rng, 4, 3)
    entry("select_batch", make_select)

    return entries


def attention_gate_entries(seed: int = 11) -> list[CheckEntry]:
    """Per-parameter checks of the additive attention gate."""
    from .model import AttentionGateParams, attention_gate

    entries: list[CheckEntry] = []
    names = ("w_x", "w_g", "b_g", "psi", "b_psi")

    def entry(pname):
        def run():
            rng = np.random.default_rng([seed, names.index(pname)])
            x = _const(rng, 1, 4, 4, 4, 4)
            g = _const(rng, 1, 6, 2, 2, 2)
            raw = dict(
                w_x=_p(rng, 2, 4, 1, 1, 1), w_g=_p(rng, 2, 6, 1, 1, 1),
                b_g=_p(rng, 2), psi=_p(rng, 1, 2, 1, 1, 1), b_psi=_p(rng, 1),
            )

            def f(t):
                params = dict(raw)
                params[pname] = t
                gated, _ = attention_gate(x, g, AttentionGateParams(**params))
                return ops.mean(ops.mul(gated, gated))

            return finite_difference_check(f, raw[pname], eps=1e-5)
        entries.append(CheckEntry(f"attention_gate ({pname})", run, 1e-6))

    for n in names:
        entry(n)
    return entries


def end_to_end_entry(seed: int = 3) -> CheckEntry:
    """Combined loss of the tiny network, checked against every parameter."""
    from .losses import combined_loss
    from .model import UPetConfig, build_model

    def run():
        cfg = UPetConfig(levels=3, base_channels=2, input_shape=(8, 8, 8))
        model = build_model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng([seed, 99])
        # jitter every parameter off the init point: zero biases plus
        # relu-sparse activations put gate preactivations exactly on the
        # relu kink, where one-sided subgradients and central differences
        # legitimately disagree
        for name in model.parameter_names():
            p = model.get_parameter(name)
            p.data += rng.uniform(-0.05, 0.05, size=p.shape)
        mri = Tensor(rng.standard_normal((1, 1, 8, 8, 8)), dtype=np.float64)
        labels = np.array([1])
        pet = Tensor(rng.standard_normal((1, 1, 8, 8, 8)), dtype=np.float64)
        mask = np.array([True])

        # Central differences are valid only on pieces where the loss is
        # smooth across the whole +-eps interval.  An early-layer weight
        # perturbs thousands of downstream relu/max/|.| arguments, so for any
        # single eps a few elements straddle a kink (or sit in a high-
        # curvature region of a normalization layer).  A genuine rule error
        # is eps-independent; an interval artifact is not.  Each parameter
        # therefore passes if any step of the ladder agrees.
        ladder = (1e-6, 1e-5, 3e-7)
        worst = 0.0
        for name in model.parameter_names():
            original = model.get_parameter(name)

            def f(t, _name=name):
                model.set_parameter(_name, t)
                try:
                    out = model.forward(mri)
                    breakdown = combined_loss(out, labels, pet, mask, cfg)
                    return breakdown.total_tensor
                finally:
                    model.set_parameter(_name, original)

            err = min_over = np.inf
            for eps in ladder:
                err = finite_difference_check(f, original, eps=eps)
                min_over = min(min_over, err)
                if min_over < 1e-5:
                    break
            worst = max(worst, min_over)
        return worst

    return CheckEntry("end-to-end tiny network (all parameters)", run, 1e-5)


def full_suite() -> list[CheckEntry]:
    return operator_suite() + attention_gate_entries() + [end_to_end_entry()]
