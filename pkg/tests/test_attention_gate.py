"""Additive attention gate: formula oracle, degenerate cases, geometry."""

import numpy as np
import pytest

from upet.model import AttentionGateParams, attention_gate
from upet.tensor import Tensor


def t32(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def random_gate(rng, c_x, c_g, f_int, zero_psi=False):
    psi = np.zeros((1, f_int, 1, 1, 1)) if zero_psi else rng.standard_normal((1, f_int, 1, 1, 1))
    return AttentionGateParams(
        w_x=t32(rng.standard_normal((f_int, c_x, 1, 1, 1))),
        w_g=t32(rng.standard_normal((f_int, c_g, 1, 1, 1))),
        b_g=t32(rng.standard_normal(f_int)),
        psi=t32(psi),
        b_psi=t32(rng.standard_normal(1)),
    )


def reference_gate(x, g, p):
    """Scalar-loop evaluation of the attention coefficients and the gated
    output, written independently of the tensor operators."""
    n, c_x, dx, hx, wx = x.shape
    _, c_g, dg, hg, wg = g.shape
    r = dx // dg
    f_int = p["w_x"].shape[0]
    alpha_coarse = np.zeros((n, dg, hg, wg))
    for ni in range(n):
        for d in range(dg):
            for h in range(hg):
                for w in range(wg):
                    joint = np.zeros(f_int)
                    for f in range(f_int):
                        a = 0.0
                        for c in range(c_x):
                            a += p["w_x"][f, c, 0, 0, 0] * x[ni, c, r * d, r * h, r * w]
                        b = p["b_g"][f]
                        for c in range(c_g):
                            b += p["w_g"][f, c, 0, 0, 0] * g[ni, c, d, h, w]
                        joint[f] = max(0.0, a + b)
                    s = 0.0
                    for f in range(f_int):
                        s += p["psi"][0, f, 0, 0, 0] * (joint[f] + p["b_psi"][0])
                    alpha_coarse[ni, d, h, w] = 1.0 / (1.0 + np.exp(-s))
    alpha = np.zeros((n, 1, dx, hx, wx))
    for ni in range(n):
        alpha[ni, 0] = reference_trilinear(alpha_coarse[ni], (dx, hx, wx))
    return x * alpha, alpha


def reference_trilinear(vol, out_shape):
    """Half-pixel-center linear resampling, written with explicit loops."""
    out = np.zeros(out_shape)
    for axis_out, pos in np.ndenumerate(out):
        coords = []
        for ax in range(3):
            p = (axis_out[ax] + 0.5) * vol.shape[ax] / out_shape[ax] - 0.5
            p = min(max(p, 0.0), vol.shape[ax] - 1.0)
            lo = int(np.floor(p))
            hi = min(lo + 1, vol.shape[ax] - 1)
            coords.append((lo, hi, p - lo))
        acc = 0.0
        for bd in range(2):
            for bh in range(2):
                for bw in range(2):
                    wgt = 1.0
                    idx = []
                    for ax, bit in enumerate((bd, bh, bw)):
                        lo, hi, f = coords[ax]
                        idx.append(hi if bit else lo)
                        wgt *= f if bit else (1.0 - f)
                    acc += wgt * vol[tuple(idx)]
        out[axis_out] = acc
    return out


class TestDegenerateCases:
    def test_zero_psi_forces_alpha_half(self):
        rng = np.random.default_rng(0)
        x = t32(rng.standard_normal((1, 4, 4, 4, 4)))
        g = t32(rng.standard_normal((1, 8, 2, 2, 2)))
        params = random_gate(rng, 4, 8, 2, zero_psi=True)
        gated, alpha = attention_gate(x, g, params)
        assert np.all(alpha.data == np.float32(0.5))
        assert np.array_equal(gated.data, x.data * np.float32(0.5))

    def test_zero_input_stays_zero(self):
        rng = np.random.default_rng(1)
        x = t32(np.zeros((1, 3, 4, 4, 4)))
        g = t32(rng.standard_normal((1, 5, 2, 2, 2)))
        gated, _ = attention_gate(x, g, random_gate(rng, 3, 5, 2))
        assert np.all(gated.data == 0.0)

    def test_alpha_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        x = t32(rng.standard_normal((2, 4, 8, 8, 8)) * 30)
        g = t32(rng.standard_normal((2, 6, 4, 4, 4)) * 30)
        _, alpha = attention_gate(x, g, random_gate(rng, 4, 6, 2))
        assert np.all(alpha.data > 0.0) and np.all(alpha.data < 1.0)


class TestGeometry:
    def test_factor_two_relation_required(self):
        rng = np.random.default_rng(3)
        x = t32(rng.standard_normal((1, 2, 6, 6, 6)))
        g = t32(rng.standard_normal((1, 4, 2, 2, 2)))   # ratio 3
        with pytest.raises(ValueError, match="power-of-two|factor-2"):
            attention_gate(x, g, random_gate(rng, 2, 4, 1))

    def test_anisotropic_ratio_rejected(self):
        rng = np.random.default_rng(4)
        x = t32(rng.standard_normal((1, 2, 4, 4, 8)))
        g = t32(rng.standard_normal((1, 4, 2, 2, 2)))
        with pytest.raises(ValueError, match="anisotropic"):
            attention_gate(x, g, random_gate(rng, 2, 4, 1))

    def test_factor_four_supported_for_classification_taps(self):
        rng = np.random.default_rng(5)
        x = t32(rng.standard_normal((1, 2, 8, 8, 8)))
        g = t32(rng.standard_normal((1, 4, 2, 2, 2)))
        gated, alpha = attention_gate(x, g, random_gate(rng, 2, 4, 1))
        assert gated.shape == x.shape
        assert alpha.shape == (1, 1, 8, 8, 8)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        x = t32(rng.standard_normal((1, 3, 4, 4, 4)))
        g = t32(rng.standard_normal((1, 4, 2, 2, 2)))
        with pytest.raises(ValueError, match="w_x expects"):
            attention_gate(x, g, random_gate(rng, 2, 4, 1))


@pytest.mark.parametrize("seed", range(10))
def test_matches_scalar_loop_reference(seed):
    rng = np.random.default_rng([77, seed])
    x = rng.standard_normal((1, 4, 4, 4, 4)).astype(np.float32)
    g = rng.standard_normal((1, 8, 2, 2, 2)).astype(np.float32)
    params = random_gate(rng, 4, 8, 2)
    raw = {k: getattr(params, k).data for k in ("w_x", "w_g", "b_g", "psi", "b_psi")}
    gated, alpha = attention_gate(t32(x), t32(g), params)
    ref_gated, ref_alpha = reference_gate(x.astype(np.float64), g.astype(np.float64), raw)
    assert np.allclose(alpha.data, ref_alpha, atol=1e-5)
    assert np.allclose(gated.data, ref_gated, atol=1e-5)


def test_parameter_shape_validation():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError, match="b_g"):
        AttentionGateParams(
            w_x=t32(rng.standard_normal((2, 3, 1, 1, 1))),
            w_g=t32(rng.standard_normal((2, 4, 1, 1, 1))),
            b_g=t32(rng.standard_normal(3)),
            psi=t32(rng.standard_normal((1, 2, 1, 1, 1))),
            b_psi=t32(rng.standard_normal(1)),
        )
