import math

import numpy as np
import pytest

from wmtract.dti import (
    GradientTable,
    default_scheme,
    eig3_sym,
    fa_array,
    fa_map,
    fit_signals,
    fit_tensor,
    forward_signal,
    md_map,
    stack_input,
    sym_matrix,
)
from wmtract.errors import ConditioningError, ShapeError
from wmtract.volgrid import Volume, mask_volume


def random_spd(rng, n):
    out = np.empty((n, 6))
    for i in range(n):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        lam = rng.uniform(0.1e-3, 3e-3, 3)
        m = q @ np.diag(lam) @ q.T
        out[i] = m[[0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2]]
    return out


def cubic_eigs(d):
    """Roots of the characteristic polynomial by the trigonometric formula."""
    a = sym_matrix(np.asarray(d, float))
    q = np.trace(a) / 3
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2 * p1
    p = math.sqrt(p2 / 6)
    if p == 0:
        return np.array([q, q, q])
    b = (a - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(b) / 2, -1, 1)
    phi = math.acos(r) / 3
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    return np.array([e1, 3 * q - e1 - e3, e3])


def volume_of(signals, shape):
    return Volume(signals.reshape((signals.shape[0],) + shape).astype(np.float32))


def test_default_scheme():
    g = default_scheme()
    assert len(g) == 26 and g.b0_index.tolist() == [0]
    assert np.allclose(np.linalg.norm(g.bvecs[1:], axis=1), 1)
    assert np.all(g.bvals[1:] == 1000)


def test_gradient_table_validation():
    with pytest.raises(ValueError):
        GradientTable([1000] * 7, np.eye(3)[[0, 1, 2, 0, 1, 2, 0]])  # no b0
    with pytest.raises(ValueError):
        GradientTable([0, 1000, 1000], np.eye(3))  # too few weighted
    with pytest.raises(ValueError):
        GradientTable([0] + [1000] * 6, np.vstack([[0, 0, 0], 2 * np.eye(3), np.eye(3)]))


def test_fsl_roundtrip(tmp_path):
    g = default_scheme(12)
    g.to_fsl(tmp_path / "bvals", tmp_path / "bvecs")
    assert len((tmp_path / "bvecs").read_text().strip().splitlines()) == 3
    h = GradientTable.from_fsl(tmp_path / "bvals", tmp_path / "bvecs")
    np.testing.assert_allclose(h.bvecs, g.bvecs, atol=1e-12)
    np.testing.assert_array_equal(h.bvals, g.bvals)


def test_isotropic_signal_and_fit():
    g = default_scheme()
    d = np.array([1e-3, 0, 0, 1e-3, 0, 1e-3])
    s = forward_signal(d[None], g)[:, 0]
    np.testing.assert_allclose(s[1:], math.exp(-1), rtol=1e-12)
    assert abs(s[1] - 0.367879) < 1e-6
    t, _ = fit_signals(s[:, None], g)
    np.testing.assert_allclose(t[:, 0], d, atol=1e-9)


def test_fit_tensor_volume_anisotropic():
    g = default_scheme()
    d = np.array([1.7e-3, 0, 0, 0.2e-3, 0, 0.2e-3])
    s = forward_signal(np.tile(d, (27, 1)), g, 1000.0)
    out = fit_tensor(volume_of(s, (3, 3, 3)), g, mask_volume(np.ones((3, 3, 3), bool)))
    assert out.channels == 6
    assert np.abs(out.data.reshape(6, -1).T - d).max() < 1e-9


def test_fit_random_spd(rng):
    g = default_scheme()
    d = random_spd(rng, 100)
    s = forward_signal(d, g, 1000.0)
    out = fit_tensor(volume_of(s, (4, 5, 5)), g, mask_volume(np.ones((4, 5, 5), bool)))
    assert np.abs(out.data.reshape(6, -1).T - d).max() < 1e-8


def test_fit_forward_consistency(rng):
    g = default_scheme()
    d = random_spd(rng, 20)
    s = forward_signal(d, g, 1.0)
    t, ln_s0 = fit_signals(s, g)
    again = forward_signal(t.T, g, np.exp(ln_s0))
    np.testing.assert_allclose(again, s, rtol=1e-8)


def test_mask_zero_and_outside():
    g = default_scheme()
    s = forward_signal(np.tile([1e-3, 0, 0, 1e-3, 0, 1e-3], (8, 1)), g, 500.0)
    dwi = volume_of(s, (2, 2, 2))
    assert not fit_tensor(dwi, g, mask_volume(np.zeros((2, 2, 2), bool))).data.any()
    m = np.zeros((2, 2, 2), bool)
    m[0, 0, 0] = True
    out = fit_tensor(dwi, g, mask_volume(m))
    assert out.data[:, 0, 0, 0].any() and not out.data[:, 1].any()


def test_fit_nonpositive_signal_is_finite():
    g = default_scheme()
    s = forward_signal(np.tile([1e-3, 0, 0, 1e-3, 0, 1e-3], (8, 1)), g, 100.0)
    s[3, :] = 0.0
    s[4, :] = -5.0
    out = fit_tensor(volume_of(s, (2, 2, 2)), g, mask_volume(np.ones((2, 2, 2), bool)))
    assert np.all(np.isfinite(out.data))


def test_workers_partition_identical(rng):
    g = default_scheme()
    s = forward_signal(random_spd(rng, 60), g, 1000.0) * rng.uniform(0.9, 1.1, (26, 60))
    dwi, m = volume_of(s, (3, 4, 5)), mask_volume(np.ones((3, 4, 5), bool))
    a = fit_tensor(dwi, g, m, workers=1)
    for w in (2, 3, 7):
        assert fit_tensor(dwi, g, m, workers=w) == a


def test_fit_errors():
    g = default_scheme()
    with pytest.raises(ShapeError):
        fit_tensor(Volume(np.ones((5, 2, 2, 2))), g, mask_volume(np.ones((2, 2, 2), bool)))
    with pytest.raises(ShapeError):
        fit_tensor(Volume(np.ones((26, 2, 2, 2))), g, mask_volume(np.ones((3, 2, 2), bool)))
    # all directions along x: rank deficient
    bad = GradientTable([0] + [1000] * 6, np.vstack([[0, 0, 0]] + [[1, 0, 0]] * 6))
    with pytest.raises(ConditioningError):
        fit_signals(np.ones((7, 1)), bad)


def test_eig3_examples():
    lam, _ = eig3_sym(np.array([1, 0, 0, 1, 0, 1]) * 1e-3)
    np.testing.assert_allclose(lam, [1e-3] * 3, atol=1e-18)
    lam, vec = eig3_sym(np.array([2, 0, 0, 1, 0, 1]) * 1e-3)
    np.testing.assert_allclose(lam, [2e-3, 1e-3, 1e-3], atol=1e-18)
    assert abs(abs(vec[0, 0]) - 1) < 1e-12


def test_eig3_against_cubic_and_invariants(rng):
    for _ in range(200):
        d = rng.standard_normal(6)
        lam, vec = eig3_sym(d)
        assert np.all(np.diff(lam) <= 0)
        np.testing.assert_allclose(lam, cubic_eigs(d), atol=1e-10)
        np.testing.assert_allclose(vec @ np.diag(lam) @ vec.T, sym_matrix(d), atol=1e-10)
        a = sym_matrix(d)
        minors = (a[0, 0] * a[1, 1] - a[0, 1] ** 2) + (a[0, 0] * a[2, 2] - a[0, 2] ** 2) + (a[1, 1] * a[2, 2] - a[1, 2] ** 2)
        assert abs(lam.sum() - np.trace(a)) < 1e-10
        assert abs(lam[0] * lam[1] + lam[0] * lam[2] + lam[1] * lam[2] - minors) < 1e-10
        assert abs(lam.prod() - np.linalg.det(a)) < 1e-10


def diag_field(*lams):
    d = np.zeros((6, len(lams), 1, 1))
    for i, (a, b, c) in enumerate(lams):
        d[[0, 3, 5], i, 0, 0] = a, b, c
    return Volume(d)


def test_fa_examples():
    fa = fa_array(np.array([[1, 0, 0, 1, 0, 1], [1, 0, 0, 0, 0, 0], [2, 0, 0, 1, 0, 1], [0] * 6], float))
    assert abs(fa[0]) < 1e-10 and abs(fa[1] - 1) < 1e-10 and fa[3] == 0
    assert abs(fa[2] - math.sqrt(0.5 * 2) / math.sqrt(6)) < 1e-10
    assert abs(fa[2] - 0.408248) < 1e-6


def test_fa_clamps_negative_eigenvalues():
    fa = fa_array(np.array([[-1e-3, 0, 0, 1e-3, 0, 1e-3]]))
    assert 0 <= fa[0] <= 1


def test_md_examples(rng):
    out = md_map(diag_field((1e-3, 2e-3, 3e-3), (0, 0, 0)))
    assert abs(out.data[0, 0, 0, 0] - 2e-3) < 1e-12 and out.data[0, 1, 0, 0] == 0
    d = random_spd(rng, 50)
    lam = np.array([eig3_sym(x)[0] for x in d])
    md = (d[:, 0] + d[:, 3] + d[:, 5]) / 3
    np.testing.assert_allclose(md, lam.mean(axis=1), atol=1e-12)


def test_fa_scale_invariance_md_linearity(rng):
    d = random_spd(rng, 100)
    for c in (0.5, 3.0, 1e3):
        np.testing.assert_allclose(fa_array(c * d), fa_array(d), atol=1e-10)
    t = Volume(d.T.reshape(6, 10, 10, 1).astype(np.float32))
    t2 = Volume((d.T * 4).reshape(6, 10, 10, 1).astype(np.float32))
    np.testing.assert_allclose(md_map(t2).data, 4 * md_map(t).data, rtol=1e-6)
    assert fa_map(t).data.min() >= 0 and fa_map(t).data.max() <= 1


def test_stack_input():
    t = diag_field((1e-3, 1e-3, 1e-3), (2e-3, 1e-3, 1e-3))
    assert stack_input(t) is t
    s = stack_input(t, [fa_map(t), md_map(t)])
    assert s.channels == 8
    np.testing.assert_array_equal(s.data[6], fa_map(t).data[0])
    np.testing.assert_array_equal(s.data[7], md_map(t).data[0])
    with pytest.raises(ShapeError):
        stack_input(t, [Volume(np.zeros((1, 3, 1, 1)))])
