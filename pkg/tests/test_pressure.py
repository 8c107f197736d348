import numpy as np
import pytest

from hsgreen.fields import Field, SlabGrid
from hsgreen.kernels import gamma_d, phi_d
from hsgreen.pressure import (
    central_weights, fd_derivative, fd_divdiv, fd_laplacian, pressure_half, pressure_whole,
    siop_decompose, truncated_pv_symbol,
)


def bumps(X, Y, Z, rng, n, zrange, width=(0.3, 0.6), lat=1.5):
    out = np.zeros((9,) + X.shape)
    for _ in range(n):
        c = np.r_[rng.uniform(-lat, lat, 2), rng.uniform(*zrange)]
        s = rng.uniform(*width)
        A = rng.standard_normal((3, 3))
        out += A.reshape(9, 1, 1, 1) * np.exp(
            -((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * s * s))
    return out


@pytest.fixture(scope="module")
def half_grid():
    return SlabGrid(6.0, 6.0, 48, 48, 24)


def test_zero_tensor(half_grid):
    r = pressure_half(Field(half_grid, 2, np.zeros((9,) + half_grid.shape)))
    assert r.p1.sup() == 0.0 and r.bmo.value == 0.0


def test_constant_isotropic_tensor(half_grid):
    H = np.zeros((9,) + half_grid.shape)
    H[[0, 4, 8]] = 2.5
    r = pressure_half(Field(half_grid, 2, H))
    assert r.p1.sup() < 1e-13


def test_manufactured_neumann_solution():
    # H11 = Gamma(x - c) + Gamma(x - c*)  =>  p = -d1^2 [Phi(x - c) + Phi(x - c*)]
    g = SlabGrid(10.0, 10.0, 80, 80, 40)
    X, Y, Z = g.mesh()
    c, tau = np.array([0.3, -0.2, 1.2]), 0.1
    pts = lambda cc: np.stack([X - cc[0], Y - cc[1], Z - cc[2]], -1)
    cs = c * np.array([1, 1, -1])
    H = np.zeros((9,) + g.shape)
    H[0] = gamma_d(pts(c), tau) + gamma_d(pts(cs), tau)
    r = pressure_half(Field(g, 2, H), bmo_cube=None)
    exact = -(phi_d(pts(c), tau, (0, 0)) + phi_d(pts(cs), tau, (0, 0)))
    w = (X ** 2 + Y ** 2 + Z ** 2 < 1) * np.where(Z == 0, 0.5, 1.0)
    exact -= (exact * w).sum() / w.sum()
    m = (np.abs(X) < 2) & (np.abs(Y) < 2) & (Z < 3)
    p = r.p1.values[0]
    assert np.linalg.norm((p - exact)[m]) / np.linalg.norm(exact[m]) < 1e-4
    assert r.residual < 1e-10 and r.neumann_defect < 1e-12
    assert r.normalization < 1e-12


def test_linearity_and_gradient(half_grid):
    X, Y, Z = half_grid.mesh()
    rng = np.random.default_rng(3)
    A, B = (bumps(X, Y, Z, rng, 2, (1.5, 2.5), width=(0.5, 0.7)) for _ in range(2))
    pa, pb, pab = (pressure_half(Field(half_grid, 2, v), bmo_cube=None) for v in (A, B, A + B))
    np.testing.assert_allclose(pab.p1.values, pa.p1.values + pb.p1.values, atol=1e-12)
    # spectral gradient vs high-order differences
    sp = (half_grid.hx, half_grid.hy, half_grid.hz)
    inner = (slice(4, -4),) * 3
    for ax in range(3):
        d = fd_derivative(pa.p1.values[0], ax, sp)
        err = np.abs(d - pa.grad.values[ax])[inner].max()
        assert err < 1e-2 * np.abs(pa.grad.values[ax]).max()


def test_time_axis_slices(half_grid):
    X, Y, Z = half_grid.mesh()
    v = bumps(X, Y, Z, np.random.default_rng(4), 1, (1.5, 2.5))
    H = Field(half_grid, 2, np.stack([v, 2 * v]), time_axis=[-1.0, 0.0])
    r = pressure_half(H, bmo_cube=None)
    np.testing.assert_allclose(r.p1.values[1], 2 * r.p1.values[0], atol=1e-12)


def test_undecayed_tensor_rejected(half_grid):
    X = half_grid.mesh()[0]
    H = np.zeros((9,) + half_grid.shape)
    H[0] = X
    with pytest.raises(ValueError, match="decayed"):
        pressure_half(Field(half_grid, 2, H))
    with pytest.raises(ValueError, match="degenerate"):
        pressure_half(Field(SlabGrid(0.5, 2.0, 8, 8, 8), 2, np.zeros((9, 8, 8, 9))))


@pytest.mark.slow
def test_bmo_ratio_bounded(half_grid):
    X, Y, Z = half_grid.mesh()
    maxima = []
    for seed in (11, 12):
        rng = np.random.default_rng(seed)
        ratios = []
        for _ in range(20):
            H = bumps(X, Y, Z, rng, int(rng.integers(1, 5)), (1.2, 2.5))
            r = pressure_half(Field(half_grid, 2, H))
            ratios.append(r.bmo.value / np.abs(H).max())
        maxima.append(max(ratios))
    assert max(maxima) <= 1.0
    assert abs(maxima[0] - maxima[1]) <= 0.25 * max(maxima)


# --------------------------------------------------------------------------
# whole space

@pytest.fixture(scope="module")
def whole():
    g = SlabGrid(4.0, 4.0, 48, 48, 24)
    X, Y, Z = g.mesh(doubled=True)
    F = bumps(X, Y, Z, np.random.default_rng(0), 4, (-1, 1), width=(0.25, 0.4), lat=1.0)
    return g, Field(g, 2, F, extended=True)


def test_whole_zero():
    g = SlabGrid(2.0, 2.0, 16, 16, 8)
    F = Field(g, 2, np.zeros((9, 16, 16, 16)), extended=True)
    assert pressure_whole(F).sup() == 0.0
    assert pressure_whole(F, route="pv").sup() == 0.0


def test_symbol_and_pv_routes_agree(whole):
    g, F = whole
    ps = pressure_whole(F, "symbol").values[0]
    pv = pressure_whole(F, "pv").values[0]
    assert np.abs(ps - pv).max() < 1e-3 * np.abs(pv).max()


def test_whole_fd_residual():
    g = SlabGrid(5.0, 5.0, 80, 80, 40)
    X, Y, Z = g.mesh(doubled=True)
    F = bumps(X, Y, Z, np.random.default_rng(7), 4, (-1, 1), width=(0.35, 0.5), lat=1.0)
    p = pressure_whole(Field(g, 2, F, extended=True)).values[0]
    sp = (g.hx, g.hy, g.hz)
    dd = fd_divdiv(F, sp)
    res = fd_laplacian(p, sp) + dd
    inner = (slice(8, -8),) * 3
    assert np.abs(res[inner]).max() < 1e-4 * np.abs(dd).max()


def test_isotropic_ball_gives_constant_inside():
    # F = c chi_B I  =>  p = -c chi_B exactly (div div F = Lap(c chi_B))
    g = SlabGrid(4.0, 4.0, 32, 32, 16)
    X, Y, Z = g.mesh(doubled=True)
    r = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    chi = 0.5 * (1 - np.tanh((r - 1.6) / 0.08))
    F = np.zeros((9,) + X.shape)
    F[[0, 4, 8]] = 3.0 * chi
    p = pressure_whole(Field(g, 2, F, extended=True)).values[0]
    exact = -3.0 * chi
    w = r < 1
    exact -= exact[w].mean()
    np.testing.assert_allclose(p, exact, atol=1e-10)
    assert np.ptp(p[r < 1.2]) < 1e-3


def test_whole_support_violation():
    g = SlabGrid(2.0, 2.0, 16, 16, 8)
    F = np.ones((9, 16, 16, 16))
    with pytest.raises(ValueError, match="support"):
        pressure_whole(Field(g, 2, F, extended=True))


def test_truncated_symbol_limits():
    k = np.array([1e-6, 3.0, 50.0])
    z = np.zeros(3)
    s = truncated_pv_symbol(k, z, z, 0, 0, 10.0)
    assert abs(s[0]) < 1e-9                        # truncation kills low modes
    assert s[2] == pytest.approx(-2 / 3, rel=2e-3)   # full symbol -(1 - 1/3)


def test_central_weights():
    np.testing.assert_allclose(central_weights(2, 2), [-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12])
    np.testing.assert_allclose(central_weights(1, 1), [-0.5, 0.0, 0.5], atol=1e-15)


# --------------------------------------------------------------------------
# slab decomposition

@pytest.fixture(scope="module")
def siop_grid():
    return SlabGrid(6.0, 4.0, 32, 32, 16)


def _g(grid, inside=True, outside=True, cut=1.0):
    X, Y, Z = grid.mesh(doubled=True)
    a = np.zeros_like(X)
    if inside:
        a += np.exp(-((X - 0.5) ** 2 + Y ** 2 + Z ** 2) / 0.4) * (np.abs(Z) < cut)
    if outside:
        a += np.exp(-(X ** 2 + (Y + 1) ** 2 + (Z - 2.3) ** 2) / 0.2) * (np.abs(Z) >= cut)
    return Field(grid, 0, a[None], extended=True)


def test_siop_reconstruction(siop_grid):
    d = siop_decompose(_g(siop_grid), 1.0, 2.0)
    scale = np.abs(d.h1.values).max() + np.abs(d.h2.values).max()
    assert d.reconstruction_error < 1e-12 * max(scale, 1.0)
    np.testing.assert_allclose(d.h2_minus.values + d.h2_plus.values, d.h2.values, atol=1e-14)
    assert np.isfinite(d.bound_h1) and np.isfinite(d.bound_h2)


def test_siop_outside_only(siop_grid):
    d = siop_decompose(_g(siop_grid, inside=False), 1.0, 2.0)
    assert np.all(d.h2.values == 0.0)


def test_siop_inside_only(siop_grid):
    d = siop_decompose(_g(siop_grid, outside=False, cut=3.5), 3.5, 2.0)
    assert np.all(d.h1.values == 0.0)


def test_siop_rotated_slab(siop_grid):
    # slab normal along x1 with T_11 equals slab normal along x3 with T_33
    g = SlabGrid(4.0, 4.0, 24, 24, 12)
    X, Y, Z = g.mesh(doubled=True)
    a = np.exp(-((X - 0.3) ** 2 + Y ** 2 + (Z + 0.2) ** 2) / 0.3)
    a += np.exp(-((X - 2.0) ** 2 + (Y - 0.4) ** 2 + Z ** 2) / 0.3)
    rot = np.exp(-((Z - 0.3) ** 2 + Y ** 2 + (X + 0.2) ** 2) / 0.3)
    rot += np.exp(-((Z - 2.0) ** 2 + (Y - 0.4) ** 2 + X ** 2) / 0.3)
    d0 = siop_decompose(Field(g, 0, a[None], extended=True), 1.0, 2.0, comp=(0, 0), axis=0)
    d1 = siop_decompose(Field(g, 0, rot[None], extended=True), 1.0, 2.0, comp=(2, 2), axis=2)
    back = np.swapaxes(d1.h1.values[0], 0, 2)
    np.testing.assert_allclose(back, d0.h1.values[0], atol=1e-10)


def test_siop_errors(siop_grid):
    with pytest.raises(ValueError):
        siop_decompose(_g(siop_grid), 1.0, 1.0)
    with pytest.raises(ValueError):
        siop_decompose(_g(siop_grid), 5.0, 2.0)
