import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from hsgreen.kernels import (
    GreenOperator, HalfSpacePotential, KernelQuery, QuadratureSpec, cubic_interpolation_matrix,
    g2_vertical_kernel, gamma_d, green_full, green_g1, green_g2, green_g2_grid, heat_kernel,
    kernel_hs, kernel_hs_table, kernel_ws, laplace_fundamental, phi_d, potential_hs, potential_ws,
    reflected_poisson_kernel,
)
from hsgreen.fields import SlabGrid

TIGHT = QuadratureSpec(rel_tol=1e-11, abs_tol=1e-15)
E3 = np.eye(3)


def q(x, y, t, **kw):
    return KernelQuery(np.asarray(x, float), np.asarray(y, float), t, **kw)


# ---------------------------------------------------------------- heat kernel

def test_heat_kernel_peak():
    t = 1 / (4 * np.pi)
    assert heat_kernel(q([0.3, 0, 1], [0.3, 0, 1], t)) == pytest.approx(1.0, rel=1e-14)


def test_heat_kernel_unit_mass():
    t = 0.3
    # the tail beyond 8 sqrt(t) carries 5.2e-7 of the mass; 12 sqrt(t) leaves < 1e-15
    r = np.linspace(0, 12 * np.sqrt(t), 6001)
    f = gamma_d(np.stack([r, 0 * r, 0 * r], -1), t) * 4 * np.pi * r ** 2
    from scipy.integrate import simpson
    assert simpson(f, x=r) == pytest.approx(1.0, abs=1e-8)


def test_heat_kernel_at_two_sqrt_t():
    t = 0.7
    x = np.array([2 * np.sqrt(t), 0, 0])
    assert heat_kernel(q(x, [0, 0, 0], t)) == pytest.approx((4 * np.pi * t) ** -1.5 / np.e)


def test_time_must_be_positive():
    with pytest.raises(ValueError):
        q([0, 0, 1], [0, 0, 1], 0.0)


# ---------------------------------------------------------------- Laplace / reflected kernels

def test_laplace_value_and_gradient():
    assert laplace_fundamental([1.0, 0, 0]) == pytest.approx(-0.0795775, abs=1e-7)
    x = np.array([0.3, -0.4, 0.5])
    r = np.linalg.norm(x)
    for i in range(3):
        assert laplace_fundamental(x, (i,)) == pytest.approx(x[i] / (4 * np.pi * r ** 3))
    with pytest.raises(ValueError):
        laplace_fundamental([0, 0, 0])


def test_laplace_flux_is_one():
    r = 0.5
    xg, wg = np.polynomial.legendre.leggauss(40)
    th = np.arccos(xg)
    ph = np.linspace(0, 2 * np.pi, 80, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    n = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1)
    grad = np.stack([laplace_fundamental(r * n, (i,)) for i in range(3)], -1)
    flux = np.sum(np.sum(grad * n, -1) * wg[:, None]) * (2 * np.pi / 80) * r ** 2
    assert flux == pytest.approx(1.0, abs=1e-6)


def test_laplace_reflection_on_boundary():
    x = np.array([0.4, 0.2, 0.0])
    xs = x * np.array([1, 1, -1])
    assert laplace_fundamental(x) + laplace_fundamental(xs) == 2 * laplace_fundamental(x)


def test_reflected_poisson_kernel():
    y = np.array([0.1, 0.2, 0.7])
    z0 = np.array([0.5, -0.3, 0.0])
    assert reflected_poisson_kernel(y, z0, -1) == 0.0
    yb = np.array([0.1, 0.2, 0.0])
    z = np.array([0.5, -0.3, 0.4])
    assert reflected_poisson_kernel(yb, z, 1, (2,)) == pytest.approx(0.0, abs=1e-15)
    s = reflected_poisson_kernel(y, z, 1) + reflected_poisson_kernel(y, z, -1)
    assert s == pytest.approx(2 * laplace_fundamental(y - z), rel=1e-14)
    with pytest.raises(ValueError):
        reflected_poisson_kernel(y, y, 1)


# ---------------------------------------------------------------- whole-space Phi and K

def test_phi_laplacian_is_gamma():
    x, t, h = np.array([1.0, 0, 0]), 0.5, 1e-3
    lap = sum((potential_ws(x + h * e, t) - 2 * potential_ws(x, t) + potential_ws(x - h * e, t)) / h ** 2
              for e in E3)
    assert lap == pytest.approx(gamma_d(x, t), rel=1e-5)


def test_phi_far_field():
    t = 0.5
    r = 40 * np.sqrt(t)
    assert potential_ws([r, 0, 0], t) * (-4 * np.pi * r) == pytest.approx(1.0, abs=1e-3)


def test_phi_gradient_bound_stable():
    # |grad Phi| (t + |x|^2) stays bounded on log-spaced clouds (two seeds)
    consts = []
    for seed in (0, 1):
        rng = np.random.default_rng(seed)
        n = 2000
        r = 10 ** rng.uniform(-3, 2, n)
        t = 10 ** rng.uniform(-3, 2, n)
        d = rng.standard_normal((n, 3))
        x = d / np.linalg.norm(d, axis=1, keepdims=True) * r[:, None]
        g = np.sqrt(sum(np.array([phi_d(x[k], t[k], (i,)) for k in range(n)]) ** 2
                        for i in range(3)))
        consts.append(np.max(g * np.sqrt(t + r ** 2) ** 2))
    assert consts[1] == pytest.approx(consts[0], rel=0.2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.floats(0.05, 3.0),
       st.sampled_from([(0,), (2,), (0, 1), (2, 2), (0, 1, 2), (1, 1, 2)]))
def test_radial_derivatives_match_fd(x, t, idx):
    x = np.array(x)
    if np.linalg.norm(x) < 0.1:
        x = x + 0.5
    base, k, h = idx[:-1], idx[-1], 1e-5
    for fn in (lambda z, i: phi_d(z, t, i), lambda z, i: gamma_d(z, t, i),
               lambda z, i: laplace_fundamental(z, i)):
        an = fn(x, idx)
        fd = (fn(x + h * E3[k], base) - fn(x - h * E3[k], base)) / (2 * h)
        assert an == pytest.approx(fd, rel=1e-5, abs=1e-9 * max(1.0, abs(fn(x, base))))


def test_kernel_ws_trace_and_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        t = rng.uniform(0.05, 2)
        for s in range(3):
            tr = sum(kernel_ws(q(x, y, t, comp=(m, m, s))) for m in range(3))
            assert tr == pytest.approx(2 * heat_kernel(q(x, y, t, dy=(s,))), abs=1e-8)
            for m in range(3):
                for j in range(3):
                    a = kernel_ws(q(x, y, t, comp=(m, j, s)))
                    b = kernel_ws(q(x, y, t, comp=(j, m, s)))
                    assert abs(a - b) <= 1e-12


# ---------------------------------------------------------------- G1

def test_g1_examples():
    x = np.array([0.3, 0.1, 0.8])
    assert green_g1(q(x, [0.0, 0.2, 0.0], 0.4, comp=(0, 0))) == 0.0
    assert np.all(green_g1(q(x, [0.1, 0.2, 0.5], 0.4, comp=(0, 2))) == 0.0)
    t = 1e-3
    y = np.array([0.31, 0.1, 0.78])
    full = green_g1(q(x, y, t, comp=(1, 1)))
    assert abs(full - heat_kernel(q(x, y, t))) < 1e-12


# ---------------------------------------------------------------- G2

# independent oracle: cylindrical nquad of the defining iterated integral
G2_ORACLE = {
    (0, 0): 0.034898525576097565,
    (0, 1): 0.0031137563968092344,
    (2, 0): -0.012470245235235206,
}


@pytest.mark.parametrize("comp", sorted(G2_ORACLE))
def test_g2_against_direct_quadrature(comp):
    x = np.array([0.3, -0.2, 0.8])
    y = np.array([0.1, 0.25, 0.5])
    assert green_g2(q(x, y, 0.3, comp=comp), TIGHT) == pytest.approx(G2_ORACLE[comp], rel=1e-7)


def test_g2_i3_column_and_boundary():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (10, 3))
    y = rng.uniform(0, 1, (10, 3))
    for i in range(3):
        assert np.all(green_g2(q(x, y, 0.2, comp=(i, 2))) == 0.0)
    xb = x.copy()
    xb[:, 2] = 0.0
    for comp in [(0, 0), (1, 0), (2, 1)]:
        np.testing.assert_allclose(green_g2(q(xb, y, 0.2, comp=comp)), 0.0, atol=1e-15)


def test_full_green_at_wall_source():
    x = np.array([0.2, 0.1, 0.5])
    y = np.array([0.0, 0.4, 0.0])
    for comp in [(0, 0), (2, 1), (1, 1)]:
        assert green_full(q(x, y, 0.3, comp=comp)) == green_g2(q(x, y, 0.3, comp=comp))


def test_g2_lateral_translation_invariance():
    x = np.array([0.3, -0.2, 0.8])
    y = np.array([0.1, 0.25, 0.5])
    s = np.array([3.7, -1.2, 0.0])
    for comp in [(0, 0), (2, 1)]:
        a = green_g2(q(x, y, 0.3, comp=comp), TIGHT)
        b = green_g2(q(x + s, y + s, 0.3, comp=comp), TIGHT)
        assert b == pytest.approx(a, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.1, 1.5), min_size=6, max_size=6), st.floats(0.05, 2.0),
       st.sampled_from([(0, 0), (0, 1), (2, 0), (1, 1)]), st.sampled_from(["x", "y"]),
       st.integers(0, 2))
def test_g2_derivatives_match_fd(c, t, comp, which, k):
    x, y = np.array(c[:3]), np.array(c[3:])
    h = 1e-4
    kw = {"dx": (k,)} if which == "x" else {"dy": (k,)}
    an = green_g2(q(x, y, t, comp=comp, **kw), TIGHT)
    if which == "x":
        fd = (green_g2(q(x + h * E3[k], y, t, comp=comp), TIGHT)
              - green_g2(q(x - h * E3[k], y, t, comp=comp), TIGHT)) / (2 * h)
    else:
        fd = (green_g2(q(x, y + h * E3[k], t, comp=comp), TIGHT)
              - green_g2(q(x, y - h * E3[k], t, comp=comp), TIGHT)) / (2 * h)
    assert an == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_g2_second_normal_and_time_derivative():
    x = np.array([0.3, -0.2, 0.8])
    y = np.array([0.1, 0.25, 0.5])
    t, h = 0.3, 1e-4
    d2 = green_g2(q(x, y, t, comp=(0, 0), dx=(2, 2)), TIGHT)
    fd = (green_g2(q(x + h * E3[2], y, t, comp=(0, 0), dx=(2,)), TIGHT)
          - green_g2(q(x - h * E3[2], y, t, comp=(0, 0), dx=(2,)), TIGHT)) / (2 * h)
    assert d2 == pytest.approx(fd, rel=1e-5)
    dt = green_g2(q(x, y, t, comp=(0, 0), dt=1), TIGHT)
    fd = (green_g2(q(x, y, t + h, comp=(0, 0)), TIGHT)
          - green_g2(q(x, y, t - h, comp=(0, 0)), TIGHT)) / (2 * h)
    assert dt == pytest.approx(fd, rel=1e-5)


def test_g2_grid_matches_points():
    x = np.array([0.2, -0.1, 0.9])
    y1 = np.linspace(-2, 2, 9)
    y2 = np.linspace(-1, 1, 5)
    b = np.linspace(0, 2, 7)
    grid = green_g2_grid(x, y1, y2, b, 0.4, (2, 0), dy=(2,))
    Y = np.stack(np.meshgrid(y1, y2, b, indexing="ij"), -1)
    pts = green_g2(q(x, Y, 0.4, comp=(2, 0), dy=(2,)))
    np.testing.assert_allclose(grid, pts, rtol=1e-7, atol=1e-12)


# ---------------------------------------------------------------- half-space potentials and K

X0, Y0, T0 = np.array([0.2, -0.1, 0.9]), np.array([0.5, 0.3, 0.6]), 0.5


def test_dirichlet_potential_closed_form():
    # Phi_33 is the Dirichlet potential of the odd heat kernel: Phi(y - x) - Phi(y - x*)
    P = HalfSpacePotential(X0, T0, (2, 2), Y0[2])
    xs = X0 * np.array([1, 1, -1])
    for d in [(0, 1), (2, 2), (0, 2, 2), (0, 0, 1)]:
        ref = phi_d(Y0 - X0, T0, d) - phi_d(Y0 - xs, T0, d)
        assert P(Y0[:2], d) == pytest.approx(ref, rel=1e-3, abs=1e-6)


def test_potential_boundary_conditions():
    yb = np.array([0.5, 0.3, 0.0])
    assert potential_hs(X0, yb, T0, (2, 2)) == pytest.approx(0.0, abs=1e-12)
    assert potential_hs(X0, yb, T0, (0, 0), (2,)) == pytest.approx(0.0, abs=1e-12)
    assert potential_hs(X0, yb, T0, (1, 0), (2,)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("comp", [(0, 0), (0, 1), (2, 0), (2, 2)])
def test_potential_laplacian_is_green(comp):
    h = 0.05
    f0 = potential_hs(X0, Y0, T0, comp)
    lap = sum((potential_hs(X0, Y0 + h * e, T0, comp) - 2 * f0
               + potential_hs(X0, Y0 - h * e, T0, comp)) / h ** 2 for e in E3)
    G = green_full(q(X0, Y0, T0, comp=comp))
    assert lap == pytest.approx(G, rel=1e-3)


@pytest.mark.parametrize("comp", [(0, 0, 1), (2, 1, 2), (1, 0, 0)])
def test_kernel_hs_two_paths(comp):
    kq = q(X0, Y0, T0, comp=comp)
    a = kernel_hs(kq)
    b = kernel_hs(kq, path="direct")
    assert a == pytest.approx(b, rel=1e-3)


def test_kernel_table_matches_pointwise():
    x = np.array([0.0, 0.0, 1.5])
    y3 = np.array([0.6, 2.25])
    y1, y2, K = kernel_hs_table(x, 0.25, y3)
    for a, b, c in [(30, 34, 0), (36, 31, 1)]:
        y = np.array([y1[a], y2[b], y3[c]])
        for comp in [(0, 0, 1), (2, 1, 2), (1, 2, 0)]:
            ref = kernel_hs(q(x, y, 0.25, comp=comp))
            # both carry the lateral-box error (~1e-5 at half width 8), not identically
            assert K[comp + (a, b, c)] == pytest.approx(ref, rel=1e-4, abs=1e-9)


def test_kernel_table_parts_add_up():
    x = np.array([0.1, 0.0, 0.8])
    y3 = np.array([0.5, 1.0])
    full = kernel_hs_table(x, 0.5, y3, half_width=6.0)[2]
    g1 = kernel_hs_table(x, 0.5, y3, half_width=6.0, parts="g1")[2]
    g2 = kernel_hs_table(x, 0.5, y3, half_width=6.0, parts="g2")[2]
    np.testing.assert_allclose(g1 + g2, full, atol=1e-10 * np.abs(full).max())
    # the potential part differs from K by d_s G_mj only
    pot = kernel_hs_table(x, 0.5, y3, half_width=6.0, potential_only=True)[2]
    assert np.abs(full - pot).max() > 1e-3 * np.abs(full).max()


# ---------------------------------------------------------------- field-level operator

def test_vertical_kernel_against_quadrature():
    for kap, x3, y3, t in [(1.3, 0.7, 0.4, 0.2), (5.0, 0.3, 0.05, 0.01), (0.2, 2.0, 1.0, 1.0)]:
        ref = np.exp(-kap ** 2 * t) * quad(
            lambda z: np.exp(-kap * (x3 - z)) * (4 * np.pi * t) ** -0.5
            * np.exp(-(z + y3) ** 2 / (4 * t)), 0, x3, epsabs=1e-14)[0]
        assert g2_vertical_kernel(kap, x3, y3, t) == pytest.approx(ref, rel=1e-12)
    # huge kappa: no overflow, tends to zero
    assert np.isfinite(g2_vertical_kernel(500.0, 1.0, 0.5, 0.3))


def test_cubic_interpolation_reproduces_cubics():
    z = np.linspace(0, 2, 9)
    pts = np.linspace(0, 2, 37)
    P = cubic_interpolation_matrix(z, pts)
    f = lambda s: 1 - 2 * s + 0.5 * s ** 3
    np.testing.assert_allclose(P @ f(z), f(pts), atol=1e-12)


def _bump_field(g, centre=(0.2, -0.1, 1.5), w=0.15):
    X, Y, Z = g.mesh()
    b = np.exp(-((X - centre[0]) ** 2 + (Y - centre[1]) ** 2 + (Z - centre[2]) ** 2) / w)
    return np.stack([b, 0.5 * b * X, b * Z])


def test_green_operator_matches_pointwise_sum():
    g = SlabGrid(6.0, 4.0, 48, 48, 32)
    f = _bump_field(g)
    v = GreenOperator(g)(f, 0.3)
    X, Y, Z = g.mesh()
    near = (X - 0.2) ** 2 + (Y + 0.1) ** 2 + (Z - 1.5) ** 2 < 2.5 ** 2   # f < 1e-18 outside
    Yp = np.stack([X, Y, Z], -1)[near]
    w = g.quadrature_weights()[near]
    i0, j0, k0 = 24, 24, 8
    xp = np.array([g.x[i0], g.y[j0], g.z[k0]])
    for i in range(3):
        ref = sum(np.sum(green_full(q(xp, Yp, 0.3, comp=(i, j))) * f[j][near] * w)
                  for j in range(3))
        assert v[i, i0, j0, k0] == pytest.approx(ref, rel=2e-3, abs=1e-5)


def test_green_operator_boundary_trace_is_zero():
    g = SlabGrid(4.0, 4.0, 32, 32, 32)
    v = GreenOperator(g)(_bump_field(g), 0.2)
    assert np.max(np.abs(v[..., 0])) == 0.0
