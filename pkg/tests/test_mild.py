import numpy as np
import pytest

from hsgreen.fields import Field, SlabGrid, tensor_product
from hsgreen.mild import (
    MildProblem, div_defect, div_tensor, divergence, duhamel, duhamel_from_forcing, forcing, mild_residual,
    oracle_solve, picard_solve, probe_points, propagate_initial, sample_at,
)


def curl_bump(X, Y, Z, c=(0.2, -0.1, 1.5), s=0.3):
    """Divergence-free field: curl of (0, phi, phi) for a Gaussian phi."""
    phi = np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * s * s))
    dx, dy, dz = (-(V - cc) / s ** 2 * phi for V, cc in zip((X, Y, Z), c))
    return np.stack([dy - dz, -dx, dx])


@pytest.fixture(scope="module")
def grid():
    return SlabGrid(3.0, 3.0, 24, 24, 24)


@pytest.fixture(scope="module")
def u_A(grid):
    v = curl_bump(*grid.mesh())
    return Field(grid, 1, 0.05 * v / np.abs(v).max())


def test_zero_data(grid):
    z = Field(grid, 1, np.zeros((3,) + grid.shape))
    assert propagate_initial(z, 0.0, A=-0.5).sup() == 0.0
    F = Field(grid, 2, np.zeros((3, 9) + grid.shape), time_axis=[-0.2, -0.1, 0.0])
    assert duhamel(F).sup() == 0.0


def test_whole_space_constant(grid):
    # heat flow of a windowed constant, read deep inside the window
    X, Y, Z = grid.mesh()
    w = np.exp(-(np.maximum(np.abs(Z - 1.5) - 1.0, 0) / 0.15) ** 2)
    c = np.array([0.3, -0.7, 1.1])
    v = c[:, None, None, None] * w
    out = propagate_initial(Field(grid, 1, v), 0.0, "whole", A=-0.01)
    k = np.argmin(np.abs(grid.z - 1.5))
    np.testing.assert_allclose(out.values[:, :, :, k], v[:, :, :, k], atol=1e-8)


def test_trace_and_divergence(grid, u_A):
    s = propagate_initial(u_A, 0.0, A=-0.3)
    assert np.all(s.values[..., 0] == 0.0)
    # cubic extrapolation of the first layers to the wall
    ext = 4 * s.values[..., 1] - 6 * s.values[..., 2] + 4 * s.values[..., 3] - s.values[..., 4]
    assert np.abs(ext).max() < 1e-2 * s.sup()
    assert div_defect(s) < 1e-2 * s.sup() / grid.hz


def test_half_and_whole_agree_far_from_wall(grid, u_A):
    h = propagate_initial(u_A, 0.0, "half", A=-0.01).values
    w = propagate_initial(u_A, 0.0, "whole", A=-0.01).values
    k = (grid.z > 1.0) & (grid.z < 2.0)
    assert np.abs(h - w)[..., k].max() < 1e-6


def test_forcing_divergence_free(grid, u_A):
    F = tensor_product(u_A)
    f = forcing(F)
    # the pressure gradient removes all but a truncation remainder of div(div F)
    raw = div_defect(Field(grid, 1, -div_tensor(F)))
    assert div_defect(Field(grid, 1, f)) < 1e-3 * raw
    assert np.abs(f[2, ..., 0]).max() < 1e-3 * np.abs(f).max()


def test_time_additivity():
    # the operator only sees data below x3 = H, so the box is taken deep
    grid = SlabGrid(3.0, 6.0, 24, 24, 48)
    v = curl_bump(*grid.mesh())
    u_A = Field(grid, 1, 0.05 * v / np.abs(v).max())
    times = np.linspace(-0.4, 0.0, 9)
    uu = tensor_product(u_A).values
    F = np.stack([(1 + 2 * t) * uu for t in times])
    f = forcing(Field(grid, 2, F, time_axis=times))
    full = duhamel_from_forcing(f, times, 8, grid)
    head = duhamel_from_forcing(f[:5], times[:5], 4, grid)
    tail = duhamel_from_forcing(f[4:], times[4:], 4, grid)
    two = propagate_initial(Field(grid, 1, head), 0.0, A=times[4]).values + tail
    assert np.abs(full - two).max() < 2e-4 * np.abs(full).max()


def test_residual_trivial_cases(grid, u_A):
    zero = Field(grid, 1, np.zeros((3,) + grid.shape))
    p0 = MildProblem(grid, -0.5, zero, [-0.25, 0.0], nt=4)
    u0 = Field(grid, 1, np.zeros((5, 3) + grid.shape), time_axis=p0.ladder)
    assert mild_residual(u0, p0)["residual"] == 0.0
    p = MildProblem(grid, -0.5, u_A, [-0.25, 0.0], nt=4)
    S = np.stack([u_A.values] + [propagate_initial(u_A, t, A=-0.5).values for t in p.ladder[1:]])
    r = mild_residual(Field(grid, 1, S, time_axis=p.ladder), p, quadratic=False)
    assert r["residual"] == 0.0


def test_picard_zero_data(grid):
    zero = Field(grid, 1, np.zeros((3,) + grid.shape))
    states = picard_solve(MildProblem(grid, -0.5, zero, [0.0], nt=4))
    assert len(states) == 1 and states[0].status == "converged"
    assert states[0].u.sup() == 0.0


def test_picard_small_data(grid, u_A):
    p = MildProblem(grid, -0.5, u_A, [-0.25, 0.0], nt=4, tol=1e-10)
    states = picard_solve(p)
    res = [s.residual for s in states]
    assert states[-1].status == "converged"
    assert all(b < 0.1 * a for a, b in zip(res, res[1:]))
    assert states[-1].trace_defect < 1e-3 and states[-1].div_defect < 1e-3
    r = mild_residual(states[-1].u, p)
    assert r["residual"] <= 10 * p.tol


def test_picard_large_data_diverges(grid, u_A):
    big = u_A.with_values(2e3 * u_A.values)
    states = picard_solve(MildProblem(grid, -0.5, big, [0.0], nt=2, max_iter=6))
    assert states[-1].status == "diverged"


def test_problem_validation(grid, u_A):
    with pytest.raises(ValueError):
        MildProblem(grid, 0.5, u_A, [0.0])
    with pytest.raises(ValueError):
        MildProblem(grid, -0.5, u_A, [-0.6])
    X, Y, Z = grid.mesh()
    bad = Field(grid, 1, np.stack([X * 0, Y * 0, np.exp(-(X ** 2 + Y ** 2 + (Z - 1.5) ** 2))]))
    with pytest.raises(ValueError, match="divergence"):
        MildProblem(grid, -0.5, bad, [0.0])


def test_sample_at_reproduces_nodes(grid, u_A):
    pts = np.array([[grid.x[3], grid.y[5], grid.z[7]], [0.0, 0.0, grid.z[10]]])
    vals = sample_at(u_A.values, grid, pts)
    np.testing.assert_allclose(vals[:, 0], u_A.values[:, 3, 5, 7], atol=1e-14)
    assert probe_points(grid).shape[1] == 3


def test_oracle_shear_mode():
    # u1 = exp(-(pi/H)^2 t) sin(pi x3 / H) is an exact solution between walls
    g = SlabGrid(2.0, 2.0, 8, 8, 16)
    Ho = 4.0
    u0 = lambda X, Y, Z: np.stack([np.sin(np.pi * Z / Ho), 0 * Z, 0 * Z])
    r = oracle_solve(u0, g, -0.5, [0.0], z_refine=2, dt=2e-3)
    exact = np.exp(-(np.pi / Ho) ** 2 * 0.5) * np.sin(np.pi * g.z / Ho)
    np.testing.assert_allclose(r.u[0, 0, 0, 0], exact, atol=2e-4)
    assert np.abs(r.u[0, 1:]).max() < 1e-12


def test_oracle_matches_mild(grid, u_A):
    v = curl_bump(*grid.mesh())
    sc = 0.05 / np.abs(v).max()
    o = oracle_solve(lambda X, Y, Z: sc * curl_bump(X, Y, Z), grid, -0.5, [0.0],
                     z_refine=1, dt=5e-3)
    u = propagate_initial(u_A, 0.0, A=-0.5).values
    assert np.abs(u - o.u[0]).max() < 5e-2 * np.abs(o.u[0]).max()
