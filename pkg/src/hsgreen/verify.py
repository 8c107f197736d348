"""Certification harness: integral identities, kernel estimates, pressure split.

Inequalities cannot be proven numerically. Each estimate check computes the
left side on a sample cloud, divides by the structural factor of the right
side, takes the sup as the fitted constant and repeats on a refinement ladder
(denser cloud, tighter quadrature). A constant that settles is "stable"; one
that keeps growing is evidence against the bound.

Identity checks evaluate both sides by independent pipelines:

* half space: the G-side applies the field-level Green operator to
  ``f = -div F - grad p1_F`` (spectral Neumann pressure); the K-side contracts
  a lateral table of ``K_mjs`` (G2 quadrature plus reflected Poisson
  potentials) with F sampled analytically;
* whole space: the G-side is spectral on a periodic box (Leray projection of
  ``-div F`` followed by the heat multiplier); the K-side sums exact third
  derivatives of Phi against F on a fine cube.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.fft import fftn, ifftn
from scipy.stats import qmc

from .fields import Field, SlabGrid, norm_ls_unif, tensor_product
from .kernels import (
    DEFAULT_SPEC, GreenOperator, KernelQuery, QuadratureSpec, gamma_d, green_g1, green_g2, green_g2_grid,
    kernel_hs_table, kernel_ws, phi_d,
)
from .mild import (
    MildProblem, _lateral_d, forcing, mild_residual, sample_at,
)
from .pressure import _divdiv_hat, _poisson_hat, pressure_half, siop_decompose, wavenumbers

log = logging.getLogger(__name__)

STABLE_RTOL = 0.2


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def settled(constants: Sequence[float], rtol: float = STABLE_RTOL) -> bool:
    """Last two values within ``rtol`` of the larger one."""
    if len(constants) < 2:
        return False
    a, b = constants[-2], constants[-1]
    return bool(np.isfinite(a) and np.isfinite(b) and abs(a - b) <= rtol * max(abs(a), abs(b)))


@dataclass
class EstimateFit:
    """Fitted constant of one estimate with its refinement history."""
    id: str
    samples: str
    constants: list
    history: list
    verdict: str = "unstable"
    rows: list = dc_field(default_factory=list)        # (index, lhs, rhs_factor, ratio)
    extra: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not self.history:
            raise ValueError("history must be non-empty")
        if self.verdict not in ("stable", "unstable"):
            raise ValueError("verdict must be 'stable' or 'unstable'")
        if self.verdict == "stable" and not settled(self.constants):
            raise ValueError("verdict 'stable' needs the last two constants within 20%")

    @property
    def passed(self) -> bool:
        """Stable fit; for a divergence check, growth >= 2 at every level."""
        if "min_growth" in self.extra:
            return bool(self.extra["min_growth"] >= 2.0)
        return self.verdict == "stable"

    @property
    def constant(self) -> float:
        return float(self.constants[-1])

    def to_csv(self) -> str:
        cols = sorted(k for k, v in self.extra.items() if np.isscalar(v))
        header = ["sample", "lhs", "rhs_factor", "ratio"] + cols
        tail = [self.extra[k] for k in cols]
        return _csv(header, [list(r) + tail for r in self.rows])


def _fit(eid, samples, levels, verdict_from=None, extra=None):
    """Assemble an EstimateFit from ``[(level, tol, rows), ...]``."""
    consts, hist = [], []
    for lev, tol, rows in levels:
        c = float(max(r[3] for r in rows)) if rows else 0.0
        consts.append(c)
        hist.append({"level": lev, "tol": tol, "n": len(rows), "constant": c})
    ok = settled(consts) if verdict_from is None else verdict_from
    return EstimateFit(eid, samples, consts, hist, "stable" if ok else "unstable",
                       rows=levels[-1][2], extra=extra or {})


# --------------------------------------------------------------------------
# identities

@dataclass
class IdentityReport:
    name: str
    mismatch: list                  # per refinement level
    rows: list                      # (level, field, t, probe, comp, g_side, k_side)
    tol: float
    passed: bool

    def to_csv(self) -> str:
        return _csv(["level", "field", "t", "probe", "comp", "g_side", "k_side"], self.rows)


def _node_index(grid: SlabGrid, x, doubled=False):
    z0 = -grid.H if doubled else 0.0
    f = np.array([(x[0] + grid.L) / grid.hx, (x[1] + grid.L) / grid.hy, (x[2] - z0) / grid.hz])
    i = np.round(f).astype(int)
    if np.any(np.abs(f - i) > 1e-9):
        raise ValueError(f"probe {tuple(x)} is not a grid node")
    return tuple(i)


def _support_z(Ffun, grid, rel=1e-12):
    v = np.abs(Ffun(*grid.mesh())).max(axis=(0, 1, 2))
    live = np.nonzero(v > rel * v.max())[0]
    return grid.z[max(live[0] - 1, 0)], grid.z[min(live[-1] + 1, grid.nz)]


def check_admissible(Ffun, grid: SlabGrid, tol: float = 1e-6, step: float = 1e-5) -> None:
    """Raise unless ``F = 0`` and ``d_j F_3j = 0`` on ``x3 = 0``.

    Evaluated from the callable at the lateral grid nodes with central
    differences of width ``step`` (F is smooth across the boundary).
    Relative to ``sup |F|`` on the grid.
    """
    X, Y, _ = grid.mesh()
    X, Y = X[..., 0], Y[..., 0]
    scale = np.abs(Ffun(*grid.mesh())).max()
    if scale == 0:
        return
    Z0 = np.zeros_like(X)
    if np.abs(Ffun(X, Y, Z0)).max() > tol * scale:
        raise ValueError("F inadmissible: F does not vanish on x3 = 0")

    def d(comp, ax):
        e = [np.zeros_like(X)] * 3
        e[ax] = np.full_like(X, step)
        plus = Ffun(X + e[0], Y + e[1], Z0 + e[2])[comp]
        minus = Ffun(X - e[0], Y - e[1], Z0 - e[2])[comp]
        return (plus - minus) / (2 * step)
    div3 = d(6, 0) + d(7, 1) + d(8, 2)
    if np.abs(div3).max() > tol * scale:
        raise ValueError("F inadmissible: d_j F_3j does not vanish on x3 = 0")


def check_identity_lemma21(fields: Sequence[Callable], t_ladder: Sequence[float],
                           probes=((0.0, 0.0, 1.5), (0.75, -0.5, 0.75)), levels: int = 2,
                           tol: float = 1e-3, box: float = 6.0, hx: float = 0.25,
                           hz: float = 0.125, kbox: float = 8.0,
                           spec: QuadratureSpec = DEFAULT_SPEC) -> IdentityReport:
    """``int G_ij f_j dy = int K_ijm F_jm dy`` with ``f = -div F - grad p1_F``.

    ``fields`` are callables ``F(X, Y, Z) -> (9, ...)``. Level ``l`` uses a
    G-side box of half width ``box * 1.5**l`` and a K-side potential box of
    half width ``kbox * 1.5**l``: the dominant error is the truncation of the
    half space (p1 decays like |x|^-3), spacings are already converged. The
    K-side integrates in y3 by the trapezoid rule on the grid layers.
    Mismatch per level is the max over fields, times, probes and components
    of ``|G - K|``, relative to the largest ``|K|`` for that field and time.
    """
    probes = [np.asarray(p, dtype=float) for p in probes]
    rows, mism = [], []
    for lev in range(levels):
        L = box * 1.5 ** lev
        grid = SlabGrid(L, L, int(round(2 * L / hx)), int(round(2 * L / hx)), int(round(L / hz)))
        idx = [_node_index(grid, p) for p in probes]
        spec_l = spec.scaled(0.01 ** lev)
        kb = kbox * 1.5 ** lev
        gside = {}
        op = GreenOperator(grid, "half")          # private: its matrices are freed per level
        for a, Ffun in enumerate(fields):
            check_admissible(Ffun, grid)
            f = forcing(Field(grid, 2, Ffun(*grid.mesh())))
            for t in t_ladder:
                v = op(f, t)
                for b, i in enumerate(idx):
                    gside[a, t, b] = v[:, i[0], i[1], i[2]]
        del op
        supp = [_support_z(Ffun, grid) for Ffun in fields]
        # trapezoid in y3 on the grid layers: F is smooth and negligible at both ends
        yq = grid.z[(grid.z >= min(s[0] for s in supp)) & (grid.z <= max(s[1] for s in supp))]
        wy = np.full(len(yq), grid.hz)
        wy[[0, -1]] *= 0.5
        kside = {}
        for t in t_ladder:
            for b, p in enumerate(probes):
                y1, y2, K = kernel_hs_table(p, t, yq, spec_l, half_width=kb)
                Y = np.meshgrid(y1, y2, yq, indexing="ij")
                hl = y1[1] - y1[0]
                for a, Ffun in enumerate(fields):
                    Fv = Ffun(*Y).reshape((3, 3) + Y[0].shape)
                    kside[a, t, b] = np.einsum("mjsabq,jsabq,q->m", K, Fv, wy) * hl * hl
        worst = 0.0
        for a in range(len(fields)):
            for t in t_ladder:
                scale = max(np.abs(kside[a, t, b]).max() for b in range(len(probes)))
                for b in range(len(probes)):
                    g, k = gside[a, t, b], kside[a, t, b]
                    worst = max(worst, np.abs(g - k).max() / scale)
                    rows.extend((lev, a, t, b, i, g[i], k[i]) for i in range(3))
        mism.append(float(worst))
        log.info("half-space identity level %d: mismatch %.3e", lev, worst)
    passed = mism[-1] <= tol and (levels < 2 or mism[-1] * 2 <= mism[-2])
    return IdentityReport("half-space", mism, rows, tol, bool(passed))


def check_identity_lemma41(fields: Sequence[Callable], t_ladder: Sequence[float],
                           probes=((0.0, 0.0, 0.0), (0.5, -0.25, 0.5)), levels: int = 2,
                           tol: float = 1e-3, box: float = 8.0, h: float = 0.25,
                           hk: float = 0.125, support: float = 4.5) -> IdentityReport:
    """Whole-space analogue: ``int Gamma f dy = int K_ijm F_jm dy``, ``f = -div F - grad p_F``.

    G-side: heat semigroup of the Leray-projected ``-div F`` on the periodic
    box ``[-box, box)^3`` (spacing ``h``), with the pressure symbol
    ``-k_i k_j / |k|^2``. K-side: direct sums of the exact kernel against F
    on a grid of spacing ``hk`` over the cube ``[-support, support]^3``
    (F must be negligible outside). Level ``l``
    enlarges the box by ``1.5**l`` and divides ``hk`` by ``1.25**l``.
    """
    probes = [np.asarray(p, dtype=float) for p in probes]
    rows, mism = [], []
    for lev in range(levels):
        L = box * 1.5 ** lev
        n = int(round(2 * L / h))
        g = SlabGrid(L, L, n, n, n // 2)
        X, Y, Z = g.mesh(doubled=True)
        idx = [_node_index(g, p, doubled=True) for p in probes]
        k = wavenumbers(X.shape, (g.hx, g.hy, g.hz))
        kk = sum(c * c for c in k)
        ax = (-3, -2, -1)
        hkl = hk / 1.25 ** lev
        m = int(np.ceil(support / hkl))
        ax1 = np.arange(-m, m + 1) * hkl
        Yk0 = np.stack(np.meshgrid(ax1, ax1, ax1, indexing="ij"), axis=-1)
        vals = {}
        for a, Ffun in enumerate(fields):
            Fh = fftn(Ffun(X, Y, Z), axes=ax)
            ph = _poisson_hat(-_divdiv_hat(Fh, k), k)
            fh = [-sum(1j * k[j] * Fh[3 * i + j] for j in range(3)) - 1j * k[i] * ph
                  for i in range(3)]
            Fk = Ffun(Yk0[..., 0], Yk0[..., 1], Yk0[..., 2])
            live = np.abs(Fk).max(axis=0) > 1e-14 * np.abs(Fk).max()
            Yk, Fk = Yk0[live], Fk[:, live]
            for t in t_ladder:
                heat = np.exp(-t * kk)
                u = [np.real(ifftn(heat * fi, axes=ax)) for fi in fh]
                for b, (x, i) in enumerate(zip(probes, idx)):
                    gv = np.array([ui[i] for ui in u])
                    kv = np.zeros(3)
                    for mm in range(3):
                        for j in range(3):
                            for s in range(3):
                                q = KernelQuery(x, Yk, t, comp=(mm, j, s))
                                kv[mm] += np.sum(kernel_ws(q) * Fk[3 * j + s])
                    vals[a, t, b] = (gv, kv * hkl ** 3)
        worst = 0.0
        for a in range(len(fields)):
            for t in t_ladder:
                scale = max(np.abs(vals[a, t, b][1]).max() for b in range(len(probes)))
                for b in range(len(probes)):
                    gv, kv = vals[a, t, b]
                    worst = max(worst, np.abs(gv - kv).max() / scale)
                    rows.extend((lev, a, t, b, c, gv[c], kv[c]) for c in range(3))
        mism.append(float(worst))
        log.info("whole-space identity level %d: mismatch %.3e", lev, worst)
    return IdentityReport("whole-space", mism, rows, tol, bool(mism[-1] <= tol))


def gaussian_tensor(centre, width, A, wall: bool = False) -> Callable:
    """``F(x) = A exp(-|x - c|^2 / (2 w^2))`` for a 3x3 matrix A.

    ``wall=True`` multiplies by ``(x3 / c3)^2`` so that F and ``d_j F_3j``
    vanish on ``x3 = 0``.
    """
    c = np.asarray(centre, dtype=float)
    A = np.asarray(A, dtype=float).reshape(9)

    def F(X, Y, Z):
        phi = np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / (2 * width ** 2))
        if wall:
            phi = phi * (Z / c[2]) ** 2
        return A.reshape((9,) + (1,) * np.ndim(X)) * phi
    return F


def default_identity_fields(whole: bool = False):
    """Three test tensors: rank one, symmetric, two-bump non-symmetric.

    Half-space versions sit around ``x3 = 2.25`` and are admissible.
    """
    e11 = np.zeros((3, 3))
    e11[0, 0] = 1.0
    sym = np.array([[1.0, 0.4, -0.3], [0.4, -0.5, 0.2], [-0.3, 0.2, 0.8]])
    gen = np.array([[0.2, 1.0, 0.0], [-0.6, 0.3, 0.5], [0.1, -0.4, 0.9]])
    z = 0.0 if whole else 2.25
    wall = not whole
    f1 = gaussian_tensor((0.2, -0.1, z), 0.5, e11, wall)
    f2 = gaussian_tensor((-0.3, 0.2, z + 0.1), 0.45, sym, wall)
    a = gaussian_tensor((0.4, 0.3, z - 0.2), 0.4, gen, wall)
    b = gaussian_tensor((-0.5, -0.4, z + 0.3), 0.5, gen.T, wall)
    return [f1, f2, lambda X, Y, Z: a(X, Y, Z) - 0.7 * b(X, Y, Z)]


# --------------------------------------------------------------------------
# kernel estimates

@dataclass(frozen=True)
class SampleSpec:
    """Probe clouds for the kernel estimates.

    Level ``l`` uses the first ``n * 2**l`` points of a scrambled Halton
    sequence (nested clouds) and quadrature ``rel_tol * 0.01**l``.
    ``d2_range`` bounds ``|x - y*|^2 + t``; ``c_exp`` is the constant in the
    Gaussian factor ``exp(-c y3^2 / t)``.
    """
    n: int = 128
    seed: int = 0
    levels: int = 2
    rel_tol: float = 1e-6
    d2_range: tuple = (1e-2, 1e2)
    c_exp: float = 0.125

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("sample cloud too small (< 100 points)")
        lo, hi = self.d2_range
        if not (0 < lo < hi) or np.log10(hi / lo) < 3:
            raise ValueError("sample cloud must span >= 3 decades of |x - y*|^2 + t")
        if self.levels < 2:
            raise ValueError("a fit needs at least two refinement levels")

    def spec(self, level: int) -> QuadratureSpec:
        return QuadratureSpec(rel_tol=self.rel_tol * 0.01 ** level, abs_tol=1e-300,
                              max_refinements=12)

    def size(self, level: int) -> int:
        return self.n * 2 ** level


def _unit(spec: SampleSpec, n: int, dim: int = 5):
    return qmc.Halton(d=dim, scramble=True, seed=spec.seed).random(n)


def _loguniform(u, lo, hi):
    return np.exp(np.log(lo) + (np.log(hi) - np.log(lo)) * u)


def half_space_cloud(spec: SampleSpec, n: int):
    """``(x, y, t)`` with ``x' = 0`` and ``|x - y*|^2 + t`` log-uniform.

    Variables: log d^2, log(t / d^2) in [1e-3, 0.999], the split angle of
    ``|x - y*|`` between lateral and normal parts, the share of y3 in
    ``x3 + y3`` and the lateral direction.
    """
    u = _unit(spec, n)
    d2 = _loguniform(u[:, 0], *spec.d2_range)
    t = d2 * _loguniform(u[:, 1], 1e-3, 0.999)
    r = np.sqrt(d2 - t)
    rho, s = r * np.cos(0.5 * np.pi * u[:, 2]), r * np.sin(0.5 * np.pi * u[:, 2])
    y3 = u[:, 3] * s
    psi = 2 * np.pi * u[:, 4]
    x = np.stack([np.zeros(n), np.zeros(n), s - y3], axis=-1)
    y = np.stack([-rho * np.cos(psi), -rho * np.sin(psi), y3], axis=-1)
    return x, y, t


def _g2_norm(x, y, t, dx=(), dy=(), dt=0, spec=DEFAULT_SPEC):
    tot = 0.0
    for i in range(3):
        for b in range(2):
            tot = tot + green_g2(KernelQuery(x, y, t, dx, dy, dt, (i, b)), spec) ** 2
    return np.sqrt(tot)


def _rows(lhs, rhs):
    return [(k, float(a), float(b), float(a / b)) for k, (a, b) in enumerate(zip(lhs, rhs))]


ESTIMATE_22_DERIVS = (((), ()), ((0,), ()), ((2,), ()), ((), (0,)), ((), (2,)),
                      ((0, 2), ()), ((2,), (2,)))


def _est_22(spec, level, dx, dy):
    x, y, t = half_space_cloud(spec, spec.size(level))
    lhs = np.array([float(_g2_norm(x[k], y[k], t[k], dx, dy, spec=spec.spec(level)))
                    for k in range(len(t))])
    a3, g3 = dx.count(2), dy.count(2)
    lat = len(dx) + len(dy) - a3 - g3
    d2 = np.sum((x - y * np.array([1, 1, -1])) ** 2, axis=-1) + t
    rhs = (t ** (-g3 / 2) * (t + x[:, 2] ** 2) ** (-a3 / 2) * d2 ** (-(3 + lat) / 2)
           * np.exp(-spec.c_exp * y[:, 2] ** 2 / t))
    return _rows(lhs, rhs)


def _est_24(spec, level, l):
    x, y, t = half_space_cloud(spec, spec.size(level))
    lhs = np.array([float(_g2_norm(x[k], y[k], t[k], dt=l, spec=spec.spec(level)))
                    for k in range(len(t))])
    q = np.sum((x[:, :2] - y[:, :2]) ** 2, axis=-1) + x[:, 2] ** 2 + y[:, 2] ** 2 + t
    rhs = t ** (-l) * q ** -1.5 * np.exp(-spec.c_exp * y[:, 2] ** 2 / t)
    return _rows(lhs, rhs)


def _gauss_panels(lo, hi, npan, order=8):
    xg, wg = np.polynomial.legendre.leggauss(order)
    e = np.linspace(lo, hi, npan + 1)
    a, b = e[:-1, None], e[1:, None]
    return (0.5 * (b - a) * xg + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * wg).ravel()


def g2_mass(x3: float, eps: float, spec: QuadratureSpec = DEFAULT_SPEC, nr: int = 48,
            nz: int = 24, rmax: float = 1e3) -> float:
    """``int |G2(x, y, eps)| dy`` over the half space (Frobenius norm), ``x = (0, 0, x3)``.

    The norm is invariant under lateral rotations about x', so the angular
    integral is exact with one direction. Radially, Gauss panels in
    ``ln(1 + rho / x3)`` up to ``rho = rmax x3`` (the integrand decays like
    rho^-3, the tail is O(1 / rmax)); normally, Gauss panels on
    ``[0, 12 sqrt(eps)]``.
    """
    u, wu = _gauss_panels(0.0, np.log1p(rmax), nr // 8)
    rho = x3 * np.expm1(u)
    wr = wu * x3 * np.exp(u) * rho * 2 * np.pi
    y3, w3 = _gauss_panels(0.0, 12 * np.sqrt(eps), nz // 8)
    R, Z = np.meshgrid(rho, y3, indexing="ij")
    Y = np.stack([R, np.zeros_like(R), Z], axis=-1)
    val = _g2_norm(np.array([0.0, 0.0, x3]), Y, eps, spec=spec)
    return float(np.sum(val * wr[:, None] * w3[None, :]))


MASS_EPS = tuple(10.0 ** np.arange(-4.0, -0.9, 0.5))


def _est_218(spec: SampleSpec, x3=(2.0, 4.0), eps=MASS_EPS):
    """Mass fit ``int |G2| dy <= C sqrt(eps) / x3``; slopes and x3-halving in ``extra``."""
    levels, masses = [], {}
    for lev in range(spec.levels):
        q = spec.spec(lev)
        m = {(a, e): g2_mass(a, e, q, nr=48 * 2 ** lev, nz=24 * 2 ** lev, rmax=1e3 * 4 ** lev)
             for a in x3 for e in eps}
        masses[lev] = m
        rows = [(k, m[a, e], np.sqrt(e) / a, m[a, e] * a / np.sqrt(e))
                for k, (a, e) in enumerate((a, e) for a in x3 for e in eps)]
        levels.append((lev, q.rel_tol, rows))
    m = masses[spec.levels - 1]
    le = np.log(np.asarray(eps))
    extra = {"x3": x3[0]}
    for k, a in enumerate(x3):
        slope = np.polyfit(le, np.log([m[a, e] for e in eps]), 1)[0]
        extra["slope" if k == 0 else f"slope_x3_{a:g}"] = float(slope)
    halving = [m[x3[1], e] / m[x3[0], e] for e in eps]
    extra["halving_min"] = float(min(halving))
    extra["halving_max"] = float(max(halving))
    ok = (settled([max(r[3] for r in lv[2]) for lv in levels])
          and all(abs(extra[k] - 0.5) <= 0.05 for k in extra if k.startswith("slope"))
          and abs(extra["halving_min"] - 0.5) <= 0.05 and abs(extra["halving_max"] - 0.5) <= 0.05)
    desc = f"x3 in {x3}, eps = 1e-4 .. 1e-1 (half decades)"
    return _fit("2.18", desc, levels, verdict_from=ok, extra=extra)


def _est_phi(spec: SampleSpec, level: int, k: int, which: str):
    """``|grad^k Phi(x, t)| (t + |x|^2)^((1+k)/2)`` or ``|grad^k Gamma(y, 1)|`` ratios."""
    n = spec.size(level)
    u = _unit(spec, n, 4)
    if which == "phi":
        d2 = _loguniform(u[:, 0], *spec.d2_range)
        t = d2 * _loguniform(u[:, 1], 1e-3, 0.999)
    else:
        d2 = 1.0 + _loguniform(u[:, 0], 1e-3, 49.0)
        t = np.ones(n)
    r = np.sqrt(d2 - t)
    cth = 2 * u[:, 2] - 1
    sth = np.sqrt(1 - cth ** 2)
    z = r[:, None] * np.stack([sth * np.cos(2 * np.pi * u[:, 3]),
                               sth * np.sin(2 * np.pi * u[:, 3]), cth], axis=-1)
    tot = np.zeros(n)
    for idx in np.ndindex(*(3,) * k):
        f = phi_d if which == "phi" else gamma_d
        tot += np.array([f(z[j], t[j], idx) for j in range(n)]) ** 2
    lhs = np.sqrt(tot)
    if which == "phi":
        rhs = d2 ** (-(1 + k) / 2)
    else:
        rhs = d2 ** (-(3 + k) / 2) * np.exp(-(d2 - 1) / 8)
    return _rows(lhs, rhs)


TABLE_TIMES = (0.01, 0.04, 0.16, 0.64)


def _est_khat(spec: SampleSpec, part: str):
    """Heat part: ``|d_yi G1_ij| + |Khat1|`` vs ``(|x-y|^2+t)^-2``; reflected part: ``|Khat2|`` vs ``(|x-y*|^2+t)^-2``.

    ``Khat`` is the potential part of ``K`` (the kernel minus ``d_s G_mj``),
    evaluated with :func:`kernel_hs_table` at one ``(x, t)`` per table time;
    the cloud draws lateral nodes (log-uniform offsets within a quarter of
    the table box) and source heights from each table. Level ``l`` tightens
    the G2 quadrature and doubles the cloud.
    """
    levels = []
    for lev in range(spec.levels):
        n = spec.size(lev)
        per = int(np.ceil(n / len(TABLE_TIMES)))
        u = _unit(spec, per * len(TABLE_TIMES), 4)
        rows, k = [], 0
        for a, t in enumerate(TABLE_TIMES):
            ua = u[a * per:(a + 1) * per]
            x3 = 0.05 * 40 ** ((a + 0.5) / len(TABLE_TIMES))
            x = np.array([0.0, 0.0, x3])
            rt = np.sqrt(t)
            hw = 8.0 * max(0.5, rt)
            y3 = np.unique(np.round(_loguniform(ua[:, 0], 1e-3, x3 + 4.0), 3))
            y1, y2, K = kernel_hs_table(x, t, y3, spec.spec(lev), half_width=hw,
                                        h=min(0.25, rt / 2.5), parts=part, potential_only=True)
            hl = y1[1] - y1[0]
            i0 = int(round(-y1[0] / hl))
            off = _loguniform(ua[:, 1], hl, hw / 4)
            ang = 2 * np.pi * ua[:, 2]
            ia = i0 + np.round(off * np.cos(ang) / hl).astype(int)
            ib = i0 + np.round(off * np.sin(ang) / hl).astype(int)
            iq = np.searchsorted(y3, np.round(_loguniform(ua[:, 0], 1e-3, x3 + 4.0), 3))
            for p, q, r in zip(ia, ib, iq):
                y = np.array([y1[p], y2[q], y3[r]])
                khat = np.sqrt(np.sum(K[..., p, q, r] ** 2))
                if part == "g1":
                    div = [sum(green_g1(KernelQuery(x, y, t, dy=(i,), comp=(i, j))) for i in range(3))
                           for j in range(3)]
                    lhs = np.sqrt(np.sum(np.square(div))) + khat
                    d2 = np.sum((x - y) ** 2) + t
                else:
                    lhs = khat
                    d2 = np.sum((x - y * REFLECT3) ** 2) + t
                rows.append((k, float(lhs), float(d2 ** -2), float(lhs * d2 ** 2)))
                k += 1
        levels.append((lev, spec.spec(lev).rel_tol, rows[:n]))
    eid = "2.3" if part == "g1" else "2.5"
    return _fit(eid, f"{len(TABLE_TIMES)} tables, t in {TABLE_TIMES}", levels)


REFLECT3 = np.array([1.0, 1.0, -1.0])


def _fit_levels(eid, desc, fn, spec, **kw):
    return _fit(eid, desc, [(lev, spec.spec(lev).rel_tol, fn(spec, lev, **kw))
                            for lev in range(spec.levels)])


ESTIMATE_IDS = ("2.2", "2.3", "2.4", "2.5", "2.18", "4.x-Phi")


def check_kernel_estimates(ids: Sequence[str], sample_spec: SampleSpec = SampleSpec()) -> list:
    """Fit the constants of the listed estimates; one EstimateFit per inequality."""
    out = []
    for eid in ids:
        if eid not in ESTIMATE_IDS:
            raise ValueError(f"unknown estimate id {eid!r}")
        if eid == "2.2":
            for dx, dy in ESTIMATE_22_DERIVS:
                out.append(_fit_levels("2.2", f"half-space cloud, dx={dx}, dy={dy}",
                                       _est_22, sample_spec, dx=dx, dy=dy))
        elif eid == "2.4":
            for l in (0, 1):
                out.append(_fit_levels("2.4", f"half-space cloud, dt^{l}", _est_24,
                                       sample_spec, l=l))
        elif eid == "2.18":
            out.append(_est_218(sample_spec))
        elif eid in ("2.3", "2.5"):
            out.append(_est_khat(sample_spec, "g1" if eid == "2.3" else "g2"))
        else:
            for k in range(4):
                out.append(_fit_levels("4.x-Phi", f"grad^{k} Phi cloud", _est_phi,
                                       sample_spec, k=k, which="phi"))
                out.append(_fit_levels("4.x-Phi", f"grad^{k} Gamma(., 1) cloud", _est_phi,
                                       sample_spec, k=k, which="gamma"))
    return out


# --------------------------------------------------------------------------
# uniform integral of grad G2 and its model integral

def bump_column(width: float = 0.5, centre3: float = 0.5, amp: float = 1.0) -> Callable:
    """Time-constant ``f(y) = amp exp(-(|y'|^2 + (y3 - c)^2) / (2 w^2)) e1``."""
    def f(Y1, Y2, Y3):
        phi = amp * np.exp(-(Y1 ** 2 + Y2 ** 2 + (Y3 - centre3) ** 2) / (2 * width ** 2))
        z = np.zeros_like(phi)
        return np.stack([phi, z, z])
    return f


def _graded_symmetric(inner, outer, npan, order=8):
    """Gauss nodes on ``[-outer, outer]``, panels geometric from ``inner`` outwards."""
    e = np.geomspace(inner, outer, npan)
    e = np.concatenate([-e[::-1], [0.0], e])
    xg, wg = np.polynomial.legendre.leggauss(order)
    a, b = e[:-1, None], e[1:, None]
    return (0.5 * (b - a) * xg + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * wg).ravel()


def uniform_integral(f: Callable, x3: float, T: float, spec: QuadratureSpec, level: int = 0,
                     radius: float = 3.0, height: float = 3.0) -> float:
    """``int_0^T int |grad_y G2(x, y, lam) f(y)| dy dlam`` at ``x = (0, 0, x3)``.

    ``|.|`` is the Frobenius norm over ``(i, k)`` of ``d_yk G2_ij f_j``; f is
    time constant and negligible outside ``|y1|, |y2| < radius``,
    ``y3 < height``. Quadrature: Gauss panels in ``ln lam`` on
    ``[1e-8 T, T]``, lateral tensor Gauss nodes graded towards x' from
    ``x3 / 4``, Gauss panels in y3 on ``[0, min(height, 12 sqrt(lam))]``.
    Level ``l`` multiplies the panel counts by ``1.25**l``.
    """
    sc = 1.25 ** level
    n8 = lambda n: max(1, int(round(n * sc)))
    wl, wwl = _gauss_panels(np.log(1e-8 * T), np.log(T), n8(3))
    lam, wlam = np.exp(wl), wwl * np.exp(wl)
    yl, wyl = _graded_symmetric(min(x3, 0.5) / 4, radius, n8(5))
    x = np.array([0.0, 0.0, x3])
    total = 0.0
    for lv, wv in zip(lam, wlam):
        y3, w3 = _gauss_panels(0.0, min(height, 12 * np.sqrt(lv)), n8(3))
        Y = np.meshgrid(yl, yl, y3, indexing="ij")
        fv = f(*Y)
        acc = 0.0
        for i in range(3):
            for k in range(3):
                s = 0.0
                for j in range(2):
                    if np.any(fv[j] != 0):
                        s = s + green_g2_grid(x, yl, yl, y3, lv, (i, j), dy=(k,), spec=spec) * fv[j]
                acc = acc + np.square(s)
        W = wyl[:, None, None] * wyl[None, :, None] * w3[None, None, :]
        total += wv * np.sum(np.sqrt(acc) * W)
    return float(total)


def time_constant_norm(f: Callable, s: float, l: float, A: float, h: float = 0.125,
                       box: float = 4.0) -> float:
    """``||f||_{L_{s,l,unif}}`` of the time-constant extension of f over ``(A, 0)``."""
    n = int(round(2 * box / h))
    g = SlabGrid(box, box, n, n, int(round(box / h)))
    v = f(*g.mesh())
    fld = Field(g, 1, np.stack([v, v]), time_axis=np.array([A, 0.0]))
    return norm_ls_unif(fld, s, l).value


def model_integral(s: float, l: float, delta: float, T: float, c: float = 0.125,
                   nodes: int = 8) -> float:
    """``[int_delta^T (int_C (lam^-1/2 J)^s' dy)^(l'/s') dlam]^(1/l')`` at ``x = 0``.

    ``J = (|y|^2 + lam)^(-3/2) exp(-c y3^2 / lam)``, ``C = (-1, 1)^2 x (0, 1)``.
    Laterally, the square is integrated in polar form with the exact angular
    measure ``2 pi - 8 arccos(1 / rho)`` for ``rho > 1``; radial and normal
    nodes are geometrically graded towards the origin at the scale sqrt(lam).
    """
    sp = s / (s - 1)
    lp = l / (l - 1)
    wl, wwl = _gauss_panels(np.log(delta), np.log(T), 4 * nodes)
    lam, wlam = np.exp(wl), wwl * np.exp(wl)
    xg, wg = np.polynomial.legendre.leggauss(nodes)

    def graded(top, scale):
        e = np.unique(np.concatenate([[0.0], np.geomspace(scale * 1e-3, top, 4 * nodes)]))
        e = e[e <= top]
        a, b = e[:-1, None], e[1:, None]
        return (0.5 * (b - a) * xg + 0.5 * (a + b)).ravel(), (0.5 * (b - a) * wg).ravel()

    out = 0.0
    for lv, wv in zip(lam, wlam):
        r1, w1 = graded(1.0, np.sqrt(lv))
        r2, w2 = _gauss_panels(1.0, np.sqrt(2.0), nodes)
        rho = np.concatenate([r1, r2])
        wr = np.concatenate([w1, w2]) * rho * (2 * np.pi - 8 * np.arccos(np.minimum(1.0, 1.0 / rho)))
        y3, w3 = graded(1.0, np.sqrt(lv))
        R, Z = np.meshgrid(rho, y3, indexing="ij")
        J = (R ** 2 + Z ** 2 + lv) ** -1.5 * np.exp(-c * Z ** 2 / lv)
        inner = np.sum((lv ** -0.5 * J) ** sp * wr[:, None] * w3[None, :])
        out += wv * inner ** (lp / sp)
    return float(out ** (1 / lp))


def check_uniform_integral(s: float, l: float, A: float, f_family: Sequence[Callable],
                           probes=(0.1, 0.5), levels: int = 2, rel_tol: float = 1e-6,
                           deltas=(1e-2, 1e-3, 1e-4, 1e-5)) -> EstimateFit:
    """Uniform integral of ``grad_y G2`` against time-constant f on ``(A, 0)``.

    ``3/s + 2/l < 1``: sup over probes ``x = (0, 0, x3)`` of the integral,
    divided by ``||f||_{L_{s,l,unif}}``, on ``levels`` quadrature levels.
    Otherwise: the model integral cut at ``lam > delta`` for each delta;
    ``extra["growth"]`` holds the successive ratios.
    """
    if not (1 < s <= l <= np.inf):
        raise ValueError("need 1 < s <= l")
    if A >= 0:
        raise ValueError("A must be negative")
    T = -A
    crit = 3 / s + (2 / l if np.isfinite(l) else 0.0)
    if crit < 1:
        levels_out = []
        for lev in range(levels):
            q = QuadratureSpec(rel_tol * 0.01 ** lev, 1e-300, 12)
            rows, k = [], 0
            for f in f_family:
                nrm = time_constant_norm(f, s, l, A)
                for x3 in probes:
                    v = uniform_integral(f, x3, T, q, lev) if nrm > 0 else 0.0
                    rows.append((k, v, nrm, v / nrm if nrm > 0 else 0.0))
                    k += 1
            levels_out.append((lev, q.rel_tol, rows))
        return _fit("L2.2", f"s={s}, l={l}, A={A}, probes x3 in {tuple(probes)}", levels_out,
                    extra={"s": s, "l": l, "criterion": crit})
    vals = [model_integral(s, l, d, T) for d in deltas]
    growth = [b / a for a, b in zip(vals[:-1], vals[1:])]
    rows = [(k, v, d, v) for k, (v, d) in enumerate(zip(vals, deltas))]
    levels_out = [(k, d, [r]) for k, (d, r) in enumerate(zip(deltas, rows))]
    fit = _fit("L2.2-model", f"model integral, s={s}, l={l}, delta in {tuple(deltas)}",
               levels_out, verdict_from=False,
               extra={"s": s, "l": l, "criterion": crit, "min_growth": min(growth)})
    fit.extra["growth"] = growth
    fit.rows = rows
    return fit


# --------------------------------------------------------------------------
# pressure split

def one_sided_matrix(n: int, h: float, deriv: int, width: int = 9) -> np.ndarray:
    """Dense ``n x n`` finite-difference matrix on a uniform column.

    Centred ``width``-point stencils in the interior, stencils shifted to stay
    inside ``[0, n)`` near the ends (no reflection across the boundary).
    """
    W = np.zeros((n, n))
    for k in range(n):
        lo = min(max(k - width // 2, 0), n - width)
        o = np.arange(lo, lo + width, dtype=float) - k
        rhs = np.zeros(width)
        rhs[deriv] = np.prod(np.arange(1, deriv + 1))
        W[k, lo:lo + width] = np.linalg.solve(np.vander(o, increasing=True).T, rhs)
    return W / h ** deriv


class _SlabOps:
    """Spectral lateral and one-sided eighth-order normal derivatives on a slab grid."""

    def __init__(self, g: SlabGrid):
        self.kx = 2 * np.pi * np.fft.fftfreq(g.nx, d=g.hx)
        self.ky = 2 * np.pi * np.fft.fftfreq(g.ny, d=g.hy)
        self.k2 = self.kx[:, None, None] ** 2 + self.ky[None, :, None] ** 2
        self.kx[g.nx // 2] = 0.0
        self.ky[g.ny // 2] = 0.0
        self.D1 = one_sided_matrix(g.nz + 1, g.hz, 1)
        self.D2 = one_sided_matrix(g.nz + 1, g.hz, 2)

    def d(self, a, ax):
        if ax == 2:
            return a @ self.D1.T
        k = self.kx[:, None, None] if ax == 0 else self.ky[None, :, None]
        return _lateral_d(a, k, ax - 3)

    def lap(self, a):
        lat = np.fft.ifft2(-self.k2 * np.fft.fft2(a, axes=(-3, -2)), axes=(-3, -2))
        return np.real(lat) + a @ self.D2.T


def _grad_p2(U, g, dt):
    """``grad p2 = -d_t u - u.grad u + Lap u - grad p1_{u(x)u}`` at the last ladder node."""
    ops = _SlabOps(g)
    u = U[-1]
    dtu = (11 * U[-1] - 18 * U[-2] + 9 * U[-3] - 2 * U[-4]) / (6 * dt)
    adv = np.stack([sum(u[j] * ops.d(u[i], j) for j in range(3)) for i in range(3)])
    gp = -dtu - adv + np.stack([ops.lap(u[i]) for i in range(3)])
    p1 = pressure_half(tensor_product(Field(g, 1, u)), bmo_cube=None, decay_tol=None)
    gp2 = gp - p1.grad.values
    harm = sum(ops.d(gp2[i], i) for i in range(3))
    return gp2, harm


@dataclass
class PressureSplitReport:
    harmonicity: float              # max |div grad p2| away from the walls
    truncation: float               # coarse/fine difference of the same quantity
    log_ratios: list                # sup_x' |grad p2| / ln(2 + 1/x3) per ladder rung
    log_constants: list             # running max over the rungs
    top_sup: list                   # (x3, sup_x' |grad p2|) over the top quartile
    harmonic_ok: bool
    log_ok: bool
    monotone_ok: bool

    @property
    def passed(self) -> bool:
        return self.harmonic_ok and self.log_ok and self.monotone_ok

    def to_csv(self) -> str:
        rows = [("harmonicity", 0, self.harmonicity), ("truncation", 0, self.truncation)]
        rows += [("log_ratio", j + 1, v) for j, v in enumerate(self.log_ratios)]
        rows += [("top_sup", x3, v) for x3, v in self.top_sup]
        return _csv(["quantity", "position", "value"], rows)


def check_pressure_split(u: Field, problem: MildProblem, residual: Optional[float] = None,
                         max_residual: float = 1e-6, margin: int = 4, ladder_levels: int = 5,
                         n_lateral: int = 16, seed: int = 0) -> PressureSplitReport:
    """Split the pressure of a converged mild solution at the final ladder time.

    ``grad p`` comes from the momentum balance (4-point backward differences
    in time, spectral laterally, one-sided eighth-order differences in x3) and
    ``grad p1`` from :func:`pressure_half` of ``u (x) u``. The truncation
    estimate repeats the harmonicity computation on every other node and
    takes the largest coarse/fine difference over the interior.
    """
    g = problem.grid
    if u.time_axis is None or not np.allclose(u.time_axis, problem.ladder):
        raise ValueError("u must be sampled on the problem ladder")
    if len(problem.ladder) < 4:
        raise ValueError("the time derivative needs at least 4 ladder nodes")
    if residual is None:
        residual = mild_residual(u, problem)["residual"]
    if residual > max_residual:
        raise ValueError(f"mild residual {residual:.3g} too large to trust finite differences")
    dt = problem.ladder[1] - problem.ladder[0]
    U = u.values
    gp2, harm = _grad_p2(U, g, dt)
    inner = slice(margin, g.nz + 1 - margin)
    defect = float(np.max(np.abs(harm[..., inner])))
    if g.nx % 2 or g.ny % 2 or g.nz % 2:
        raise ValueError("the coarse/fine pair needs even node counts")
    gc = SlabGrid(g.L, g.H, g.nx // 2, g.ny // 2, g.nz // 2)
    _, harm_c = _grad_p2(U[:, :, ::2, ::2, ::2], gc, dt)
    ci = slice(margin // 2, gc.nz + 1 - margin // 2)
    trunc = float(np.max(np.abs(harm_c[..., ci] - harm[::2, ::2, ::2][..., ci])))

    lat = qmc.Halton(d=2, scramble=True, seed=seed).random(n_lateral)
    lat = (lat - 0.5) * g.L
    ratios = []
    for j in range(1, ladder_levels + 1):
        x3 = 2.0 ** -j
        pts = np.column_stack([lat, np.full(n_lateral, x3)])
        v = np.sqrt(np.sum(sample_at(gp2, g, pts) ** 2, axis=0)).max()
        ratios.append(float(v / np.log(2 + 1 / x3)))
    consts = list(np.maximum.accumulate(ratios))

    mag = np.sqrt(np.sum(gp2 ** 2, axis=0)).max(axis=(0, 1))
    k0 = int(np.floor(0.75 * g.nz))
    top = [(float(g.z[k]), float(mag[k])) for k in range(k0, g.nz + 1)]
    tv = np.array([v for _, v in top])
    monotone = bool(np.all(tv == 0) or np.all(np.diff(tv) < 0))
    return PressureSplitReport(defect, trunc, ratios, consts, top,
                               harmonic_ok=defect <= 10 * trunc,
                               log_ok=settled(consts), monotone_ok=monotone)


# --------------------------------------------------------------------------
# slab decomposition of the singular integral

def slab_power_field(grid: SlabGrid, p: float, L_slab: float = 1.0, alpha: float = 0.9,
                     lateral: Optional[float] = None) -> Field:
    """Scalar whole-space test field for the slab decomposition.

    Inside the slab: ``|x3|^(-alpha/p)`` (locally in L^p for alpha < 1, the
    profile that saturates the uniform L^p norm) over the lateral square of
    half side ``lateral``; outside: one Gaussian bump, so that h1 is nonzero.
    """
    X, Y, Z = grid.mesh(doubled=True)
    lateral = grid.L - 1.0 if lateral is None else lateral
    inside = (np.abs(Z) < L_slab) & (np.maximum(np.abs(X), np.abs(Y)) < lateral)
    a = np.where(inside, np.abs(Z + 1e-3) ** (-alpha / p), 0.0)
    a = a + np.exp(-((X - 1) ** 2 + Y ** 2 + (Z - L_slab - 1.2) ** 2) / 0.3)
    return Field(grid, 0, a[None], extended=True)


@dataclass
class SiopReport:
    p: float
    reconstruction: float           # max |h1 + h2 - Tg| / max |Tg|
    exponent: float
    expected: float
    N: list
    terms: list
    recon_ok: bool
    exponent_ok: bool

    @property
    def passed(self) -> bool:
        return self.recon_ok and self.exponent_ok

    def to_csv(self) -> str:
        rows = [("reconstruction", 0, self.reconstruction), ("exponent", 0, self.exponent),
                ("expected", 0, self.expected)]
        rows += [("annulus", int(n), v) for n, v in zip(self.N, self.terms)]
        return _csv(["quantity", "N", "value"], rows)


def check_siop(grid: SlabGrid, ps=(2.0, 4.0), L_slab: float = 1.0, exponent_tol: float = 0.15,
               recon_tol: float = 1e-10, alpha: float = 0.9) -> list:
    """Reconstruction ``h1 + h2 = Tg`` and the annulus decay exponent, per p."""
    out = []
    for p in ps:
        d = siop_decompose(slab_power_field(grid, p, L_slab, alpha), L_slab, p)
        scale = max(float(np.abs(d.h1.values + d.h2.values).max()), 1e-300)
        rec = d.reconstruction_error / scale
        ex, want = d.annulus["exponent"], d.annulus["expected"]
        out.append(SiopReport(float(p), rec, float(ex), float(want), list(d.annulus["N"]),
                              list(d.annulus["terms"]), rec <= recon_tol,
                              bool(np.isfinite(ex) and abs(ex - want) <= exponent_tol)))
        log.info("siop p=%g: reconstruction %.2e, exponent %.3f (expected %.3f)", p, rec, ex, want)
    return out
