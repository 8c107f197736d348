"""Point evaluators for the heat, Laplace and half-space Stokes kernels.

Conventions: ``E = -1/(4 pi |x|)`` so that ``Laplace E = delta``; the whole
space potential ``Phi`` is the decaying solution of ``Laplace Phi = Gamma``,
``Phi = -erf(r / (2 sqrt t)) / (4 pi r)``. Derivatives are passed as tuples of
axis indices, e.g. ``dx=(0, 2)`` is d^2/dx1 dx3; ``dy`` differentiates in the
second (source) point.

Radial kernels are differentiated exactly through the level coefficients
``D_n = ((1/r) d/dr)^n f``: a derivative along the index list ``I`` is the sum
over partial pairings of ``I`` of ``D_{|I| - #pairs}`` times the Kronecker
deltas of the pairs times the coordinates of the unpaired indices.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import erfc, erfcx, gamma as gamma_fn, gammainc, ndtr

C3 = (4 * np.pi) ** -1.5


@dataclass(frozen=True)
class QuadratureSpec:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-14
    max_refinements: int = 8
    singular_split_radius: float = 0.0

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.singular_split_radius < 0:
            raise ValueError("singular_split_radius must be >= 0")
        if self.max_refinements < 1:
            raise ValueError("max_refinements must be >= 1")

    def scaled(self, factor: float) -> "QuadratureSpec":
        return QuadratureSpec(self.rel_tol * factor, self.abs_tol * factor,
                              self.max_refinements, self.singular_split_radius)


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelQuery:
    """Arguments of a kernel component: points (any leading shape), time, derivatives."""
    x: np.ndarray
    y: np.ndarray
    t: float
    dx: tuple = ()
    dy: tuple = ()
    dt: int = 0
    comp: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "dx", tuple(self.dx))
        object.__setattr__(self, "dy", tuple(self.dy))
        object.__setattr__(self, "comp", tuple(self.comp))
        if not np.all(np.asarray(self.t) > 0):
            raise ValueError("t must be > 0")
        if len(self.dx) > 2 or len(self.dy) > 2 or self.dt not in (0, 1):
            raise ValueError("derivative orders are limited to 2 in space, 1 in time")
        if any(i not in (0, 1, 2) for i in self.dx + self.dy + self.comp):
            raise ValueError("indices must be 0, 1 or 2")
        if self.x.shape[-1:] != (3,) or self.y.shape[-1:] != (3,):
            raise ValueError("points must have a trailing axis of length 3")


# --------------------------------------------------------------------------
# radial derivative machinery

@lru_cache(maxsize=None)
def _pairings(idx: tuple) -> tuple:
    """Partial pairings of ``idx`` with equal partners: ``(npairs, singles)`` pairs."""
    if not idx:
        return ((0, ()),)
    first, rest = idx[0], idx[1:]
    out = [(n, (first,) + s) for n, s in _pairings(rest)]
    for k, other in enumerate(rest):
        if other == first:
            for n, s in _pairings(rest[:k] + rest[k + 1:]):
                out.append((n + 1, s))
    return tuple(out)


def radial_derivative(levels, z: np.ndarray, idx) -> np.ndarray:
    """``d_I f(z)`` for radial ``f`` given ``levels(n) = D_n`` evaluated at ``z``."""
    idx = tuple(idx)
    cache = {}
    out = 0.0
    for npairs, singles in _pairings(idx):
        n = len(idx) - npairs
        if n not in cache:
            cache[n] = levels(n)
        term = cache[n]
        for s in singles:
            term = term * z[..., s]
        out = out + term
    return np.asarray(out) * np.ones(z.shape[:-1])


def _laplacian_indices(idx):
    return [tuple(idx) + (k, k) for k in range(3)]


def gamma_levels(z, t):
    r2 = np.sum(z * z, axis=-1)
    g = (4 * np.pi * t) ** -1.5 * np.exp(-r2 / (4 * t))
    return lambda n: (-1.0 / (2 * t)) ** n * g


def _phi_n(n: int, x: np.ndarray) -> np.ndarray:
    """``x^-a * lower_gamma(a, x)`` with ``a = n + 1/2`` (finite at x = 0)."""
    a = n + 0.5
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 0.5
    if np.any(small):
        k = np.arange(30)
        coef = (-1.0) ** k / (np.array([factorial(i) for i in k], dtype=float) * (a + k))
        out[small] = np.polynomial.polynomial.polyval(x[small], coef)
    big = ~small
    if np.any(big):
        xb = x[big]
        out[big] = gamma_fn(a) * gammainc(a, xb) * xb ** (-a)
    return out


def phi_levels(z, t):
    x = np.sum(z * z, axis=-1) / (4 * t)
    return lambda n: -(-0.5) ** n * C3 * t ** (-(n + 0.5)) * _phi_n(n, x)


def laplace_levels(z):
    q = np.sum(z * z, axis=-1) / 4
    return lambda n: -(-0.5) ** n * C3 * gamma_fn(n + 0.5) * q ** (-(n + 0.5))


def gamma_d(z, t, idx=(), dt=0):
    """Derivative of ``Gamma(z, t)`` with respect to its argument."""
    if dt:
        return sum(gamma_d(z, t, j) for j in _laplacian_indices(idx))
    return radial_derivative(gamma_levels(z, t), z, idx)


def phi_d(z, t, idx=(), dt=0):
    """Derivative of the whole-space ``Phi(z, t)`` (``d_t Phi = Gamma``)."""
    if dt:
        return gamma_d(z, t, idx)
    return radial_derivative(phi_levels(z, t), z, idx)


def laplace_d(z, idx=()):
    return radial_derivative(laplace_levels(z), z, idx)


def _check_t(t):
    if not np.all(np.asarray(t) > 0):
        raise ValueError("t must be > 0")


# --------------------------------------------------------------------------
# whole-space kernels

def heat_kernel(q: KernelQuery):
    """``Gamma(x - y, t)`` and its exact derivatives."""
    idx = q.dx + q.dy
    sign = (-1.0) ** len(q.dy)
    return sign * gamma_d(q.x - q.y, q.t, idx, q.dt)


def laplace_fundamental(x, deriv=()):
    """``E(x) = -1/(4 pi |x|)`` and its derivatives."""
    x = np.asarray(x, dtype=float)
    if np.any(np.sum(x * x, axis=-1) == 0):
        raise ValueError("E is singular at x = 0")
    return laplace_d(x, tuple(deriv))


def reflected_poisson_kernel(y, z, sign: int, deriv_y=()):
    """``N(+-)(y, z) = E(y - z) +- E(y - z*)``."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    zs = z * np.array([1.0, 1.0, -1.0])
    if np.any(np.all(y == z, axis=-1)) or np.any(np.all(y == zs, axis=-1)):
        raise ValueError("coincident singular points")
    deriv_y = tuple(deriv_y)
    return laplace_d(y - z, deriv_y) + sign * laplace_d(y - zs, deriv_y)


def potential_ws(x, t, deriv=(), dt=0):
    """Decaying solution ``Phi(x, t)`` of ``Laplace Phi = Gamma``."""
    _check_t(t)
    return phi_d(np.asarray(x, dtype=float), t, tuple(deriv), dt)


def kernel_ws(q: KernelQuery):
    """``K_mjs = delta_mj d_s Gamma - d^3 Phi / dy_m dy_j dy_s`` at ``(x - y, t)``.

    ``q.comp = (m, j, s)``; extra x/y derivatives act on the whole kernel.
    """
    _check_t(q.t)
    m, j, s = q.comp
    z = q.x - q.y
    extra = q.dx + q.dy
    sign = (-1.0) ** len(q.dy)
    val = phi_d(z, q.t, (m, j, s) + extra, q.dt)
    if m == j:
        val = val - gamma_d(z, q.t, (s,) + extra, q.dt)
    return sign * val


# --------------------------------------------------------------------------
# half-space: the heat part G1

REFLECT = np.array([1.0, 1.0, -1.0])


def _image_sign(dy):
    return (-1.0) ** sum(1 for i in dy if i != 2)


def green_g1(q: KernelQuery):
    """``G1_ij = delta_ij (Gamma(x - y, t) - Gamma(x - y*, t))`` with exact derivatives."""
    _check_t(q.t)
    i, j = q.comp
    if i != j:
        return np.zeros(np.broadcast_shapes(q.x.shape, q.y.shape)[:-1])
    idx = q.dx + q.dy
    direct = (-1.0) ** len(q.dy) * gamma_d(q.x - q.y, q.t, idx, q.dt)
    image = _image_sign(q.dy) * gamma_d(q.x - q.y * REFLECT, q.t, idx, q.dt)
    return direct - image


# --------------------------------------------------------------------------
# half-space: the boundary correction G2
#
# Writing E = -int_0^inf Gamma(., s) ds and convolving the lateral Gaussians,
# with xi' = x' - y', a = x3, b = y3, T = s + t:
#   G2_ab = -4 int_0^inf d_a d_b Gamma2(xi', T) g(s) ds,
#   G2_3b = -4 int_0^inf d_b Gamma2(xi', T) I3(s) ds,
# where g(s) = int_0^a Gamma1(a - z, s) Gamma1(z + b, t) dz and I3 is the same
# integral with the first factor differentiated. Both are closed form.
# The s-integral is done by the trapezoid rule in ln s.

from numpy.polynomial.hermite_e import hermeval

DEFAULT_SPEC = QuadratureSpec()


def _g1(c, tau):
    return (4 * np.pi * tau) ** -0.5 * np.exp(-c * c / (4 * tau))


def _lat1d(xi, T, n):
    """``d^n/dxi^n`` of the 1-D heat kernel ``Gamma1(xi, T)``."""
    g = _g1(xi, T)
    if n == 0:
        return g
    coef = np.zeros(n + 1)
    coef[n] = 1.0
    return (-1) ** n * (2 * T) ** (-n / 2) * hermeval(xi / np.sqrt(2 * T), coef) * g


def _normal_factor(kind, a, b, s, t, na, nb):
    T = s + t
    c = a + b
    sig = np.sqrt(2 * s * t / T)
    B = c * np.sqrt(s) / np.sqrt(2 * t * T)
    Aa = (s * b - t * a) / (T * sig)
    P = np.where(Aa >= 0, ndtr(-Aa) - ndtr(-B), ndtr(B) - ndtr(Aa))
    g = _g1(c, T) * P
    g0s, gcs = _g1(0.0, s), _g1(c, t)
    gas, gbt = _g1(a, s), _g1(b, t)
    Q = g0s * gcs - gas * gbt
    if kind == "g":
        if na == 0 and nb == 0:
            return g
        if na == 1:
            return -c / (2 * T) * g + (s / T) * g0s * gcs + (t / T) * gas * gbt
        return -c / (2 * T) * g + (s / T) * Q
    if na == 0 and nb == 0:
        return -c / (2 * T) * g - (t / T) * Q
    gct_p = -c / (2 * t) * gcs
    if na == 1:
        dg = -c / (2 * T) * g + (s / T) * g0s * gcs + (t / T) * gas * gbt
        dQ = g0s * gct_p - (-a / (2 * s)) * gas * gbt
    else:
        dg = -c / (2 * T) * g + (s / T) * Q
        dQ = g0s * gct_p - gas * (-b / (2 * t)) * gbt
    return -g / (2 * T) - c / (2 * T) * dg - (t / T) * dQ


def _g2_plan(i, beta, dx, dy):
    lat = [i, beta] if i != 2 else [beta]
    kind = "g" if i != 2 else "I3"
    sign, na, nb = 1.0, 0, 0
    for d in dx:
        if d == 2:
            na += 1
        else:
            lat.append(d)
    for d in dy:
        if d == 2:
            nb += 1
        else:
            lat.append(d)
            sign = -sign
    return lat.count(0), lat.count(1), kind, na, nb, sign


def _w_range(t, a, b, rho2):
    sc = np.concatenate([np.atleast_1d(v).ravel() for v in
                         (np.asarray(t, float), a * a, b * b, (a + b) ** 2, rho2)])
    sc = sc[sc > 0]
    return np.log(sc.min() * 1e-30), np.log(sc.max() * 1e8)


def _nested_trapezoid(fsum, wlo, whi, spec, dw0=0.5):
    """Trapezoid rule on the lattice ``wlo + k dw``, halving dw until converged.

    ``fsum(w)`` returns ``(sum_k f(w_k), sum_k |f(w_k)|)``; nodes are nested.
    The stopping test includes a round-off floor from the absolute sum.
    """
    dw = dw0
    K = int(np.ceil((whi - wlo) / dw))
    S, Sa = fsum(wlo + dw * np.arange(1, K))
    e, ea = fsum(np.array([wlo, wlo + K * dw]))
    S, Sa = S + 0.5 * e, Sa + 0.5 * ea
    I_old = dw * S
    for _ in range(spec.max_refinements):
        dS, dSa = fsum(wlo + dw * (np.arange(K) + 0.5))
        S, Sa = S + dS, Sa + dSa
        dw, K = dw / 2, 2 * K
        I_new = dw * S
        err = np.abs(I_new - I_old)
        floor = np.maximum(spec.abs_tol, 1e-13 * dw * Sa)
        if np.all(err <= np.maximum(floor, spec.rel_tol * np.abs(I_new))):
            return I_new
        I_old = I_new
    raise QuadratureError(f"G2 s-quadrature did not converge (max err {np.max(err):.3e})")


def _g2_points(xi1, xi2, a, b, t, plan, spec, chunk=1024):
    n1, n2, kind, na, nb, sign = plan
    out = np.empty(xi1.shape)
    for lo in range(0, xi1.size, chunk):
        sl = slice(lo, lo + chunk)
        p1, p2, pa, pb = xi1[sl, None], xi2[sl, None], a[sl, None], b[sl, None]
        wlo, whi = _w_range(t, pa, pb, p1 ** 2 + p2 ** 2)

        def fsum(w):
            s = np.exp(w)[None, :]
            T = s + t
            val = _lat1d(p1, T, n1) * _lat1d(p2, T, n2)
            val = val * _normal_factor(kind, pa, pb, s, t, na, nb) * s
            return val.sum(axis=1), np.abs(val).sum(axis=1)

        out[sl] = _nested_trapezoid(fsum, wlo, whi, spec)
    return -4.0 * sign * out


def _fd_weights(h, centred):
    if centred:
        return np.array([-2, -1, 1, 2]) * h, np.array([1, -8, 8, -1]) / (12 * h)
    return np.arange(5) * h, np.array([-25, 48, -36, 16, -3]) / (12 * h)


def green_g2(q: KernelQuery, spec: QuadratureSpec = DEFAULT_SPEC):
    """Boundary-correction part ``G2_ij(x, y, t)``; the ``i3`` column is exactly 0.

    Lateral derivatives and one normal derivative (in x3 or y3) are exact under
    the integral; a second normal derivative and ``d/dt`` use 4th-order
    finite differences (one-sided next to the boundary).
    """
    _check_t(q.t)
    i, beta = q.comp
    x, y = np.broadcast_arrays(q.x, q.y)
    shape = x.shape[:-1]
    if beta == 2:
        return np.zeros(shape)
    if np.any(x[..., 2] < 0) or np.any(y[..., 2] < 0):
        raise ValueError("points must lie in the closed upper half space")
    if q.dt:
        h = 0.01 * q.t
        off, w = _fd_weights(h, True)
        return sum(wk * green_g2(KernelQuery(x, y, q.t + o, q.dx, q.dy, 0, q.comp), spec)
                   for o, wk in zip(off, w))
    na, nb = q.dx.count(2), q.dy.count(2)
    if na + nb >= 2:
        which = "x" if na >= 1 else "y"
        if which == "x":
            dx = list(q.dx); dx.remove(2); dx, dy = tuple(dx), q.dy
            base = x
        else:
            dy = list(q.dy); dy.remove(2); dx, dy = q.dx, tuple(dy)
            base = y
        h = 1e-3 * np.sqrt(q.t)
        centred = bool(np.all(base[..., 2] >= 2 * h))
        off, w = _fd_weights(h, centred)
        total = 0.0
        for o, wk in zip(off, w):
            shifted = base + o * np.array([0.0, 0.0, 1.0])
            xx, yy = (shifted, y) if which == "x" else (x, shifted)
            total = total + wk * green_g2(KernelQuery(xx, yy, q.t, dx, dy, 0, q.comp), spec)
        return total
    plan = _g2_plan(i, beta, q.dx, q.dy)
    xi = (x - y).reshape(-1, 3)
    a = x[..., 2].ravel()
    b = y[..., 2].ravel()
    return _g2_points(xi[:, 0], xi[:, 1], a, b, q.t, plan, spec).reshape(shape)


def green_full(q: KernelQuery, spec: QuadratureSpec = DEFAULT_SPEC):
    """``G = G1 + G2``."""
    return green_g1(q) + green_g2(q, spec)


def green_g2_grid(x, y1, y2, b, t, comp, dy=(), spec: QuadratureSpec = DEFAULT_SPEC):
    """``G2_comp(x, (y1_i, y2_j, b_k), t)`` on a tensor grid of sources, shape (n1, n2, nb).

    The s-integrand separates into two lateral 1-D factors and a normal factor,
    so each quadrature node costs one rank-1 tensor update.
    """
    i, beta = comp
    y1, y2, b = (np.asarray(v, dtype=float) for v in (y1, y2, b))
    if beta == 2:
        return np.zeros((y1.size, y2.size, b.size))
    n1, n2, kind, na, nb, sign = _g2_plan(i, beta, (), tuple(dy))
    if na + nb > 1:
        raise ValueError("green_g2_grid supports one normal derivative")
    x = np.asarray(x, dtype=float)
    xi1, xi2, a = x[0] - y1, x[1] - y2, float(x[2])
    rho2 = np.array([np.min(xi1 ** 2) + np.min(xi2 ** 2), np.max(xi1 ** 2) + np.max(xi2 ** 2)])
    wlo, whi = _w_range(t, np.array([a]), b, rho2)

    def fsum(w):
        s = np.exp(w)[None, :]
        T = s + t
        L1 = _lat1d(xi1[:, None], T, n1)
        L2 = _lat1d(xi2[:, None], T, n2)
        N = _normal_factor(kind, a, b[:, None], s, t, na, nb) * s
        lat = (L1[:, None, :] * L2[None, :, :]).reshape(-1, N.shape[1])
        shape = (L1.shape[0], L2.shape[0], N.shape[0])
        return (lat @ N.T).reshape(shape), (np.abs(lat) @ np.abs(N).T).reshape(shape)

    return -4.0 * sign * _nested_trapezoid(fsum, wlo, whi, spec)


# --------------------------------------------------------------------------
# half-space potentials Phi_mn and the kernel K_mjs
#
# Laterally Fourier transformed, the reflected Poisson kernels are
#   N(+-)^(kappa; y3, z3) = -(exp(-kappa|y3 - z3|) +- exp(-kappa(y3 + z3))) / (2 kappa),
# with the kappa = 0 modes max(y3, z3) (Neumann, up to a constant) and
# -min(y3, z3) (Dirichlet). The x3 integral uses Gauss-Legendre panels with
# breakpoints at the targets. Values of the Neumann potential carry the
# truncation constant of the lateral box; derivatives do not depend on it.

def z_panels(breaks, zmax, hmax, order=8):
    """Composite Gauss-Legendre nodes/weights on ``[0, zmax]`` honouring ``breaks``."""
    pts = np.unique(np.clip(np.concatenate([[0.0, zmax], np.ravel(breaks)]), 0.0, zmax))
    xg, wg = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for lo, hi in zip(pts[:-1], pts[1:]):
        m = max(1, int(np.ceil((hi - lo) / hmax)))
        edges = np.linspace(lo, hi, m + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            nodes.append(0.5 * (b - a) * xg + 0.5 * (a + b))
            weights.append(0.5 * (b - a) * wg)
    return np.concatenate(nodes), np.concatenate(weights)


def neumann_dirichlet_hat(kappa, y3, z3, sign, dy3=0):
    """``N(sign)^`` (or its y3-derivative) on broadcast arrays; kappa = 0 handled."""
    kappa, y3, z3 = np.broadcast_arrays(np.asarray(kappa, float), y3, z3)
    out = np.empty(kappa.shape)
    zero = kappa == 0
    k = np.where(zero, 1.0, kappa)
    d = np.abs(y3 - z3)
    e1, e2 = np.exp(-k * d), np.exp(-k * (y3 + z3))
    if dy3 == 0:
        val = -(e1 + sign * e2) / (2 * k)
        v0 = np.maximum(y3, z3) if sign > 0 else -np.minimum(y3, z3)
    else:
        val = (np.sign(y3 - z3) * e1 + sign * e2) / 2
        v0 = (y3 > z3).astype(float) if sign > 0 else -(y3 < z3).astype(float)
    out[...] = np.where(zero, v0, val)
    return out


def lateral_wavenumbers(n, h):
    k = 2 * np.pi * np.fft.fftfreq(n, d=h)
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    return K1, K2, np.hypot(K1, K2)


def _green_on_grid(x, z1, z2, zq, t, comp, dz3=False, spec=DEFAULT_SPEC):
    """``G_comp(x, z, t)`` (or its z3-derivative) on the tensor grid z1 x z2 x zq."""
    m, n = comp
    dy = (2,) if dz3 else ()
    out = green_g2_grid(x, z1, z2, zq, t, comp, dy=dy, spec=spec)
    if m == n:
        Z = np.stack(np.meshgrid(z1, z2, zq, indexing="ij"), axis=-1)
        out = out + green_g1(KernelQuery(x, Z, t, dy=dy, comp=comp))
    return out


class HalfSpacePotential:
    """``Phi_mn(x, ., t)`` near the level ``y3`` on a periodic lateral box around x'.

    Neumann (``n < 3``) or Dirichlet (``n = 3``) potential of ``G_mn(x, ., t)``.
    """

    def __init__(self, x, t, comp, y3, spec=DEFAULT_SPEC, half_width=None, h=None,
                 centre=None):
        _check_t(t)
        self.x = np.asarray(x, dtype=float)
        self.t, self.comp, self.y3 = float(t), tuple(comp), float(y3)
        m, n = self.comp
        self.sign = -1 if n == 2 else 1
        self.zero = n == 2 and m != 2       # G_m3 = 0 for m != 3
        rt = np.sqrt(t)
        Lb = half_width or 8.0 * max(1.0, rt)
        h = h or min(0.25, rt / 2.5)
        nl = 2 * int(np.ceil(Lb / h))
        if nl > 512:
            raise QuadratureError("lateral resolution request too large; increase t")
        c = self.x[:2] if centre is None else np.asarray(centre, float)
        self.h, self.nl = h, nl
        self.z1 = c[0] - Lb + h * np.arange(nl)
        self.z2 = c[1] - Lb + h * np.arange(nl)
        self.K1, self.K2, self.kappa = lateral_wavenumbers(nl, h)
        if self.zero:
            return
        a = self.x[2]
        zmax = max(a, self.y3) + 14 * rt + 2.0
        breaks = [self.y3, a] + list(a + rt * np.arange(-4, 5))
        self.zq, self.wq = z_panels(breaks, zmax, min(0.5, rt / 2))
        src = _green_on_grid(self.x, self.z1, self.z2, self.zq, t, comp, spec=spec)
        self.src_hat = self._hat(src)
        lev = np.array([self.y3])
        self.at_y3 = self._hat(_green_on_grid(self.x, self.z1, self.z2, lev, t, comp, spec=spec))[..., 0]
        self.at_y3_d = self._hat(_green_on_grid(self.x, self.z1, self.z2, lev, t, comp,
                                                dz3=True, spec=spec))[..., 0]
        kap = self.kappa[..., None]
        N0 = neumann_dirichlet_hat(kap, self.y3, self.zq, self.sign) * self.wq
        N1 = neumann_dirichlet_hat(kap, self.y3, self.zq, self.sign, dy3=1) * self.wq
        self.level = [np.sum(N0 * self.src_hat, axis=-1), np.sum(N1 * self.src_hat, axis=-1)]
        k2 = self.kappa ** 2
        self.level.append(k2 * self.level[0] + self.at_y3)
        self.level.append(k2 * self.level[1] + self.at_y3_d)

    def _hat(self, f):
        phase = np.exp(-1j * (self.K1 * self.z1[0] + self.K2 * self.z2[0]))
        return self.h ** 2 * np.fft.fft2(f, axes=(0, 1)) * phase[..., None]

    def __call__(self, y_lat, deriv=()):
        """``d^deriv Phi_mn`` at ``(y_lat, y3)``; up to three derivatives."""
        if self.zero:
            return 0.0
        deriv = tuple(deriv)
        if len(deriv) > 3:
            raise ValueError("at most three derivatives")
        coef = self.level[deriv.count(2)]
        for d in deriv:
            if d == 0:
                coef = coef * 1j * self.K1
            elif d == 1:
                coef = coef * 1j * self.K2
        ph = np.exp(1j * (self.K1 * y_lat[0] + self.K2 * y_lat[1]))
        area = (self.nl * self.h) ** 2
        return float(np.real(np.sum(coef * ph)) / area)


def potential_hs(x, y, t, comp, deriv_y=(), spec: QuadratureSpec = DEFAULT_SPEC, **box):
    """``Phi_mn(x, y, t) = int N(+-)(y, z) G_mn(x, z, t) dz`` (Neumann for n < 3)."""
    y = np.asarray(y, dtype=float)
    if y[2] < 0 or np.asarray(x)[2] < 0:
        raise ValueError("points must lie in the closed upper half space")
    return HalfSpacePotential(x, t, comp, y[2], spec, **box)(y[:2], deriv_y)


def kernel_hs(q: KernelQuery, spec: QuadratureSpec = DEFAULT_SPEC, path="simplified", **box):
    """``K_mjs = d^3 Phi_mj / dy_i dy_i dy_s - d^3 Phi_mn / dy_n dy_j dy_s``.

    ``path="simplified"`` replaces the first term by ``dG_mj/dy_s``;
    ``path="direct"`` differentiates the potential three times.
    """
    m, j, s = q.comp
    x, y = q.x, q.y
    if x.ndim != 1:
        raise ValueError("kernel_hs evaluates one point pair at a time")
    pots = {}

    def pot(n):
        if n not in pots:
            pots[n] = HalfSpacePotential(x, q.t, (m, n), y[2], spec, **box)
        return pots[n]

    second = sum(pot(n)(y[:2], (n, j, s)) for n in range(3))
    if path == "simplified":
        first = green_full(KernelQuery(x, y, q.t, dy=(s,), comp=(m, j)), spec)
    elif path == "direct":
        first = sum(pot(j)(y[:2], (i, i, s)) for i in range(3))
    else:
        raise ValueError("path must be 'simplified' or 'direct'")
    return float(first - second)


_NONZERO_G = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2))


def _green_part_on_grid(x, z1, z2, zq, t, comp, dz3, spec, parts):
    m, n = comp
    dy = (2,) if dz3 else ()
    out = np.zeros((len(z1), len(z2), len(zq)))
    if parts in ("full", "g2"):
        out += green_g2_grid(x, z1, z2, zq, t, comp, dy=dy, spec=spec)
    if m == n and parts in ("full", "g1"):
        Z = np.stack(np.meshgrid(z1, z2, zq, indexing="ij"), axis=-1)
        out += green_g1(KernelQuery(x, Z, t, dy=dy, comp=comp))
    return out


def kernel_hs_table(x, t, y3, spec: QuadratureSpec = DEFAULT_SPEC, half_width=None, h=None,
                    depth=12.0, parts="full", potential_only=False):
    """``K_mjs(x, (y1, y2, y3), t)`` for all components on a lateral grid around x'.

    Same construction as :func:`kernel_hs` (simplified path) but the sources
    ``G_mn(x, ., t)`` are tabulated once and the potentials are formed at all
    levels ``y3`` together. ``parts`` selects the kernel generated by G, G1 or
    G2; ``potential_only`` drops the ``d_s G_mj`` term, leaving the part built
    from second derivatives of the Poisson potentials. Returns ``(y1, y2, K)`` with K of shape ``(3, 3, 3, n, n, len(y3))``;
    values within ``half_width / 2`` of x' are free of box effects to ~1e-5.
    """
    _check_t(t)
    if parts not in ("full", "g1", "g2"):
        raise ValueError("parts must be 'full', 'g1' or 'g2'")
    x = np.asarray(x, dtype=float)
    y3 = np.atleast_1d(np.asarray(y3, dtype=float))
    rt = np.sqrt(t)
    Lb = half_width or 8.0 * max(1.0, rt)
    h = h or min(0.25, rt / 2.5)
    nl = 2 * int(np.ceil(Lb / h))
    if nl > 512:
        raise QuadratureError("lateral resolution request too large; increase t")
    z1 = x[0] - Lb + h * np.arange(nl)
    z2 = x[1] - Lb + h * np.arange(nl)
    K1, K2, kap = lateral_wavenumbers(nl, h)
    phase = np.exp(-1j * (K1 * z1[0] + K2 * z2[0]))[..., None]

    def hat(f):
        return h ** 2 * np.fft.fft2(f, axes=(0, 1)) * phase

    # G(x, z, t) is Gaussian in z3 beyond x3 + a few sqrt(t)
    zmax = x[2] + depth * rt
    breaks = np.concatenate([y3[y3 < zmax], [x[2]], x[2] + rt * np.arange(-4, 5)])
    zq, wq = z_panels(breaks, zmax, min(0.5, rt / 2))
    live = [c for c in _NONZERO_G if not (parts == "g2" and c == (2, 2))]
    G, dG = {}, {}
    for comp in live:
        G[comp] = hat(_green_part_on_grid(x, z1, z2, y3, t, comp, False, spec, parts))
        dG[comp] = hat(_green_part_on_grid(x, z1, z2, y3, t, comp, True, spec, parts))

    # reflected Poisson potentials, grouped by |k| (Neumann for n < 3, Dirichlet for n = 3)
    ku, inv = np.unique(np.round(kap, 12).ravel(), return_inverse=True)
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(ku) + 1))
    groups = {s: [c for c in live if (c[1] == 2) == (s < 0)] for s in (1, -1)}
    pot = {}
    for sgn, comps in groups.items():
        if not comps:
            continue
        S = np.empty((nl * nl, len(comps), len(zq)), dtype=complex)
        for c_i, comp in enumerate(comps):
            S[:, c_i] = hat(_green_part_on_grid(x, z1, z2, zq, t, comp, False, spec,
                                                parts)).reshape(nl * nl, -1)
        out = np.empty((len(comps), 2, nl * nl, len(y3)), dtype=complex)
        for u, kv in enumerate(ku):
            idx = order[bounds[u]:bounds[u + 1]]
            N0 = neumann_dirichlet_hat(kv, y3[:, None], zq[None, :], sgn) * wq
            N1 = neumann_dirichlet_hat(kv, y3[:, None], zq[None, :], sgn, dy3=1) * wq
            Si = S[idx]
            out[:, 0, idx] = np.moveaxis(Si @ N0.T, 1, 0)
            out[:, 1, idx] = np.moveaxis(Si @ N1.T, 1, 0)
        del S, Si
        for c_i, comp in enumerate(comps):
            pot[comp] = out[c_i].reshape(2, nl, nl, -1)

    ik = (1j * K1[..., None], 1j * K2[..., None])
    k2 = kap[..., None] ** 2

    def d(comp, idx):
        # d3^0, d3^1 tabulated; d3^2 = k^2 L0 + G, d3^3 = k^2 L1 + d3 G
        q = idx.count(2)
        L = pot[comp][q % 2]
        c = L if q < 2 else k2 * L + (G if q == 2 else dG)[comp]
        for a in idx:
            if a != 2:
                c = c * ik[a]
        return c

    K = np.zeros((3, 3, 3, nl, nl, len(y3)))
    for m in range(3):
        for j in range(3):
            for s in range(3):
                acc = np.zeros((nl, nl, len(y3)), dtype=complex)
                if (m, j) in G and not potential_only:
                    acc += dG[(m, j)] if s == 2 else ik[s] * G[(m, j)]
                for n in range(3):
                    if (m, n) in pot:
                        acc -= d((m, n), (n, j, s))
                K[m, j, s] = np.real(np.fft.ifft2(acc / phase, axes=(0, 1))) / h ** 2
    return z1, z2, K


# --------------------------------------------------------------------------
# field-level application of G on a slab grid
#
# Laterally transformed, G2 f becomes
#   V_a = (2 / kappa) k_a sum_b k_b I_b,   V_3 = 2 i sum_b k_b I_b,
#   I_b(x3) = int_0^inf M(x3, y3) f_b(y3) dy3,
#   M = exp(-kappa^2 t) int_0^x3 exp(-kappa (x3 - z)) Gamma1(z + y3, t) dz
#     = exp(-kappa (x3 + y3)) [erfc(c1) - erfc(c2)] / 2,
# c1 = (y3 - 2 t kappa) / (2 sqrt t), c2 = c1 + x3 / (2 sqrt t). The kappa = 0
# mode of G2 vanishes. G1 is the lateral heat factor times the 1-D Dirichlet
# heat kernel. Vertical integrals use a per-row Gauss-Legendre rule resolving
# the sqrt(t) scale, applied to the cubic interpolant of the nodal values.

def _log_erfc(c):
    """``log erfc(c)`` without underflow for large positive c."""
    c = np.asarray(c, dtype=float)
    out = np.empty_like(c)
    pos = c > 0
    out[pos] = np.log(erfcx(c[pos])) - c[pos] ** 2
    out[~pos] = np.log(erfc(c[~pos]))
    return out


def g2_vertical_kernel(kappa, x3, y3, t):
    """``M(kappa; x3, y3, t)`` on broadcast arrays (stable for large kappa)."""
    kappa, x3, y3 = np.broadcast_arrays(np.asarray(kappa, float), x3, y3)
    rt = np.sqrt(t)
    c1 = (y3 - 2 * t * kappa) / (2 * rt)
    c2 = c1 + x3 / (2 * rt)
    base = -kappa * (x3 + y3)
    # erfc(c1) - erfc(c2) = erfc(-c2) - erfc(-c1): use the form without cancellation
    lo = np.where(c2 <= 0, -c2, c1)
    hi = np.where(c2 <= 0, -c1, c2)
    l_lo, l_hi = _log_erfc(lo), _log_erfc(hi)
    tail = np.exp(base + l_lo) * -np.expm1(l_hi - l_lo)
    mid = (c1 < 0) & (c2 > 0)
    direct = np.exp(base) * (erfc(c1) - erfc(c2))
    return 0.5 * np.where(mid, direct, tail)


def cubic_interpolation_matrix(z, pts):
    """Rows: weights of the local 4-point Lagrange interpolant at ``pts``."""
    n = len(z)
    h = z[1] - z[0]
    cell = np.clip(np.floor(pts / h).astype(int), 0, n - 2)
    start = np.clip(cell - 1, 0, n - 4)
    P = np.zeros((len(pts), n))
    for k in range(4):
        nodes_k = start + k
        w = np.ones(len(pts))
        for m in range(4):
            if m != k:
                w *= (pts - z[start + m]) / (z[nodes_k] - z[start + m])
        P[np.arange(len(pts)), nodes_k] += w
    return P


def _row_rule(z, xi, t, order=8):
    rt = np.sqrt(t)
    H = z[-1]
    breaks = np.concatenate([z, xi + rt * np.arange(-8, 9), rt * np.arange(0, 9),
                             -xi + rt * np.arange(0, 9)])
    breaks = breaks[(breaks > 0) & (breaks < H)]
    return z_panels(breaks, H, hmax=z[1] - z[0], order=order)


class GreenOperator:
    """``v(x) = int G(x, y, t) f(y) dy`` for vector fields sampled on a SlabGrid.

    ``space="half"`` uses G = G1 + G2, ``space="whole"`` the heat kernel (the
    field is taken to vanish for x3 outside [0, H]). Vertical matrices are
    cached per t.
    """

    def __init__(self, grid, space="half"):
        if space not in ("half", "whole"):
            raise ValueError("space must be 'half' or 'whole'")
        if not grid.periodic_lateral:
            raise ValueError("the field-level operator needs a periodic lateral grid")
        self.grid, self.space = grid, space
        kx = 2 * np.pi * np.fft.fftfreq(grid.nx, d=grid.hx)
        ky = 2 * np.pi * np.fft.fftfreq(grid.ny, d=grid.hy)
        self.K1, self.K2 = np.meshgrid(kx, ky, indexing="ij")
        self.kappa = np.hypot(self.K1, self.K2)
        self.ku, inv = np.unique(np.round(self.kappa, 12), return_inverse=True)
        self.inv = inv.reshape(self.kappa.shape)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        bounds = np.searchsorted(inv[order], np.arange(len(self.ku) + 1))
        self._groups = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        self._cache = {}

    def matrices(self, t):
        key = float(t)
        if key in self._cache:
            return self._cache[key]
        z = self.grid.z
        n = len(z)
        W1 = np.zeros((n, n))
        W2 = np.zeros((len(self.ku), n, n))
        for i, xi in enumerate(z):
            zq, wq = _row_rule(z, xi, t)
            P = cubic_interpolation_matrix(z, zq) * wq[:, None]
            heat = _g1(xi - zq, t)
            if self.space == "half":
                heat = heat - _g1(xi + zq, t)
                M = g2_vertical_kernel(self.ku[:, None], xi, zq[None, :], t)
                W2[:, i, :] = M @ P
            W1[i] = heat @ P
        self._cache[key] = (W1, W2)
        return W1, W2

    def __call__(self, f, t):
        """Apply to values of shape ``(3, nx, ny, nz + 1)``."""
        _check_t(t)
        f = np.asarray(f, dtype=float)
        W1, W2 = self.matrices(t)
        fh = np.fft.fft2(f, axes=(1, 2))
        lat = np.exp(-self.kappa ** 2 * t)
        out = lat[None, :, :, None] * np.einsum("ij,cxyj->cxyi", W1, fh)
        if self.space == "half":
            n = fh.shape[-1]
            fl = fh[:2].reshape(2, -1, n)
            I = np.empty_like(fl)
            for u, idx in enumerate(self._groups):
                I[:, idx] = fl[:, idx] @ W2[u].T
            I = I.reshape(fh[:2].shape)
            S = self.K1[..., None] * I[0] + self.K2[..., None] * I[1]
            kap = np.where(self.kappa > 0, self.kappa, 1.0)[..., None]
            zero = (self.kappa == 0)[..., None]
            out[0] += np.where(zero, 0.0, 2 / kap * self.K1[..., None] * S)
            out[1] += np.where(zero, 0.0, 2 / kap * self.K2[..., None] * S)
            out[2] += 2j * S
        return np.real(np.fft.ifft2(out, axes=(1, 2)))

    # -- persistence -----------------------------------------------------
    def save_cache(self, path, times) -> None:
        """Write the vertical matrices for ``times`` to an HSK1 file.

        Layout after the 64-byte header: the times, then per time W1
        ``(n, n)`` and, for the half space, W2 ``(len(ku), n, n)``.
        """
        from .fields import _header
        times = [float(t) for t in times]
        with open(path, "wb") as fh:
            fh.write(_header("HSK1", 0, self.grid, len(times)))
            fh.write(np.asarray(times, dtype="<f8").tobytes())
            for t in times:
                W1, W2 = self.matrices(t)
                fh.write(np.ascontiguousarray(W1, dtype="<f8").tobytes())
                if self.space == "half":
                    fh.write(np.ascontiguousarray(W2, dtype="<f8").tobytes())

    def load_cache(self, path) -> list:
        """Fill the per-t cache from an HSK1 file baked on the same grid."""
        from .fields import HEADER_BYTES, parse_header
        with open(path, "rb") as fh:
            hdr = parse_header(fh.read(HEADER_BYTES))
            data = np.frombuffer(fh.read(), dtype="<f8")
        g = self.grid
        if hdr["tag"] != "HSK1" or (hdr["nx"], hdr["ny"], hdr["nz"]) != (g.nx, g.ny, g.nz) \
                or not np.isclose(hdr["L"], g.L) or not np.isclose(hdr["H"], g.H):
            raise ValueError("kernel cache was baked for another grid")
        n, nk, nt = g.nz + 1, len(self.ku), hdr["nt"]
        per = n * n + (nk * n * n if self.space == "half" else 0)
        if data.size != nt + nt * per:
            raise ValueError("kernel cache size does not match the grid and space")
        times = data[:nt]
        for j, t in enumerate(times):
            block = data[nt + j * per: nt + (j + 1) * per]
            W1 = block[:n * n].reshape(n, n)
            W2 = block[n * n:].reshape(nk, n, n) if self.space == "half" else np.zeros((nk, n, n))
            self._cache[float(t)] = (W1, W2)
        return [float(t) for t in times]
