"""Pressure operators.

``pressure_half`` solves the Neumann problem ``Lap p = -div div H``,
``d3 p = 0`` on ``x3 = 0`` by even/odd reflection onto the doubled periodic box
and a spectral Poisson solve. ``pressure_whole`` returns the whole-space
pressure ``-tr F / 3 + PV int K_ij F_ij`` either through the symbol of
``d_i d_j (-Lap)^-1`` or through an aperiodic convolution with the truncated
principal-value kernel. ``siop_decompose`` splits ``Tg`` for a slab.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.fft import fftn, ifftn, next_fast_len
from scipy.special import spherical_jn

from .fields import (
    EVEN, Field, NormReport, ParityTable, PRESSURE_PARITY, SlabGrid,
    extend_parity, norm_bmo, norm_lp_unif_whole, restrict_half,
)

SCALAR_EVEN = ParityTable((EVEN,))


@dataclass
class PressureResult:
    p1: Field
    bmo: Optional[NormReport]
    residual: float
    neumann_defect: float
    grad: Field
    normalization: float = 0.0


@dataclass
class SiopDecomposition:
    h1: Field
    h2: Field
    bound_h1: float
    bound_h2: float
    h2_minus: Field
    h2_plus: Field
    reconstruction_error: float
    annulus: dict = dc_field(default_factory=dict)


# --------------------------------------------------------------------------
# spectral helpers

def wavenumbers(shape, spacing, nyquist=False):
    """Angular wavenumbers per axis; the Nyquist mode is zeroed unless asked."""
    out = []
    for n, h in zip(shape, spacing):
        k = 2 * np.pi * np.fft.fftfreq(n, d=h)
        if not nyquist and n % 2 == 0:
            k[n // 2] = 0.0
        out.append(k)
    return np.meshgrid(*out, indexing="ij", sparse=True)


def _spacing(g: SlabGrid):
    return (g.hx, g.hy, g.hz)


def _divdiv_hat(Hh, k):
    """``-k_i k_j H_ij`` in Fourier space (the transform of div div H)."""
    s = 0.0
    for i in range(3):
        for j in range(3):
            s = s - k[i] * k[j] * Hh[..., 3 * i + j, :, :, :]
    return s


def _poisson_hat(rhs_hat, k):
    """Solve ``Lap p = rhs`` for the nonzero modes."""
    k2 = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    safe = np.where(k2 > 0, k2, 1.0)
    return np.where(k2 > 0, -rhs_hat / safe, 0.0)


def _lap(a, k):
    k2 = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    return np.real(ifftn(-k2 * fftn(a, axes=(-3, -2, -1)), axes=(-3, -2, -1)))


def _ball_weights(g: SlabGrid, extended: bool, radius=1.0):
    """Node weights of the unit (half-)ball at the origin."""
    X, Y, Z = g.mesh(doubled=extended)
    w = (X ** 2 + Y ** 2 + Z ** 2 < radius ** 2).astype(float)
    if not extended:
        w *= np.where(Z == 0, 0.5, 1.0)
    if w.sum() == 0:
        raise ValueError("grid does not resolve the unit ball")
    return w / w.sum()


def _check_unit_ball(g: SlabGrid):
    if g.L < 1 or g.H < 1:
        raise ValueError("degenerate grid: the unit ball at the origin must fit")


def _strip_defect(v, nz_axis_top=True, width=2):
    """Max deviation from a per-component constant on the box walls."""
    walls = [v[..., :width, :, :], v[..., -width:, :, :],
             v[..., :, :width, :], v[..., :, -width:, :]]
    if nz_axis_top:
        walls.append(v[..., -width:])
    dev, means = 0.0, []
    for w in walls:
        m = w.mean(axis=(-3, -2, -1), keepdims=True)
        dev = max(dev, float(np.max(np.abs(w - m))))
        means.append(m)
    return dev, means


def _wall_max(v, width=2):
    walls = [v[..., :width, :, :], v[..., -width:, :, :], v[..., :, :width, :],
             v[..., :, -width:, :], v[..., :width], v[..., -width:]]
    return max(float(np.max(np.abs(w))) for w in walls)


def _check_decay(H: Field, tol: float, parity: Optional[ParityTable]):
    v = H.values
    scale = max(H.sup(), 1e-300)
    dev, means = _strip_defect(v, nz_axis_top=True)
    if dev > tol * scale:
        raise ValueError(f"H not decayed at the box walls (defect {dev:.3g}); truncation unsound")
    if parity is not None:
        top = means[-1]
        odd = np.array([q != EVEN for q in parity.parities])
        if np.any(np.abs(top[..., odd, :, :, :]) > tol * scale):
            raise ValueError("odd components of H do not vanish at the top of the box")


# --------------------------------------------------------------------------
# half space

def pressure_half(H: Field, bmo_cube: Optional[float] = 1.0,
                  decay_tol: Optional[float] = 1e-6) -> PressureResult:
    """Neumann pressure ``p1_H`` with ``[p1]_{B+} = 0`` over the unit half-ball.

    ``H`` is a rank-2 half-space field, optionally with a time axis (each
    slice is solved independently). Returns ``p1``, its spectral gradient, the
    spectral residual ``max |Lap p1 + div div H|`` recomputed from the
    normalized restriction, the Neumann trace defect and the BMO seminorm of
    the even extension (skipped when ``bmo_cube`` is None). ``decay_tol=None``
    skips the wall check: the periodic slab is then the intended model.
    """
    if H.rank != 2 or H.extended:
        raise ValueError("pressure_half expects a rank-2 half-space field")
    g = H.grid
    _check_unit_ball(g)
    if decay_tol is not None:
        _check_decay(H, decay_tol, PRESSURE_PARITY)
    He = extend_parity(H, PRESSURE_PARITY).values
    k = wavenumbers(He.shape[-3:], _spacing(g))
    ax = (-3, -2, -1)
    Hh = fftn(He, axes=ax)
    rhs = _divdiv_hat(Hh, k)
    ph = _poisson_hat(-rhs, k)
    pe = np.real(ifftn(ph, axes=ax))

    nz = g.nz
    half = np.concatenate([pe[..., nz:], pe[..., :1]], axis=-1)
    w = _ball_weights(g, extended=False)
    mean = np.sum(half * w, axis=(-3, -2, -1), keepdims=True)
    half = half - mean
    pe = pe - mean

    grad = np.stack([np.real(ifftn(1j * kk * ph, axes=ax)) for kk in k], axis=-4)
    grad_half = np.concatenate([grad[..., nz:], grad[..., :1]], axis=-1)
    neumann = float(np.max(np.abs(grad[..., 2, :, :, nz])))

    # residual from the restricted, normalized field re-extended as even
    p_field = H.with_values(half[..., None, :, :, :], rank=0)
    pe2 = extend_parity(p_field, SCALAR_EVEN).values[..., 0, :, :, :]
    divdiv = np.real(ifftn(rhs, axes=ax))
    res = _lap(pe2, k) + divdiv
    residual = float(np.max(np.abs(res[..., nz + 1:-1])))

    bmo = None
    if bmo_cube is not None:
        ext = extend_parity(p_field, SCALAR_EVEN)
        if ext.time_axis is None:
            bmo = norm_bmo(ext, bmo_cube)
        else:
            reps = [norm_bmo(Field(g, 0, ext.values[n], extended=True), bmo_cube)
                    for n in range(len(ext.time_axis))]
            bmo = max(reps, key=lambda r: r.value)
    check = float(np.max(np.abs(np.sum(half * w, axis=(-3, -2, -1)))))
    return PressureResult(p1=p_field, bmo=bmo, residual=residual, neumann_defect=neumann,
                          grad=H.with_values(grad_half, rank=1), normalization=check)


# --------------------------------------------------------------------------
# whole space

def truncated_pv_symbol(kx, ky, kz, i, j, R):
    """Transform of ``chi_{|x|<R} PV (1/4pi) d_i d_j (1/|x|)``.

    Full symbol ``-(k_i k_j / |k|^2 - delta_ij / 3)`` times
    ``1 - 3 j1(kR) / (kR)``, using ``(j1(s)/s)' = -j2(s)/s``.
    """
    k = (kx, ky, kz)
    kk = np.sqrt(kx ** 2 + ky ** 2 + kz ** 2)
    safe = np.where(kk > 0, kk, 1.0)
    s = safe * R
    cut = 1.0 - 3.0 * spherical_jn(1, s) / s
    sym = -(k[i] * k[j] / safe ** 2 - (1.0 / 3.0 if i == j else 0.0)) * cut
    return np.where(kk > 0, sym, 0.0)


def pv_convolve(F, spacing, pairs):
    """Aperiodic ``sum_{(i,j,c)} c * PV int (1/4pi) d_i d_j(1/|x-y|) F_k(y) dy``.

    ``F`` has shape ``(m, nx, ny, nz)``; ``pairs`` lists ``(i, j, k, c)``.
    The kernel is truncated at the box diameter and the data zero-padded so
    that periodic images never reach the box: the result is the free-space
    principal-value integral, spectrally accurate for smooth data.
    """
    shape = F.shape[-3:]
    ext = [n * h for n, h in zip(shape, spacing)]
    R = 1.0001 * np.sqrt(sum(e ** 2 for e in ext))
    pad = [next_fast_len(int(np.ceil((e + R) / h)) + 1) for e, h in zip(ext, spacing)]
    k = [2 * np.pi * np.fft.fftfreq(n, d=h) for n, h in zip(pad, spacing)]
    kx, ky, kz = np.meshgrid(*k, indexing="ij", sparse=True)
    acc = 0.0
    Fh = fftn(F, s=pad, axes=(-3, -2, -1))
    for i, j, m, c in pairs:
        acc = acc + c * truncated_pv_symbol(kx, ky, kz, i, j, R) * Fh[m]
    out = np.real(ifftn(acc, axes=(-3, -2, -1)))
    return out[: shape[0], : shape[1], : shape[2]]


def pressure_whole(F: Field, route: str = "symbol", pad: int = 2,
                   decay_tol: float = 1e-6) -> Field:
    """Whole-space pressure ``-tr F / 3 + PV int d_i d_j E(x-y) F_ij(y) dy``.

    ``F`` lives on the box ``[-L, L)^2 x [-H, H)`` (an extended Field). The
    "symbol" route multiplies by ``-k_i k_j / |k|^2`` on a ``pad``-times
    zero-padded periodic box; the "pv" route adds the local term to the
    aperiodic principal-value convolution. Normalized to zero mean over the
    unit ball at the origin.
    """
    if F.rank != 2 or not F.extended:
        raise ValueError("pressure_whole expects a rank-2 field on the whole-space box")
    if F.time_axis is not None:
        raise ValueError("pressure_whole expects a single time slice")
    g = F.grid
    _check_unit_ball(g)
    if _wall_max(F.values) > decay_tol * max(F.sup(), 1e-300):
        raise ValueError("support violation: F must vanish near the box walls")
    v = F.values
    spacing = _spacing(g)
    shape = v.shape[-3:]
    if route == "symbol":
        ps = [pad * n for n in shape]
        k = wavenumbers(ps, spacing, nyquist=True)
        Fh = fftn(v, s=ps, axes=(-3, -2, -1))
        p = np.real(ifftn(_poisson_hat(-_divdiv_hat(Fh, k), k), axes=(-3, -2, -1)))
        p = p[: shape[0], : shape[1], : shape[2]]
    elif route == "pv":
        pairs = [(i, j, 3 * i + j, 1.0) for i in range(3) for j in range(3)]
        p = -(v[0] + v[4] + v[8]) / 3.0 + pv_convolve(v, spacing, pairs)
    else:
        raise ValueError("route must be 'symbol' or 'pv'")
    w = _ball_weights(g, extended=True)
    p = p - np.sum(p * w)
    return Field(g, 0, p[None], extended=True)


def central_weights(deriv: int, half: int) -> np.ndarray:
    """Central finite-difference weights on ``2 half + 1`` unit-spaced nodes."""
    o = np.arange(-half, half + 1, dtype=float)
    V = np.vander(o, increasing=True).T
    rhs = np.zeros(len(o))
    rhs[deriv] = np.prod(np.arange(1, deriv + 1))
    return np.linalg.solve(V, rhs)


def fd_derivative(a, ax, spacing, deriv=1, half=4):
    """Central derivative along ``ax``; the ``half``-node margin is left at zero."""
    w = central_weights(deriv, half)
    n = a.shape[ax]
    out = np.zeros_like(a)
    dst = [slice(None)] * a.ndim
    dst[ax] = slice(half, n - half)
    for o, c in zip(range(-half, half + 1), w):
        if c == 0:
            continue
        src = [slice(None)] * a.ndim
        src[ax] = slice(half + o, n - half + o)
        out[tuple(dst)] += c * a[tuple(src)]
    return out / spacing[ax] ** deriv


def fd_laplacian(a, spacing, half=4):
    return sum(fd_derivative(a, ax, spacing, 2, half) for ax in range(3))


def fd_divdiv(F, spacing, half=4):
    """``d_i d_j F_ij`` by central differences (order ``2 half``)."""
    total = 0.0
    for i in range(3):
        for j in range(3):
            comp = F[3 * i + j]
            if i == j:
                total = total + fd_derivative(comp, i, spacing, 2, half)
            else:
                total = total + fd_derivative(fd_derivative(comp, j, spacing, 1, half),
                                              i, spacing, 1, half)
    return total


# --------------------------------------------------------------------------
# singular-integral decomposition

def _slab_mask(g: SlabGrid, L_slab, axis):
    X = g.mesh(doubled=True)
    return np.abs(X[axis]) < L_slab


def siop_decompose(g_field: Field, L_slab: float, p: float, comp=(0, 0),
                   axis: int = 2, centre=(0.0, 0.0), fit_from: int = 4,
                   bmo_cube: float = 1.0) -> SiopDecomposition:
    """``Tg = h1 + h2`` for the slab ``|x_axis| < L_slab``.

    ``T`` is the principal-value operator with kernel ``(1/4pi) d_i d_j (1/|x|)``
    (``comp = (i, j)``). ``h1 = T(g outside the slab)``, ``h2 = T(g inside)``;
    ``h2`` is split into the near column over the lateral cube of half side 2
    around ``centre`` and the far remainder. Annulus terms
    ``a_N = int_{slab, N <= |y'-c'|_inf < N+1} |y'-c'|^-3 |g|`` are returned
    with their fitted log-log exponent.
    """
    if not 1 < p < np.inf:
        raise ValueError("p must lie in (1, inf)")
    if g_field.rank != 0 or not g_field.extended:
        raise ValueError("siop_decompose expects a scalar field on the whole-space box")
    grid = g_field.grid
    extent = grid.H if axis == 2 else grid.L
    if L_slab >= extent:
        raise ValueError("slab wider than the grid")
    a = g_field.values[0]
    spacing = _spacing(grid)
    inside = _slab_mask(grid, L_slab, axis)
    g1 = np.where(inside, 0.0, a)
    g2 = np.where(inside, a, 0.0)
    lat = [ax for ax in range(3) if ax != axis]
    X = grid.mesh(doubled=True)
    dl = [X[lat[0]] - centre[0], X[lat[1]] - centre[1]]
    cube = np.maximum(np.abs(dl[0]), np.abs(dl[1]))
    g2m = np.where(cube < 2.0, g2, 0.0)

    i, j = comp
    pair = [(i, j, 0, 1.0)]
    T = lambda f: pv_convolve(f[None], spacing, pair)
    h1, h2, Tg, h2m = T(g1), T(g2), T(a), T(g2m)
    h2p = h2 - h2m
    recon = float(np.max(np.abs(h1 + h2 - Tg)))

    outside_sup = float(np.max(np.abs(g1))) if np.any(~inside) else 0.0
    mk = lambda v: Field(grid, 0, v[None], extended=True)
    b1 = norm_bmo(mk(h1), bmo_cube).value / outside_sup if outside_sup > 0 else 0.0
    gnorm = norm_lp_unif_whole(a, spacing, p, periodic=False)
    b2 = norm_lp_unif_whole(h2, spacing, p, periodic=False) / gnorm if gnorm > 0 else 0.0

    vol = float(np.prod(spacing))
    rad = np.hypot(dl[0], dl[1])
    n_max = int(np.floor(min(grid.L - abs(c) for c in centre))) - 1
    Ns = np.arange(2, max(n_max, 2))
    terms = []
    for N in Ns:
        ring = inside & (cube >= N) & (cube < N + 1)
        terms.append(float(np.sum(np.abs(g2[ring]) / rad[ring] ** 3) * vol))
    terms = np.array(terms)
    fit = (Ns >= fit_from) & (terms > 0)
    slope = float(np.polyfit(np.log(Ns[fit]), np.log(terms[fit]), 1)[0]) if fit.sum() >= 3 else np.nan
    annulus = {"N": Ns, "terms": terms, "exponent": slope, "expected": -(1 + 1 / p)}
    return SiopDecomposition(h1=mk(h1), h2=mk(h2), bound_h1=b1, bound_h2=b2,
                             h2_minus=mk(h2m), h2_plus=mk(h2p),
                             reconstruction_error=recon, annulus=annulus)
