"""Slab grids, sampled fields, parity extensions, mollifiers and norms.

A :class:`SlabGrid` is the computational truncation of the upper half space:
lateral nodes cover ``[-L, L)`` (periodic layout), vertical nodes cover
``[0, H]`` with the first layer on the boundary plane ``x3 = 0``.
All norms here are truncated-domain estimators.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.integrate import trapezoid
from scipy.signal import fftconvolve

EVEN, ODD = "even", "odd"


@dataclass(frozen=True)
class SlabGrid:
    L: float
    H: float
    nx: int
    ny: int
    nz: int
    periodic_lateral: bool = True

    def __post_init__(self):
        if not (self.L > 0 and self.H > 0):
            raise ValueError("L and H must be positive")
        if min(self.nx, self.ny, self.nz) < 2:
            raise ValueError("all cell counts must be >= 2")
        if self.nx % 2 or self.ny % 2:
            raise ValueError("nx and ny must be even")
        for h in (self.hx, self.hy, self.hz):
            if not np.isfinite(h) or h <= 0:
                raise ValueError("degenerate grid spacing")

    @property
    def hx(self) -> float:
        return 2 * self.L / self.nx

    @property
    def hy(self) -> float:
        return 2 * self.L / self.ny

    @property
    def hz(self) -> float:
        return self.H / self.nz

    @property
    def x(self) -> np.ndarray:
        return -self.L + self.hx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return -self.L + self.hy * np.arange(self.ny)

    @property
    def z(self) -> np.ndarray:
        return self.hz * np.arange(self.nz + 1)

    @property
    def z_doubled(self) -> np.ndarray:
        """Vertical nodes of the parity-extended (periodic) grid, ``[-H, H)``."""
        return self.hz * np.arange(-self.nz, self.nz)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz + 1)

    def mesh(self, doubled: bool = False):
        z = self.z_doubled if doubled else self.z
        return np.meshgrid(self.x, self.y, z, indexing="ij")

    def refined(self, factor: int = 2) -> "SlabGrid":
        return SlabGrid(self.L, self.H, self.nx * factor, self.ny * factor,
                        self.nz * factor, self.periodic_lateral)

    def quadrature_weights(self) -> np.ndarray:
        """Cell-volume weights on the half-space nodes (trapezoid in x3)."""
        wz = np.full(self.nz + 1, self.hz)
        wz[0] = wz[-1] = 0.5 * self.hz
        return self.hx * self.hy * np.broadcast_to(wz, self.shape)


def ncomp(rank: int) -> int:
    return 3 ** rank


@dataclass(frozen=True, eq=False)
class Field:
    """Samples of a rank-0/1/2 field on a slab grid.

    ``values`` has shape ``(ncomp, nx, ny, nzz)`` or, with a time axis,
    ``(nt, ncomp, nx, ny, nzz)``; ``nzz`` is ``nz + 1`` on the half space and
    ``2 nz`` on the parity-extended grid. Tensor components are stored
    row-major: component ``(i, j)`` sits at index ``3 i + j``.
    """

    grid: SlabGrid
    rank: int
    values: np.ndarray
    time_axis: Optional[np.ndarray] = None
    extended: bool = False

    def __post_init__(self):
        if self.rank not in (0, 1, 2):
            raise ValueError("rank must be 0, 1 or 2")
        vals = np.asarray(self.values, dtype=float)
        nzz = 2 * self.grid.nz if self.extended else self.grid.nz + 1
        space = (ncomp(self.rank), self.grid.nx, self.grid.ny, nzz)
        if self.time_axis is not None:
            t = np.asarray(self.time_axis, dtype=float)
            if t.ndim != 1 or np.any(np.diff(t) <= 0):
                raise ValueError("time_axis must be strictly increasing")
            object.__setattr__(self, "time_axis", t)
            expected = (len(t),) + space
        else:
            expected = space
        if vals.shape != expected:
            raise ValueError(f"values shape {vals.shape} != expected {expected}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field samples must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def ncomp(self) -> int:
        return ncomp(self.rank)

    def comp(self, *idx: int) -> np.ndarray:
        k = 0
        for i in idx:
            k = 3 * k + i
        return self.values[..., k, :, :, :]

    def with_values(self, values, **kw) -> "Field":
        args = dict(grid=self.grid, rank=self.rank, values=values,
                    time_axis=self.time_axis, extended=self.extended)
        args.update(kw)
        return Field(**args)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def scalar_field(grid: SlabGrid, values, **kw) -> Field:
    v = np.asarray(values, dtype=float)
    return Field(grid, 0, v[..., None, :, :, :], **kw)


def tensor_product(u: Field) -> Field:
    """``F = u (x) u`` for a vector field."""
    if u.rank != 1:
        raise ValueError("tensor_product expects a vector field")
    a = u.values
    F = a[..., :, None, :, :, :] * a[..., None, :, :, :, :]
    shape = a.shape[:-4] + (9,) + a.shape[-3:]
    return u.with_values(F.reshape(shape), rank=2)


# --------------------------------------------------------------------------
# parity extension

@dataclass(frozen=True)
class ParityTable:
    parities: tuple[str, ...]

    def __post_init__(self):
        if any(p not in (EVEN, ODD) for p in self.parities):
            raise ValueError("parities must be 'even' or 'odd'")

    def __len__(self):
        return len(self.parities)

    @classmethod
    def uniform(cls, parity: str, rank: int) -> "ParityTable":
        return cls((parity,) * ncomp(rank))


#: Neumann (pressure) table: H_ab, H_33 even; H_a3, H_3a odd.
PRESSURE_PARITY = ParityTable(tuple(
    EVEN if (i == 2) == (j == 2) else ODD for i in range(3) for j in range(3)))
#: Momentum-equation table: tilde H_{i alpha} odd, tilde H_{i3} even.
MOMENTUM_PARITY = ParityTable(tuple(
    EVEN if j == 2 else ODD for i in range(3) for j in range(3)))
#: No-slip velocity: every component odd.
VELOCITY_PARITY = ParityTable((ODD,) * 3)


def extend_parity(f: Field, p: ParityTable) -> Field:
    """Even/odd reflection across ``x3 = 0`` onto the periodic grid ``[-H, H)``."""
    if f.extended:
        raise ValueError("field is already extended")
    if len(p) != f.ncomp:
        raise ValueError(f"parity table has {len(p)} entries, field has {f.ncomp} components")
    v = f.values
    nz = f.grid.nz
    upper = v[..., :nz]                       # x3 = 0 .. H - hz
    lower = v[..., nz:0:-1]                   # x3 = H .. hz, mirrored to -H .. -hz
    sign = np.array([1.0 if q == EVEN else -1.0 for q in p.parities])
    sign = sign.reshape((-1, 1, 1, 1))
    lower = lower * sign
    upper = upper.copy()
    odd = np.array([q == ODD for q in p.parities])
    upper[..., odd, :, :, 0] = 0.0
    lower[..., odd, :, :, 0] = 0.0            # node x3 = -H == +H (periodic)
    out = np.concatenate([lower, upper], axis=-1)
    return f.with_values(out, extended=True)


def restrict_half(f: Field) -> Field:
    """Inverse of :func:`extend_parity` on ``x3 >= 0`` (top layer taken from ``-H``)."""
    if not f.extended:
        return f
    nz = f.grid.nz
    v = f.values
    top = v[..., :1]
    out = np.concatenate([v[..., nz:], top], axis=-1)
    return f.with_values(out, extended=False)


# --------------------------------------------------------------------------
# mollification

def bump_kernel(eps: float, spacing: Sequence[float]) -> np.ndarray:
    """Discrete unit-mass C-infinity bump ``exp(-1/(1-|x/eps|^2))``."""
    rs = [int(np.floor(eps / h)) for h in spacing]
    axes = [h * np.arange(-r, r + 1) for h, r in zip(spacing, rs)]
    X = np.meshgrid(*axes, indexing="ij")
    q = sum(c ** 2 for c in X) / eps ** 2
    w = np.zeros_like(q)
    inside = q < 1
    w[inside] = np.exp(-1.0 / (1.0 - q[inside]))
    w /= w.sum()
    return w


def _shift_up(v: np.ndarray, z: np.ndarray, h: float) -> np.ndarray:
    """``v(y3 - h)`` for ``y3 > h`` and 0 otherwise, linear in x3."""
    if h == 0:
        return v.copy()
    src = z - h
    out = np.zeros_like(v)
    keep = src > 0
    idx = np.searchsorted(z, src[keep], side="right") - 1
    idx = np.clip(idx, 0, len(z) - 2)
    lam = (src[keep] - z[idx]) / (z[idx + 1] - z[idx])
    out[..., keep] = (1 - lam) * v[..., idx] + lam * v[..., idx + 1]
    return out


def mollify(f: Field, eps: float, shift: float = 0.0) -> Field:
    """Shift by ``shift`` along x3 (zero below), then convolve with the bump of radius ``eps``."""
    g = f.grid
    if eps <= 0 or shift < 0:
        raise ValueError("need eps > 0 and shift >= 0")
    if eps < max(g.hx, g.hy, g.hz):
        raise ValueError("mollifier radius is below the grid spacing (undersampled)")
    if f.extended:
        raise ValueError("mollify expects a half-space field")
    v = _shift_up(f.values, g.z, shift)
    ker = bump_kernel(eps, (g.hx, g.hy, g.hz))
    rx, ry, rz = (s // 2 for s in ker.shape)
    lead = v.shape[:-3]
    flat = v.reshape((-1,) + v.shape[-3:])
    out = np.empty_like(flat)
    for n, a in enumerate(flat):
        if g.periodic_lateral:
            a = np.pad(a, ((rx, rx), (ry, ry), (0, 0)), mode="wrap")
        else:
            a = np.pad(a, ((rx, rx), (ry, ry), (0, 0)))
        a = np.pad(a, ((0, 0), (0, 0), (rz, rz)))
        out[n] = fftconvolve(a, ker, mode="valid")
    out[..., g.z < shift - eps] = 0.0          # exact support; drops FFT round-off
    return f.with_values(out.reshape(lead + v.shape[-3:]))


# --------------------------------------------------------------------------
# norms

@dataclass
class NormReport:
    kind: str
    value: float
    discretization: dict = dc_field(default_factory=dict)
    params: dict = dc_field(default_factory=dict)
    sup_location: Optional[tuple] = None
    convention: str = ""

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("norm value must be >= 0")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "value", "params", "discretization", "sup_location", "convention"])
        w.writerow([self.kind, repr(self.value), self.params, self.discretization,
                    self.sup_location, self.convention])
        return buf.getvalue()


def _ball_kernel(spacing, radius=1.0, upper_only=False) -> np.ndarray:
    rs = [int(np.ceil(radius / h)) for h in spacing]
    axes = [h * np.arange(-r, r + 1) for h, r in zip(spacing, rs)]
    X = np.meshgrid(*axes, indexing="ij")
    inside = (sum(c ** 2 for c in X) < radius ** 2).astype(float)
    if upper_only:
        # trapezoid weight on the flat face y3 = x3 of B+(x, 1)
        inside *= np.where(X[2] > 0, 1.0, np.where(X[2] == 0, 0.5, 0.0))
    return inside


def window_sum(a: np.ndarray, kernel: np.ndarray, periodic_lateral: bool) -> np.ndarray:
    """``out[x] = sum_o a[x + o] kernel[o]`` with zero fill in x3."""
    rx, ry, rz = (s // 2 for s in kernel.shape)
    mode = "wrap" if periodic_lateral else "constant"
    a = np.pad(a, ((rx, rx), (ry, ry), (0, 0)), mode=mode)
    a = np.pad(a, ((0, 0), (0, 0), (rz, rz)))
    out = fftconvolve(a, kernel[::-1, ::-1, ::-1], mode="valid")
    return np.maximum(out, 0.0)


def norm_ls_unif(f: Field, s: float, l: float, stride: int = 1) -> NormReport:
    """Uniformly-local mixed norm over ``B+(x,1) = {y in B(x,1): y3 > x3}``.

    ``sup_x ( int_A^0 ( int_{B+(x,1)} |f|^s dy )^(l/s) dtau )^(1/l)``, the sup
    taken over grid nodes (every ``stride``-th node).
    """
    if f.time_axis is None:
        raise ValueError("norm_ls_unif needs a time axis")
    if not (1 <= s <= np.inf and 1 <= l <= np.inf):
        raise ValueError("need 1 <= s, l <= inf")
    g = f.grid
    vol = g.hx * g.hy * g.hz
    kern = _ball_kernel((g.hx, g.hy, g.hz), upper_only=True)
    absf = np.sqrt(np.sum(f.values ** 2, axis=1))     # (nt, nx, ny, nz+1)
    inner = np.empty_like(absf)
    for n in range(absf.shape[0]):
        if np.isinf(s):
            win = sliding_max_upper(absf[n], kern, g.periodic_lateral)
            inner[n] = win
        else:
            inner[n] = (vol * window_sum(absf[n] ** s, kern, g.periodic_lateral)) ** (1.0 / s)
    inner = inner[:, ::stride, ::stride, ::stride]
    if np.isinf(l):
        per_center = inner.max(axis=0)
    else:
        per_center = trapezoid(inner ** l, f.time_axis, axis=0) ** (1.0 / l)
    k = np.unravel_index(np.argmax(per_center), per_center.shape)
    loc = (float(g.x[k[0] * stride]), float(g.y[k[1] * stride]), float(g.z[k[2] * stride]))
    return NormReport("LslUnif", float(per_center[k]),
                      discretization={"hx": g.hx, "hz": g.hz, "stride": stride,
                                      "nt": len(f.time_axis)},
                      params={"s": s, "l": l, "A": float(f.time_axis[0])},
                      sup_location=loc)


def sliding_max_upper(a, kern, periodic_lateral):
    offs = np.argwhere(kern > 0) - np.array(kern.shape) // 2
    out = np.zeros_like(a)
    for o in offs:
        sh = np.roll(a, (-o[0], -o[1]), axis=(0, 1)) if periodic_lateral else _shift_zero(a, o[:2])
        sh = _shift_zero_z(sh, o[2])
        np.maximum(out, sh, out=out)
    return out


def _shift_zero(a, o):
    out = np.zeros_like(a)
    sx = slice(max(0, -o[0]), a.shape[0] - max(0, o[0]))
    dx = slice(max(0, o[0]), a.shape[0] - max(0, -o[0]))
    sy = slice(max(0, -o[1]), a.shape[1] - max(0, o[1]))
    dy = slice(max(0, o[1]), a.shape[1] - max(0, -o[1]))
    out[sx, sy] = a[dx, dy]
    return out


def _shift_zero_z(a, k):
    out = np.zeros_like(a)
    if k >= 0:
        out[..., :a.shape[-1] - k] = a[..., k:]
    else:
        out[..., -k:] = a[..., :k]
    return out


def norm_lp_unif_whole(a: np.ndarray, spacing, p: float, periodic=True) -> float:
    """``sup_x ||a||_{L_p(B(x,1))}`` over nodes of a whole-space grid."""
    kern = _ball_kernel(spacing)
    vol = float(np.prod(spacing))
    if periodic:
        r = [s // 2 for s in kern.shape]
        b = np.pad(np.abs(a) ** p, [(q, q) for q in r], mode="wrap")
        acc = fftconvolve(b, kern, mode="valid")
    else:
        acc = fftconvolve(np.abs(a) ** p, kern, mode="same")
    return float((vol * np.maximum(acc, 0).max()) ** (1.0 / p))


def mean_oscillation_max(a: np.ndarray, spacing, max_cube: float,
                         levels: Optional[int] = None):
    """Max over dyadic node-aligned cubes of ``|Q|^-1 int_Q |a - a_Q|``.

    Cubes of side ``max_cube * 2**-j`` sit at every node position for small
    cubes; cubes wider than 4 cells are placed with stride ``m // 4``.
    Returns ``(value, per-level list)``.
    """
    out = []
    j = 0
    while True:
        side = max_cube * 2.0 ** (-j)
        m = [int(round(side / h)) for h in spacing]
        if min(m) < 2 or (levels is not None and j > levels):
            break
        if any(mi > n for mi, n in zip(m, a.shape)):
            j += 1
            continue
        st = max(1, min(m) // 4)
        win = sliding_window_view(a, tuple(m))[::st, ::st, ::st]
        best = 0.0
        for blk in win:                        # bounded memory: one x-slab at a time
            mean = blk.mean(axis=(-3, -2, -1), keepdims=True)
            osc = np.abs(blk - mean).mean(axis=(-3, -2, -1))
            best = max(best, float(osc.max()))
        out.append({"side": side, "cells": m, "stride": st, "value": best})
        j += 1
    if not out:
        raise ValueError("empty cube family")
    return max(o["value"] for o in out), out


def norm_bmo(f: Field, max_cube: float, levels: Optional[int] = None) -> NormReport:
    """Dyadic-cube mean-oscillation lower estimator of the BMO seminorm."""
    if f.rank != 0:
        raise ValueError("norm_bmo expects a scalar field")
    g = f.grid
    ext_z = 2 * g.H if f.extended else g.H
    if max_cube > min(2 * g.L, ext_z):
        raise ValueError("max_cube exceeds the grid extent")
    a = f.values[0]
    if a.ndim != 3:
        raise ValueError("norm_bmo expects a single time slice")
    value, levels_info = mean_oscillation_max(a, (g.hx, g.hy, g.hz), max_cube, levels)
    return NormReport("BMO", value,
                      discretization={"levels": levels_info},
                      params={"max_cube": max_cube},
                      convention="even-extension" if f.extended else "half-space")


# --------------------------------------------------------------------------
# on-disk format

HEADER_BYTES = 64


def _header(tag: str, rank: int, g: SlabGrid, nt: int) -> bytes:
    text = f"{tag} rank={rank} nx={g.nx} ny={g.ny} nz={g.nz} L={g.L:.10g} H={g.H:.10g} nt={nt}"
    if len(text) > HEADER_BYTES - 1:
        raise ValueError("header does not fit in 64 bytes")
    return text.ljust(HEADER_BYTES - 1).encode("ascii") + b"\n"


def write_field(path, f: Field, tag: str = "HSF1") -> None:
    """Header line then little-endian float64: time axis (nt values), samples."""
    if f.extended:
        raise ValueError("only half-space fields are written")
    nt = 0 if f.time_axis is None else len(f.time_axis)
    with open(path, "wb") as fh:
        fh.write(_header(tag, f.rank, f.grid, nt))
        if nt:
            fh.write(np.asarray(f.time_axis, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def parse_header(raw: bytes) -> dict:
    text = raw.decode("ascii").strip()
    parts = text.split()
    if not parts or parts[0] not in ("HSF1", "HSK1"):
        raise ValueError(f"bad field header: {text!r}")
    kv = dict(p.split("=", 1) for p in parts[1:])
    return {"tag": parts[0], "rank": int(kv["rank"]), "nx": int(kv["nx"]),
            "ny": int(kv["ny"]), "nz": int(kv["nz"]), "L": float(kv["L"]),
            "H": float(kv["H"]), "nt": int(kv["nt"])}


def read_field(path, periodic_lateral: bool = True) -> Field:
    with open(path, "rb") as fh:
        hdr = parse_header(fh.read(HEADER_BYTES))
        data = np.frombuffer(fh.read(), dtype="<f8")
    g = SlabGrid(hdr["L"], hdr["H"], hdr["nx"], hdr["ny"], hdr["nz"], periodic_lateral)
    nt = hdr["nt"]
    times = data[:nt] if nt else None
    shape = (ncomp(hdr["rank"]),) + g.shape
    if nt:
        shape = (nt,) + shape
    return Field(g, hdr["rank"], data[nt:].reshape(shape), time_axis=times)
