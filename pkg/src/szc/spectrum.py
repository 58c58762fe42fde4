"""Stationary states of a hard-wall box with an off-center delta barrier.

Units: hbar = m = 1, so E = k**2 / 2.  The box spans [-L/2, L/2] and the
barrier sits at x = d.  Eigenfunctions are piecewise sinusoids

    psi(x) = A sin(k (x + L/2))      x <= d
    psi(x) = B sin(k (L/2 - x))      x >  d

with continuity at d and the derivative jump psi'(d+) - psi'(d-) = 2 alpha psi(d),
giving the matching condition

    g(k) = cot(k L_L) + cot(k L_R) + 2 alpha / k = 0.

g is strictly decreasing between consecutive poles of the two cotangents, and
the poles do not depend on alpha, so every level lives in a fixed bracket.
Coincident poles (commensurate compartments) host a node-at-barrier state
whose wavenumber is the pole itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

E0 = np.pi ** 2 / 2  # ground state energy of the empty box with L = 1
DEFAULT_N_BASIS = 30

_COINCIDE_RTOL = 1e-12
_BISECT_ITERS = 8
_NEWTON_ITERS = 60


class SpectrumError(ValueError):
    """Raised for invalid inputs or a failed root bracket."""


@dataclass(frozen=True)
class SpbGeometry:
    """Box of width ``box_width`` with the barrier at ``offset`` from the center."""

    box_width: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not self.box_width > 0:
            raise SpectrumError(f"box width must be positive, got {self.box_width}")
        if not 0 <= self.offset < self.box_width / 2:
            raise SpectrumError(
                f"offset d={self.offset} outside [0, L/2) for L={self.box_width}")

    @property
    def left_width(self) -> float:
        return self.box_width / 2 + self.offset

    @property
    def right_width(self) -> float:
        return self.box_width / 2 - self.offset


@dataclass(frozen=True)
class EigenLevel:
    index: int
    energy: float
    k: float
    A: float
    B: float


@dataclass(frozen=True)
class Spectrum:
    geometry: SpbGeometry
    alpha: float
    k: np.ndarray
    A: np.ndarray
    B: np.ndarray
    levels: list[EigenLevel] = field(repr=False, compare=False)

    @property
    def energies(self) -> np.ndarray:
        return 0.5 * self.k ** 2

    @property
    def n_basis(self) -> int:
        return len(self.k)


@dataclass(frozen=True)
class _Brackets:
    lo: np.ndarray      # lower bracket ends, NaN for node states
    hi: np.ndarray
    node: np.ndarray    # bool mask, True where the level is a node-at-barrier state


def _brackets(geometry: SpbGeometry, n_levels: int) -> _Brackets:
    LL, LR = geometry.left_width, geometry.right_width
    j = np.arange(1, n_levels + 2)
    poles = np.sort(np.concatenate([j * np.pi / LL, j * np.pi / LR]))
    merged = [poles[0]]
    double = [False]
    for p in poles[1:]:
        if p - merged[-1] <= _COINCIDE_RTOL * p:
            double[-1] = True
        else:
            merged.append(p)
            double.append(False)
    lo, hi, node = [], [], []
    prev = 0.0
    for p, dbl in zip(merged, double):
        lo.append(prev)
        hi.append(p)
        node.append(False)
        if dbl:
            lo.append(p)
            hi.append(p)
            node.append(True)
        prev = p
        if len(lo) >= n_levels:
            break
    return _Brackets(np.array(lo[:n_levels]), np.array(hi[:n_levels]),
                     np.array(node[:n_levels]))


def matching_function(k, alpha, geometry: SpbGeometry):
    """g(k) = cot(k L_L) + cot(k L_R) + 2 alpha / k."""
    k = np.asarray(k, dtype=float)
    return (1 / np.tan(k * geometry.left_width) + 1 / np.tan(k * geometry.right_width)
            + 2 * np.asarray(alpha) / k)


def matching_residual(k, alpha, geometry: SpbGeometry):
    """Pole-free form k sin(kL) + 2 alpha sin(kL_L) sin(kL_R), scaled to O(1)."""
    k = np.asarray(k, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    f = (k * np.sin(k * geometry.box_width)
         + 2 * alpha * np.sin(k * geometry.left_width) * np.sin(k * geometry.right_width))
    return f / (k + 2 * alpha)


def solve_wavenumbers(geometry: SpbGeometry, alphas, n_levels: int = DEFAULT_N_BASIS,
                      tol: float = 1e-13) -> np.ndarray:
    """Wavenumbers for many barrier strengths at once, shape (len(alphas), n_levels)."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    if np.any(alphas < 0) or not np.all(np.isfinite(alphas)):
        raise SpectrumError("barrier strength must be finite and >= 0")
    if n_levels < 1:
        raise SpectrumError("n_levels must be >= 1")
    if not tol > 0:
        raise SpectrumError("tol must be positive")
    br = _brackets(geometry, n_levels)
    if len(br.lo) < n_levels:
        raise SpectrumError(f"could only bracket {len(br.lo)} of {n_levels} levels")
    free = ~br.node
    lo = np.broadcast_to(br.lo[free], (len(alphas), free.sum())).copy()
    hi = np.broadcast_to(br.hi[free], (len(alphas), free.sum())).copy()
    a = alphas[:, None]
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        pos = matching_function(mid, a, geometry) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    # safeguarded Newton on the pole-free residual, bracket kept by the sign of g
    # a root can sit on a bracket edge set by an earlier step, where rounding
    # pushes Newton just outside; keep the best point seen per entry
    k = 0.5 * (lo + hi)
    best_k = k.copy()
    best_r = np.full(k.shape, np.inf)
    LL, LR, L = geometry.left_width, geometry.right_width, geometry.box_width
    for _ in range(_NEWTON_ITERS):
        sL, cL = np.sin(k * LL), np.cos(k * LL)
        sR, cR = np.sin(k * LR), np.cos(k * LR)
        sT, cT = np.sin(k * L), np.cos(k * L)
        f = k * sT + 2 * a * sL * sR
        resid = np.abs(f) / (k + 2 * a)
        better = resid < best_r
        best_k = np.where(better, k, best_k)
        best_r = np.where(better, resid, best_r)
        if np.all(best_r <= tol):
            break
        fp = sT + k * L * cT + 2 * a * (LL * cL * sR + LR * sL * cR)
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = k - f / fp
        ok = (cand >= lo) & (cand <= hi)
        new = np.where(ok, cand, 0.5 * (lo + hi))
        k = new
        pos = matching_function(k, a, geometry) > 0
        lo = np.where(pos, k, lo)
        hi = np.where(pos, hi, k)
    else:
        i, j = np.unravel_index(np.argmax(best_r), best_r.shape)
        jj = np.flatnonzero(free)[j]
        raise SpectrumError(
            f"root refinement failed for level {jj + 1} in k-interval "
            f"({br.lo[jj]:.12g}, {br.hi[jj]:.12g}) at alpha={alphas[i]:.6g}")
    out = np.empty((len(alphas), n_levels))
    out[:, free] = best_k
    out[:, br.node] = br.hi[br.node]
    return out


def _amplitudes(k: np.ndarray, geometry: SpbGeometry) -> tuple[np.ndarray, np.ndarray]:
    LL, LR = geometry.left_width, geometry.right_width
    sL, sR = np.sin(k * LL), np.sin(k * LR)
    A, B = sR.copy(), sL.copy()
    node = np.abs(sL) + np.abs(sR) < 1e-10
    # psi(d) = 0: fix the ratio from derivative continuity instead
    A = np.where(node, np.cos(k * LR), A)
    B = np.where(node, -np.cos(k * LL), B)
    norm2 = (A ** 2 * (LL / 2 - np.sin(2 * k * LL) / (4 * k))
             + B ** 2 * (LR / 2 - np.sin(2 * k * LR) / (4 * k)))
    s = 1 / np.sqrt(norm2)
    return A * s, B * s


def solve_spectra(geometry: SpbGeometry, alphas, n_levels: int = DEFAULT_N_BASIS,
                  tol: float = 1e-13):
    """Vectorized solve: returns (k, A, B), each shaped (len(alphas), n_levels)."""
    k = solve_wavenumbers(geometry, alphas, n_levels, tol)
    A, B = _amplitudes(k, geometry)
    return k, A, B


def solve_spectrum(geometry: SpbGeometry, alpha: float, n_levels: int = DEFAULT_N_BASIS,
                   tol: float = 1e-13) -> Spectrum:
    if n_levels < 2:
        raise SpectrumError("n_levels must be >= 2")
    if alpha < 0:
        raise SpectrumError(f"barrier strength must be >= 0, got {alpha}")
    k, A, B = solve_spectra(geometry, [alpha], n_levels, tol)
    k, A, B = k[0], A[0], B[0]
    levels = [EigenLevel(n + 1, 0.5 * k[n] ** 2, k[n], A[n], B[n]) for n in range(n_levels)]
    return Spectrum(geometry, float(alpha), k, A, B, levels)


def eigenfunction_eval(level: EigenLevel, geometry: SpbGeometry, x):
    x = np.asarray(x, dtype=float)
    half = geometry.box_width / 2
    if np.any(x < -half) or np.any(x > half):
        raise SpectrumError(f"position outside box [-{half}, {half}]")
    left = level.A * np.sin(level.k * (x + half))
    right = level.B * np.sin(level.k * (half - x))
    out = np.where(x <= geometry.offset, left, right)
    return out[()] if out.ndim == 0 else out


def _sine_product_integral(a, p, q):
    """int_0^a sin(p u) sin(q u) du, stable at p == q."""
    return 0.5 * a * (np.sinc((p - q) * a / np.pi) - np.sinc((p + q) * a / np.pi))


def _sine_product_matrix(a, p, q):
    """Batched int_0^a sin(p_m u) sin(q_n u) du for p (..., N), q (..., N)."""
    sp, cp = np.sin(p * a), np.cos(p * a)
    sq, cq = np.sin(q * a), np.cos(q * a)
    num = sp[..., :, None] * (q * cq)[..., None, :] - (p * cp)[..., :, None] * sq[..., None, :]
    den = p[..., :, None] ** 2 - q[..., None, :] ** 2
    n = p.shape[-1]
    idx = np.arange(n)
    den[..., idx, idx] = 1.0
    out = num / den
    # the difference form cancels badly on the diagonal, where p and q nearly agree
    out[..., idx, idx] = _sine_product_integral(a, p, q)
    return out


def overlap_blocks(geometry: SpbGeometry, k1, A1, B1, k2, A2, B2) -> np.ndarray:
    """Batched overlaps <psi_m(1)|psi_n(2)>; inputs shaped (..., N), output (..., N, N)."""
    left = _sine_product_matrix(geometry.left_width, k1, k2)
    left *= A1[..., :, None]
    left *= A2[..., None, :]
    right = _sine_product_matrix(geometry.right_width, k1, k2)
    right *= B1[..., :, None]
    right *= B2[..., None, :]
    return left + right


def overlap_matrix(source: Spectrum, target: Spectrum) -> np.ndarray:
    """O[m, n] = <psi_m(source) | psi_n(target)> from closed-form sine integrals."""
    if source.geometry != target.geometry:
        raise SpectrumError("overlap between spectra of different geometries")
    if source.n_basis != target.n_basis:
        raise SpectrumError("overlap between spectra of different basis sizes")
    return overlap_blocks(source.geometry, source.k, source.A, source.B,
                          target.k, target.A, target.B)


def grid_energies(geometry: SpbGeometry, alpha: float, n_levels: int,
                  n_cells: int = 4096) -> np.ndarray:
    """Finite-difference reference energies.

    Two uniform segments meet at the barrier node so the delta sits exactly on
    the grid; it enters as alpha / w on that node, w being the node's cell width.
    """
    LL, LR = geometry.left_width, geometry.right_width
    nl = max(1, int(round(n_cells * LL / geometry.box_width)))
    nr = n_cells - nl
    hl, hr = LL / nl, LR / nr
    spacing_lo = np.concatenate([np.full(nl, hl), np.full(nr - 1, hr)])
    spacing_hi = np.concatenate([np.full(nl - 1, hl), [hr], np.full(nr - 1, hr)])
    w = 0.5 * (spacing_lo + spacing_hi)
    diag = 0.5 * (1 / spacing_lo + 1 / spacing_hi)
    diag[nl - 1] += alpha
    off = -0.5 / spacing_hi[:-1]
    # symmetric generalized problem K psi = E W psi with diagonal W
    s = 1 / np.sqrt(w)
    vals = eigh_tridiagonal(diag * s * s, off * s[:-1] * s[1:], select="i",
                            select_range=(0, n_levels - 1), eigvals_only=True)
    return vals
