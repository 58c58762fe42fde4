"""Barrier protocols and wave-function propagation in the instantaneous eigenbasis.

Each micro-step holds alpha fixed at its midpoint value and advances the
amplitudes by exact phases exp(-i E_n dt) in that step's eigenbasis; between
steps the amplitudes are re-expressed in the next eigenbasis through the
closed-form overlap matrix.  Since the overlaps are a change of basis, this is
the exponential midpoint rule with a truncated basis.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .spectrum import (DEFAULT_N_BASIS, E0, SpbGeometry, SpectrumError, overlap_blocks,
                       solve_spectra)

NORM_DRIFT_LIMIT = 1e-6
MICRO_STEPS_PER_TIME = 400   # 2000 micro-steps for T = 5
PROTOCOL_FORMAT = "szc-protocol/1"


class ConvergenceError(RuntimeError):
    """Propagation lost more norm than allowed to basis truncation."""


# micro-steps per unit time for the named fidelity tiers
FIDELITY_TIERS = {"train": 200, "default": MICRO_STEPS_PER_TIME, "report": 800}


def default_micro_steps(duration: float, tier: str = "default") -> int:
    try:
        rate = FIDELITY_TIERS[tier]
    except KeyError:
        raise ValueError(f"unknown fidelity tier {tier!r}") from None
    return max(1, int(math.ceil(rate * duration)))


@dataclass(frozen=True)
class Protocol:
    """Knot sequence alpha_i at t_i, interpolated by a natural cubic spline.

    Knot values are in energy-length units (alpha, not alpha / E0L).
    """

    times: np.ndarray
    values: np.ndarray
    _spline: CubicSpline = field(repr=False, compare=False)

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        eps = 1e-12 * max(1.0, self.duration)
        if np.any(t < -eps) or np.any(t > self.duration + eps):
            raise ValueError(f"time outside protocol range [0, {self.duration}]")
        out = self._spline(np.clip(t, 0.0, self.duration))
        return out[()] if out.ndim == 0 else out

    def second_derivative(self, t):
        return self._spline(t, 2)

    def knots(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.values.tolist()))

    def to_json(self) -> dict:
        return {
            "format": PROTOCOL_FORMAT,
            "T": self.duration,
            "knots": [{"t": t, "alpha": a / E0} for t, a in self.knots()],
            "alpha_unit": "E0L",
            "interpolation": "natural-cubic",
        }


def spline_build(knots) -> Protocol:
    """Natural cubic spline through ``(t, alpha)`` pairs starting at t = 0."""
    knots = list(knots)
    if len(knots) < 2:
        raise ValueError("a protocol needs at least 2 knots")
    times = np.array([float(t) for t, _ in knots])
    values = np.array([float(a) for _, a in knots])
    if np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be strictly increasing")
    if times[0] != 0.0:
        raise ValueError(f"first knot must be at t=0, got {times[0]}")
    if not np.all(np.isfinite(values)):
        raise ValueError("knot values must be finite")
    return Protocol(times, values, CubicSpline(times, values, bc_type="natural"))


def constant_protocol(alpha: float, duration: float) -> Protocol:
    return spline_build([(0.0, alpha), (duration, alpha)])


def linear_ramp(alpha_final: float, duration: float) -> Protocol:
    return spline_build([(0.0, 0.0), (duration, alpha_final)])


def protocol_from_json(data: dict) -> Protocol:
    for key in ("T", "knots"):
        if key not in data:
            raise ValueError(f"protocol JSON missing field '{key}'")
    unit = data.get("alpha_unit", "E0L")
    if unit not in ("E0L", "raw"):
        raise ValueError(f"protocol JSON field 'alpha_unit' has unknown value {unit!r}")
    if data.get("interpolation", "natural-cubic") != "natural-cubic":
        raise ValueError("protocol JSON field 'interpolation' must be 'natural-cubic'")
    scale = E0 if unit == "E0L" else 1.0
    knots = []
    for i, kn in enumerate(data["knots"]):
        try:
            knots.append((float(kn["t"]), float(kn["alpha"]) * scale))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"protocol JSON field 'knots[{i}]' is malformed") from exc
    proto = spline_build(knots)
    if abs(proto.duration - float(data["T"])) > 1e-9 * max(1.0, proto.duration):
        raise ValueError("protocol JSON field 'T' disagrees with the last knot time")
    return proto


def load_protocol(path) -> Protocol:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"protocol file {path} is not valid JSON: {exc}") from exc
    return protocol_from_json(data)


def save_protocol(protocol: Protocol, path) -> None:
    Path(path).write_text(json.dumps(protocol.to_json(), indent=2) + "\n")


@dataclass(frozen=True)
class AmplitudeState:
    amplitudes: np.ndarray
    alpha: float = 0.0
    t: float = 0.0

    @classmethod
    def ground(cls, n_basis: int = DEFAULT_N_BASIS, alpha: float = 0.0) -> "AmplitudeState":
        a = np.zeros(n_basis, dtype=complex)
        a[0] = 1.0
        return cls(a, alpha, 0.0)

    def conjugate(self) -> "AmplitudeState":
        return AmplitudeState(self.amplitudes.conj(), self.alpha, self.t)


def occupations(state: AmplitudeState) -> np.ndarray:
    return np.abs(state.amplitudes) ** 2


@dataclass
class Trajectory:
    times: np.ndarray
    alphas: np.ndarray          # basis alpha each row is expressed in
    amplitudes: np.ndarray      # (len(times), n_basis)
    norm_drift: float
    clamped: bool
    truncation_leak: float = 0.0

    @property
    def final(self) -> AmplitudeState:
        return AmplitudeState(self.amplitudes[-1], float(self.alphas[-1]), float(self.times[-1]))

    @property
    def occupations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @property
    def final_occupations(self) -> np.ndarray:
        occ = np.abs(self.amplitudes[-1]) ** 2
        return occ / occ.sum()


_CHUNK = 1024


def _polar_apply(O, Ot, b, tol=1e-15, max_terms=40):
    """Return (O^T O)^(-1/2) b via the binomial series in X = I - O^T O.

    With b = O^T a this is the orthogonal polar factor of O^T applied to a.
    """
    out = b.copy()
    term = b
    for j in range(1, max_terms):
        xt = term - Ot @ (O @ term)
        term = xt * ((2 * j - 1) / (2 * j))
        out = out + term
        if np.vdot(term, term).real < tol * tol:
            break
    return out


def propagate(initial: AmplitudeState | None, protocol, geometry: SpbGeometry,
              n_micro: int | None = None, n_basis: int = DEFAULT_N_BASIS,
              record: bool = True, check: bool = True) -> Trajectory:
    """Evolve ``initial`` through ``protocol`` (anything with ``duration`` and ``__call__``).

    Rows are at the micro-step boundaries; the last row is projected onto the
    eigenbasis of alpha(T).  With ``record=False`` only the first and last rows
    are kept.

    Basis changes use the orthogonal polar factor of the truncated overlap
    matrix.  The exception is a quench, where
    ``initial.alpha`` differs from alpha(0): that first projection is raw, so
    the norm it loses to truncation shows up in ``norm_drift``.
    ``Trajectory.truncation_leak`` accumulates the norm the raw projections
    would have discarded everywhere else.
    """
    T = float(protocol.duration)
    if n_micro is None:
        n_micro = default_micro_steps(T)
    if n_micro < 1:
        raise ValueError("n_micro must be >= 1")
    if n_basis < 2:
        raise ValueError("n_basis must be >= 2")
    if initial is None:
        initial = AmplitudeState.ground(n_basis, max(float(protocol(0.0)), 0.0))
    a = np.zeros(n_basis, dtype=complex)
    m = min(n_basis, len(initial.amplitudes))
    a[:m] = initial.amplitudes[:m]
    a0 = a.copy()
    if abs(np.vdot(a, a).real - 1) > 1e-8:
        raise ValueError("initial state is not normalized")

    dt = T / n_micro
    t_mid = (np.arange(n_micro) + 0.5) * dt
    raw = np.concatenate([np.atleast_1d(protocol(t_mid)), [protocol(T)]])
    clamped = bool(np.any(raw < 0))
    basis_alpha = np.concatenate([[initial.alpha], np.maximum(raw, 0.0)])
    quench = initial.alpha != max(float(protocol(0.0)), 0.0)

    rows = [a0] if record else None
    leak = 0.0
    prev = solve_spectra(geometry, basis_alpha[:1], n_basis)
    for start in range(1, len(basis_alpha), _CHUNK):
        stop = min(start + _CHUNK, len(basis_alpha))
        k, A, B = solve_spectra(geometry, basis_alpha[start:stop], n_basis)
        kk = np.concatenate([prev[0], k])
        AA = np.concatenate([prev[1], A])
        BB = np.concatenate([prev[2], B])
        O = overlap_blocks(geometry, kk[:-1], AA[:-1], BB[:-1], kk[1:], AA[1:], BB[1:])
        Ot = np.ascontiguousarray(O.transpose(0, 2, 1))
        phases = np.exp(-0.5j * k ** 2 * dt)
        for i in range(stop - start):
            step = start + i
            b = Ot[i] @ a
            if step > 1 or not quench:
                nb2 = np.vdot(b, b).real
                leak += np.vdot(a, a).real - nb2
                b = _polar_apply(O[i], Ot[i], b)
            a = b
            if step <= n_micro:            # the projection onto alpha(T) carries no phase
                a = a * phases[i]
            if record:
                rows.append(a)
        prev = (k[-1:], A[-1:], B[-1:])

    if record:
        # drop the pre-projection copy of the last micro-step
        rows = rows[:-2] + [rows[-1]]
        amps = np.array(rows)
        times = np.arange(n_micro + 1) * dt
        times[-1] = T
        alphas = np.concatenate([[initial.alpha], basis_alpha[1:-2], [basis_alpha[-1]]])
    else:
        amps = np.array([a0, a])
        times = np.array([0.0, T])
        alphas = np.array([initial.alpha, basis_alpha[-1]])
    drift = abs(float(np.vdot(a, a).real) - 1.0)
    if check and drift > NORM_DRIFT_LIMIT:
        raise ConvergenceError(
            f"norm drift {drift:.3g} exceeds {NORM_DRIFT_LIMIT:g}; "
            f"increase n_basis (now {n_basis}) or n_micro (now {n_micro})")
    return Trajectory(times, alphas, amps, drift, clamped, max(leak, 0.0))


def final_occupations(protocol, geometry: SpbGeometry, n_micro: int | None = None,
                      n_basis: int = DEFAULT_N_BASIS) -> np.ndarray:
    return propagate(None, protocol, geometry, n_micro, n_basis, record=False).final_occupations


@dataclass(frozen=True)
class ConvergedResult:
    occupations: np.ndarray     # at the finest resolution tried
    n_micro: int
    change: float               # max |occ(n) - occ(n/2)|
    norm_drift: float           # worst raw drift over all resolutions


def converged_occupations(protocol, geometry: SpbGeometry, tol: float = 1e-5,
                          n_start: int | None = None, max_micro: int | None = None,
                          n_basis: int = DEFAULT_N_BASIS, initial: AmplitudeState | None = None
                          ) -> ConvergedResult:
    """Double n_micro until the final occupations move by less than ``tol``.

    Raises ConvergenceError if ``max_micro`` is reached first.
    """
    T = float(protocol.duration)
    n = n_start or default_micro_steps(T, "report")
    max_micro = max_micro or 64 * n
    tr = propagate(initial, protocol, geometry, n, n_basis, record=False)
    prev, drift = tr.final_occupations, tr.norm_drift
    while True:
        n *= 2
        if n > max_micro:
            raise ConvergenceError(
                f"final occupations not converged to {tol:g} within {max_micro} micro-steps")
        tr = propagate(initial, protocol, geometry, n, n_basis, record=False)
        occ = tr.final_occupations
        drift = max(drift, tr.norm_drift)
        change = float(np.abs(occ - prev).max())
        if change < tol:
            return ConvergedResult(occ, n, change, drift)
        prev = occ


def crab_cost(final_occupations) -> float:
    occ = np.asarray(final_occupations, dtype=float)
    return float(1.0 - ((occ[0] - 0.5) ** 2 + (occ[1] - 0.5) ** 2))


@dataclass(frozen=True)
class SweepRow:
    d: float
    occ1: float
    occ2: float
    occ_higher: float
    failed: bool = False

    @property
    def cost(self) -> float:
        return crab_cost([self.occ1, self.occ2])


def _sweep_one(protocol, box_width, d, n_micro, n_basis) -> SweepRow:
    try:
        occ = final_occupations(protocol, SpbGeometry(box_width, d), n_micro, n_basis)
    except (ConvergenceError, SpectrumError):
        return SweepRow(d, math.nan, math.nan, math.nan, failed=True)
    return SweepRow(d, float(occ[0]), float(occ[1]), float(occ[2:].sum()))


def sweep_protocol(protocol, d_values, box_width: float = 1.0, n_micro: int | None = None,
                   n_basis: int = DEFAULT_N_BASIS, jobs: int = 1) -> list[SweepRow]:
    """Final occupations of one protocol for each barrier offset in ``d_values``."""
    d_values = sorted(float(d) for d in d_values)
    for d in d_values:
        if not 0 <= d < box_width / 2:
            raise SpectrumError(f"offset d={d} outside [0, L/2)")
    if jobs > 1 and len(d_values) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(_sweep_one, protocol, box_width, d, n_micro, n_basis)
                       for d in d_values]
            return [f.result() for f in futures]
    return [_sweep_one(protocol, box_width, d, n_micro, n_basis) for d in d_values]
