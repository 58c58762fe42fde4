"""Chopped-random-basis protocols and a derivative-free simplex maximizer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import (ConvergenceError, Protocol, crab_cost, default_micro_steps,
                       final_occupations, spline_build)
from .spectrum import DEFAULT_N_BASIS, E0, SpbGeometry, SpectrumError

ALPHA_FINAL = 200 * E0
ANSATZ_FORMAT = "szc-crab/1"
PENALTY = -1e300            # value given to vertices whose objective is not finite


@dataclass(frozen=True)
class CrabAnsatz:
    """alpha(t) = alpha0(t) [1 + sin(pi t/T) sum_n (A_n cos w_n t + B_n sin w_n t)].

    alpha0 is the linear ramp 0 -> alpha_final.  Negative values are clamped
    to zero by ``__call__``; ``raw`` returns the unclamped expression.
    """

    T: float
    A: np.ndarray = field(default_factory=lambda: np.zeros(0))
    B: np.ndarray = field(default_factory=lambda: np.zeros(0))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_final: float = ALPHA_FINAL

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("duration T must be positive")
        for name in ("A", "B", "omega"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if not len(self.A) == len(self.B) == len(self.omega):
            raise ValueError("A, B and omega must have the same length")

    @classmethod
    def from_vector(cls, T: float, x, alpha_final: float = ALPHA_FINAL) -> "CrabAnsatz":
        x = np.asarray(x, dtype=float)
        if len(x) % 3:
            raise ValueError("parameter vector length must be a multiple of 3")
        n = len(x) // 3
        return cls(T, x[:n], x[n:2 * n], x[2 * n:], alpha_final)

    @property
    def n_c(self) -> int:
        return len(self.A)

    @property
    def duration(self) -> float:
        return self.T

    def vector(self) -> np.ndarray:
        return np.concatenate([self.A, self.B, self.omega])

    def alpha0(self, t):
        return self.alpha_final * np.asarray(t, dtype=float) / self.T

    def raw(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"time outside ansatz range [0, {self.T}]")
        # min(t, T - t) makes the regularizer vanish exactly at both ends
        lam = np.sin(np.pi * np.minimum(t, self.T - t) / self.T)
        wt = np.multiply.outer(t, self.omega)
        series = (np.cos(wt) @ self.A + np.sin(wt) @ self.B) if self.n_c else 0.0 * t
        out = self.alpha0(t) * (1.0 + lam * series)
        return out[()] if np.ndim(out) == 0 else out

    def evaluate(self, t):
        """Clamped value and a flag telling whether the clamp was active."""
        r = self.raw(t)
        return np.maximum(r, 0.0), np.asarray(r < 0)

    def __call__(self, t):
        return np.maximum(self.raw(t), 0.0)

    def sample(self, n_knots: int = 201) -> Protocol:
        """Dense natural-spline protocol through the clamped ansatz."""
        t = np.linspace(0.0, self.T, n_knots)
        return spline_build(zip(t, self(t)))

    def to_json(self) -> dict:
        return {"format": ANSATZ_FORMAT, "T": self.T, "alpha_final": self.alpha_final / E0,
                "alpha_unit": "E0L", "n_c": self.n_c, "A": self.A.tolist(),
                "B": self.B.tolist(), "omega": self.omega.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "CrabAnsatz":
        for key in ("T", "A", "B", "omega"):
            if key not in data:
                raise ValueError(f"ansatz JSON missing field '{key}'")
        return cls(float(data["T"]), data["A"], data["B"], data["omega"],
                   float(data.get("alpha_final", 200.0)) * E0)


# --- Nelder-Mead ------------------------------------------------------------

REFLECT, EXPAND, CONTRACT, SHRINK = 1.0, 2.0, 0.5, 0.5


@dataclass
class SimplexState:
    vertices: np.ndarray        # (k+1, k), kept sorted best first
    values: np.ndarray          # (k+1,)
    iteration: int = 0
    best_x: np.ndarray | None = None
    best_value: float = -math.inf

    def __post_init__(self):
        self.sort()

    def sort(self):
        order = np.argsort(-self.values, kind="stable")
        self.vertices = self.vertices[order]
        self.values = self.values[order]
        if self.values[0] > self.best_value:
            self.best_value = float(self.values[0])
            self.best_x = self.vertices[0].copy()

    @property
    def spread(self) -> float:
        return float(self.values[0] - self.values[-1])

    @property
    def diameter(self) -> float:
        return float(np.abs(self.vertices[1:] - self.vertices[0]).max())


class _Counted:
    def __init__(self, fn):
        self.fn = fn
        self.evals = 0
        self.nonfinite = 0

    def __call__(self, x) -> float:
        self.evals += 1
        try:
            v = float(self.fn(x))
        except (ArithmeticError, ConvergenceError, SpectrumError):
            v = math.nan
        if not math.isfinite(v):
            self.nonfinite += 1
            return PENALTY
        return v


def nelder_mead_step(state: SimplexState, f: Callable) -> list[tuple[str, np.ndarray, float]]:
    """One simplex iteration (maximizing); returns the trace of points tried."""
    x, v = state.vertices, state.values
    centroid = x[:-1].mean(axis=0)
    worst = x[-1]
    xr = centroid + REFLECT * (centroid - worst)
    fr = f(xr)
    trace = [("reflect", xr, fr)]
    accepted = None
    if fr > v[0]:
        xe = centroid + EXPAND * (xr - centroid)
        fe = f(xe)
        trace.append(("expand", xe, fe))
        accepted = (xe, fe) if fe > fr else (xr, fr)
    elif fr > v[-2]:
        accepted = (xr, fr)
    elif fr > v[-1]:
        xc = centroid + CONTRACT * (xr - centroid)
        fc = f(xc)
        trace.append(("contract_out", xc, fc))
        if fc >= fr:
            accepted = (xc, fc)
    else:
        xc = centroid + CONTRACT * (worst - centroid)
        fc = f(xc)
        trace.append(("contract_in", xc, fc))
        if fc > v[-1]:
            accepted = (xc, fc)
    if accepted is not None:
        x[-1], v[-1] = accepted
        trace.append(("accept", accepted[0], accepted[1]))
    else:
        for i in range(1, len(x)):
            x[i] = x[0] + SHRINK * (x[i] - x[0])
            v[i] = f(x[i])
        trace.append(("shrink", x[0], v[0]))
    state.iteration += 1
    state.sort()
    return trace


@dataclass
class NelderMeadResult:
    x: np.ndarray
    value: float
    evals: int
    iterations: int
    nonfinite: int              # objective calls rejected with the penalty value
    converged: bool             # spread test met (as opposed to budget exhausted)
    history: list[float]        # best value after each iteration


def _initial_simplex(start, steps, rng=None):
    k = len(start)
    pts = np.tile(start, (k + 1, 1))
    for i in range(k):
        s = steps[i]
        if rng is not None and rng.random() < 0.5:
            s = -s
        pts[i + 1, i] += s
    return pts


def nelder_mead_maximize(objective: Callable, start, max_evals: int = 2000,
                         spread_tol: float = 1e-12, restarts: int = 0, seed: int = 0,
                         step=None, x_tol: float = 1e-9, rebuild_scale: float = 1.0,
                         stall_iters: int | None = None,
                         stall_tol: float = 0.0) -> NelderMeadResult:
    """Maximize ``objective`` with the Nelder-Mead simplex.

    Stops when the value spread across the simplex falls below ``spread_tol``
    and its largest vertex offset below ``x_tol``, or when the evaluation
    budget runs out.  Each restart rebuilds the simplex around the best point
    with random step signs drawn from ``seed``; the k-th rebuild uses
    ``step * rebuild_scale**k``.  With ``stall_iters`` set, a simplex whose best
    value gained no more than ``stall_tol`` over that many iterations also
    triggers a rebuild (while restarts remain).
    """
    start = np.array(start, dtype=float).ravel()
    k = len(start)
    if k < 1:
        raise ValueError("need at least one parameter")
    if max_evals < k + 1:
        raise ValueError(f"max_evals must be >= {k + 1}")
    if step is None:
        step = np.where(start != 0, 0.05 * np.abs(start), 0.00025)
    step = np.broadcast_to(np.asarray(step, dtype=float), (k,)).copy()
    rng = np.random.default_rng(seed)
    f = _Counted(objective)
    history: list[float] = []
    iterations = 0
    converged = False
    best_x, best_v = start, -math.inf
    for attempt in range(restarts + 1):
        if f.evals + k + 1 > max_evals:
            break
        pts = _initial_simplex(best_x if attempt else start, step * rebuild_scale ** attempt,
                               rng if attempt else None)
        state = SimplexState(pts, np.array([f(p) for p in pts]), best_x=best_x.copy(),
                             best_value=best_v)
        converged = False
        marks = []
        while f.evals < max_evals:
            if state.spread < spread_tol and state.diameter < x_tol:
                converged = True
                break
            # a shrink costs k evaluations; never overrun the budget
            if f.evals + k + 2 > max_evals:
                break
            nelder_mead_step(state, f)
            iterations += 1
            history.append(state.best_value)
            marks.append(state.best_value)
            if (stall_iters and attempt < restarts and len(marks) > stall_iters
                    and marks[-1] - marks[-1 - stall_iters] <= stall_tol):
                break
        best_x, best_v = state.best_x, state.best_value
    return NelderMeadResult(best_x.copy(), float(best_v), f.evals, iterations, f.nonfinite,
                            converged, history)


# --- CRAB optimization ------------------------------------------------------

@dataclass(frozen=True)
class CrabOptions:
    max_evals: int = 2000               # per restart
    restarts: int = 5
    spread_tol: float = 1e-10
    x_tol: float = 1e-6
    seed: int = 0
    target_cost: float = 0.99995        # cost <= 1 - leak^2 / 2, so this bounds leak <= 1e-2
    n_micro_search: int | None = None   # default "train" tier
    n_micro_final: int | None = None    # default "report" tier
    n_basis: int = DEFAULT_N_BASIS
    amplitude_step: float = 0.2
    omega_step: float = 0.2             # fraction of the nominal frequency
    rebuilds: int = 20                  # simplex rebuilds within one restart
    stall_iters: int = 60
    stall_tol: float = 1e-7
    rebuild_scale: float = 0.5
    jobs: int = 1


@dataclass
class CrabRun:
    restart: int
    omega_init: np.ndarray
    vector: np.ndarray
    search_cost: float
    evals: int
    nonfinite: int


@dataclass
class CrabResult:
    ansatz: CrabAnsatz
    protocol: Protocol          # dense knot sampling of the ansatz
    occupations: np.ndarray     # report tier, evaluated from the ansatz
    cost: float
    eval_count: int
    below_target: bool
    runs: list[CrabRun]
    chosen: int
    n_micro_final: int

    def to_json(self) -> dict:
        return {
            "format": "szc-crab-result/1",
            "cost": self.cost,
            "occupations": self.occupations.tolist(),
            "occ_higher": float(self.occupations[2:].sum()),
            "ansatz": self.ansatz.to_json(),
            "eval_count": self.eval_count,
            "below_target": self.below_target,
            "chosen_restart": self.chosen,
            "n_micro_final": self.n_micro_final,
            "restarts": [{"restart": r.restart, "search_cost": r.search_cost, "evals": r.evals,
                          "nonfinite": r.nonfinite, "omega_init": r.omega_init.tolist()}
                         for r in self.runs],
        }


def _crab_objective(geometry, T, n_micro, n_basis):
    def cost(x):
        ansatz = CrabAnsatz.from_vector(T, x)
        return crab_cost(final_occupations(ansatz, geometry, n_micro, n_basis))
    return cost


def _crab_restart(geometry, T, n_c, opts: CrabOptions, restart, seed_seq) -> CrabRun:
    rng = np.random.default_rng(seed_seq)
    n = np.arange(1, n_c + 1)
    omega0 = 2 * np.pi * n / T * (1 + rng.uniform(-0.5, 0.5, n_c))
    start = np.concatenate([np.zeros(2 * n_c), omega0])
    step = np.concatenate([np.full(2 * n_c, opts.amplitude_step), opts.omega_step * omega0])
    n_micro = opts.n_micro_search or default_micro_steps(T, "train")
    res = nelder_mead_maximize(_crab_objective(geometry, T, n_micro, opts.n_basis), start,
                               max_evals=opts.max_evals, spread_tol=opts.spread_tol,
                               restarts=opts.rebuilds, seed=int(rng.integers(2 ** 32)),
                               step=step, x_tol=opts.x_tol, rebuild_scale=opts.rebuild_scale,
                               stall_iters=opts.stall_iters, stall_tol=opts.stall_tol)
    return CrabRun(restart, omega0, res.x, res.value, res.evals, res.nonfinite)


def crab_optimize(geometry: SpbGeometry, T: float, n_c: int = 3,
                  options: CrabOptions | None = None) -> CrabResult:
    """Maximize the splitting cost over {A_n, B_n, omega_n} at a single offset.

    Restarts are processed in order; the first one whose search cost reaches
    ``target_cost`` is kept, otherwise the best.  With ``jobs > 1`` restarts run
    in batches on a process pool, which does not change the outcome.
    """
    opts = options or CrabOptions()
    if n_c < 0:
        raise ValueError("n_c must be >= 0")
    n_final = opts.n_micro_final or default_micro_steps(T, "report")
    runs: list[CrabRun] = []
    if n_c == 0:
        n_micro = opts.n_micro_search or default_micro_steps(T, "train")
        v = _crab_objective(geometry, T, n_micro, opts.n_basis)(np.zeros(0))
        runs.append(CrabRun(0, np.zeros(0), np.zeros(0), v, 1, 0))
    else:
        seeds = np.random.SeedSequence(opts.seed).spawn(max(opts.restarts, 1))
        batch = max(1, opts.jobs)
        for lo in range(0, len(seeds), batch):
            idx = range(lo, min(lo + batch, len(seeds)))
            if batch > 1:
                from concurrent.futures import ProcessPoolExecutor
                with ProcessPoolExecutor(batch) as pool:
                    futs = [pool.submit(_crab_restart, geometry, T, n_c, opts, i, seeds[i])
                            for i in idx]
                    runs.extend(fu.result() for fu in futs)
            else:
                runs.extend(_crab_restart(geometry, T, n_c, opts, i, seeds[i]) for i in idx)
            if any(r.search_cost >= opts.target_cost for r in runs):
                break
    hit = [r for r in runs if r.search_cost >= opts.target_cost]
    best = hit[0] if hit else max(runs, key=lambda r: r.search_cost)
    ansatz = CrabAnsatz.from_vector(T, best.vector)
    occ = final_occupations(ansatz, geometry, n_final, opts.n_basis)
    cost = crab_cost(occ)
    return CrabResult(ansatz, ansatz.sample(), occ, cost, sum(r.evals for r in runs),
                      cost < opts.target_cost, runs, best.restart, n_final)
