"""Exit times, Feynman-Kac functionals and Khasminskii quantities.

Every quantity is computed deterministically by time stepping the backward
equation of the grid diffusion, and the same diffusion can be sampled as a
continuous-time Markov chain whose generator is the assembled operator. The
two routes are meant to cross-check each other.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .elliptic import CoefficientField, DiscreteOperator, ScalarField, ThetaStepper, assemble_operator
from .geometry import DomainError, DomainMask


class ExitTimeError(RuntimeError):
    pass


class FeynmanKacOverflow(RuntimeError):
    pass


class PaddingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    times: np.ndarray
    values: np.ndarray
    x: tuple
    stderr: np.ndarray | None = None

    def __post_init__(self):
        if self.times[0] != 0 or self.values[0] != 1:
            raise ValueError("survival curve must start at (0, 1)")

    def at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))

    def integral(self, t: float) -> float:
        """``E[min(tau, t)] = int_0^t P(tau > s) ds`` by the trapezoid rule."""
        k = int(np.searchsorted(self.times, t))
        ts = np.append(self.times[:k], t)
        ws = np.append(self.values[:k], self.at(t))
        return float(np.trapezoid(ws, ts))


@dataclass(frozen=True)
class MedianExitTime:
    value: float
    eta: float
    bracket: tuple


@dataclass(frozen=True, eq=False)
class PathSamples:
    """Monte Carlo paths of the grid diffusion, one entry per path.

    ``integral`` holds the potential accumulated up to ``min(tau, horizon)``;
    after absorption nothing accumulates (the cemetery carries ``V = 0``).
    """

    exit_time: np.ndarray
    integral: np.ndarray
    exited: np.ndarray
    horizon: float
    seed: int

    @property
    def count(self) -> int:
        return len(self.exit_time)

    def survival(self, t: float):
        """Empirical ``P(tau > t)`` with its standard error."""
        if t > self.horizon:
            raise ValueError("t exceeds the simulated horizon")
        alive = (self.exit_time > t) | ~self.exited
        p = float(alive.mean())
        return p, math.sqrt(max(p * (1 - p), 0.0) / self.count)

    def mean_integral(self):
        return _mean_se(self.integral)

    def feynman_kac(self, weight: float = 1.0):
        """Estimate ``E[1{tau > T} exp(weight * int V)]`` at the horizon."""
        vals = np.where(self.exited, 0.0, np.exp(weight * self.integral))
        return _mean_se(vals)

    def summary(self) -> dict:
        p, se = self.survival(self.horizon)
        m, mse = self.mean_integral()
        return {"count": self.count, "seed": self.seed, "horizon": self.horizon,
                "survival": p, "survival_se": se, "mean_integral": m,
                "mean_integral_se": mse, "reduction": "pairwise"}


def _mean_se(vals):
    vals = np.asarray(vals, dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0


def time_grid(t0: float, t_max: float, per_decade: int = 64, dt_max: float | None = None) -> np.ndarray:
    """Geometric grid from ``t0`` (64 points per decade by default) up to ``t_max``.

    With ``dt_max`` the spacing switches to uniform once the geometric
    increment would exceed it. The grid starts at 0 and ends at ``t_max``.
    """
    if not 0 < t0 < t_max:
        raise ValueError("need 0 < t0 < t_max")
    q = 10 ** (1.0 / per_decade)
    ts = [0.0, t0]
    t = t0
    while t < t_max:
        step = t * (q - 1)
        if dt_max is not None:
            step = min(step, dt_max)
        t = t + step
        ts.append(min(t, t_max))
    if ts[-1] - ts[-2] < 1e-3 * (ts[-2] - ts[-3]):
        ts.pop(-2)
    return np.array(ts)


def _march(op, V, w0, times, probes, theta=0.5, accumulate=False, guard=None, stop_below=None):
    """Advance ``dw/dt = (L+V) w`` across ``times``.

    The first interval is split into two backward Euler substeps to damp
    the nonsmooth initial datum. Returns the probe values at every time,
    the trapezoid time integral of the whole field (if requested) and the
    final state.
    """
    stepper = ThetaStepper(op, V, theta)
    w = np.array(w0, dtype=float)
    rows = [w[probes]]
    integral = np.zeros_like(w) if accumulate else None
    used = 1
    for k in range(1, len(times)):
        dt = times[k] - times[k - 1]
        prev = w
        if k == 1:
            w = stepper.step(w, dt / 2, 1.0)
            w = stepper.step(w, dt / 2, 1.0)
        else:
            w = stepper.step(w, dt)
        if accumulate:
            integral += 0.5 * dt * (prev + w)
        rows.append(w[probes])
        used = k + 1
        if guard is not None and np.abs(w).max() > guard:
            raise FeynmanKacOverflow(
                f"Feynman-Kac value exceeded {guard:.0e} at t={times[k]:.4g}; "
                "potential is supercritical on this horizon"
            )
        if stop_below is not None and np.all(w[probes] <= stop_below):
            break
    return np.array(rows), times[:used], integral, w


def _probe_index(op: DiscreteOperator, x) -> int:
    if not op.mask.contains(x):
        raise DomainError(f"point {tuple(np.ravel(x))} is not inside the domain")
    return int(op.index[op.mask.cell_index(x)])


def default_t0(op: DiscreteOperator) -> float:
    return op.h**2 / 4


def survival_curves(op: DiscreteOperator, points, t_max: float, per_decade: int = 64,
                    theta: float = 0.5, dt_max: float | None = None, stop_below=None):
    """Survival curves ``P_x(tau > t)`` for several start points from one solve."""
    probes = np.array([_probe_index(op, x) for x in points])
    times = time_grid(default_t0(op), t_max, per_decade, dt_max)
    vals, times, _, _ = _march(op, None, np.ones(op.size), times, probes, theta,
                               stop_below=stop_below)
    vals = np.clip(vals, 0.0, 1.0)
    vals[0] = 1.0
    return [SurvivalCurve(times, np.minimum.accumulate(vals[:, i]), tuple(map(float, np.ravel(x))))
            for i, x in enumerate(points)]


def survival_curve(op: DiscreteOperator, x, t_max: float, per_decade: int = 64, theta: float = 0.5,
                   dt_max: float | None = None, stop_below=None) -> SurvivalCurve:
    """``P_x(tau > t)`` on a geometric time grid, from ``w_t = L w``, ``w(0) = 1``.

    Values are clipped to [0, 1] and made nonincreasing; the raw scheme
    deviates from monotonicity only at round-off level.
    """
    return survival_curves(op, [x], t_max, per_decade, theta, dt_max, stop_below)[0]


def median_exit_time(curve: SurvivalCurve, eta: float = 0.5) -> MedianExitTime:
    """First time with ``P(tau <= t) >= eta``, by inverse linear interpolation."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    level = 1.0 - eta
    hit = np.flatnonzero(curve.values <= level)
    if hit.size == 0:
        raise ExitTimeError(
            f"survival stays above {level:.3g} up to t={curve.times[-1]:.4g}; increase t_max"
        )
    k = int(hit[0])
    t0, t1 = curve.times[k - 1], curve.times[k]
    w0, w1 = curve.values[k - 1], curve.values[k]
    t = t1 if w0 == w1 else t0 + (w0 - level) / (w0 - w1) * (t1 - t0)
    return MedianExitTime(float(t), float(eta), (float(t0), float(t1)))


def exit_time_horizon(op: DiscreteOperator) -> float:
    """A horizon by which every start point has exited with probability near one."""
    # E[tau] <= r^2 / (2 n lambda) for a ball of radius r containing the domain
    pts = op.mask.inside_centers()
    r = float(np.max(pts.max(axis=0) - pts.min(axis=0))) + op.h
    return r * r


def median_exit_times(op: DiscreteOperator, points, eta: float = 0.5, per_decade: int = 64):
    """Median exit times at several points, marching until all curves cross."""
    curves = survival_curves(op, points, exit_time_horizon(op), per_decade,
                             stop_below=(1.0 - eta) * 0.9)
    return [median_exit_time(c, eta) for c in curves], curves


def simulate_paths(op: DiscreteOperator, V: ScalarField | None, x, horizon: float, count: int,
                   seed: int = 0, block: int = 4096) -> PathSamples:
    """Sample the continuous-time Markov chain generated by ``op``.

    A path in cell ``i`` waits an ``Exp(-L_ii)`` time, then jumps to inside
    neighbor ``j`` with probability ``L_ij / (-L_ii)``; the remaining
    probability is absorption. Paths are processed in blocks, each with its
    own Philox stream spawned from ``seed``, so results depend only on
    ``(seed, count, block)``.
    """
    if count < 1:
        raise ValueError("need at least one path")
    start = _probe_index(op, x)
    vvec = np.zeros(op.size) if V is None else V.inside()
    total = op.rates.sum(axis=1) + op.exit_rate
    cum = np.cumsum(op.rates, axis=1) / total[:, None]
    nbr = op.neighbors
    slots = nbr.shape[1]

    exit_time = np.empty(count)
    integral = np.empty(count)
    exited = np.empty(count, dtype=bool)
    nblocks = (count + block - 1) // block
    streams = np.random.SeedSequence(seed).spawn(nblocks)
    for b in range(nblocks):
        lo, hi = b * block, min(count, (b + 1) * block)
        rng = np.random.Generator(np.random.Philox(streams[b]))
        m = hi - lo
        state = np.full(m, start)
        t = np.zeros(m)
        acc = np.zeros(m)
        dead = np.zeros(m, dtype=bool)
        active = np.arange(m)
        while active.size:
            s = state[active]
            hold = rng.exponential(size=active.size) / total[s]
            u = rng.random(active.size)
            remaining = horizon - t[active]
            censored = hold >= remaining
            acc[active] += vvec[s] * np.minimum(hold, remaining)
            t[active] = np.where(censored, horizon, t[active] + hold)
            k = (u[:, None] >= cum[s]).sum(axis=1)
            absorbed = ~censored & (k >= slots)
            moved = ~censored & ~absorbed
            dead[active[absorbed]] = True
            state[active[moved]] = nbr[s[moved], k[moved]]
            active = active[moved]
        exit_time[lo:hi] = t
        integral[lo:hi] = acc
        exited[lo:hi] = dead
    return PathSamples(exit_time, integral, exited, float(horizon), int(seed))


def feynman_kac_curve(op: DiscreteOperator, Vplus: ScalarField | None, x, t: float,
                      per_decade: int = 64, theta: float = 0.5, guard: float = 1e12):
    """``E_x[1{tau > s} exp(int_0^s V)]`` for ``s`` on the time grid up to ``t``.

    Solves ``v_s = L v + V v`` with ``v(0) = 1`` and Dirichlet zero; with
    ``V = 0`` this is exactly the survival curve. Steps are capped at
    ``1/(2 theta max V)`` so every implicit system stays positive definite.
    """
    probe = np.array([_probe_index(op, x)])
    vmax = 0.0 if Vplus is None else float(Vplus.inside().max(initial=0.0))
    dt_max = 0.5 / (theta * vmax) if vmax > 0 else None
    times = time_grid(default_t0(op), t, per_decade, dt_max)
    vals, times, _, _ = _march(op, Vplus, np.ones(op.size), times, probe, theta, guard=guard)
    return times, vals[:, 0]


def feynman_kac_expectation(op: DiscreteOperator, Vplus: ScalarField | None, x, t: float,
                            per_decade: int = 64, theta: float = 0.5, guard: float = 1e12) -> float:
    if not t > 0:
        raise ValueError("t must be positive")
    if Vplus is not None and np.any(Vplus.inside() < 0):
        raise ValueError("potential must be nonnegative")
    return float(feynman_kac_curve(op, Vplus, x, t, per_decade, theta, guard)[1][-1])


def feynman_kac_field(op: DiscreteOperator, Vplus: ScalarField | None, t: float, per_decade: int = 64,
                      theta: float = 0.5, guard: float = 1e12) -> ScalarField:
    """``x -> E_x[1{tau > t} exp(int_0^t V)]`` on every cell."""
    vmax = 0.0 if Vplus is None else float(Vplus.inside().max(initial=0.0))
    dt_max = 0.5 / (theta * vmax) if vmax > 0 else None
    times = time_grid(default_t0(op), t, per_decade, dt_max)
    _, _, _, w = _march(op, Vplus, np.ones(op.size), times, np.array([0]), theta, guard=guard)
    return ScalarField.from_inside(op.mask, w)


@dataclass(frozen=True, eq=False)
class FreeBox:
    """Padded box around a domain, sharing its grid, with no absorption at the domain."""

    mask: DomainMask
    op: DiscreteOperator
    pad: int

    def embed(self, f: ScalarField) -> ScalarField:
        vals = np.pad(f.values, self.pad)
        return ScalarField(self.mask, vals, f.unit)


def free_box(mask: DomainMask, t: float, A: CoefficientField | None = None, factor: float = 8.0,
             min_pad: int = 2) -> FreeBox:
    """Enlarge the grid by ``factor * sqrt(Lambda t)`` on every side.

    A factor of 8 keeps the mass absorbed by the artificial boundary below
    1e-6 over the horizon (``erfc(4)`` per face); smaller factors trip the
    guard in :func:`khasminskii_alpha`.
    """
    Lam = 1.0 if A is None else A.Lam
    pad = max(int(math.ceil(factor * math.sqrt(Lam * t) / mask.h)), min_pad)
    shape = tuple(s + 2 * pad for s in mask.shape)
    inside = np.zeros(shape, dtype=bool)
    inside[tuple(slice(1, s - 1) for s in shape)] = True
    origin = tuple(o - pad * mask.h for o in mask.origin)
    big = DomainMask(inside, mask.h, origin)
    if A is None:
        coef = None
    else:
        diag = np.pad(A.diag, [(pad, pad)] * mask.n + [(0, 0)], mode="edge")
        coef = CoefficientField(diag, A.lam, A.Lam)
    return FreeBox(big, assemble_operator(big, coef), pad)


def khasminskii_alpha(op_free: DiscreteOperator, Vplus: ScalarField, t: float,
                      per_decade: int = 64, theta: float = 0.5, guard: float = 1e-6):
    """``sup_x E_x int_0^t V(X_s) ds`` for the free process, and its maximizing point.

    The field ``V`` is propagated by the heat semigroup and integrated in
    time with the trapezoid rule. The relative mass lost through the box
    boundary must stay below ``guard``.
    """
    v = Vplus.inside()
    if np.any(v < 0):
        raise ValueError("potential must be nonnegative")
    times = time_grid(default_t0(op_free), t, per_decade)
    _, _, integral, final = _march(op_free, None, v, times, np.array([0]), theta, accumulate=True)
    mass0 = v.sum()
    if mass0 > 0:
        lost = 1.0 - final.sum() / mass0
        if lost > guard:
            raise PaddingError(
                f"{lost:.2e} of the mass reached the artificial boundary (limit {guard:.0e}); "
                "increase the padding"
            )
    k = int(np.argmax(integral))
    cell = np.argwhere(op_free.mask.inside)[k]
    return float(integral[k]), op_free.mask.center_of(cell)


def write_survival_csv(path, curve: SurvivalCurve) -> None:
    se = curve.stderr if curve.stderr is not None else np.zeros_like(curve.values)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "survival", "stderr"])
        for row in zip(curve.times, curve.values, se):
            w.writerow([repr(float(v)) for v in row])


def mc_survival_curve(samples: PathSamples, times, x=()) -> SurvivalCurve:
    times = np.asarray(times, dtype=float)
    est = [samples.survival(t) for t in times]
    vals = np.array([e[0] for e in est])
    vals[0] = 1.0
    return SurvivalCurve(times, vals, tuple(x), np.array([e[1] for e in est]))
