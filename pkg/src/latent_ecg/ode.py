"""Explicit ODE integration: Tsitouras 5(4) with adaptive steps, fixed-step RK4.

The adaptive driver never interpolates: steps are shortened so that they land
exactly on every requested output time. :func:`odeint` wraps the same driver
as a single autodiff node whose backward pass walks the accepted steps in
reverse (discretise-then-optimise; step sizes are constants for the gradient).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, Tensor, custom_op

__all__ = [
    "SolverConfig",
    "OdeProblem",
    "OdeNumericError",
    "MaxStepsExceeded",
    "StepRecord",
    "Solution",
    "SolverTrace",
    "TSIT5_C",
    "TSIT5_A",
    "TSIT5_B",
    "TSIT5_BTILDE",
    "tsit5_step",
    "integrate",
    "solve_at",
    "rk4_solve",
    "odeint",
    "write_trajectory_csv",
]

# Tsitouras (2011) 5(4) pair, as used by Tsit5 in DifferentialEquations.jl / diffrax.
TSIT5_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
TSIT5_A = [
    [],
    [0.161],
    [-0.008480655492356989, 0.335480655492357],
    [2.897153057105493, -6.359448489975075, 4.3622954328695815],
    [5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525],
    [5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401, -0.028269050394068383],
    [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742, -3.290069515436081, 2.324710524099774],
]
TSIT5_B = np.array(TSIT5_A[6] + [0.0])
# difference between the order-5 and embedded order-4 weights
TSIT5_BTILDE = np.array(
    [
        -0.00178001105222577714,
        -0.0008164344596567469,
        0.007880878010261995,
        -0.1447110071732629,
        0.5823571654525552,
        -0.45808210592918697,
        1.0 / 66.0,
    ]
)


class OdeNumericError(NumericError):
    def __init__(self, t: float, h: float):
        self.t, self.h = t, h
        super().__init__(f"dynamics returned non-finite values at t={t!r} with step h={h!r}")


class MaxStepsExceeded(RuntimeError):
    def __init__(self, last_t: float, max_steps: int):
        self.last_t = last_t
        super().__init__(f"exceeded {max_steps} steps; last accepted t={last_t!r}")


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-5
    atol: float = 1e-6
    initial_dt: float = 1e-3
    max_steps: int = 100_000
    safety: float = 0.9
    max_growth: float = 5.0
    min_shrink: float = 0.2

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not self.initial_dt > 0:
            raise ValueError("initial_dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class OdeProblem:
    dynamics: Callable[[float, np.ndarray], np.ndarray]
    y0: np.ndarray
    t_span: tuple[float, float]


@dataclass
class StepRecord:
    t: float
    h: float
    error_norm: float
    landing: bool
    caches: list | None = None
    outputs: list[int] = field(default_factory=list)


@dataclass
class Solution:
    ys: np.ndarray
    steps: list[StepRecord]
    n_rejected: int
    initial_outputs: list[int]
    next_dt: float


class SolverTrace:
    """Records the accepted step sizes of successive solves and can replay them.

    Replaying freezes the step sequence, which is what a finite-difference
    check through an adaptive solver needs.
    """

    def __init__(self):
        self.sequences: list[list[tuple[float, bool]]] = []
        self.replay = False
        self._cursor = 0

    def freeze(self) -> SolverTrace:
        self.replay = True
        self._cursor = 0
        return self

    def _push(self, steps: list[StepRecord]) -> None:
        self.sequences.append([(s.h, s.landing) for s in steps])

    def _next(self) -> list[tuple[float, bool]]:
        seq = self.sequences[self._cursor]
        self._cursor += 1
        return seq


def _tsit5_stages(f, t, y, h, k1):
    """Stages 2..7 of one step. ``f`` returns ``(dy, cache)``; ``k1`` is such a pair."""
    ks = [k1[0]]
    caches = [k1[1]]
    for i in range(1, 6):
        acc = y
        for a, k in zip(TSIT5_A[i], ks):
            acc = acc + (h * a) * k
        k, c = f(t + TSIT5_C[i] * h, acc)
        ks.append(k)
        caches.append(c)
    y5 = y
    for b, k in zip(TSIT5_B[:6], ks):
        y5 = y5 + (h * b) * k
    k7 = f(t + h, y5)
    ks.append(k7[0])
    err = TSIT5_BTILDE[0] * ks[0]
    for bt, k in zip(TSIT5_BTILDE[1:], ks[1:]):
        err = err + bt * k
    err = h * err
    return y5, err, caches, k7


def _finite(x: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(x)))


def tsit5_step(problem: OdeProblem, t: float, y: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """One embedded Tsit5 step; returns the order-5 state and ``|y5 - y4|``."""
    if h == 0:
        raise ValueError("step size must be non-zero")
    y = np.asarray(y, dtype=np.float64)
    f = _wrap_plain(problem.dynamics)
    y5, err, _, _ = _tsit5_stages(f, t, y, h, f(t, y))
    return y5, np.abs(err)


def _wrap_plain(fun):
    def f(t, y):
        dy = np.asarray(fun(t, y), dtype=np.float64)
        if dy.shape != np.shape(y):
            raise ValueError(f"dynamics returned shape {dy.shape} for state of shape {np.shape(y)}")
        return dy, None

    return f


def integrate(
    f,
    y0: np.ndarray,
    t0: float,
    eval_times: Sequence[float],
    config: SolverConfig = SolverConfig(),
    keep_caches: bool = False,
    frozen: list[tuple[float, bool]] | None = None,
    first_dt: float | None = None,
) -> Solution:
    """Adaptive Tsit5 from ``t0`` through every time in ``eval_times``.

    ``f(t, y)`` must return ``(dy/dt, cache)``. With ``frozen`` the given
    ``(h, landing)`` sequence is replayed without error control.
    """
    times = np.asarray(eval_times, dtype=np.float64).ravel()
    y = np.asarray(y0, dtype=np.float64)
    out = np.empty((times.size,) + y.shape)
    if times.size == 0:
        return Solution(out, [], 0, [], config.initial_dt)
    direction = 1.0 if times[-1] >= t0 else -1.0
    if np.any(direction * np.diff(np.concatenate([[t0], times])) < 0):
        raise ValueError("eval_times must be monotone in the direction of integration")

    def checked(t, yy, h):
        dy, cache = f(t, yy)
        if not _finite(dy):
            raise OdeNumericError(t, h)
        return dy, cache

    h_prop = direction * abs(first_dt if first_dt is not None else config.initial_dt)
    t = float(t0)
    steps: list[StepRecord] = []
    initial_outputs: list[int] = []
    n_rejected = 0
    n_attempts = 0
    k1 = None
    replay = iter(frozen) if frozen is not None else None

    for idx, target in enumerate(times):
        if target == t:
            out[idx] = y
            if steps:
                steps[-1].outputs.append(idx)
            else:
                initial_outputs.append(idx)
            continue
        while True:
            if k1 is None:
                k1 = checked(t, y, h_prop)
            if replay is not None:
                h_try, landing = next(replay)
            else:
                landing = direction * (t + h_prop - target) >= 0
                h_try = (target - t) if landing else h_prop
            n_attempts += 1
            if n_attempts > config.max_steps:
                raise MaxStepsExceeded(t, config.max_steps)
            try:
                y5, err, caches, k7 = _tsit5_stages(lambda tt, yy: checked(tt, yy, h_try), t, y, h_try, k1)
            except OdeNumericError:
                if replay is not None:
                    raise
                # treat as a failed step and shrink hard
                n_rejected += 1
                h_prop = h_try * config.min_shrink
                continue
            scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y5))
            norm = float(np.max(np.abs(err) / scale)) if err.size else 0.0
            if replay is None and norm > 1.0:
                n_rejected += 1
                h_prop = h_try * max(config.min_shrink, config.safety * norm**-0.2)
                continue
            factor = config.max_growth if norm == 0 else min(config.max_growth, max(config.min_shrink, config.safety * norm**-0.2))
            if replay is None:
                if landing and factor >= 1.0:
                    h_prop = direction * max(abs(h_try) * factor, abs(h_prop))
                else:
                    h_prop = h_try * factor
            steps.append(StepRecord(t, h_try, norm, landing, caches if keep_caches else None))
            t = float(target) if landing else t + h_try
            y = y5
            k1 = k7
            if landing:
                break
        out[idx] = y
        steps[-1].outputs.append(idx)
    return Solution(out, steps, n_rejected, initial_outputs, h_prop)


def solve_at(problem: OdeProblem, config: SolverConfig, eval_times: Sequence[float]) -> np.ndarray:
    """States at exactly ``eval_times``, shape ``(len(eval_times),) + y0.shape``."""
    t0, t1 = problem.t_span
    times = np.asarray(eval_times, dtype=np.float64)
    lo, hi = min(t0, t1), max(t0, t1)
    if times.size and (times.min() < lo or times.max() > hi):
        raise ValueError("eval_times must lie within t_span")
    return integrate(_wrap_plain(problem.dynamics), problem.y0, t0, times, config).ys


def rk4_solve(problem: OdeProblem, n_steps: int, eval_times: Sequence[float]) -> np.ndarray:
    """Classical RK4 on a uniform grid over ``t_span``, linearly interpolated to ``eval_times``."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    t0, t1 = problem.t_span
    h = (t1 - t0) / n_steps
    y = np.asarray(problem.y0, dtype=np.float64)
    grid = t0 + h * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1,) + y.shape)
    states[0] = y
    fun = problem.dynamics
    for i in range(n_steps):
        t = grid[i]
        k1 = np.asarray(fun(t, y))
        k2 = np.asarray(fun(t + h / 2, y + h / 2 * k1))
        k3 = np.asarray(fun(t + h / 2, y + h / 2 * k2))
        k4 = np.asarray(fun(t + h, y + h * k3))
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not _finite(y):
            raise OdeNumericError(t, h)
        states[i + 1] = y
    times = np.asarray(eval_times, dtype=np.float64)
    pos = (times - t0) / h
    lo = np.clip(np.floor(pos).astype(int), 0, n_steps - 1)
    w = (pos - lo).reshape((-1,) + (1,) * y.ndim)
    return (1 - w) * states[lo] + w * states[lo + 1]


def odeint(
    field,
    y0: Tensor,
    eval_times: Sequence[float],
    t0: float,
    config: SolverConfig = SolverConfig(),
    trace: SolverTrace | None = None,
    first_dt: float | None = None,
) -> tuple[Tensor, float]:
    """Differentiable adaptive solve.

    ``field(t, y) -> (dy, cache)`` must also provide ``vjp(cache, g) ->
    (g_y, [g_param...])`` and ``parameters()``. Returns a tensor of shape
    ``(len(eval_times),) + y0.shape`` and the step size proposed for a
    follow-on solve.
    """
    params = field.parameters()
    frozen = trace._next() if trace is not None and trace.replay else None
    sol = integrate(field, y0.data, t0, eval_times, config, keep_caches=True, frozen=frozen, first_dt=first_dt)
    if trace is not None and not trace.replay:
        trace._push(sol.steps)
    steps = sol.steps
    a_rows = TSIT5_A

    def vjp(G):
        gy = np.zeros_like(y0.data)
        gp = [np.zeros_like(p.data) for p in params]
        for step in reversed(steps):
            for idx in step.outputs:
                gy = gy + G[idx]
            h = step.h
            gk = [(h * b) * gy for b in TSIT5_B[:6]]
            g_prev = gy
            for i in range(5, -1, -1):
                gu, gps = field.vjp(step.caches[i], gk[i])
                for j, g in enumerate(gps):
                    gp[j] += g
                g_prev = g_prev + gu
                for j, a in enumerate(a_rows[i]):
                    gk[j] = gk[j] + (h * a) * gu
            gy = g_prev
        for idx in sol.initial_outputs:
            gy = gy + G[idx]
        return [gy] + gp

    return custom_op(sol.ys, [y0] + list(params), vjp, "odeint"), sol.next_dt


def write_trajectory_csv(path, times: Sequence[float], states: np.ndarray) -> None:
    """Debug dump: one row per time, columns ``t, y0, y1, ...``."""
    states = np.asarray(states).reshape(len(times), -1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["t"] + [f"y{i}" for i in range(states.shape[1])]) + "\n")
        for t, row in zip(times, states):
            fh.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
