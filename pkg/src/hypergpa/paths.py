"""Control paths and controlled/ordinary differential equation solvers.

Discrete observations are interpolated with natural cubic splines (C2, exact
at the knots, zero second derivative at the ends).  Integration is fixed-step
RK4 on dh/dt = field(h) . X'(t), either recorded on the tape
("backprop" mode) or differentiated by a constant-memory backward solve
("adjoint" mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import Tape, Tensor, grad, mul, no_recording, sum_


class PathError(ValueError):
    pass


class IntegrationError(RuntimeError):
    pass


class ControlPath:
    """Natural cubic spline through (times, values); immutable after fit."""

    __slots__ = ("times", "values", "second_derivs")

    def __init__(self, times, values, second_derivs):
        self.times = times
        self.values = values
        self.second_derivs = second_derivs

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def t1(self):
        return float(self.times[-1])

    @property
    def channels(self):
        return self.values.shape[1]

    def _segment(self, t):
        times = self.times
        if t < times[0] or t > times[-1]:
            raise PathError(f"t={t} outside knot range [{times[0]}, {times[-1]}]")
        k = int(np.searchsorted(times, t, side="right")) - 1
        return min(max(k, 0), len(times) - 2)

    def eval(self, t):
        """Interpolant value at ``t`` (exact at knots)."""
        k = self._segment(t)
        ta, tb = self.times[k], self.times[k + 1]
        h = tb - ta
        a = (tb - t) / h
        b = (t - ta) / h
        ya, yb = self.values[k], self.values[k + 1]
        ma, mb = self.second_derivs[k], self.second_derivs[k + 1]
        return a * ya + b * yb + ((a**3 - a) * ma + (b**3 - b) * mb) * (h * h) / 6.0

    def deriv(self, t):
        """First derivative of the interpolant at ``t``."""
        k = self._segment(t)
        ta, tb = self.times[k], self.times[k + 1]
        h = tb - ta
        a = (tb - t) / h
        b = (t - ta) / h
        ya, yb = self.values[k], self.values[k + 1]
        ma, mb = self.second_derivs[k], self.second_derivs[k + 1]
        return (yb - ya) / h - (3 * a * a - 1) / 6.0 * h * ma + (3 * b * b - 1) / 6.0 * h * mb


def fit_path(times, values):
    """Fit a natural cubic spline per channel.

    ``times`` must be strictly increasing with at least two entries;
    ``values`` is a (T, channels) matrix (a 1-D array is treated as one
    channel).
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = times.shape[0]
    if n < 2:
        raise PathError("need at least two knots")
    if values.shape[0] != n:
        raise PathError("times and values disagree on length")
    dt = np.diff(times)
    if np.any(dt <= 0):
        raise PathError("knot times must be strictly increasing")

    m = np.zeros_like(values)
    if n > 2:
        # tridiagonal system for interior second derivatives (Thomas algorithm)
        h = dt[:, None]
        rhs = 6.0 * np.diff(np.diff(values, axis=0) / h, axis=0)
        lower = dt[:-1].copy()
        diag = 2.0 * (dt[:-1] + dt[1:])
        upper = dt[1:].copy()
        nin = n - 2
        cprime = np.zeros((nin, 1))
        dprime = np.zeros((nin, values.shape[1]))
        cprime[0, 0] = upper[0] / diag[0]
        dprime[0] = rhs[0] / diag[0]
        for i in range(1, nin):
            denom = diag[i] - lower[i] * cprime[i - 1, 0]
            cprime[i, 0] = upper[i] / denom if i < nin - 1 else 0.0
            dprime[i] = (rhs[i] - lower[i] * dprime[i - 1]) / denom
        sol = np.zeros((nin, values.shape[1]))
        sol[-1] = dprime[-1]
        for i in range(nin - 2, -1, -1):
            sol[i] = dprime[i] - cprime[i, 0] * sol[i + 1]
        m[1:-1] = sol
    return ControlPath(times, values, m)


def eval_path(path, t):
    return path.eval(t)


def eval_deriv(path, t):
    return path.deriv(t)


def spline_weight_matrix(times):
    """(T, T) map S with second_derivs = S @ values (the spline is linear
    in its knot values, so interpolation can stay differentiable)."""
    times = np.asarray(times, dtype=np.float64)
    n = times.shape[0]
    S = np.zeros((n, n))
    if n <= 2:
        return S
    dt = np.diff(times)
    nin = n - 2
    A = np.zeros((nin, nin))
    B = np.zeros((nin, n))
    for i in range(nin):
        A[i, i] = 2.0 * (dt[i] + dt[i + 1])
        if i > 0:
            A[i, i - 1] = dt[i]
        if i < nin - 1:
            A[i, i + 1] = dt[i + 1]
        B[i, i] = 6.0 / dt[i]
        B[i, i + 1] = -6.0 / dt[i] - 6.0 / dt[i + 1]
        B[i, i + 2] = 6.0 / dt[i + 1]
    S[1:-1] = np.linalg.solve(A, B)
    return S


def spline_deriv_weights(times, S, t):
    """Weights w with X'(t) = w @ values, given S from spline_weight_matrix."""
    times = np.asarray(times, dtype=np.float64)
    if t < times[0] or t > times[-1]:
        raise PathError(f"t={t} outside knot range")
    k = int(np.searchsorted(times, t, side="right")) - 1
    k = min(max(k, 0), len(times) - 2)
    ta, tb = times[k], times[k + 1]
    h = tb - ta
    a = (tb - t) / h
    b = (t - ta) / h
    w = np.zeros(len(times))
    w[k] -= 1.0 / h
    w[k + 1] += 1.0 / h
    w = w - (3 * a * a - 1) / 6.0 * h * S[k] + (3 * b * b - 1) / 6.0 * h * S[k + 1]
    return w


@dataclass
class SolverConfig:
    steps_per_interval: int = 4
    mode: str = "backprop"  # or "adjoint"

    def __post_init__(self):
        if self.steps_per_interval < 1:
            raise ValueError("steps_per_interval must be >= 1")
        if self.mode not in ("backprop", "adjoint"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


def _time_grid(knots, t0, t1, steps_per_interval):
    """(t, dt) pairs: each knot interval inside [t0, t1] split into substeps."""
    pts = [t0]
    for t in knots:
        if t0 < t < t1:
            pts.append(float(t))
    pts.append(t1)
    steps = []
    for a, b in zip(pts[:-1], pts[1:]):
        dt = (b - a) / steps_per_interval
        for s in range(steps_per_interval):
            steps.append((a + s * dt, dt))
    return steps


def _deriv_stack(paths, t):
    """X'(t) for one path ((dx,)) or a stack of paths ((B, dx))."""
    if isinstance(paths, ControlPath):
        return paths.deriv(t)
    return np.stack([p.deriv(t) for p in paths])


def _contract(field_out, xprime):
    """Contract the trailing channel axis of field(h) with X'(t)."""
    if xprime.ndim == 1:
        w = xprime
    else:
        w = xprime.reshape(xprime.shape[0:1] + (1,) * (field_out.ndim - 2) + xprime.shape[1:])
    return sum_(mul(field_out, w), axis=-1)


def integrate_cde(h0, field, path, t0, t1, cfg, params=()):
    """Solve h(t1) = h(t0) + integral of field(h) dX(t) with fixed-step RK4.

    ``path`` is one ControlPath or a sequence of paths (the leading axis of
    the state then indexes paths).  In "backprop" mode the whole solve is
    recorded on ``h0``'s tape; in "adjoint" mode only the result is stored
    and gradients come from a backward solve, with ``params`` naming every
    tape tensor the field closure reads.
    """
    if not t0 < t1:
        raise IntegrationError("need t0 < t1")
    first = path if isinstance(path, ControlPath) else path[0]
    if t0 < first.t0 or t1 > first.t1:
        raise PathError("integration range outside the control path")
    steps = _time_grid(first.times, t0, t1, cfg.steps_per_interval)
    if cfg.mode == "backprop":
        return _solve_recorded(h0, field, path, steps)
    return _solve_adjoint(h0, field, path, steps, params)


def _rhs(field, paths, h, t):
    return _contract(field(h), _deriv_stack(paths, t))


def _solve_recorded(h0, field, paths, steps):
    h = h0
    for i, (t, dt) in enumerate(steps):
        k1 = _rhs(field, paths, h, t)
        k2 = _rhs(field, paths, h + k1 * (dt / 2.0), t + dt / 2.0)
        k3 = _rhs(field, paths, h + k2 * (dt / 2.0), t + dt / 2.0)
        k4 = _rhs(field, paths, h + k3 * dt, t + dt)
        h = h + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
        if not np.isfinite(h.data).all():
            raise IntegrationError(f"non-finite state at step {i}")
    return h


def _solve_adjoint(h0, field, paths, steps, params):
    params = list(params)
    tape = h0.tape
    with no_recording(tape):
        h = Tensor(h0.data)
        for i, (t, dt) in enumerate(steps):
            h = _rk4_step_detached(field, paths, h, t, dt)
            if not np.isfinite(h.data).all():
                raise IntegrationError(f"non-finite state at step {i}")
    h_final = h.data

    if tape is None or not tape.recording:
        return Tensor(h_final)

    parent_tensors = [h0] + [p for p in params if p.node_id is not None]

    def backward(g):
        return _adjoint_backward(field, paths, steps, h_final, g, parent_tensors)

    nid = tape._append(tuple(p.node_id for p in parent_tensors), backward)
    return Tensor(h_final, tape, nid)


def _rk4_step_detached(field, paths, h, t, dt):
    k1 = _rhs(field, paths, h, t)
    k2 = _rhs(field, paths, h + k1 * (dt / 2.0), t + dt / 2.0)
    k3 = _rhs(field, paths, h + k2 * (dt / 2.0), t + dt / 2.0)
    k4 = _rhs(field, paths, h + k3 * dt, t + dt)
    return h + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)


class _Rebound:
    """Temporarily re-attach tensors as leaves of a scratch tape."""

    def __init__(self, tensors):
        self.tensors = tensors
        self.saved = None
        self.tape = None

    def __enter__(self):
        self.tape = Tape()
        self.saved = [(t.tape, t.node_id) for t in self.tensors]
        for t in self.tensors:
            t.node_id = self.tape._append((), None)
            t.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        for t, (tp, nid) in zip(self.tensors, self.saved):
            t.tape = tp
            t.node_id = nid
        return False


def _adjoint_backward(field, paths, steps, h_final, g_out, parent_tensors):
    """Backward-in-time solve of (state, adjoint, parameter gradients)."""
    h0_tensor = parent_tensors[0]
    field_params = parent_tensors[1:]

    def vjp(h_val, a_val, t):
        """F(h, t) and the pullbacks a^T dF/dh, a^T dF/dp."""
        with _Rebound(field_params) as scratch:
            h_leaf = scratch.leaf(h_val)
            y = _rhs(field, paths, h_leaf, t)
            loss = sum_(mul(y, a_val))
            gs = grad(loss, [h_leaf] + field_params)
        return y.data, gs[0], gs[1:]

    h = np.array(h_final)
    a = np.array(g_out, dtype=np.float64)
    gp = [np.zeros_like(p.data) for p in field_params]

    def aug_rhs(h_v, a_v, t):
        f_v, ah, ap = vjp(h_v, a_v, t)
        return f_v, -ah, [-x for x in ap]

    for t, dt in reversed(steps):
        # RK4 from t+dt back to t
        te = t + dt
        k1 = aug_rhs(h, a, te)
        k2 = aug_rhs(h - 0.5 * dt * k1[0], a - 0.5 * dt * k1[1], te - 0.5 * dt)
        k3 = aug_rhs(h - 0.5 * dt * k2[0], a - 0.5 * dt * k2[1], te - 0.5 * dt)
        k4 = aug_rhs(h - dt * k3[0], a - dt * k3[1], t)
        h = h - (dt / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        a = a - (dt / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        for j in range(len(gp)):
            gp[j] = gp[j] - (dt / 6.0) * (k1[2][j] + 2 * k2[2][j] + 2 * k3[2][j] + k4[2][j])
    return [a] + gp


def integrate_ode(h0, f, t0, t1, cfg):
    """Plain RK4 for dh/dt = f(h) on the tape (autonomous field)."""
    if not t0 < t1:
        raise IntegrationError("need t0 < t1")
    n = max(1, int(round((t1 - t0) * cfg.steps_per_interval)))
    dt = (t1 - t0) / n
    h = h0
    for i in range(n):
        k1 = f(h)
        k2 = f(h + k1 * (dt / 2.0))
        k3 = f(h + k2 * (dt / 2.0))
        k4 = f(h + k3 * dt)
        h = h + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
        if not np.isfinite(h.data).all():
            raise IntegrationError(f"non-finite state at step {i}")
    return h
