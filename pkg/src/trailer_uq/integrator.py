"""Variable-step, variable-order BDF integrator for ``F(t, y, y', u) = 0``.

The method is the backward-difference formulation used by ode15s-class
solvers: a modified divided-difference array ``D`` holds the solution
history, step changes rescale ``D`` by interpolation, and the order (1..5)
is chosen from error estimates at orders ``k-1, k, k+1``. Plain BDF
coefficients are used (no NDF modification).

Systems are described by four numba-compiled callables:

``residual(t, y, yp, u, args, out)``
    writes ``F`` into ``out``; must be affine in ``yp`` (``M(y) yp - f``).
``jacobian(t, y, yp, u, args, J, M)``
    ``dF/dy`` and ``dF/dyp`` of the *base* block.

``args`` is a 1-tuple holding the parameter vector. For forward
sensitivities the residual must also accept complex ``y``, ``yp`` and a
complex parameter vector.
``mass(t, y, args, M)``
    ``dF/dyp`` of the base block.
``guard(y)``
    ``False`` aborts the integration (e.g. a rollover).

For sensitivity-augmented systems the state is ``nblocks`` stacked copies
of the base dimension: block 0 is the state, block ``k`` the sensitivity to
parameter ``sens_idx[k-1]``. The corrector is staggered: the state block
is converged first, then the (linear) sensitivity blocks are solved with
the same factorization of the base iteration matrix.

Inputs are zero-order hold: the time axis is split into segments with a
constant input vector each. When the input jumps, the history is rebuilt
from a Taylor expansion at the breakpoint so the derivative kink is not
smeared across the difference array.
"""
from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np
from numba import njit

MAX_ORDER = 5
NEWTON_MAXITER = 4
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
H_UNDERFLOW = 1e-12

_GAMMA = np.hstack((0.0, np.cumsum(1.0 / np.arange(1, MAX_ORDER + 1))))
_ALPHA = _GAMMA.copy()
_ERROR_CONST = 1.0 / np.arange(1, MAX_ORDER + 2)

# integer state slots
_ORDER, _NEQ, _NSTEPS, _NFEV, _NJEV, _NLU, _NREJ, _STATUS, _LU_OK, _STARTED, _MAXORD, _FIXED = range(12)
_NIST = 12
# float state slots
_T, _H, _ERR, _HMAX, _RTOL = range(5)
_NRST = 5

STATUS_OK = 0
STATUS_UNDERFLOW = -1
STATUS_NEWTON = -2
STATUS_MAX_STEPS = -3
STATUS_GUARD = -4
STATUS_SINGULAR = -5

_STATUS_TEXT = {
    STATUS_UNDERFLOW: "step size underflow",
    STATUS_NEWTON: "Newton iteration diverged",
    STATUS_MAX_STEPS: "maximum number of steps exceeded",
    STATUS_GUARD: "state left the valid region (roll/pitch abort)",
    STATUS_SINGULAR: "singular iteration matrix",
}


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float, status: int):
        super().__init__(f"{message} at t = {t:.6g} s")
        self.t = t
        self.status = status


@dataclasses.dataclass
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    max_order: int = 5
    h_init: float | None = None
    h_max: float = np.inf
    max_steps: int = 1_000_000
    # order of the Taylor-built history after an input jump
    restart_order: int = 3

    def __post_init__(self):
        if not 0.0 < self.rtol < 1.0:
            raise ValueError("rtol must lie in (0, 1)")
        if not self.atol > 0.0:
            raise ValueError("atol must be > 0")
        if not 1 <= self.max_order <= MAX_ORDER:
            raise ValueError("max_order must lie in [1, 5]")
        if self.h_init is not None and not self.h_init > 0.0:
            raise ValueError("h_init must be > 0")
        if not self.h_max > 0.0:
            raise ValueError("h_max must be > 0")
        if not 1 <= self.restart_order <= 3:
            raise ValueError("restart_order must lie in [1, 3]")


# --------------------------------------------------------------------------
# small dense linear algebra (deterministic, allocation free)

@njit(cache=True)
def _lu_factor(A, LU, piv):
    n = A.shape[0]
    for i in range(n):
        for j in range(n):
            LU[i, j] = A[i, j]
    for k in range(n):
        p = k
        best = abs(LU[k, k])
        for i in range(k + 1, n):
            v = abs(LU[i, k])
            if v > best:
                best = v
                p = i
        piv[k] = p
        if best == 0.0:
            return False
        if p != k:
            for j in range(n):
                tmp = LU[k, j]
                LU[k, j] = LU[p, j]
                LU[p, j] = tmp
        inv = 1.0 / LU[k, k]
        for i in range(k + 1, n):
            LU[i, k] *= inv
            lik = LU[i, k]
            if lik != 0.0:
                for j in range(k + 1, n):
                    LU[i, j] -= lik * LU[k, j]
    return True


@njit(cache=True)
def _lu_solve(LU, piv, b, off):
    """Solve in place for the block ``b[off:off+n]``."""
    n = LU.shape[0]
    for k in range(n):
        p = piv[k]
        if p != k:
            tmp = b[off + k]
            b[off + k] = b[off + p]
            b[off + p] = tmp
    for i in range(n):
        s = b[off + i]
        for j in range(i):
            s -= LU[i, j] * b[off + j]
        b[off + i] = s
    for i in range(n - 1, -1, -1):
        s = b[off + i]
        for j in range(i + 1, n):
            s -= LU[i, j] * b[off + j]
        b[off + i] = s / LU[i, i]


@njit(cache=True)
def _rms(v, scale, n):
    s = 0.0
    for i in range(n):
        r = v[i] / scale[i]
        s += r * r
    return np.sqrt(s / n)


@njit(cache=True)
def _compute_R(order, factor):
    M = np.zeros((order + 1, order + 1))
    for i in range(1, order + 1):
        for j in range(1, order + 1):
            M[i, j] = (i - 1 - factor * j) / i
    for j in range(order + 1):
        M[0, j] = 1.0
    for i in range(1, order + 1):
        for j in range(order + 1):
            M[i, j] *= M[i - 1, j]
    return M


@njit(cache=True)
def _change_D(D, order, factor):
    R = _compute_R(order, factor)
    U = _compute_R(order, 1.0)
    RU = R @ U
    n = D.shape[1]
    new = np.zeros((order + 1, n))
    for i in range(order + 1):
        for k in range(order + 1):
            c = RU[k, i]
            if c != 0.0:
                for j in range(n):
                    new[i, j] += c * D[k, j]
    for i in range(order + 1):
        for j in range(n):
            D[i, j] = new[i, j]


@njit(cache=True)
def _dense_eval(D, order, t_cur, h, t, out):
    """Evaluate the interpolating polynomial held in ``D`` at ``t``."""
    n = D.shape[1]
    for j in range(n):
        out[j] = D[0, j]
    prod = 1.0
    for m in range(order):
        prod *= (t - (t_cur - h * m)) / (h * (1 + m))
        for j in range(n):
            out[j] += prod * D[m + 1, j]


# --------------------------------------------------------------------------
# kernel
#
# Functions taking the system callables are inlined at the numba IR level:
# a system-specific wrapper that passes module-level dispatchers then
# compiles to direct calls and can be cached on disk. Passing dispatchers
# into a separately compiled function embeds their addresses instead.

CS_STEP = 1e-30


@njit(cache=True, inline="always")
def _factor_mass(mass, t, y, args, Mb, LUM, pivM):
    nb = Mb.shape[0]
    mass(t, y[:nb], args, Mb)
    return _lu_factor(Mb, LUM, pivM)


@njit(cache=True, inline="always")
def _resid(residual, t, y, yp, u, args, sidx, nblocks, F):
    """Residual of the (possibly sensitivity-augmented) system.

    Block ``k >= 1`` holds ``s_k = dy/dp[sidx[k-1]]`` with ``p = args[0]``; its
    residual ``dF/dy s_k + dF/dyp s_k' + dF/dp_k`` is the complex-step
    directional derivative of the base residual along ``(s_k, s_k', e_k)``.
    """
    n = y.shape[0]
    nb = n // nblocks
    residual(t, y[:nb], yp[:nb], u, args, F[:nb])
    if nblocks > 1:
        p = args[0]
        pc = p.astype(np.complex128)
        yc = np.empty(nb, dtype=np.complex128)
        ypc = np.empty(nb, dtype=np.complex128)
        Fc = np.empty(nb, dtype=np.complex128)
        for k in range(1, nblocks):
            off = k * nb
            for i in range(nb):
                yc[i] = y[i] + 1j * CS_STEP * y[off + i]
                ypc[i] = yp[i] + 1j * CS_STEP * yp[off + i]
            j = sidx[k - 1]
            pc[j] = p[j] + 1j * CS_STEP
            residual(t, yc, ypc, u, (pc,), Fc)
            pc[j] = p[j]
            for i in range(nb):
                F[off + i] = Fc[i].imag / CS_STEP


@njit(cache=True, inline="always")
def _consistent_yp(residual, t, y, u, args, sidx, LUM, pivM, nblocks, yp, F):
    """Solve ``F(t, y, yp) = 0`` for ``yp`` (affine in ``yp``, block-triangular)."""
    n = y.shape[0]
    nb = n // nblocks
    for j in range(n):
        yp[j] = 0.0
    residual(t, y[:nb], yp[:nb], u, args, F[:nb])
    for j in range(nb):
        yp[j] = -F[j]
    _lu_solve(LUM, pivM, yp, 0)
    if nblocks > 1:
        _resid(residual, t, y, yp, u, args, sidx, nblocks, F)
        for j in range(nb, n):
            yp[j] = -F[j]
        for k in range(1, nblocks):
            _lu_solve(LUM, pivM, yp, k * nb)


@njit(cache=True)
def _apply_A(J, LUM, pivM, v, out, nblocks):
    """``out = -M^-1 J v`` per block (local linearization ``y'' ~ A y'``)."""
    nb = J.shape[0]
    for k in range(nblocks):
        off = k * nb
        for i in range(nb):
            s = 0.0
            for j in range(nb):
                s += J[i, j] * v[off + j]
            out[off + i] = -s
        _lu_solve(LUM, pivM, out, off)


@njit(cache=True, inline="always")
def _initial_step(residual, t, y, yp, u, args, sidx, LUM, pivM, nblocks, rtol, atol, n_err, order, t_end):
    n = y.shape[0]
    scale = atol + np.abs(y) * rtol
    d0 = _rms(y, scale, n_err)
    d1 = _rms(yp, scale, n_err)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, t_end - t)
    y1 = y + h0 * yp
    yp1 = np.empty(n)
    F = np.empty(n)
    _consistent_yp(residual, t + h0, y1, u, args, sidx, LUM, pivM, nblocks, yp1, F)
    d2 = _rms(yp1 - yp, scale, n_err) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100.0 * h0, h1)


@njit(cache=True, inline="always")
def _start(residual, jacobian, mass, t, y, u, args, sidx, D, J, Mb, LUM, pivM, ist, rst,
           rtol, atol, n_err, nblocks, h_init, restart_order, first, t_end):
    """(Re)build the difference array at ``t`` from a local Taylor expansion."""
    n = y.shape[0]
    if not _factor_mass(mass, t, y, args, Mb, LUM, pivM):
        ist[_STATUS] = STATUS_SINGULAR
        return
    yp = np.empty(n)
    F = np.empty(n)
    _consistent_yp(residual, t, y, u, args, sidx, LUM, pivM, nblocks, yp, F)
    ist[_NFEV] += 2
    nb = J.shape[0]
    if first:
        jacobian(t, y[:nb], yp[:nb], u, args, J, Mb)
        ist[_NJEV] += 1
        _factor_mass(mass, t, y, args, Mb, LUM, pivM)
    order = 1 if first else min(restart_order, ist[_MAXORD])
    if h_init > 0.0:
        h = h_init
    elif first:
        h = _initial_step(residual, t, y, yp, u, args, sidx, LUM, pivM, nblocks, rtol, atol, n_err,
                          order, t_end)
    else:
        h = rst[_H]
    h = min(h, rst[_HMAX])
    # derivatives of the local linearization
    y2 = np.zeros(n)
    y3 = np.zeros(n)
    if order >= 2:
        _apply_A(J, LUM, pivM, yp, y2, nblocks)
    if order >= 3:
        _apply_A(J, LUM, pivM, y2, y3, nblocks)
    # values at t - j h, j = 0..order, then backward differences
    vals = np.empty((order + 1, n))
    for jj in range(order + 1):
        tau = -jj * h
        for i in range(n):
            vals[jj, i] = y[i] + tau * yp[i] + 0.5 * tau * tau * y2[i] + tau * tau * tau / 6.0 * y3[i]
    for i in range(D.shape[0]):
        for j in range(n):
            D[i, j] = 0.0
    for j in range(n):
        D[0, j] = vals[0, j]
    for m in range(1, order + 1):
        for jj in range(order + 1 - m):
            for i in range(n):
                vals[jj, i] = vals[jj, i] - vals[jj + 1, i]
        for i in range(n):
            D[m, i] = vals[0, i]
    ist[_ORDER] = order
    ist[_NEQ] = 0
    ist[_LU_OK] = 0
    rst[_T] = t
    rst[_H] = h


@njit(cache=True, inline="always")
def _solve_bdf(residual, t_new, y_pred, c, psi, u, args, sidx, LU, piv, nblocks, scale, tol,
               y, d, yp, F, dy, ist):
    """Staggered corrector: Newton on the state block, then the sensitivity blocks.

    The sensitivity residuals are linear in ``s`` but depend on the state, so
    they are only iterated once the state has converged; a joint iteration
    lags one sweep behind and spoils the convergence-rate estimate.
    """
    n = y.shape[0]
    nb = LU.shape[0]
    for j in range(n):
        d[j] = 0.0
        y[j] = y_pred[j]
    n_iter = 0
    converged = False
    for phase in range(2 if nblocks > 1 else 1):
        lo = 0 if phase == 0 else nb
        hi = nb if phase == 0 else n
        dy_norm_old = -1.0
        converged = False
        k = 0
        for k in range(NEWTON_MAXITER):
            for j in range(lo, hi):
                yp[j] = (psi[j] + d[j]) / c
            if phase == 0:
                residual(t_new, y[:nb], yp[:nb], u, args, F[:nb])
            else:
                _resid(residual, t_new, y, yp, u, args, sidx, nblocks, F)
            ist[_NFEV] += 1
            finite = True
            for j in range(lo, hi):
                if not np.isfinite(F[j]):
                    finite = False
                    break
            if not finite:
                break
            for j in range(lo, hi):
                dy[j] = -c * F[j]
            for b in range(lo // nb, hi // nb):
                _lu_solve(LU, piv, dy, b * nb)
            dy_norm = _rms(dy[lo:hi], scale[lo:hi], hi - lo)
            rate = -1.0
            if dy_norm_old > 0.0:
                rate = dy_norm / dy_norm_old
            if dy_norm < 1e-6 * tol:
                # increment at round-off level: a rate estimate would only measure noise
                for j in range(lo, hi):
                    y[j] += dy[j]
                    d[j] += dy[j]
                converged = True
                break
            if rate >= 0.0 and (rate >= 1.0 or rate ** (NEWTON_MAXITER - k) / (1.0 - rate) * dy_norm > tol):
                break
            for j in range(lo, hi):
                y[j] += dy[j]
                d[j] += dy[j]
            if rate >= 0.0 and rate / (1.0 - rate) * dy_norm < tol:
                converged = True
                break
            dy_norm_old = dy_norm
        if phase == 0:
            n_iter = k + 1
        if not converged:
            break
    return converged, n_iter


@njit(cache=True, inline="always")
def _step(residual, jacobian, mass, guard, u, args, sidx, t_end, D, J, Mb, LU, piv, ist, rst, atol,
          n_err, nblocks, y, d, yp, F, dy, y_pred, psi, Aw):
    """Advance one accepted step, not beyond ``t_end``. Returns False on failure."""
    n = D.shape[1]
    nb = J.shape[0]
    t = rst[_T]
    h_abs = rst[_H]
    order = ist[_ORDER]
    rtol = rst[_RTOL]
    fixed = ist[_FIXED] != 0
    max_step = rst[_HMAX]
    min_step = max(H_UNDERFLOW, 10.0 * abs(np.nextafter(t, np.inf) - t))
    if h_abs > max_step:
        _change_D(D, order, max_step / h_abs)
        h_abs = max_step
        ist[_NEQ] = 0
        ist[_LU_OK] = 0
    elif h_abs < min_step and not fixed:
        _change_D(D, order, min_step / h_abs)
        h_abs = min_step
        ist[_NEQ] = 0
        ist[_LU_OK] = 0
    newton_tol = max(10.0 * 2.220446049250313e-16 / rtol, min(0.03, rtol ** 0.5))
    current_jac = False
    step_accepted = False
    error_norm = 0.0
    n_iter = 0
    t_new = t
    while not step_accepted:
        if h_abs < min_step:
            ist[_STATUS] = STATUS_UNDERFLOW
            return False
        t_new = t + h_abs
        if t_new >= t_end:
            if t_new > t_end:
                _change_D(D, order, (t_end - t) / h_abs)
                ist[_NEQ] = 0
                ist[_LU_OK] = 0
            t_new = t_end
        h_abs = t_new - t
        for j in range(n):
            s = 0.0
            for i in range(order + 1):
                s += D[i, j]
            y_pred[j] = s
        scale = atol + rtol * np.abs(y_pred)
        alpha = _ALPHA[order]
        for j in range(n):
            s = 0.0
            for i in range(1, order + 1):
                s += D[i, j] * _GAMMA[i]
            psi[j] = s / alpha
        c = h_abs / alpha
        converged = False
        while not converged:
            if ist[_LU_OK] == 0:
                for i in range(nb):
                    for j in range(nb):
                        Aw[i, j] = Mb[i, j] + c * J[i, j]
                if not _lu_factor(Aw, LU, piv):
                    ist[_STATUS] = STATUS_SINGULAR
                    return False
                ist[_NLU] += 1
                ist[_LU_OK] = 1
            converged, n_iter = _solve_bdf(residual, t_new, y_pred, c, psi, u, args, sidx, LU, piv,
                                           nblocks, scale, newton_tol, y, d, yp, F, dy, ist)
            if not converged:
                if current_jac:
                    break
                for j in range(n):
                    yp[j] = psi[j] / c
                jacobian(t_new, y_pred[:nb], yp[:nb], u, args, J, Mb)
                ist[_NJEV] += 1
                ist[_LU_OK] = 0
                current_jac = True
        if not converged:
            if fixed:
                ist[_STATUS] = STATUS_NEWTON
                return False
            factor = 0.5
            h_abs *= factor
            _change_D(D, order, factor)
            ist[_NEQ] = 0
            ist[_LU_OK] = 0
            ist[_NREJ] += 1
            continue
        safety = 0.9 * (2 * NEWTON_MAXITER + 1) / (2 * NEWTON_MAXITER + n_iter)
        scale = atol + rtol * np.abs(y)
        ec = _ERROR_CONST[order]
        s = 0.0
        for j in range(n_err):
            r = ec * d[j] / scale[j]
            s += r * r
        error_norm = np.sqrt(s / n_err)
        if error_norm > 1.0 and not fixed:
            factor = max(MIN_FACTOR, safety * error_norm ** (-1.0 / (order + 1)))
            h_abs *= factor
            _change_D(D, order, factor)
            ist[_NEQ] = 0
            ist[_NREJ] += 1
            ist[_LU_OK] = 0
        else:
            step_accepted = True

    ist[_NEQ] += 1
    ist[_NSTEPS] += 1
    rst[_T] = t_new
    rst[_ERR] = error_norm
    # update differences
    for j in range(n):
        D[order + 2, j] = d[j] - D[order + 1, j]
        D[order + 1, j] = d[j]
    for i in range(order, -1, -1):
        for j in range(n):
            D[i, j] += D[i + 1, j]
    # D[0] is the new solution; enforce bitwise equality with the corrector output
    for j in range(n):
        D[0, j] = y[j]
    if not guard(y[:nb]):
        rst[_H] = h_abs
        ist[_STATUS] = STATUS_GUARD
        return False
    if fixed or ist[_NEQ] < order + 1:
        rst[_H] = h_abs
        return True
    inf = np.inf
    error_m_norm = inf
    error_p_norm = inf
    if order > 1:
        ecm = _ERROR_CONST[order - 1]
        s = 0.0
        for j in range(n_err):
            r = ecm * D[order, j] / scale[j]
            s += r * r
        error_m_norm = np.sqrt(s / n_err)
    if order < ist[_MAXORD]:
        ecp = _ERROR_CONST[order + 1]
        s = 0.0
        for j in range(n_err):
            r = ecp * D[order + 2, j] / scale[j]
            s += r * r
        error_p_norm = np.sqrt(s / n_err)
    best = -1.0
    delta_order = 0
    for k in range(3):
        en = error_m_norm if k == 0 else (error_norm if k == 1 else error_p_norm)
        if en == 0.0:
            fk = inf
        elif en == inf:
            fk = 0.0
        else:
            fk = en ** (-1.0 / (order + k))
        if fk > best:
            best = fk
            delta_order = k - 1
    order += delta_order
    ist[_ORDER] = order
    factor = min(MAX_FACTOR, safety * best)
    h_abs *= factor
    _change_D(D, order, factor)
    ist[_NEQ] = 0
    ist[_LU_OK] = 0
    rst[_H] = h_abs
    return True


@njit(cache=True, inline="always")
def _advance(residual, jacobian, mass, guard, args, seg_t, seg_u, work, opts, outs):
    """Integrate across the ZOH segments ``[seg_t[k], seg_t[k+1])`` with inputs ``seg_u[k]``.

    ``work`` holds the solver arrays, ``opts`` the scalar options and ``outs``
    the output buffers (see :meth:`BDFIntegrator._run`). Writes dense output
    at the ``t_out`` times and, when ``rec_t`` has room, a record of every
    accepted step. Returns the status code.
    """
    D, J, Mb, LU, piv, LUM, pivM, ist, rst, u_prev, atol, sidx = work
    n_err, nblocks, h_init, restart_order, max_steps, single_step = opts
    t_out, y_out, out_pos, rec_t, rec_h, rec_order, rec_D, rec_pos = outs
    n = D.shape[1]
    nb = J.shape[0]
    nseg = seg_u.shape[0]
    nu = seg_u.shape[1]
    y = np.empty(n)
    d = np.empty(n)
    yp = np.empty(n)
    F = np.empty(n)
    dy = np.empty(n)
    y_pred = np.empty(n)
    psi = np.empty(n)
    Aw = np.empty((nb, nb))
    ybuf = np.empty(n)
    rtol = rst[_RTOL]
    steps_here = 0
    for k in range(nseg):
        t_end = seg_t[k + 1]
        if rst[_T] >= t_end:
            continue
        u = seg_u[k]
        changed = ist[_STARTED] == 0
        for i in range(nu):
            if np.isnan(u_prev[i]) and not changed:
                # a history start adopts its first input without a restart
                u_prev[i] = u[i]
            elif u[i] != u_prev[i]:
                changed = True
        if changed:
            for j in range(n):
                ybuf[j] = D[0, j]
            first = ist[_STARTED] == 0
            _start(residual, jacobian, mass, rst[_T], ybuf, u, args, sidx, D, J, Mb, LUM, pivM, ist, rst,
                   rtol, atol, n_err, nblocks, h_init if first else 0.0, restart_order, first, t_end)
            if ist[_STATUS] != STATUS_OK:
                return ist[_STATUS]
            ist[_STARTED] = 1
            for i in range(nu):
                u_prev[i] = u[i]
        while rst[_T] < t_end:
            if steps_here >= max_steps:
                ist[_STATUS] = STATUS_MAX_STEPS
                return ist[_STATUS]
            t_old = rst[_T]
            # requested output at the current time is the current state itself
            while out_pos[0] < t_out.shape[0] and t_out[out_pos[0]] == t_old:
                for j in range(n):
                    y_out[out_pos[0], j] = D[0, j]
                out_pos[0] += 1
            ok = _step(residual, jacobian, mass, guard, u, args, sidx, t_end, D, J, Mb, LU, piv, ist, rst,
                       atol, n_err, nblocks, y, d, yp, F, dy, y_pred, psi, Aw)
            steps_here += 1
            t_cur = rst[_T]
            if not ok and ist[_STATUS] != STATUS_GUARD:
                return ist[_STATUS]
            # dense output in (t_old, t_cur]
            order = ist[_ORDER]
            h = rst[_H]
            while out_pos[0] < t_out.shape[0] and t_out[out_pos[0]] <= t_cur:
                to = t_out[out_pos[0]]
                if to > t_old:
                    if to == t_cur:
                        for j in range(n):
                            y_out[out_pos[0], j] = D[0, j]
                    else:
                        _dense_eval(D, order, t_cur, h, to, ybuf)
                        for j in range(n):
                            y_out[out_pos[0], j] = ybuf[j]
                out_pos[0] += 1
            if rec_pos[0] < rec_t.shape[0]:
                r = rec_pos[0]
                rec_t[r] = t_cur
                rec_h[r] = h
                rec_order[r] = order
                for i in range(order + 1):
                    for j in range(n):
                        rec_D[r, i, j] = D[i, j]
                rec_pos[0] += 1
            if not ok:
                return ist[_STATUS]
            if single_step or (rec_t.shape[0] > 0 and rec_pos[0] >= rec_t.shape[0]):
                return STATUS_OK
    return STATUS_OK


# --------------------------------------------------------------------------
# Python API

@dataclasses.dataclass
class ResidualSystem:
    """A residual-form system for the integrator.

    ``n_base`` is the dimension of one block; the state has ``n_base * nblocks``
    entries. ``n_err`` (default: all) is the number of leading components in
    the error norm.
    """
    residual: object
    jacobian: object
    mass: object
    guard: object
    args: tuple
    n_base: int
    nblocks: int = 1
    n_inputs: int = 1
    names: tuple | None = None
    n_err: int | None = None
    atol_scale: np.ndarray | None = None
    # parameter positions in ``args[0]`` of the sensitivity blocks 1..nblocks-1
    sens_idx: np.ndarray | None = None
    # optional cached kernel ``kernel(args, seg_t, seg_u, work, opts, outs)`` binding the callables;
    # without it the generic kernel is specialized (uncached) on first use
    kernel: object = None

    @property
    def n(self) -> int:
        return self.n_base * self.nblocks


class InputSchedule:
    """Zero-order-hold input samples: ``values[k]`` holds on ``[times[k], times[k+1])``."""

    def __init__(self, times, values):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size != values.shape[0] or times.size == 0:
            raise ValueError("times and values must have matching first dimension")
        if np.any(np.diff(times) <= 0):
            raise ValueError("input times must be strictly increasing")
        self.times = times
        self.values = np.ascontiguousarray(values)

    @classmethod
    def constant(cls, value, t0: float = 0.0) -> "InputSchedule":
        return cls([t0], np.atleast_1d(np.asarray(value, dtype=float))[None, :])

    def __call__(self, t: float) -> np.ndarray:
        k = np.searchsorted(self.times, t, side="right") - 1
        return self.values[max(k, 0)]

    def segments(self, t0: float, t1: float):
        """Segment boundaries and values covering ``[t0, t1]``."""
        inner = self.times[(self.times > t0) & (self.times < t1)]
        bounds = np.concatenate(([t0], inner, [t1]))
        idx = np.maximum(np.searchsorted(self.times, bounds[:-1], side="right") - 1, 0)
        return bounds, np.ascontiguousarray(self.values[idx])

    def window(self, t0: float, t1: float) -> "InputSchedule":
        bounds, vals = self.segments(t0, t1)
        return InputSchedule(bounds[:-1], vals)


class Trajectory:
    """Integration result: stored samples plus per-step dense-output data."""

    def __init__(self, times, states, names=None, dense=None, stats=None):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.names = tuple(names) if names is not None else tuple(f"y{i}" for i in range(self.states.shape[1]))
        self._dense = dense
        self.stats = stats or {}

    def __len__(self):
        return self.times.size

    def __call__(self, t):
        """State at time ``t``: stored samples exactly, otherwise dense output."""
        scalar = np.ndim(t) == 0
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((ts.size, self.states.shape[1]))
        for i, tq in enumerate(ts):
            k = np.searchsorted(self.times, tq)
            if k < self.times.size and self.times[k] == tq:
                out[i] = self.states[k]
            elif self._dense is not None:
                out[i] = self._dense_eval(tq)
            else:
                out[i] = [np.interp(tq, self.times, self.states[:, j]) for j in range(self.states.shape[1])]
        return out[0] if scalar else out

    def _dense_eval(self, tq):
        t_steps, h, order, D = self._dense
        if tq < t_steps[0] or tq > t_steps[-1]:
            raise ValueError(f"t = {tq} outside the integrated interval")
        k = max(int(np.searchsorted(t_steps, tq)), 1)
        out = np.empty(D.shape[2])
        _dense_eval(D[k], int(order[k]), t_steps[k], h[k], tq, out)
        return out

    def column(self, name: str) -> np.ndarray:
        return self.states[:, self.names.index(name)]

    def to_csv(self, path, extra: dict | None = None) -> None:
        """Write ``t,<names...>`` with 17 significant digits."""
        header = ["t", *self.names]
        cols = [self.times[:, None], self.states]
        if extra:
            header += list(extra)
            cols += [np.asarray(v, dtype=float).reshape(-1, 1) for v in extra.values()]
        write_csv(path, header, np.hstack(cols))


def write_csv(path, header, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.atleast_2d(rows):
            w.writerow([format(float(v), ".17g") for v in row])


class BDFIntegrator:
    """Stateful stepper. ``advance`` integrates to a time; ``step`` takes one step."""

    def __init__(self, system: ResidualSystem, t0: float, y0, config: IntegratorConfig | None = None,
                 history=None, fixed_step: float | None = None):
        self.system = system
        self.config = config = config or IntegratorConfig()
        n = system.n
        y0 = np.asarray(y0, dtype=float)
        if y0.shape != (n,):
            raise ValueError(f"initial state must have {n} entries")
        nb = system.n_base
        self.D = np.zeros((MAX_ORDER + 3, n))
        self.D[0] = y0
        self.J = np.zeros((nb, nb))
        self.Mb = np.zeros((nb, nb))
        self.LU = np.zeros((nb, nb))
        self.piv = np.zeros(nb, dtype=np.int64)
        self.LUM = np.zeros((nb, nb))
        self.pivM = np.zeros(nb, dtype=np.int64)
        self.ist = np.zeros(_NIST, dtype=np.int64)
        self.ist[_MAXORD] = config.max_order
        self.rst = np.zeros(_NRST)
        self.rst[_T] = t0
        self.rst[_HMAX] = config.h_max
        self.rst[_RTOL] = config.rtol
        self.u_prev = np.full(system.n_inputs, np.nan)
        atol = np.full(n, config.atol)
        if system.atol_scale is not None:
            atol = atol * np.asarray(system.atol_scale, dtype=float)
        self.atol = atol
        self.n_err = system.n_err or n
        if system.nblocks > 1:
            sidx = np.asarray(system.sens_idx, dtype=np.int64)
            if sidx.shape != (system.nblocks - 1,):
                raise ValueError("sens_idx must name one parameter per sensitivity block")
        else:
            sidx = np.zeros(0, dtype=np.int64)
        self.sidx = np.ascontiguousarray(sidx)
        if history is not None:
            self._init_history(np.asarray(history, dtype=float), fixed_step)

    def _init_history(self, history, h):
        """Start from uniformly spaced past values ``history[j] = y(t0 - j h)`` at fixed order."""
        if h is None:
            raise ValueError("a history start needs the fixed step size")
        order = history.shape[0] - 1
        if not 1 <= order <= MAX_ORDER:
            raise ValueError("history must hold 2..6 points")
        vals = history.copy()
        self.D[:] = 0.0
        self.D[0] = vals[0]
        for m in range(1, order + 1):
            vals = vals[:-1] - vals[1:]
            self.D[m] = vals[0]
        self.ist[_ORDER] = order
        self.ist[_MAXORD] = order
        self.ist[_FIXED] = 1
        self.ist[_STARTED] = 1
        self.rst[_H] = h
        self.rst[_HMAX] = h
        # Jacobian and mass at the start point
        sysm = self.system
        yp = np.zeros(sysm.n)
        nb = sysm.n_base
        sysm.jacobian(self.t, self.y[:nb], yp[:nb], np.zeros(sysm.n_inputs), sysm.args, self.J, self.Mb)

    @property
    def t(self) -> float:
        return float(self.rst[_T])

    @property
    def y(self) -> np.ndarray:
        return self.D[0].copy()

    @property
    def order(self) -> int:
        return int(self.ist[_ORDER])

    @property
    def h(self) -> float:
        return float(self.rst[_H])

    @property
    def error_estimate(self) -> float:
        return float(self.rst[_ERR])

    @property
    def stats(self) -> dict:
        keys = ("order", "n_equal", "nsteps", "nfev", "njev", "nlu", "nrejected")
        return {k: int(self.ist[i]) for i, k in enumerate(keys)}

    def restart_with(self, y) -> None:
        """Replace the current state; the history is rebuilt at the next advance."""
        self.D[:] = 0.0
        self.D[0] = np.asarray(y, dtype=float)
        self.ist[_STARTED] = 0
        self.ist[_STATUS] = STATUS_OK

    def _run(self, seg_t, seg_u, t_out=None, record=0, single_step=False):
        sysm = self.system
        t_out = np.empty(0) if t_out is None else np.ascontiguousarray(t_out, dtype=float)
        y_out = np.empty((t_out.size, sysm.n))
        out_pos = np.zeros(1, dtype=np.int64)
        rec_t = np.empty(record)
        rec_h = np.empty(record)
        rec_order = np.empty(record, dtype=np.int64)
        rec_D = np.empty((record, MAX_ORDER + 1, sysm.n))
        rec_pos = np.zeros(1, dtype=np.int64)
        h_init = self.config.h_init or 0.0
        seg_t = np.ascontiguousarray(seg_t, dtype=float)
        seg_u = np.ascontiguousarray(seg_u, dtype=float)
        work = (self.D, self.J, self.Mb, self.LU, self.piv, self.LUM, self.pivM,
                self.ist, self.rst, self.u_prev, self.atol, self.sidx)
        opts = (int(self.n_err), int(sysm.nblocks), float(h_init), int(self.config.restart_order),
                int(self.config.max_steps), bool(single_step))
        outs = (t_out, y_out, out_pos, rec_t, rec_h, rec_order, rec_D, rec_pos)
        if sysm.kernel is not None:
            status = sysm.kernel(sysm.args, seg_t, seg_u, work, opts, outs)
        else:
            status = _advance(sysm.residual, sysm.jacobian, sysm.mass, sysm.guard, sysm.args,
                              seg_t, seg_u, work, opts, outs)
        r = int(rec_pos[0])
        return status, y_out, int(out_pos[0]), (rec_t[:r], rec_h[:r], rec_order[:r], rec_D[:r])

    def _raise(self, status):
        raise IntegrationError(_STATUS_TEXT.get(status, f"status {status}"), self.t, status)

    def advance(self, t_end: float, u, t_out=None) -> np.ndarray:
        """Integrate with constant input ``u`` up to ``t_end``; returns dense output at ``t_out``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))[None, :]
        status, y_out, k, _ = self._run([self.t, t_end], u, t_out)
        if status != STATUS_OK:
            self._raise(status)
        return y_out[:k]

    def step(self, u, t_bound: float = np.inf):
        """One accepted step: returns ``(t_next, y_next, error_estimate)``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))[None, :]
        status, _, _, _ = self._run([self.t, t_bound], u, single_step=True)
        if status != STATUS_OK:
            self._raise(status)
        return self.t, self.y, self.error_estimate


def integrate(system: ResidualSystem, y0, t_span, inputs=None, config: IntegratorConfig | None = None,
              t_eval=None, dense: bool = True) -> Trajectory:
    """Integrate ``system`` from ``t_span[0]`` to ``t_span[1]``.

    ``inputs`` is an :class:`InputSchedule` (zero-order hold) or ``None``.
    Without ``t_eval`` the trajectory holds every accepted step.
    """
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    if inputs is None:
        inputs = InputSchedule.constant(np.zeros(system.n_inputs), t0)
    elif not isinstance(inputs, InputSchedule):
        inputs = InputSchedule.constant(inputs, t0)
    seg_t, seg_u = inputs.segments(t0, t1)
    solver = BDFIntegrator(system, t0, y0, config)
    y0 = solver.y
    times = [np.array([t0])]
    states = [y0[None, :]]
    d_t, d_h, d_o, d_D = [np.array([t0])], [np.array([1.0])], [np.array([0], dtype=np.int64)], []
    D0 = np.zeros((1, MAX_ORDER + 1, system.n))
    D0[0, 0] = y0
    d_D.append(D0)
    t_eval_arr = None if t_eval is None else np.asarray(t_eval, dtype=float)
    eval_out = []
    chunk = 4096 if (dense or t_eval is None) else 0
    while True:
        status, y_out, k, rec = solver._run(seg_t, seg_u, t_eval_arr, record=chunk)
        if k:
            eval_out.append(y_out[:k])
            t_eval_arr = t_eval_arr[k:]
        rt, rh, ro, rD = rec
        if rt.size:
            times.append(rt)
            states.append(rD[:, 0, :].copy())
            if dense:
                d_t.append(rt)
                d_h.append(rh)
                d_o.append(ro)
                d_D.append(rD)
        if status != STATUS_OK:
            solver._raise(status)
        if solver.t >= t1:
            break
    stats = solver.stats
    if t_eval is not None:
        ys = np.vstack(eval_out) if eval_out else np.empty((0, system.n))
        ts = np.asarray(t_eval, dtype=float)[: ys.shape[0]]
        dense_data = None
        if dense:
            dense_data = (np.concatenate(d_t), np.concatenate(d_h), np.concatenate(d_o), np.concatenate(d_D))
        return Trajectory(ts, ys, system.names, dense_data, stats)
    dense_data = None
    if dense:
        dense_data = (np.concatenate(d_t), np.concatenate(d_h), np.concatenate(d_o), np.concatenate(d_D))
    return Trajectory(np.concatenate(times), np.vstack(states), system.names, dense_data, stats)
