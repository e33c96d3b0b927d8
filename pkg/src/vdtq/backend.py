"""Kernel backend selection: numba-jitted hot loops with a pure-numpy fallback.

The four loop-bound kernels of the package live here:

* ``matmul``            -- reference matrix product, fixed left-to-right
                           summation over the inner dimension
* ``quantize_groups``   -- round-half-away-from-zero + clamp per group
* ``power_iteration``   -- dominant eigenvalue of a symmetric PSD matrix
* ``gptq_sweep``        -- error-compensating column sweep for weight
                           quantization

Backend choice: set ``VDTQ_BACKEND=numpy`` or ``VDTQ_BACKEND=numba`` in the
environment. Default is numba when importable, numpy otherwise. Both paths
are deterministic; results agree elementwise for quantize/gptq and to
floating-point roundoff for matmul/power iteration (the numpy fallback uses
BLAS reductions whose summation order differs from the reference kernels).
``benchmarks/bench_backends.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


def _resolve_backend() -> str:
    choice = os.environ.get("VDTQ_BACKEND", "").strip().lower()
    if choice == "":
        return "numba" if HAS_NUMBA else "numpy"
    if choice not in ("numba", "numpy"):
        raise ConfigError(f"VDTQ_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not HAS_NUMBA:
        raise ConfigError("VDTQ_BACKEND=numba requested but numba is not importable")
    return choice


_BACKEND = _resolve_backend()


def active_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Switch the kernel backend at runtime (used by tests and benchmarks)."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ConfigError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    previous = _BACKEND
    _BACKEND = name
    return previous


# ---------------------------------------------------------------------------
# numpy fallback path
# ---------------------------------------------------------------------------


def _matmul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def _quantize_groups_np(x2: np.ndarray, deltas: np.ndarray, qmin: int, qmax: int) -> np.ndarray:
    t = x2 / deltas[:, None]
    r = np.floor(np.abs(t) + 0.5) * np.sign(t)
    return np.clip(r, qmin, qmax).astype(np.int32)


def _power_iteration_np(m: np.ndarray, max_iters: int, tol: float):
    d = m.shape[0]
    v = np.full(d, 1.0 / np.sqrt(d))
    lam_prev = np.inf
    restart = 0
    for it in range(1, max_iters + 1):
        w = m @ v
        lam = float(v @ w)
        norm = float(np.sqrt(w @ w))
        if norm == 0.0:
            # iterate fell into the nullspace; restart from a basis vector
            if restart >= d:
                return 0.0, True, it
            v = np.zeros(d)
            v[restart] = 1.0
            restart += 1
            lam_prev = np.inf
            continue
        v = w / norm
        if abs(lam - lam_prev) < tol * max(abs(lam), 1e-300):
            return lam, True, it
        lam_prev = lam
    return lam_prev, False, max_iters


def _gptq_sweep_np(wwork: np.ndarray, deltas: np.ndarray, u: np.ndarray, qmin: int, qmax: int) -> np.ndarray:
    out, d = wwork.shape
    ints = np.empty((out, d), dtype=np.int32)
    for q in range(d):
        t = wwork[:, q] / deltas
        r = np.floor(np.abs(t) + 0.5) * np.sign(t)
        c = np.clip(r, qmin, qmax)
        ints[:, q] = c.astype(np.int32)
        err = (wwork[:, q] - c * deltas) / u[q, q]
        if q + 1 < d:
            wwork[:, q + 1 :] -= np.outer(err, u[q, q + 1 :])
    return ints


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _matmul_nb(a, b):
        m, k = a.shape
        p = b.shape[1]
        out = np.zeros((m, p))
        for i in range(m):
            for t in range(k):
                ait = a[i, t]
                for j in range(p):
                    out[i, j] += ait * b[t, j]
        return out

    @njit(cache=True)
    def _quantize_groups_nb(x2, deltas, qmin, qmax):
        g, l = x2.shape
        ints = np.empty((g, l), dtype=np.int32)
        for i in range(g):
            delta = deltas[i]
            for j in range(l):
                t = x2[i, j] / delta
                r = np.floor(abs(t) + 0.5)
                if t < 0.0:
                    r = -r
                if r < qmin:
                    r = qmin
                elif r > qmax:
                    r = qmax
                ints[i, j] = np.int32(r)
        return ints

    @njit(cache=True)
    def _power_iteration_nb(m, max_iters, tol):
        d = m.shape[0]
        v = np.full(d, 1.0 / np.sqrt(d))
        lam_prev = np.inf
        restart = 0
        it = 0
        for step in range(1, max_iters + 1):
            it = step
            w = np.zeros(d)
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += m[i, j] * v[j]
                w[i] = acc
            lam = 0.0
            nsq = 0.0
            for i in range(d):
                lam += v[i] * w[i]
                nsq += w[i] * w[i]
            norm = np.sqrt(nsq)
            if norm == 0.0:
                if restart >= d:
                    return 0.0, True, it
                v = np.zeros(d)
                v[restart] = 1.0
                restart += 1
                lam_prev = np.inf
                continue
            for i in range(d):
                v[i] = w[i] / norm
            bound = abs(lam)
            if bound < 1e-300:
                bound = 1e-300
            if abs(lam - lam_prev) < tol * bound:
                return lam, True, it
            lam_prev = lam
        return lam_prev, False, max_iters

    @njit(cache=True)
    def _gptq_sweep_nb(wwork, deltas, u, qmin, qmax):
        out, d = wwork.shape
        ints = np.empty((out, d), dtype=np.int32)
        err = np.empty(out)
        for q in range(d):
            uqq = u[q, q]
            for i in range(out):
                t = wwork[i, q] / deltas[i]
                r = np.floor(abs(t) + 0.5)
                if t < 0.0:
                    r = -r
                if r < qmin:
                    r = qmin
                elif r > qmax:
                    r = qmax
                ints[i, q] = np.int32(r)
                err[i] = (wwork[i, q] - r * deltas[i]) / uqq
            for j in range(q + 1, d):
                uqj = u[q, j]
                for i in range(out):
                    wwork[i, j] -= err[i] * uqj
        return ints


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _BACKEND == "numba":
        return _matmul_nb(_c(a), _c(b))
    return _matmul_np(a, b)


def quantize_groups(x2: np.ndarray, deltas: np.ndarray, qmin: int, qmax: int) -> np.ndarray:
    """Quantize a 2-D group-major view: one step size per row of ``x2``."""
    if _BACKEND == "numba":
        return _quantize_groups_nb(_c(x2), _c(deltas), float(qmin), float(qmax))
    return _quantize_groups_np(x2, deltas, qmin, qmax)


def power_iteration(m: np.ndarray, max_iters: int, tol: float):
    """Dominant eigenvalue of symmetric PSD ``m``: (value, converged, iters)."""
    if _BACKEND == "numba":
        lam, conv, iters = _power_iteration_nb(_c(m), max_iters, tol)
        return float(lam), bool(conv), int(iters)
    lam, conv, iters = _power_iteration_np(m, max_iters, tol)
    return float(lam), bool(conv), int(iters)


def gptq_sweep(wwork: np.ndarray, deltas: np.ndarray, u: np.ndarray, qmin: int, qmax: int) -> np.ndarray:
    """Column sweep with error feedback; mutates ``wwork`` in place."""
    if _BACKEND == "numba":
        return _gptq_sweep_nb(wwork, _c(deltas), _c(u), float(qmin), float(qmax))
    return _gptq_sweep_np(wwork, deltas, u, qmin, qmax)


def warmup() -> None:
    """Trigger JIT compilation of all kernels so timed runs exclude it."""
    if _BACKEND != "numba":
        return
    a = np.eye(2)
    matmul(a, a)
    quantize_groups(a, np.ones(2), -8, 7)
    power_iteration(a, 10, 1e-10)
    gptq_sweep(a.copy(), np.ones(2), np.eye(2), -8, 7)
