"""Best uniform rational approximation of ``x**gamma`` on an interval.

Barycentric rational interpolation combined with successive adjustment of
the interpolation intervals until the local maximum errors equioscillate
(the BRASIL scheme).  The result is returned in pole/zero/gain form, which
is what the operator-polynomial construction downstream needs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RationalApproximant:
    """r(x) = gain * prod(x - zeros) / prod(x - poles)."""

    gain: float
    zeros: np.ndarray
    poles: np.ndarray
    interval: tuple[float, float]
    exponent: float
    error: float
    deviation: float
    iterations: int

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        num = np.prod(x[..., None] - self.zeros, axis=-1)
        den = np.prod(x[..., None] - self.poles, axis=-1)
        return self.gain * num / den

    @property
    def degree(self) -> int:
        return len(self.poles)


class _Barycentric:
    def __init__(self, support: np.ndarray, values: np.ndarray, weights: np.ndarray):
        self.z = support
        self.f = values
        self.w = weights

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = x[:, None] - self.z[None, :]
        exact = d == 0
        d[exact] = 1.0
        c = self.w / d
        r = (c @ self.f) / c.sum(axis=1)
        hit = exact.any(axis=1)
        if hit.any():
            r[hit] = self.f[np.argmax(exact[hit], axis=1)]
        return r

    def poles_zeros(self) -> tuple[np.ndarray, np.ndarray]:
        m = len(self.z)
        B = np.eye(m + 1)
        B[0, 0] = 0.0
        out = []
        for top in (self.w, self.w * self.f):
            E = np.zeros((m + 1, m + 1))
            E[0, 1:] = top
            E[1:, 0] = 1.0
            E[1:, 1:] = np.diag(self.z)
            ev = sla.eigvals(E, B)
            out.append(ev[np.isfinite(ev)])
        return out[0], out[1]


def _interpolant(nodes: np.ndarray, f) -> _Barycentric:
    """Type (m, m) rational interpolant through 2m+1 nodes."""
    support = nodes[0::2]
    test = nodes[1::2]
    fs, ft = f(support), f(test)
    loewner = (ft[:, None] - fs[None, :]) / (test[:, None] - support[None, :])
    _, _, vh = np.linalg.svd(loewner)
    return _Barycentric(support, fs, vh[-1])


def _local_max(err, lo: float, hi: float, samples: int = 24) -> float:
    if lo > 0 and hi / lo > 20:
        xs = np.geomspace(lo, hi, samples)
    else:
        xs = np.linspace(lo, hi, samples)
    vals = err(xs)
    k = int(np.argmax(vals))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, samples - 1)]
    best = vals[k]
    if b > a:
        res = minimize_scalar(lambda t: -err(np.array([t]))[0], bounds=(a, b), method="bounded",
                              options={"xatol": 1e-14 * max(abs(b), 1e-300)})
        best = max(best, -res.fun)
    return float(best)


def _initial_nodes(a: float, b: float, n: int, gamma: float) -> np.ndarray:
    # endpoints-excluded nodes clustered towards the singular end, in sqrt-exponential spacing
    k = np.arange(1, n + 1)
    if a > 0:
        t = np.log(a) + (np.log(b) - np.log(a)) * (1 - np.cos(np.pi * k / (n + 1))) / 2
        return np.exp(t)
    scale = np.pi * np.sqrt(n / max(gamma, 1e-3))
    return b * np.exp(-scale * (1 - k / (n + 1)) ** 1.5)


def best_rational_power(
    gamma: float,
    interval: tuple[float, float],
    m: int,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> RationalApproximant:
    """Best type-(m, m) uniform approximant of ``x**gamma`` on ``interval``."""
    a, b = map(float, interval)
    if not (0 <= a < b):
        raise ValueError(f"degenerate interval [{a}, {b}]")
    if m < 1:
        raise ValueError(f"approximation order must be >= 1, got {m}")
    f = lambda x: np.power(x, gamma)  # noqa: E731
    n = 2 * m + 1
    nodes = _initial_nodes(a, b, n, gamma)
    lengths = np.diff(np.concatenate([[a], nodes, [b]]))
    step = 0.5
    best = None
    dev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        edges = a + np.concatenate([[0.0], np.cumsum(lengths)])
        edges[-1] = b
        nodes = edges[1:-1]
        r = _interpolant(nodes, f)
        err = lambda x, r=r: np.abs(f(x) - r(x))  # noqa: E731
        local = np.array([_local_max(err, edges[j], edges[j + 1]) for j in range(len(edges) - 1)])
        emax = local.max()
        dev = (emax - local.min()) / emax
        if best is None or emax < best[0]:
            best = (emax, r, dev)
        if dev < tol:
            break
        # shrink intervals whose local error is too large, grow the others
        scale = (local / np.exp(np.mean(np.log(local)))) ** (-step)
        new = lengths * scale
        lengths = new * (b - a) / new.sum()
        if not np.all(lengths > 0):
            break
    emax, r, dev = best
    poles, zeros = r.poles_zeros()
    poles = _realify(poles)
    zeros = _realify(zeros)
    x0 = b
    gain = float(r(np.array([x0]))[0] / (np.prod(x0 - zeros) / np.prod(x0 - poles)))
    log.debug("rational x^%g on [%g, %g], m=%d: err=%.3e dev=%.2e after %d its", gamma, a, b, m, emax, dev, it)
    return RationalApproximant(gain, zeros, poles, (a, b), gamma, float(emax), float(dev), it)


def _realify(v: np.ndarray) -> np.ndarray:
    if np.any(np.abs(v.imag) > 1e-8 * np.maximum(np.abs(v), 1e-300)):
        raise ArithmeticError(f"rational approximant has complex poles/zeros: {v}")
    return np.sort(v.real)
