"""Quadrature helpers: composite/cumulative Simpson on uniform grids,
Richardson refinement, and Filon-Simpson rules for oscillatory integrals
integral f(s) e^{i omega s} ds whose cost must not grow with omega.

Grids are uniform with an even number N of intervals (N+1 nodes).
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import cumulative_simpson, simpson


def uniform_grid(T: float, n: int) -> np.ndarray:
    if n % 2:
        raise ValueError("n must be even")
    return np.linspace(0.0, T, n + 1)


def integrate(values: np.ndarray, h: float) -> float:
    """Composite Simpson integral of sampled values (even interval count)."""
    return float(simpson(values, dx=h))


def cumulative(values: np.ndarray, h: float) -> np.ndarray:
    """Cumulative integral vanishing at the left end, O(h^3)+ pointwise."""
    if np.iscomplexobj(values):
        # scipy's cumulative_simpson silently drops imaginary parts
        return cumulative(values.real, h) + 1j * cumulative(values.imag, h)
    out = np.empty_like(values, dtype=float)
    out[0] = 0.0
    out[1:] = cumulative_simpson(values, dx=h)
    return out


def richardson_pairs(f, n0: int, rtol: float = 1e-10, max_doublings: int = 6):
    """Run f(n) on doubling grids until the relative change drops below rtol.

    f maps an interval count to a scalar (or small array).  Returns the last
    value and the final relative change.
    """
    n = n0
    prev = np.asarray(f(n), dtype=complex)
    for _ in range(max_doublings):
        n *= 2
        cur = np.asarray(f(n), dtype=complex)
        scale = max(np.max(np.abs(cur)), 1e-300)
        change = np.max(np.abs(cur - prev)) / scale
        if change < rtol:
            return cur, change
        prev = cur
    return prev, change


# -- Filon-Simpson -------------------------------------------------------------
#
# On each panel [x0-h, x0+h] the slow factor f is interpolated by the quadratic
# through its three nodes and the product with e^{i omega s} integrated
# exactly.  The panel weights depend on theta = omega*h only; below ~0.1 they
# switch to series to avoid cancellation.  The rule is exact in omega, with
# interpolation error O(h^4 f'''') independent of omega.

def _filon_weights(theta: float):
    """Panel weights (w_minus, w_0, w_plus) for unit h; multiply by h."""
    t = theta
    if abs(t) < 0.1:
        t2 = t * t
        m0 = 2.0 * (1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0)
        m1 = 2.0j * (t / 3.0 - t * t2 / 30.0 + t * t2 * t2 / 840.0)
        m2 = 2.0 * (1.0 / 3.0 - t2 / 10.0 + t2 * t2 / 168.0 - t2 * t2 * t2 / 6480.0)
    else:
        s, c = np.sin(t), np.cos(t)
        m0 = 2.0 * s / t
        m1 = 2.0j * (s - t * c) / (t * t)
        m2 = 2.0 * ((t * t - 2.0) * s + 2.0 * t * c) / (t ** 3)
    w_minus = 0.5 * (m2 - m1)
    w_zero = m0 - m2
    w_plus = 0.5 * (m2 + m1)
    return w_minus, w_zero, w_plus


def filon_integral(values: np.ndarray, h: float, omega: float,
                   t0: float = 0.0) -> complex:
    """integral_{t0}^{t0+N*h} f(s) e^{i omega s} ds from sampled f (N even)."""
    n = len(values) - 1
    if n % 2:
        raise ValueError("need an even number of intervals")
    wm, w0, wp = _filon_weights(omega * h)
    centers = t0 + h * np.arange(1, n, 2)
    phase = np.exp(1j * omega * centers)
    panel = (wm * values[0:-1:2] + w0 * values[1::2] + wp * values[2::2]) * h
    return complex(np.sum(panel * phase))


def filon_cumulative(values: np.ndarray, h: float, omega: float,
                     t0: float = 0.0) -> np.ndarray:
    """Cumulative integral f e^{i omega s} at the even nodes (step 2h).

    Returns an array of length N//2 + 1 matching values[::2]; value 0 first.
    """
    n = len(values) - 1
    if n % 2:
        raise ValueError("need an even number of intervals")
    wm, w0, wp = _filon_weights(omega * h)
    centers = t0 + h * np.arange(1, n, 2)
    phase = np.exp(1j * omega * centers)
    panel = (wm * values[0:-1:2] + w0 * values[1::2] + wp * values[2::2]) * h
    out = np.empty(n // 2 + 1, dtype=complex)
    out[0] = 0.0
    np.cumsum(panel * phase, out=out[1:])
    return out


def osc_inner_outer(outer: np.ndarray, inner: np.ndarray, h: float,
                    nu: float, omega: float, t0: float = 0.0) -> complex:
    """I = integral outer(t) e^{i nu t} (integral_0^t inner(s) e^{i omega s} ds) dt.

    Both factors sampled on the same uniform grid over [t0, t0+N*h].  The
    inner cumulative lives on the even subgrid; the outer rule runs at step
    2h.  The inner primitive itself oscillates at omega, so the grid must
    resolve BOTH frequencies (see resolve_intervals); for frequencies beyond
    what a grid can resolve use osc_inner_outer_split.
    """
    inner_cum = filon_cumulative(inner, h, omega, t0)
    return filon_integral(outer[::2] * inner_cum, 2 * h, nu, t0)


def osc_inner_outer_split(outer: np.ndarray, inner_derivs: list, h: float,
                          nu: float, omega: float, t0: float = 0.0):
    """High-|omega| variant of osc_inner_outer via integration by parts.

    inner_derivs = [v, v', ..., v^(m)] sampled on the grid.  The inner
    primitive is expanded as e^{i omega t} P(t) - P(t0) + remainder with
    P = sum (-1)^(k-1) v^(k-1)/(i omega)^k, leaving two single-phase Filon
    passes with slow amplitudes.  Returns (value, remainder_bound) where the
    dropped remainder is bounded by |omega|^-m ||v^(m)||_1 ||u||_1.
    """
    m = len(inner_derivs) - 1
    if m < 1:
        raise ValueError("need at least [v, v']")
    iw = 1j * omega
    P = np.zeros_like(outer, dtype=complex)
    for k in range(1, m + 1):
        P += (-1) ** (k - 1) * inner_derivs[k - 1] / iw ** k
    val = filon_integral(outer * P, h, nu + omega, t0)
    val -= P[0] * filon_integral(outer + 0j, h, nu, t0)
    rem = (abs(omega) ** -m * integrate(np.abs(inner_derivs[m]), h)
           * integrate(np.abs(outer), h))
    return val, rem


def resolve_intervals(freq: float, T: float, per_cycle: int = 32,
                      n_min: int = 4096, n_max: int = 1 << 18) -> int:
    """Even interval count resolving |freq| over [0, T] at per_cycle points."""
    n = max(n_min, int(np.ceil(abs(freq) * T * per_cycle / (2.0 * np.pi))))
    n = min(n, n_max)
    return n + (n % 2)
