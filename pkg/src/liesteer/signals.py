"""Scalar control signals with exact derivative/antiderivative structure,
the iterated-integral coordinates xi_b / eta_b attached to a Hall set, and a
Chen-series oracle computing the logarithm of the chronological flow.

Signal classes
--------------
SmoothPiece   sums of  poly(t) * exp(E(t)) * prod S^(k)((t-a)/w)  where S is
              the logistic smoothstep; closed under d/dt, so C_c^infinity
              bumps keep exact derivatives of any order.
TrigPoly      sums of  poly(t) * {cos, sin}(omega t); closed under d/dt and
              integration, both exact.
Sampled       cubic-spline interpolant of grid data (numeric fallback).
PiecewiseSignal  time concatenation of segments.

Primitives (iterated_primitive) always vanish at t = 0.  SmoothPiece tracks
the antiderivative chain created by derivative(), so primitives of signals
built as high derivatives of a potential are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.interpolate import CubicSpline
from scipy.special import expit

from .free_lie import (Bracket, X0, adjoint_decomposition, classify,
                       hall_layer, leaf, lie_bracket_expand, make_M,
                       recognize_family, tensor_expand)
from .quadrature import cumulative, integrate, uniform_grid

# -- logistic smoothstep atom ---------------------------------------------------
#
# S(s) = 1/(1 + e^{g(s)}), g(s) = 1/s - 1/(1-s): C^infinity, 0 for s <= 0,
# 1 for s >= 1.  With Y = S(s), B = Y(1-Y), C = 1-2Y one has B' = -g' B C and
# C' = 2 g' B, so every derivative is sum c_{j,i} B^j C^i with j >= 1.  The
# coefficients c_{j,i} are kept as exact integer polynomials in p = 1/s and
# q = 1/(1-s) (closed under d/ds: p' = -p^2, q' = q^2, and -g' = p^2 + q^2),
# so evaluation involves no division and no expanded-denominator cancellation;
# B underflows to exactly 0 wherever p or q blows up.  Outside the window
# (DELTA, 1-DELTA) every derivative is below double underflow, so evaluation
# is masked to 0 there.

_DELTA = 1e-3
_ATOM_STATES: list = []   # [k] = {(j, i): {(a, b): int}} with c = sum p^a q^b


def _atom_state(k: int) -> dict:
    if not _ATOM_STATES:
        _ATOM_STATES.append({(0, 0): {(0, 0): 1}})          # placeholder; k=0 is Y
        _ATOM_STATES.append({(1, 0): {(2, 0): 1, (0, 2): 1}})   # S' = (p^2+q^2) B
    while len(_ATOM_STATES) <= k:
        nxt: dict = {}

        def put(key, poly):
            tgt = nxt.setdefault(key, {})
            for ab, m in poly.items():
                tgt[ab] = tgt.get(ab, 0) + m

        for (j, i), c in _ATOM_STATES[-1].items():
            dc: dict = {}
            for (a, b), m in c.items():
                if a:
                    dc[(a + 1, b)] = dc.get((a + 1, b), 0) - a * m
                if b:
                    dc[(a, b + 1)] = dc.get((a, b + 1), 0) + b * m
            put((j, i), dc)
            put((j, i + 1), {(a + 2, b): j * m for (a, b), m in c.items()})
            put((j, i + 1), {(a, b + 2): j * m for (a, b), m in c.items()})
            if i:
                put((j + 1, i - 1),
                    {(a + 2, b): -2 * i * m for (a, b), m in c.items()})
                put((j + 1, i - 1),
                    {(a, b + 2): -2 * i * m for (a, b), m in c.items()})
        _ATOM_STATES.append(
            {key: pol for key, pol in
             (((j, i), {ab: m for ab, m in poly.items() if m})
              for (j, i), poly in nxt.items()) if pol})
    return _ATOM_STATES[k]


def _powers(base: np.ndarray, nmax: int) -> list:
    out = [np.ones_like(base)]
    for _ in range(nmax):
        out.append(out[-1] * base)
    return out


def sstep(s: np.ndarray, k: int = 0) -> np.ndarray:
    """k-th derivative of the logistic smoothstep, evaluated stably."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    if k == 0:
        out[s >= 1.0 - _DELTA] = 1.0
    mid = (s > _DELTA) & (s < 1.0 - _DELTA)
    if np.any(mid):
        sm = s[mid]
        g = 1.0 / sm - 1.0 / (1.0 - sm)
        Yp = expit(-g)   # = S(s)
        Ym = expit(g)    # = 1 - S(s), at full relative precision (no 1-Y)
        if k == 0:
            out[mid] = Yp
            return out
        state = _atom_state(k)
        pp = _powers(1.0 / sm, max(a for c in state.values() for a, _ in c))
        qq = _powers(1.0 / (1.0 - sm),
                     max(b for c in state.values() for _, b in c))
        BB = _powers(Yp * Ym, max(j for j, _ in state))
        CC = _powers(Ym - Yp, max(i for _, i in state))
        vals = np.zeros_like(sm)
        for (j, i), c in state.items():
            coeff = np.zeros_like(sm)
            for (a, b), m in c.items():
                coeff += float(m) * pp[a] * qq[b]
            vals += coeff * BB[j] * CC[i]
        out[mid] = vals
    return out


# -- signal classes -------------------------------------------------------------


class Signal:
    """Base: value on arrays, exact/approximate calculus, affine reparam."""

    _anti = None  # set by derivative(): the signal this one is d/dt of

    def value(self, t):
        raise NotImplementedError

    def __call__(self, t):
        tt = np.asarray(t, dtype=float)
        out = self.value(np.atleast_1d(tt))
        return float(out[0]) if tt.ndim == 0 else out

    def derivative(self) -> "Signal":
        raise NotImplementedError

    def _antiderivative_raw(self, domain):
        if self._anti is not None:
            return self._anti
        lo, hi = domain if domain is not None else (None, None)
        if hi is None:
            sup = self.finite_support()
            if sup is None:
                raise ValueError(
                    "no antiderivative chain and no finite domain; pass domain=")
            hi = sup[1]
        n = 8192
        grid = uniform_grid(hi, n)
        return Sampled(grid, cumulative(self.value(grid), grid[1] - grid[0]))

    def antiderivative(self, domain=None) -> "Signal":
        """Primitive vanishing at t = 0."""
        p = self._antiderivative_raw(domain)
        c = p(0.0)
        return p.add_const(-c) if c != 0.0 else p

    def iterated_primitive(self, n: int, domain=None) -> "Signal":
        p = self
        for _ in range(n):
            p = p.antiderivative(domain)
        return p

    def finite_support(self):
        return None

    def add_const(self, c: float) -> "Signal":
        raise NotImplementedError

    def time_affine(self, scale: float, shift: float = 0.0) -> "Signal":
        """Signal t -> self((t - shift)/scale)."""
        raise NotImplementedError

    def __mul__(self, c):
        raise NotImplementedError

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)


def _poly(c) -> tuple:
    arr = np.trim_zeros(np.asarray(c, dtype=float), "b")
    return tuple(arr)


def _poly_compose_affine(c, scale: float, shift: float) -> tuple:
    """Coefficients of p((t - shift)/scale)."""
    if not c:
        return ()
    line = np.polynomial.Polynomial([-shift / scale, 1.0 / scale])
    return _poly(np.polynomial.Polynomial(list(c))(line).coef)


class SmoothPiece(Signal):
    """Sum of terms poly(t)*exp(E(t))*prod_atoms, atoms = S^(k)((t-a)/w).

    terms: dict  (exp_coeffs | None, ((a, w, k), ...)) -> poly coeffs.
    """

    def __init__(self, terms: dict):
        self.terms = {k: _poly(v) for k, v in terms.items() if _poly(v)}

    def value(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        cache: dict = {}
        for (expc, atoms), poly in self.terms.items():
            term = P.polyval(t, poly)
            if expc:
                term = term * np.exp(P.polyval(t, expc))
            for atom in atoms:
                if atom not in cache:
                    a, w, k = atom
                    cache[atom] = sstep((t - a) / w, k)
                term = term * cache[atom]
            out += term
        return out

    def _merged(self, items):
        acc: dict = {}
        for key, poly in items:
            poly = _poly(poly)
            if not poly:
                continue
            if key in acc:
                acc[key] = _poly(P.polyadd(acc[key], poly))
            else:
                acc[key] = poly
        return SmoothPiece(acc)

    def derivative(self):
        items = []
        for (expc, atoms), poly in self.terms.items():
            items.append(((expc, atoms), P.polyder(poly)))
            if expc:
                items.append(((expc, atoms), P.polymul(poly, P.polyder(expc))))
            for i, (a, w, k) in enumerate(atoms):
                bumped = tuple(sorted(atoms[:i] + ((a, w, k + 1),) + atoms[i + 1:]))
                items.append(((expc, bumped), np.asarray(poly) / w))
        out = self._merged(items)
        out._anti = self
        return out

    def poly_mul(self, c) -> "SmoothPiece":
        c = _poly(c)
        return self._merged(((key, P.polymul(poly, c))
                             for key, poly in self.terms.items()))

    def add_const(self, c: float) -> "SmoothPiece":
        return self + SmoothPiece({(None, ()): (float(c),)})

    def __add__(self, other):
        if not isinstance(other, SmoothPiece):
            return NotImplemented
        return self._merged(list(self.terms.items()) + list(other.terms.items()))

    def __mul__(self, c):
        out = self._merged(((key, np.asarray(poly) * float(c))
                            for key, poly in self.terms.items()))
        if self._anti is not None:
            out._anti = self._anti * float(c)
        return out

    __rmul__ = __mul__

    def time_affine(self, scale, shift=0.0):
        terms = {}
        items = []
        for (expc, atoms), poly in self.terms.items():
            newe = _poly_compose_affine(expc, scale, shift) if expc else None
            newa = tuple(sorted((shift + a * scale, w * scale, k)
                                for a, w, k in atoms))
            items.append(((newe, newa), _poly_compose_affine(poly, scale, shift)))
        out = self._merged(items)
        if self._anti is not None:
            # primitive of f((t-shift)/scale) is scale*F((t-shift)/scale) + const
            out._anti = self._anti.time_affine(scale, shift) * scale
        return out

    def finite_support(self):
        lo, hi = np.inf, -np.inf
        for (_, atoms), _poly_ in self.terms.items():
            tlo, thi = -np.inf, np.inf
            for a, w, k in atoms:
                left, right = (a, a + w) if w > 0 else (a + w, a)
                if k >= 1:
                    tlo, thi = max(tlo, left), min(thi, right)
                else:  # plateau side extends to +/- infinity
                    if w > 0:
                        tlo = max(tlo, left)
                    else:
                        thi = min(thi, right)
            if not (tlo > -np.inf and thi < np.inf):
                return None
            lo, hi = min(lo, tlo), max(hi, thi)
        return None if lo > hi else (lo, hi)


class TrigPoly(Signal):
    """Sum over frequencies of poly_c(t) cos(omega t) + poly_s(t) sin(omega t);
    the omega = 0 slot is a plain polynomial.  Exact calculus both ways."""

    def __init__(self, terms: dict):
        self.terms = {}
        for w, (pc, ps) in terms.items():
            pc, ps = _poly(pc), _poly(ps)
            if pc or ps:
                self.terms[float(w)] = (pc, ps)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for w, (pc, ps) in self.terms.items():
            if w == 0.0:
                out += P.polyval(t, pc) if pc else 0.0
            else:
                if pc:
                    out += P.polyval(t, pc) * np.cos(w * t)
                if ps:
                    out += P.polyval(t, ps) * np.sin(w * t)
        return out

    def derivative(self):
        terms = {}
        for w, (pc, ps) in self.terms.items():
            if w == 0.0:
                terms[w] = (P.polyder(pc) if pc else (), ())
            else:
                dc = P.polyadd(P.polyder(pc) if pc else (0.0,),
                               w * np.asarray(ps if ps else (0.0,)))
                ds = P.polysub(P.polyder(ps) if ps else (0.0,),
                               w * np.asarray(pc if pc else (0.0,)))
                terms[w] = (dc, ds)
        out = TrigPoly(terms)
        out._anti = self
        return out

    def _antiderivative_raw(self, domain=None):
        if self._anti is not None:
            return self._anti
        terms = {}
        for w, (pc, ps) in self.terms.items():
            if w == 0.0:
                terms[w] = (P.polyint(pc) if pc else (), ())
                continue
            # solve qc'' + w^2 qc = pc' - w ps ; then qs = (pc - qc')/w
            rhs = P.polysub(P.polyder(pc) if pc else (0.0,),
                            w * np.asarray(ps if ps else (0.0,)))
            qc = np.zeros(1)
            cur = np.asarray(rhs, dtype=float)
            k = 0
            while np.any(cur != 0.0):
                qc = P.polyadd(qc, (-1.0) ** k * cur / w ** (2 * k + 2))
                cur = P.polyder(P.polyder(cur)) if len(cur) > 2 else np.zeros(1)
                k += 1
            qs = P.polysub(pc if pc else (0.0,), P.polyder(qc)) / w
            terms[w] = (qc, qs)
        return TrigPoly(terms)

    def add_const(self, c):
        merged = dict(self.terms)
        pc, ps = merged.get(0.0, ((), ()))
        merged[0.0] = (P.polyadd(pc if pc else (0.0,), (float(c),)), ())
        return TrigPoly(merged)

    def __add__(self, other):
        if not isinstance(other, TrigPoly):
            return NotImplemented
        merged = dict(self.terms)
        for w, (pc, ps) in other.terms.items():
            mc, ms = merged.get(w, ((), ()))
            merged[w] = (P.polyadd(mc if mc else (0.0,), pc if pc else (0.0,)),
                         P.polyadd(ms if ms else (0.0,), ps if ps else (0.0,)))
        return TrigPoly(merged)

    def __mul__(self, c):
        c = float(c)
        return TrigPoly({w: (np.asarray(pc if pc else (0.0,)) * c,
                             np.asarray(ps if ps else (0.0,)) * c)
                         for w, (pc, ps) in self.terms.items()})

    __rmul__ = __mul__

    def time_affine(self, scale, shift=0.0):
        terms = {}
        for w, (pc, ps) in self.terms.items():
            cc = _poly_compose_affine(pc, scale, shift) if pc else ()
            cs = _poly_compose_affine(ps, scale, shift) if ps else ()
            if w == 0.0:
                new_w, npc, nps = 0.0, cc, ()
            else:
                new_w = w / scale
                phi = w * shift / scale
                ca, sa = math.cos(phi), math.sin(phi)
                npc = P.polysub(np.asarray(cc if cc else (0.0,)) * ca,
                                np.asarray(cs if cs else (0.0,)) * sa)
                nps = P.polyadd(np.asarray(cc if cc else (0.0,)) * sa,
                                np.asarray(cs if cs else (0.0,)) * ca)
            if new_w in terms:
                opc, ops = terms[new_w]
                npc = P.polyadd(opc if opc else (0.0,), npc)
                nps = P.polyadd(ops if ops else (0.0,), nps)
            terms[new_w] = (npc, nps)
        return TrigPoly(terms)


class Sampled(Signal):
    """Cubic-spline signal from uniform grid data; evaluation clips to the
    grid span (constant continuation), which is the right extension both for
    compactly supported signals and for their primitives."""

    def __init__(self, grid: np.ndarray, values: np.ndarray):
        self.grid = np.asarray(grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self._spline = CubicSpline(self.grid, self.values, bc_type="natural")

    def value(self, t):
        t = np.clip(np.asarray(t, dtype=float), self.grid[0], self.grid[-1])
        return self._spline(t)

    def derivative(self):
        out = Sampled(self.grid, self._spline.derivative()(self.grid))
        out._anti = self
        return out

    def _antiderivative_raw(self, domain=None):
        if self._anti is not None:
            return self._anti
        anti = self._spline.antiderivative()
        return Sampled(self.grid, anti(self.grid) - anti(self.grid[0]))

    def add_const(self, c):
        return Sampled(self.grid, self.values + float(c))

    def __mul__(self, c):
        return Sampled(self.grid, self.values * float(c))

    __rmul__ = __mul__

    def time_affine(self, scale, shift=0.0):
        return Sampled(self.grid * scale + shift, self.values)

    def finite_support(self):
        return (self.grid[0], self.grid[-1])


class PiecewiseSignal(Signal):
    """Concatenation of segments (signal, duration), each in local time.

    Value is 0 before t = 0 and right_value (default 0) after the total
    duration; primitives set right_value to stay constant past the end.
    """

    def __init__(self, segments, right_value: float = 0.0):
        self.segments = [(sig, float(d)) for sig, d in segments]
        self.starts = np.cumsum([0.0] + [d for _, d in self.segments])
        self.total = float(self.starts[-1])
        self.right_value = float(right_value)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full_like(t, 0.0)
        out[t >= self.total] = self.right_value
        for (sig, d), s0 in zip(self.segments, self.starts):
            mask = (t >= s0) & (t < s0 + d)
            if mask.any():
                out[mask] = sig.value(t[mask] - s0)
        return out

    def derivative(self):
        out = PiecewiseSignal([(sig.derivative(), d) for sig, d in self.segments])
        out._anti = self
        return out

    def _antiderivative_raw(self, domain=None):
        if self._anti is not None:
            return self._anti
        segs, offset = [], 0.0
        for sig, d in self.segments:
            a = sig.antiderivative(domain=(0.0, d))
            segs.append((a.add_const(offset) if offset else a, d))
            offset += a(d)
        return PiecewiseSignal(segs, right_value=offset)

    def add_const(self, c):
        return PiecewiseSignal([(sig.add_const(c), d) for sig, d in self.segments],
                               right_value=self.right_value + float(c))

    def __mul__(self, c):
        return PiecewiseSignal([(sig * c, d) for sig, d in self.segments],
                               right_value=self.right_value * float(c))

    __rmul__ = __mul__

    def time_affine(self, scale, shift=0.0):
        segs = [(sig.time_affine(scale), d * scale) for sig, d in self.segments]
        if shift > 0:
            segs.insert(0, (zero_signal(), shift))
        elif shift < 0:
            raise ValueError("negative shift would push segments before t = 0")
        return PiecewiseSignal(segs, right_value=self.right_value)

    def finite_support(self):
        return (0.0, self.total)


# -- constructors ---------------------------------------------------------------


def zero_signal() -> TrigPoly:
    return TrigPoly({})


def poly_signal(*coeffs) -> TrigPoly:
    """Polynomial signal c0 + c1 t + c2 t^2 + ..."""
    return TrigPoly({0.0: (coeffs, ())})


def trig_signal(omega: float, cos_coeff=0.0, sin_coeff=0.0) -> TrigPoly:
    return TrigPoly({float(omega): ((cos_coeff,), (sin_coeff,))})


def smoothstep_signal(a: float = 0.0, b: float = 1.0) -> SmoothPiece:
    """S((t-a)/(b-a)): 0 left of a, 1 right of b."""
    return SmoothPiece({(None, ((a, b - a, 0),)): (1.0,)})


def bump(l0: float, r0: float, l1: float, r1: float) -> SmoothPiece:
    """C_c^infinity plateau bump: rises on (l0, r0), equals 1 on [r0, l1],
    falls on (l1, r1).  Requires l0 < r0 <= l1 < r1."""
    if not (l0 < r0 <= l1 < r1):
        raise ValueError("need l0 < r0 <= l1 < r1")
    atoms = tuple(sorted([(l0, r0 - l0, 0), (r1, l1 - r1, 0)]))
    return SmoothPiece({(None, atoms): (1.0,)})


def bump_simple(a: float = 0.0, b: float = 1.0) -> SmoothPiece:
    """Bump supported on (a, b) with quarter-width shoulders."""
    q = (b - a) / 4.0
    return bump(a, a + q, b - q, b)


def exp_weighted_bump(m: int, l0=0.0, r0=0.25, l1=0.75, r1=1.0) -> SmoothPiece:
    """e^{t^m} * bump: the generating potential of the moment solver."""
    chi = bump(l0, r0, l1, r1)
    ((_, atoms), poly), = chi.terms.items()
    expc = tuple([0.0] * m + [1.0])
    return SmoothPiece({(expc, atoms): poly})


# -- control pairs --------------------------------------------------------------


@dataclass
class ControlPair:
    """Pair of controls (u, v) on [0, T]."""

    u: Signal
    v: Signal
    T: float

    def scaled(self, lam: float, mu: float, T_new: float) -> "ControlPair":
        """(lam * u(t/T_new * T_old_unit), ...): dilation of a pair living on
        [0, 1] to [0, T_new] with amplitudes lam, mu."""
        s = T_new / self.T
        return ControlPair(self.u.time_affine(s) * lam,
                           self.v.time_affine(s) * mu, T_new)

    def concat(self, other: "ControlPair") -> "ControlPair":
        return ControlPair(
            PiecewiseSignal([(self.u, self.T), (other.u, other.T)]),
            PiecewiseSignal([(self.v, self.T), (other.v, other.T)]),
            self.T + other.T)


def random_control_pair(seed: int, T: float = 1.0, modes: int = 3) -> ControlPair:
    """Smooth random pair built from low sine modes vanishing at 0 and T."""
    rng = np.random.default_rng(seed)
    def one():
        sig = zero_signal()
        for k in range(1, modes + 1):
            amp = rng.standard_normal() / k
            sig = sig + trig_signal(k * np.pi / T, sin_coeff=amp)
        return sig
    return ControlPair(one(), one(), T)


# -- xi / eta coordinates --------------------------------------------------------


_ETA_PAIRS_CACHE: dict = {}


def eta_pairs(b: Bracket):
    """[(b1, b2, delta)] with b1 > b2 degree-1 Hall elements whose bracket
    contains b with coefficient delta: the quadratic CBHD correction data."""
    if b in _ETA_PAIRS_CACHE:
        return _ETA_PAIRS_CACHE[b]
    n1, n2, n0 = b.multidegree
    cands = []
    if (n1, n2) == (2, 0):
        cands = [(make_M(1, a), make_M(1, c))
                 for a in range(n0 + 1) for c in range(n0 + 1)
                 if a + c == n0 and a > c]
    elif (n1, n2) == (0, 2):
        cands = [(make_M(2, a), make_M(2, c))
                 for a in range(n0 + 1) for c in range(n0 + 1)
                 if a + c == n0 and a > c]
    elif (n1, n2) == (1, 1):
        for a in range(n0 + 1):
            p, q = make_M(1, a), make_M(2, n0 - a)
            cands.append((p, q) if p.sort_key() > q.sort_key() else (q, p))
    out = []
    for b1, b2 in cands:
        delta = lie_bracket_expand(b1, b2).get(b)
        if delta:
            out.append((b1, b2, float(delta)))
    _ETA_PAIRS_CACHE[b] = out
    return out


class XiEvaluator:
    """Evaluates xi_b, the closed-form family versions, and eta_b on a grid.

    xi_{X0} = t, xi_{Xi} = i-th control primitive; for b = ad_{b1}^m(b2) with
    m maximal, xi_b = (1/m!) int xi_{b1}^m d(xi_{b2}).  The derivative grids
    D_b = d xi_b/dt are built recursively so no numerical differentiation
    ever happens.
    """

    def __init__(self, pair: ControlPair, n: int = 4096):
        self.pair = pair
        self.t = uniform_grid(pair.T, n)
        self.h = self.t[1] - self.t[0]
        self.ugrid = pair.u(self.t)
        self.vgrid = pair.v(self.t)
        self._xi: dict = {}
        self._D: dict = {}
        self._prims = {1: [self.ugrid], 2: [self.vgrid]}
        # signals built by derivative() carry their antiderivatives; those
        # give primitives exactly, which matters when the control is a high
        # derivative whose spikes a grid barely resolves
        self._chains = {1: self._chain(pair.u), 2: self._chain(pair.v)}

    @staticmethod
    def _chain(sig):
        chain = [sig]
        while chain[-1]._anti is not None:
            chain.append(chain[-1]._anti)
        return chain

    def control_primitive(self, i: int, j: int) -> np.ndarray:
        """j-th iterated primitive of control i on the grid (j = 0: raw)."""
        prims = self._prims[i]
        chain = self._chains[i]
        while len(prims) <= j:
            jn = len(prims)
            if jn < len(chain):
                # exact: chain[jn] - its Taylor polynomial at 0 below order jn
                vals = chain[jn](self.t)
                for r in range(jn):
                    c0 = float(chain[jn - r](0.0))
                    if c0:
                        vals = vals - c0 * self.t ** r / math.factorial(r)
                prims.append(vals)
            else:
                prims.append(cumulative(prims[-1], self.h))
        return prims[j]

    def D(self, b: Bracket) -> np.ndarray:
        if b in self._D:
            return self._D[b]
        if b.is_leaf:
            out = {0: np.ones_like(self.t), 1: self.ugrid, 2: self.vgrid}[b.letter]
        else:
            b1, m, b2 = adjoint_decomposition(b)
            out = self.xi(b1) ** m * self.D(b2) / math.factorial(m)
        self._D[b] = out
        return out

    def xi(self, b: Bracket) -> np.ndarray:
        if b not in self._xi:
            self._xi[b] = cumulative(self.D(b), self.h)
        return self._xi[b]

    def xi_closed(self, b: Bracket) -> np.ndarray:
        """Family closed form: an independent route to xi_b for M/W/C."""
        fam = recognize_family(b)
        if fam is None:
            raise ValueError(f"{b} is not in the M/W/C families")
        if fam[0] == "X0":
            return self.t.copy()
        if fam[0] == "M":
            _, i, j = fam
            return self.control_primitive(i, j + 1).copy()
        if fam[0] == "W":
            _, i, j, l = fam
            g = 0.5 * self.control_primitive(i, j) ** 2
        else:
            _, j, l = fam
            g = (self.control_primitive(1, j // 2 + 1)
                 * self.control_primitive(2, (j + 1) // 2))
        for _ in range(l + 1):  # (t-s)^l/l! kernel = (l+1)-fold primitive
            g = cumulative(g, self.h)
        return g

    def eta(self, b: Bracket) -> np.ndarray:
        cls = classify(b)
        if cls in ("B0", "B1"):
            return self.xi(b)
        corr = np.zeros_like(self.t)
        for b1, b2, delta in eta_pairs(b):
            corr += 0.5 * delta * self.xi(b1) * self.xi(b2)
        return self.xi(b) + corr

    def at_end(self, grid_fn, b: Bracket) -> float:
        return float(grid_fn(b)[-1])


def xi(b: Bracket, pair: ControlPair, t: float | None = None,
       n: int = 4096) -> float:
    """xi_b at time t (default: the pair's horizon)."""
    ev = XiEvaluator(pair, n)
    g = ev.xi(b)
    if t is None or t == pair.T:
        return float(g[-1])
    return float(np.interp(t, ev.t, g))


def eta(b: Bracket, pair: ControlPair, t: float | None = None,
        n: int = 4096) -> float:
    ev = XiEvaluator(pair, n)
    g = ev.eta(b)
    if t is None or t == pair.T:
        return float(g[-1])
    return float(np.interp(t, ev.t, g))


# -- Chen-series oracle ----------------------------------------------------------


def chen_magnus_log(pair: ControlPair, n: int = 4096, max_len: int = 6):
    """Hall coordinates eta_b of the drift-normalized log of the flow series.

    Builds the Chen series y(T) of the pair (words accumulate their last
    letter rightmost), multiplies by exp(-T X0) on the left, takes the
    truncated log and projects each multidegree layer onto its Hall
    elements.  Works in the quotient of the tensor algebra by words with
    more than two control letters (an ideal, so products and log are well
    defined) and by words longer than max_len.

    Returns (coords, info).  coords maps each Hall bracket of length <=
    max_len and control degree in {1, 2} to eta_b, plus X0 -> T (the drift
    coordinate is definitional; normalization removes it from the log).
    info carries the projection residuals, which bound the non-Lie content,
    and the drift residual, which must vanish after normalization.
    """
    t = uniform_grid(pair.T, n)
    h = t[1] - t[0]
    letters = {0: np.ones_like(t), 1: pair.u(t), 2: pair.v(t)}

    # word coefficients of the Chen series: c_{w.i}(t) = int c_w letter_i
    grids = {(): np.ones_like(t)}
    frontier = [()]
    series = {(): 1.0}
    for _ in range(max_len):
        nxt = []
        for w in frontier:
            for i in (0, 1, 2):
                word = w + (i,)
                if sum(1 for a in word if a != 0) > 2:
                    continue
                grids[word] = cumulative(grids[w] * letters[i], h)
                series[word] = float(grids[word][-1])
                nxt.append(word)
        frontier = nxt

    def mult(x, y):
        out = {}
        for wx, cx in x.items():
            for wy, cy in y.items():
                w = wx + wy
                if len(w) > max_len or sum(1 for a in w if a != 0) > 2:
                    continue
                out[w] = out.get(w, 0.0) + cx * cy
        return out

    drift_inv = {(0,) * k: (-pair.T) ** k / math.factorial(k)
                 for k in range(max_len + 1)}
    z = mult(drift_inv, series)

    # log(1 + A) truncated; A starts at length 1 so k <= max_len suffices
    A = {w: c for w, c in z.items() if w}
    Z, Ak, sign = {}, dict(A), 1.0
    for k in range(1, max_len + 1):
        for w, c in Ak.items():
            Z[w] = Z.get(w, 0.0) + sign * c / k
        sign = -sign
        if k < max_len:
            Ak = mult(Ak, A)

    # project each multidegree layer onto its Hall elements
    layers: dict = {}
    for w, c in Z.items():
        key = (sum(1 for a in w if a == 1), sum(1 for a in w if a == 2),
               sum(1 for a in w if a == 0))
        layers.setdefault(key, {})[w] = c

    coords, resid, drift_resid = {X0: pair.T}, 0.0, 0.0
    for (n1, n2, n0), words in sorted(layers.items()):
        if n1 + n2 == 0:
            drift_resid = max(drift_resid, abs(words[(0,) * n0]))
            continue
        halls = hall_layer(n1, n2, n0)
        wlist = sorted(words)
        M = np.array([[float(tensor_expand(hb).get(w, 0)) for hb in halls]
                      for w in wlist])
        rhs = np.array([words[w] for w in wlist])
        sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        resid = max(resid, float(np.max(np.abs(M @ sol - rhs))))
        for hb, c in zip(halls, sol):
            coords[hb] = float(c)
    return coords, {"layer_residual": resid, "drift_residual": drift_resid}


# -- norms -----------------------------------------------------------------------


def l2_norm(sig: Signal, T: float, n: int = 4096) -> float:
    g = uniform_grid(T, n)
    return math.sqrt(integrate(sig(g) ** 2, g[1] - g[0]))


def weak_norm(sig: Signal, k: int, T: float, n: int = 4096) -> float:
    """|u_1(T)| + ||u_k||_{L^2(0,T)}: the H^{-k}-type norm used to measure
    smallness of highly oscillatory controls."""
    u1 = sig.iterated_primitive(1, domain=(0.0, T))
    uk = sig.iterated_primitive(k, domain=(0.0, T))
    return abs(u1(T)) + l2_norm(uk, T, n)
