"""Control-affine ODE toolbox: RK4 simulation with step doubling, the
small-time controllability checker (linear span + bad-bracket compensation +
the S(theta) quadratic slice), truncated Lie-series state representation,
tangent-vector control synthesis, linear correction, and the target-reaching
fixed point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .free_lie import (Bracket, HallBasis, X0, build_hall_basis, make_C,
                       make_M, recognize_family, sigma)
from .moments import MomentProblem, solve_quadratic_moment
from .signals import (ControlPair, PiecewiseSignal, Sampled, SmoothPiece,
                      XiEvaluator, bump_simple, zero_signal)
from .vector_fields import AffineSystem, SpanReport, s1_span


class BlowupError(RuntimeError):
    def __init__(self, t_escape: float, norm: float):
        super().__init__(f"trajectory norm {norm:.3e} exceeded bound "
                         f"at t = {t_escape:.6f}")
        self.t_escape = t_escape
        self.norm = norm


@dataclass
class SimResult:
    t: np.ndarray
    x: np.ndarray           # shape (n+1, d)
    n_steps: int
    refinements: int
    step_error: float        # endpoint difference of the last doubling

    @property
    def endpoint(self) -> np.ndarray:
        return self.x[-1]

    def to_csv(self, pair: ControlPair | None = None) -> str:
        cols = [self.t] + [self.x[:, i] for i in range(self.x.shape[1])]
        header = ["t"] + [f"x_{i+1}" for i in range(self.x.shape[1])]
        if pair is not None:
            cols += [pair.u(self.t), pair.v(self.t)]
            header += ["u", "v"]
        lines = [",".join(header)]
        for row in zip(*cols):
            lines.append(",".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"


def _rk4(sys: AffineSystem, pair: ControlPair, x0, T, n, blowup):
    t = np.linspace(0.0, T, n + 1)
    h = T / n
    # control values at step points and midpoints, evaluated once
    tm = t[:-1] + h / 2
    u_a, u_m, u_b = pair.u(t[:-1]), pair.u(tm), pair.u(t[1:])
    v_a, v_m, v_b = pair.v(t[:-1]), pair.v(tm), pair.v(t[1:])
    x = np.empty((n + 1, sys.dim))
    x[0] = x0
    y = np.array(x0, dtype=float)
    for i in range(n):
        k1 = sys.rhs(y, u_a[i], v_a[i])
        k2 = sys.rhs(y + h / 2 * k1, u_m[i], v_m[i])
        k3 = sys.rhs(y + h / 2 * k2, u_m[i], v_m[i])
        k4 = sys.rhs(y + h * k3, u_b[i], v_b[i])
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        nrm = float(np.max(np.abs(y)))
        if not np.isfinite(nrm) or nrm > blowup:
            raise BlowupError(t[i + 1], nrm)
        x[i + 1] = y
    return t, x


def simulate(sys: AffineSystem, pair: ControlPair, x0=None, T=None,
             n_steps: int | None = None, rtol: float = 1e-10,
             max_refinements: int = 6, blowup: float = 1e6) -> SimResult:
    """RK4 trajectory with step-doubling control on the endpoint."""
    T = float(T if T is not None else pair.T)
    x0 = np.zeros(sys.dim) if x0 is None else np.asarray(x0, dtype=float)
    n = n_steps or 1024
    t, x = _rk4(sys, pair, x0, T, n, blowup)
    refinements = 0
    err = np.inf
    while refinements < max_refinements:
        t2, x2 = _rk4(sys, pair, x0, T, 2 * n, blowup)
        err = float(np.max(np.abs(x2[-1] - x[-1])))
        scale = max(1.0, float(np.max(np.abs(x2[-1]))))
        t, x, n = t2, x2, 2 * n
        refinements += 1
        if err <= rtol * scale:
            break
    return SimResult(t, x, n, refinements, err)


# -- truncated Lie-series state representation -----------------------------------


def series_state(sys: AffineSystem, pair: ControlPair, M: int,
                 basis: HallBasis | None = None, n_grid: int = 4096,
                 form: str = "linear") -> np.ndarray:
    """State predicted by the degree-M truncated Lie series.

    form="linear": sum over basis brackets with 1 <= n(b) <= M of
    eta_b(T) f_b(0).  form="exp": the time-1 flow of the combined field from
    the drift endpoint, which carries the clean O(|controls|^{M+1}) error.
    """
    basis = basis or build_hall_basis(6, 4)
    ev = XiEvaluator(pair, n=n_grid)
    combo = None
    for b in basis.elements:
        nb = sum(b.multidegree[:2])
        if not (1 <= nb <= M):
            continue
        f_b = sys.bracket_field(b)
        if f_b.is_zero():
            continue
        piece = f_b * float(ev.eta(b)[-1])
        combo = piece if combo is None else combo + piece
    if combo is None:
        return np.zeros(sys.dim)
    if form == "linear":
        return combo.evaluate(np.zeros(sys.dim))
    # flow of the frozen field for unit time, from the drift flow of 0
    # (the drift fixes the origin, so that start point is 0)
    y = np.zeros(sys.dim)
    h = 1.0 / 256
    for _ in range(256):
        k1 = combo.evaluate(y)
        k2 = combo.evaluate(y + h / 2 * k1)
        k3 = combo.evaluate(y + h / 2 * k2)
        k4 = combo.evaluate(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def series_defect_sweep(sys: AffineSystem, pair: ControlPair, M: int,
                        eps_list, basis: HallBasis | None = None,
                        form: str = "linear",
                        floor: float = 1e-11) -> dict:
    """Scales the pair by eps and compares simulation against the series.

    Returns the per-eps defects, the fitted log-log slope, and whether every
    defect sits at the numerical floor (exact representation; slope is then
    meaningless).
    """
    defects, norms = [], []
    for eps in eps_list:
        scaled = pair.scaled(eps, eps, pair.T)
        x_end = simulate(sys, scaled).endpoint
        z = series_state(sys, scaled, M, basis=basis, form=form)
        defects.append(float(np.max(np.abs(x_end - z))))
        norms.append(float(np.max(np.abs(x_end))))
    eps_arr = np.asarray(eps_list, dtype=float)
    defects_arr = np.asarray(defects)
    floors = floor * np.maximum(1.0, np.asarray(norms))
    at_floor = bool(np.all(defects_arr <= floors))
    slope = None
    if not at_floor and np.all(defects_arr > 0):
        slope = float(np.polyfit(np.log(eps_arr), np.log(defects_arr), 1)[0])
    return {"eps": list(map(float, eps_arr)), "defects": defects,
            "at_floor": at_floor, "slope": slope, "M": M, "form": form}


# -- controllability report -------------------------------------------------------


@dataclass
class ChosenBracket:
    bracket: Bracket
    q: int
    s: float
    alpha: float
    delta: float

    @classmethod
    def build(cls, b: Bracket, m: int) -> "ChosenBracket":
        n0 = b.multidegree[2]
        q = n0 // 2
        s = 1.0 / (4 * (len(b) + m))
        alpha = 3.0 / 8 + m / (8.0 * (len(b) + m))
        delta = alpha + (q + 2) * s
        return cls(b, q, s, alpha, delta)


@dataclass
class STLCReport:
    d: int
    r: int
    m: int
    L: int
    larc_holds: bool
    compensation_holds: bool
    stlc: bool
    span: SpanReport
    chosen: list          # [ChosenBracket]
    b1_representatives: list   # brackets spanning S1
    bad_records: list     # per bad bracket: membership residuals
    sussmann_theta: float | None
    sussmann_holds: bool | None
    sussmann_records: list

    def to_json(self) -> str:
        return json.dumps({
            "d": self.d, "r": self.r, "m": self.m, "L": self.L,
            "larc_holds": self.larc_holds,
            "compensation_holds": self.compensation_holds,
            "stlc": self.stlc,
            "chosen": [{"bracket": str(c.bracket), "q": c.q, "s": c.s,
                        "alpha": c.alpha, "delta": c.delta}
                       for c in self.chosen],
            "b1_representatives": [str(b) for b in self.b1_representatives],
            "bad_records": self.bad_records,
            "sussmann_theta": self.sussmann_theta,
            "sussmann_holds": self.sussmann_holds,
            "sussmann_records": self.sussmann_records,
        }, indent=2)


def _in_span(vec: np.ndarray, mat: np.ndarray, tol: float) -> tuple:
    """(membership, residual) of vec in the column span of mat."""
    scale = max(1.0, float(np.max(np.abs(vec))))
    if mat.size == 0:
        resid = float(np.max(np.abs(vec)))
        return resid <= tol * scale, resid
    coef, *_ = np.linalg.lstsq(mat, vec, rcond=None)
    resid = float(np.max(np.abs(mat @ coef - vec)))
    return resid <= tol * scale, resid


def check_stlc(sys: AffineSystem, L: int | None = None, m: int = 0,
               basis: HallBasis | None = None, theta: float | None = None,
               tol: float = 1e-10) -> STLCReport:
    """Linear span, completion by good brackets, bad-bracket compensation,
    and the quadratic slice of the S(theta) membership test."""
    basis = basis or build_hall_basis(6, 4)
    good = basis.of_class("B2good")
    bad = basis.of_class("B2bad")
    span = s1_span(sys, nu_max=max(b.x0_tail for b in basis.of_class("B1")),
                   good_candidates=good, tol=tol)

    # degree-1 representatives: greedily rank-increasing M_j^i
    reps, vecs = [], []
    for j in range(span.stabilization_index + 1):
        for i in (1, 2):
            b = make_M(i, j)
            v = sys.evaluate_bracket(b)
            cand = vecs + [v]
            if np.linalg.matrix_rank(np.array(cand).T, tol=1e-12) > len(vecs):
                reps.append(b)
                vecs.append(v)

    chosen_brackets = list(span.chosen)
    L_val = L if L is not None else (
        max((len(b) for b in chosen_brackets), default=2))
    chosen = [ChosenBracket.build(b, m) for b in chosen_brackets]

    s1mat = (np.array([sys.evaluate_bracket(b) for b in reps]).T
             if reps else np.zeros((sys.dim, 0)))
    bad_records = []
    compensation = True
    for b in bad:
        if len(b) > L_val:
            continue
        fb = sys.evaluate_bracket(b)
        ok, resid = _in_span(fb, s1mat, tol)
        bad_records.append({"bracket": str(b), "in_S1": ok,
                            "residual": resid})
        compensation &= ok

    # S(theta): for bad-parity brackets (n0 odd, n1 and n2 even), the sigma
    # combination must lie in the span of strictly lighter brackets, with
    # weight n(b) + theta n0(b)
    all_lengths = [len(b) for b in chosen_brackets] + [len(b) for b in reps]
    theta_val = theta
    suss_records: list = []
    suss_holds: bool | None = None
    if span.larc_holds and all_lengths:
        theta_val = theta if theta is not None else 1.0 / max(all_lengths)
        suss_holds = True
        n0_cap = int(math.floor(1.0 / theta_val))
        for b in bad:
            n1, n2, n0 = b.multidegree
            if n0 % 2 == 1 and n1 % 2 == 0 and n2 % 2 == 0 and n0 <= n0_cap:
                weight = (n1 + n2) + theta_val * n0
                fs = None
                for hb, coeff in sigma(b).items():
                    v = sys.evaluate_bracket(hb) * float(coeff)
                    fs = v if fs is None else fs + v
                fs = fs if fs is not None else np.zeros(sys.dim)
                cols = []
                for cb in basis.elements:
                    if cb is X0:
                        continue
                    m1, m2, m0 = cb.multidegree
                    if (m1 + m2) + theta_val * m0 < weight:
                        cols.append(sys.evaluate_bracket(cb))
                mat = (np.array(cols).T if cols
                       else np.zeros((sys.dim, 0)))
                ok, resid = _in_span(fs, mat, tol)
                suss_records.append({"bracket": str(b), "member": ok,
                                     "residual": resid,
                                     "weight": weight})
                suss_holds &= ok

    return STLCReport(
        d=sys.dim, r=span.r, m=m, L=L_val,
        larc_holds=span.larc_holds,
        compensation_holds=compensation,
        stlc=span.larc_holds and compensation,
        span=span, chosen=chosen, b1_representatives=reps,
        bad_records=bad_records,
        sussmann_theta=theta_val, sussmann_holds=suss_holds,
        sussmann_records=suss_records,
    )


# -- tangent-vector moves ---------------------------------------------------------


_MOMENT_CACHE: dict = {}


def _base_moment_pair(target: Bracket, mu_star: int, nu_star: int,
                      n_grid: int = 8192) -> ControlPair:
    key = (target, mu_star, nu_star, n_grid)
    if key not in _MOMENT_CACHE:
        prob = MomentProblem(mu_star, nu_star, target)
        pair, report = solve_quadratic_moment(prob, n_grid=n_grid)
        _MOMENT_CACHE[key] = pair
    return _MOMENT_CACHE[key]


def validity_radius(cb: ChosenBracket, T1: float, cap: float = 1e-1) -> float:
    """rho = T1^(1/s_j), capped to stay inside integrator accuracy."""
    return min(T1 ** (1.0 / cb.s), cap)


def synth_tangent_controls(sys: AffineSystem, report: STLCReport,
                           b_j: Bracket, z: float, T1: float) -> ControlPair:
    """Right-aligned scaled pair moving the projected state by z f_{b_j}(0).

    u_z(t) = sgn(z) |z|^alpha ubar((|z|^s - T1 + t)/|z|^s), support inside
    (T1 - |z|^s, T1).
    """
    match = [c for c in report.chosen if c.bracket is b_j]
    if not match:
        raise ValueError(f"{b_j} is not one of the chosen good brackets")
    cb = match[0]
    if z == 0.0:
        return ControlPair(zero_signal(), zero_signal(), T1)
    rho = validity_radius(cb, T1)
    if abs(z) >= rho:
        raise ValueError(f"|z| = {abs(z):.3e} outside validity radius "
                         f"{rho:.3e}")
    fam = recognize_family(b_j)
    if fam is None or fam[0] != "C":
        raise ValueError("tangent moves target mixed good brackets only")
    _, mu0, nu0 = fam
    side = max(report.L - 2, mu0, nu0)
    base = _base_moment_pair(b_j, side, side)
    w = abs(z) ** cb.s
    amp = math.copysign(abs(z) ** cb.alpha, z)
    u = base.u.time_affine(w, T1 - w) * amp
    v = base.v.time_affine(w, T1 - w) * amp
    return ControlPair(u, v, T1)


# -- linear correction ------------------------------------------------------------


def linear_correction(sys: AffineSystem, x_mid, T1: float, T: float,
                      target=None, report: STLCReport | None = None,
                      n_grid: int = 2048, newton_steps: int = 1) -> tuple:
    """Controls on (T1, T) matching the S1 component of x(T) to the target's.

    Solves the linearized steering problem through the windowed
    controllability Gramian of (H0, [f1(0) f2(0)]) restricted to S1, then
    refines on the nonlinear system.  Returns (pair, info).
    """
    report = report or check_stlc(sys)
    x_mid = np.asarray(x_mid, dtype=float)
    target = (np.zeros(sys.dim) if target is None
              else np.asarray(target, dtype=float))
    P = report.span.projector_P
    Q1 = report.span.basis_S1          # d x r orthonormal
    r = Q1.shape[1]
    H0 = sys.linearization()
    Bmat = np.column_stack([sys.f1.evaluate(np.zeros(sys.dim)),
                            sys.f2.evaluate(np.zeros(sys.dim))])
    dt = T - T1
    IP = np.eye(sys.dim) - P

    # smooth window; controls vanish to all orders at T1 and T
    window = bump_simple(T1, T)
    sgrid = np.linspace(T1, T, n_grid + 1)
    wvals = window(sgrid)

    # rows of B^T e^{(T-s) H0^T} (I-P)^T Q1 at the grid times
    kernel = np.empty((n_grid + 1, 2, r))
    for i, s in enumerate(sgrid):
        kernel[i] = Bmat.T @ expm((T - s) * H0.T) @ IP.T @ Q1
    h = sgrid[1] - sgrid[0]
    # Gramian restricted to S1 coordinates, with the window
    Wg = np.zeros((r, r))
    for i in range(n_grid + 1):
        wgt = h * (0.5 if i in (0, n_grid) else 1.0)
        Wg += wgt * wvals[i] * kernel[i].T @ kernel[i]
    condW = float(np.linalg.cond(Wg)) if r else 0.0
    if r and condW > 1e14:
        raise np.linalg.LinAlgError(
            f"steering Gramian singular on S1 (cond {condW:.2e}): "
            "non-steerable direction")

    def controls_for(lam):
        uv = wvals[:, None] * np.einsum("nkr,r->nk", kernel, lam)
        u = Sampled(sgrid, uv[:, 0])
        v = Sampled(sgrid, uv[:, 1])
        return ControlPair(u, v, T)

    def defect_for(pair):
        res = simulate(sys, pair, x0=x_mid, T=dt,
                       n_steps=max(512, n_grid // 2))
        # pair signals live on absolute time (T1, T); shift for simulation
        return res.endpoint

    want = Q1.T @ IP @ target
    lam = np.zeros(r)
    history = []
    for it in range(newton_steps + 1):
        pair_abs = controls_for(lam)
        # simulate on (T1, T): controls need local-time wrapper
        local = ControlPair(pair_abs.u.time_affine(1.0, -T1),
                            pair_abs.v.time_affine(1.0, -T1), dt)
        x_end = simulate(sys, local, x0=x_mid, T=dt).endpoint
        defect = want - Q1.T @ IP @ x_end
        history.append(float(np.max(np.abs(defect))))
        if it == newton_steps:
            break
        lam = lam + np.linalg.solve(Wg, defect) if r else lam
    info = {"gramian_cond": condW, "defect_history": history,
            "lambda": lam.tolist()}
    return ControlPair(pair_abs.u, pair_abs.v, T), info


# -- target reaching --------------------------------------------------------------


@dataclass
class ReachReport:
    converged: bool
    iterations: int
    residuals: list
    z_history: list
    final_error: float


def reach_target(sys: AffineSystem, x_f, T: float, tol: float = 1e-8,
                 m: int = 0, damping: float = 0.5, max_iter: int = 50,
                 report: STLCReport | None = None) -> tuple:
    """Composes tangent moves and linear correction, then iterates a damped
    fixed point on the complement coordinates until x(T) hits x_f."""
    x_f = np.asarray(x_f, dtype=float)
    report = report or check_stlc(sys, m=m)
    if not report.stlc:
        raise ValueError("controllability check failed; cannot steer")
    T1 = T / 2.0
    chosen = report.chosen
    K = len(chosen)
    if float(np.max(np.abs(x_f), initial=0.0)) == 0.0:
        zero = ControlPair(zero_signal(), zero_signal(), T)
        return zero, ReachReport(True, 0, [0.0], [[0.0] * K], 0.0)

    P = report.span.projector_P
    comp_mat = np.array([sys.evaluate_bracket(c.bracket)
                         for c in chosen]).T   # d x K
    drift_flow = expm((T - T1) * sys.linearization())

    def p_coords(vec):
        if K == 0:
            return np.zeros(0)
        coef, *_ = np.linalg.lstsq(comp_mat, P @ vec, rcond=None)
        return coef

    def build_and_run(zs):
        sub = T1 / max(K, 1)
        segments = []
        for cb, z in zip(chosen, zs):
            if z == 0.0:
                segments.append((ControlPair(zero_signal(), zero_signal(),
                                             sub)))
            else:
                segments.append(synth_tangent_controls(
                    sys, report, cb.bracket, float(z), sub))
        phaseA = segments[0]
        for seg in segments[1:]:
            phaseA = phaseA.concat(seg)
        xa = simulate(sys, phaseA, T=T1).endpoint
        corr, _ = linear_correction(sys, xa, T1, T, target=x_f,
                                    report=report)
        local = ControlPair(corr.u.time_affine(1.0, -T1),
                            corr.v.time_affine(1.0, -T1), T - T1)
        x_end = simulate(sys, local, x0=xa, T=T - T1).endpoint
        full = phaseA.concat(local)
        return full, x_end

    # transported target coordinates: the move made at T1 is carried to T by
    # the drift flow
    zs = np.linalg.lstsq(P @ drift_flow @ comp_mat, P @ x_f, rcond=None)[0] \
        if K else np.zeros(0)
    residuals, z_hist = [], []
    best = None
    jac = None
    for it in range(max_iter):
        pair, x_end = build_and_run(zs)
        err_vec = x_end - x_f
        err = float(np.max(np.abs(err_vec)))
        residuals.append(err)
        z_hist.append([float(z) for z in zs])
        if best is None or err < best[0]:
            best = (err, pair)
        if err <= tol:
            return pair, ReachReport(True, it + 1, residuals, z_hist, err)
        if K == 0:
            break
        if jac is None:
            # chord Jacobian of complement coordinates wrt z, by differences
            jac = np.zeros((K, K))
            base_c = p_coords(x_end)
            for k in range(K):
                dz = max(1e-3 * max(abs(zs[k]), 1e-3), 1e-6)
                zp = zs.copy()
                zp[k] += dz
                _, xp = build_and_run(zp)
                jac[:, k] = (p_coords(xp) - base_c) / dz
        step = np.linalg.solve(jac, p_coords(err_vec))
        zs = zs - damping * step
    err, pair = best
    return pair, ReachReport(err <= tol, max_iter, residuals, z_hist, err)
