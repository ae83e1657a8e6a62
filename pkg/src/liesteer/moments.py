"""Constructive solver for the quadratic moment problem: find compactly
supported smooth controls (u, v) on (0, 1) with eta_b(1) = delta_{b, b0}
over a rectangle B of degree-1 and mixed degree-2 Hall brackets.

Construction: u = phi^(N) with phi = e^{t^m} chi (chi a plateau bump), and
v = psi^(N) with psi solved from the linear moment system.  Integrating
eta_{C_{mu,nu}}(1) = int (1-s)^nu/nu! u_{mu//2+1} v_{(mu+1)//2} by parts
(all boundary terms vanish on compact support) gives

    eta_{C_{mu,nu}}(1) = int_0^1 psi(s) f_{mu,nu}(s) ds,

    f_{mu,nu} = (-1)^a sum_{k<=min(a,nu)} C(a,k)(-1)^k (1-s)^{nu-k}/(nu-k)!
                * phi^(2N-1-mu-k),          a = N - (mu+1)//2,

so psi = sum c_{mu,nu} f_{mu,nu} with Gram-system coefficients.  Degree-1
moments vanish automatically: every primitive of u, v up to order N is again
compactly supported.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .free_lie import Bracket, make_C, make_M, recognize_family
from .quadrature import integrate, uniform_grid
from .signals import (ControlPair, Signal, SmoothPiece, XiEvaluator,
                      exp_weighted_bump)


@dataclass
class MomentProblem:
    """Rectangle B = {M_nu^i, C_{mu,nu}: mu <= mu_star, nu <= nu_star},
    target b0 = C_{mu0,nu0} in the rectangle, N = mu_star + nu_star + 1."""

    mu_star: int
    nu_star: int
    target: Bracket
    m: int | None = None          # smoothness exponent; default nu_star + 2
    target_value: float = 1.0

    def __post_init__(self):
        fam = recognize_family(self.target)
        if fam is None or fam[0] != "C":
            raise ValueError("target must be a mixed bracket C_{mu,nu}")
        _, mu0, nu0 = fam
        if mu0 > self.mu_star or nu0 > self.nu_star:
            raise ValueError("target outside the rectangle")
        self.mu0, self.nu0 = mu0, nu0
        if self.m is not None and self.m < self.nu_star + 2:
            raise ValueError("m must be >= nu_star + 2")

    @property
    def N(self) -> int:
        return self.mu_star + self.nu_star + 1

    def rectangle(self):
        """All brackets of B: degree-1 rows then the C grid, fixed order."""
        out = [make_M(i, j) for i in (1, 2) for j in range(self.nu_star + 1)]
        out += [make_C(mu, nu) for mu in range(self.mu_star + 1)
                for nu in range(self.nu_star + 1)]
        return out


def _one_minus_t_poly(p: int) -> tuple:
    """(1-t)^p as low-to-high coefficients."""
    return tuple(math.comb(p, k) * (-1.0) ** k for k in range(p + 1))


def build_f_basis(prob: MomentProblem, m: int | None = None):
    """((mu, nu) index list, f signals, diagnostics).

    The degrees nu + (m-1)(2N-1-mu) of the leading polynomial parts of
    e^{-t^m} f_{mu,nu} are pairwise distinct (m - 1 > nu_star), which is what
    makes the family independent; the Gram matrix check quantifies it.
    """
    m = m if m is not None else (prob.m or prob.nu_star + 2)
    if m < prob.nu_star + 2:
        raise ValueError("m must be >= nu_star + 2")
    N = prob.N
    phi = exp_weighted_bump(m)
    derivs = [phi]
    for _ in range(2 * N - 1):
        derivs.append(derivs[-1].derivative())

    degrees = {}
    index, fs = [], []
    for mu in range(prob.mu_star + 1):
        for nu in range(prob.nu_star + 1):
            a = N - (mu + 1) // 2
            terms = None
            for k in range(min(a, nu) + 1):
                coeff = ((-1.0) ** (a + k) * math.comb(a, k)
                         / math.factorial(nu - k))
                piece = derivs[2 * N - 1 - mu - k].poly_mul(
                    _one_minus_t_poly(nu - k)) * coeff
                terms = piece if terms is None else terms + piece
            index.append((mu, nu))
            fs.append(terms)
            deg = nu + (m - 1) * (2 * N - 1 - mu)
            if deg in degrees.values():
                raise AssertionError("leading degrees must be distinct")
            degrees[(mu, nu)] = deg
    return index, fs, {"m": m, "degrees": degrees}


def _gram(fs, n: int):
    grid = uniform_grid(1.0, n)
    h = grid[1] - grid[0]
    vals = np.array([f(grid) for f in fs])
    G = np.empty((len(fs), len(fs)))
    for i in range(len(fs)):
        for j in range(i, len(fs)):
            G[i, j] = G[j, i] = integrate(vals[i] * vals[j], h)
    return G, vals, grid, h


def solve_quadratic_moment(prob: MomentProblem, n_grid: int = 8192,
                           cond_cap: float = 1e12, max_escalations: int = 6):
    """Controls (u, v) with eta_b(1) = target_value * delta_{b, b0} on B.

    Escalates the smoothness exponent m while the Gram system is worse
    conditioned than cond_cap.  Returns (pair, report); report carries the
    conditioning path, the moment residuals from the eta oracle, and the
    support checks.
    """
    m0 = prob.m or prob.nu_star + 2
    tried = []
    best = None
    for m in range(m0, m0 + max_escalations + 1):
        index, fs, diag = build_f_basis(prob, m=m)
        G, vals, grid, h = _gram(fs, n_grid)
        # the raw Gram's conditioning is dominated by the wildly different
        # norms of the f's; equilibrate so the solve sees only the angles
        d = 1.0 / np.sqrt(np.diag(G))
        Gs = G * d[:, None] * d[None, :]
        cond = float(np.linalg.cond(Gs))
        tried.append({"m": m, "cond_equilibrated": cond,
                      "cond_raw": float(np.linalg.cond(G))})
        if best is None or cond < best[0]:
            best = (cond, m, index, fs, Gs, d)
        if cond <= cond_cap:
            break
    cond, m, index, fs, Gs, d = best

    rhs = np.zeros(len(index))
    rhs[index.index((prob.mu0, prob.nu0))] = prob.target_value
    coeffs = d * np.linalg.solve(Gs, d * rhs)

    psi = None
    for c, f in zip(coeffs, fs):
        piece = f * float(c)
        psi = piece if psi is None else psi + piece
    N = prob.N
    phi = exp_weighted_bump(m)
    u = phi
    for _ in range(N):
        u = u.derivative()
    v = psi
    for _ in range(N):
        v = v.derivative()
    pair = ControlPair(u, v, 1.0)

    # validate with the eta evaluator (independent of the IBP reduction)
    ev = XiEvaluator(pair, n=n_grid)
    residuals = {}
    for b in prob.rectangle():
        want = prob.target_value if b is prob.target else 0.0
        residuals[str(b)] = float(ev.eta(b)[-1]) - want
    worst = max(abs(r) for r in residuals.values())

    edge = max(abs(u(0.0)), abs(u(1.0)), abs(v(0.0)), abs(v(1.0)))
    report = {
        "m": m, "cond": cond, "escalations": tried,
        "residuals": residuals, "max_residual": worst,
        "boundary_values": edge,
        "gram_size": len(index),
    }
    return pair, report


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, default=float)
