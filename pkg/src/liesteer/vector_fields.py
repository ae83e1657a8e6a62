"""Polynomial vector fields on R^d, exact Lie brackets, the evaluation
homomorphism Bracket -> field, and the degree-1 span report with its
projector.

Fields are stored as one monomial dict per component, exponent tuple ->
coefficient, so brackets and derivatives are exact polynomial algebra;
floats only ever combine linearly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .free_lie import Bracket, HallBasis, leaf, make_M, parse_bracket


def _clean(monos: dict) -> dict:
    return {e: c for e, c in monos.items() if c != 0.0}


def _poly_mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0.0) + ca * cb
    return _clean(out)


def _poly_diff(a: dict, j: int) -> dict:
    out: dict = {}
    for e, c in a.items():
        if e[j] > 0:
            e2 = e[:j] + (e[j] - 1,) + e[j + 1:]
            out[e2] = out.get(e2, 0.0) + c * e[j]
    return out


class PolyVectorField:
    """Vector field with polynomial components; immutable by convention."""

    def __init__(self, dim: int, components):
        self.dim = dim
        comps = []
        for comp in components:
            comp = _clean(dict(comp))
            for e in comp:
                if len(e) != dim:
                    raise ValueError("exponent vector of wrong length")
            comps.append(comp)
        if len(comps) != dim:
            raise ValueError("need one component per dimension")
        self.components = tuple(comps)

    @classmethod
    def zero(cls, dim: int) -> "PolyVectorField":
        return cls(dim, [{} for _ in range(dim)])

    def is_zero(self) -> bool:
        return all(not c for c in self.components)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(self.dim)
        for i, comp in enumerate(self.components):
            for e, c in comp.items():
                term = c
                for xj, ej in zip(x, e):
                    if ej:
                        term *= xj ** ej
                out[i] += term
        return out

    __call__ = evaluate

    def __add__(self, other):
        comps = []
        for a, b in zip(self.components, other.components):
            m = dict(a)
            for e, c in b.items():
                m[e] = m.get(e, 0.0) + c
            comps.append(m)
        return PolyVectorField(self.dim, comps)

    def __mul__(self, c):
        return PolyVectorField(self.dim, [{e: v * float(c) for e, v in comp.items()}
                                          for comp in self.components])

    __rmul__ = __mul__

    def max_degree(self) -> int:
        return max((sum(e) for comp in self.components for e in comp), default=0)


def lie_bracket(f: PolyVectorField, g: PolyVectorField) -> PolyVectorField:
    """[f, g](x) = Dg_x f(x) - Df_x g(x), exact."""
    if f.dim != g.dim:
        raise ValueError("dimension mismatch")
    d = f.dim
    comps = []
    for k in range(d):
        acc: dict = {}
        for j in range(d):
            for e, c in _poly_mul(f.components[j], _poly_diff(g.components[k], j)).items():
                acc[e] = acc.get(e, 0.0) + c
            for e, c in _poly_mul(g.components[j], _poly_diff(f.components[k], j)).items():
                acc[e] = acc.get(e, 0.0) - c
        comps.append(acc)
    return PolyVectorField(d, comps)


class AffineSystem:
    """Control-affine system x' = f0(x) + u f1(x) + v f2(x) with f0(0) = 0."""

    def __init__(self, f0: PolyVectorField, f1: PolyVectorField,
                 f2: PolyVectorField):
        if not (f0.dim == f1.dim == f2.dim):
            raise ValueError("fields must share a dimension")
        zero_e = (0,) * f0.dim
        if any(comp.get(zero_e, 0.0) != 0.0 for comp in f0.components):
            raise ValueError("f0 must vanish at the origin")
        self.f0, self.f1, self.f2 = f0, f1, f2
        self.dim = f0.dim
        self._bracket_fields: dict = {}

    def rhs(self, x, u: float, v: float) -> np.ndarray:
        return self.f0(x) + u * self.f1(x) + v * self.f2(x)

    def bracket_field(self, b: Bracket) -> PolyVectorField:
        """f_b: the unique Lie-algebra homomorphism with Xi -> fi."""
        cached = self._bracket_fields.get(b)
        if cached is not None:
            return cached
        if b.is_leaf:
            out = (self.f0, self.f1, self.f2)[b.letter]
        else:
            out = lie_bracket(self.bracket_field(b.left),
                              self.bracket_field(b.right))
        self._bracket_fields[b] = out
        return out

    def evaluate_bracket(self, b: Bracket, at=None) -> np.ndarray:
        at = np.zeros(self.dim) if at is None else at
        return self.bracket_field(b).evaluate(at)


# -- S1 span and projector -------------------------------------------------------


@dataclass
class SpanReport:
    r: int
    basis_S1: np.ndarray              # d x r orthonormal columns
    good_brackets: list               # [(Bracket, f_b(0))]
    bad_brackets: list                # [(Bracket, f_b(0))]
    projector_P: np.ndarray
    larc_holds: bool
    stabilization_index: int
    chosen: list = field(default_factory=list)   # good brackets completing R^d

    def to_json(self) -> str:
        return json.dumps({
            "r": self.r,
            "basis_S1": self.basis_S1.tolist(),
            "good_brackets": [[str(b), v.tolist()] for b, v in self.good_brackets],
            "bad_brackets": [[str(b), v.tolist()] for b, v in self.bad_brackets],
            "chosen": [str(b) for b, _ in self.chosen],
            "projector_P": self.projector_P.tolist(),
            "larc_holds": self.larc_holds,
            "stabilization_index": self.stabilization_index,
        }, indent=2)


def _rank(vectors: list, tol: float) -> int:
    if not vectors:
        return 0
    sv = np.linalg.svd(np.column_stack(vectors), compute_uv=False)
    return int(np.sum(sv > tol * sv[0])) if sv[0] > 0 else 0


def s1_span(sys: AffineSystem, nu_max: int, good_candidates: list,
            L: int | None = None, tol: float = 1e-10,
            bad_candidates: list | None = None) -> SpanReport:
    """S1 = span{f_{M_j^i}(0): j <= nu_max}; greedy completion by good
    brackets; projector onto the chosen complement parallel to S1.

    nu_max defaults to 2*dim if passed as None (the Jacobian chain ranks
    stabilize by Cayley-Hamilton).  Rank decisions use a relative
    singular-value cutoff.
    """
    d = sys.dim
    if nu_max is None:
        nu_max = 2 * d

    s1_vecs, ranks = [], []
    for j in range(nu_max + 1):
        for i in (1, 2):
            s1_vecs.append(sys.evaluate_bracket(make_M(i, j)))
        ranks.append(_rank(s1_vecs, tol))
    r = ranks[-1]
    stab = next(j for j, rk in enumerate(ranks) if rk == r)

    if r > 0:
        U, sv, _ = np.linalg.svd(np.column_stack(s1_vecs), full_matrices=False)
        basis = U[:, :r]
    else:
        basis = np.zeros((d, 0))

    if L is not None:
        good_candidates = [b for b in good_candidates if len(b) <= L]
    order = {b: k for k, b in enumerate(good_candidates)}
    good_evals = [(b, sys.evaluate_bracket(b)) for b in good_candidates]
    bad_evals = [(b, sys.evaluate_bracket(b)) for b in (bad_candidates or [])]

    chosen, current = [], [basis[:, k] for k in range(r)]
    for b, vec in sorted(good_evals, key=lambda bv: (len(bv[0]), order[bv[0]])):
        if len(current) >= d:
            break
        if _rank(current + [vec], tol) > len(current):
            chosen.append((b, vec))
            current.append(vec)

    larc = (len(current) == d)
    m = len(chosen)
    if m > 0:
        B = np.column_stack([basis[:, k] for k in range(r)] + [v for _, v in chosen])
        D = np.diag([0.0] * r + [1.0] * m)
        P = B @ D @ np.linalg.pinv(B)
    else:
        P = np.zeros((d, d))

    return SpanReport(r=r, basis_S1=basis, good_brackets=good_evals,
                      bad_brackets=bad_evals, projector_P=P, larc_holds=larc,
                      stabilization_index=stab, chosen=chosen)


# -- toy systems and the text format ----------------------------------------------


def toy1() -> AffineSystem:
    """x1' = u, x2' = x1 v on R^2: S1 = span(e1), C_0 completes."""
    f0 = PolyVectorField.zero(2)
    f1 = PolyVectorField(2, [{(0, 0): 1.0}, {}])
    f2 = PolyVectorField(2, [{}, {(1, 0): 1.0}])
    return AffineSystem(f0, f1, f2)


def toy2(alpha: float = 1.0) -> AffineSystem:
    """x1' = u, x2' = v, x3' = x1^2 + x2^2 + alpha x1 x2 on R^3."""
    f0 = PolyVectorField(3, [{}, {},
                             {(2, 0, 0): 1.0, (0, 2, 0): 1.0,
                              (1, 1, 0): float(alpha)}])
    f1 = PolyVectorField(3, [{(0, 0, 0): 1.0}, {}, {}])
    f2 = PolyVectorField(3, [{}, {(0, 0, 0): 1.0}, {}])
    return AffineSystem(f0, f1, f2)


def parse_system(text: str) -> AffineSystem:
    """Structured text: first 'dim d', then monomial lines

        fK i coeff e1 ... ed

    adding coeff * x^(e1..ed) to component i (1-based) of field fK,
    K in {0,1,2}.  '#' starts a comment; blank lines are skipped.
    """
    dim = None
    comps = {k: None for k in (0, 1, 2)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "dim":
            dim = int(tokens[1])
            comps = {k: [dict() for _ in range(dim)] for k in (0, 1, 2)}
            continue
        if dim is None:
            raise ValueError(f"line {lineno}: 'dim d' must come first")
        name = tokens[0]
        if name not in ("f0", "f1", "f2"):
            raise ValueError(f"line {lineno}: unknown field {name!r}")
        i = int(tokens[1])
        if not 1 <= i <= dim:
            raise ValueError(f"line {lineno}: component {i} out of range")
        coeff = float(tokens[2])
        exps = tuple(int(tok) for tok in tokens[3:])
        if len(exps) != dim:
            raise ValueError(f"line {lineno}: need {dim} exponents")
        mono = comps[int(name[1])][i - 1]
        mono[exps] = mono.get(exps, 0.0) + coeff
    if dim is None:
        raise ValueError("no 'dim d' line")
    return AffineSystem(PolyVectorField(dim, comps[0]),
                        PolyVectorField(dim, comps[1]),
                        PolyVectorField(dim, comps[2]))


def system_to_text(sys: AffineSystem) -> str:
    lines = [f"dim {sys.dim}"]
    for k, f in enumerate((sys.f0, sys.f1, sys.f2)):
        for i, comp in enumerate(f.components, 1):
            for e, c in sorted(comp.items()):
                lines.append(f"f{k} {i} {c!r} " + " ".join(str(x) for x in e))
    return "\n".join(lines) + "\n"
