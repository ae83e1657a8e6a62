"""Free Lie algebra over the alphabet {X0, X1, X2} with the Hall set adapted
to one drift letter (X0) and two control letters.

The Hall order puts the degree-1 family first,

    X1 < X2 < X10 < X20 < X100 < X200 < ... < X0,

with X0 maximal, and breaks ties among higher elements by
(control degree n(b), length |b|, lexicographic tree key).  With this order
the Hall completion up to control degree 2 consists exactly of the three
closed-form families

    M_j^i   = Xi 0^j                                  (degree 1),
    W_j,l^i = (M_{j-1}^i, M_j^i) 0^l   with j >= 1    (degree 2, same letter),
    C_j,l   = (-1)^j (M_{(j+1)//2}^1, M_{j//2}^2) 0^l (degree 2, mixed),

where (-1)^j b means the pair is swapped when j is odd, and b 0^nu is the
nu-fold right bracket with X0.

Everything structural here is exact: expansion coefficients are
fractions.Fraction, floats appear only at evaluation boundaries.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

X0_LETTER = 0
CONTROL_LETTERS = (1, 2)


class Bracket:
    """Immutable binary bracket tree over letters {0, 1, 2}.

    Leaves carry a letter; internal nodes carry (left, right).  Instances are
    interned per-structure so equality is cheap and dictionaries are fast.
    """

    __slots__ = ("letter", "left", "right", "_counts", "_len", "_hash", "_key")
    _interned: dict = {}

    def __new__(cls, letter=None, left=None, right=None):
        if letter is not None:
            token = letter
        else:
            token = (left, right)
        cached = cls._interned.get(token)
        if cached is not None:
            return cached
        self = super().__new__(cls)
        if letter is not None:
            if letter not in (0, 1, 2):
                raise ValueError(f"letter must be 0, 1 or 2, got {letter!r}")
            self.letter = letter
            self.left = None
            self.right = None
            self._counts = tuple(1 if letter == k else 0 for k in range(3))
            self._len = 1
        else:
            if not isinstance(left, Bracket) or not isinstance(right, Bracket):
                raise TypeError("internal node needs Bracket children")
            self.letter = None
            self.left = left
            self.right = right
            self._counts = tuple(a + b for a, b in zip(left._counts, right._counts))
            self._len = left._len + right._len
        self._hash = hash(("Bracket", token))
        self._key = None
        cls._interned[token] = self
        return self

    # -- basic structure ----------------------------------------------------

    @property
    def is_leaf(self):
        return self.letter is not None

    def __len__(self):
        return self._len

    @property
    def n0(self):
        return self._counts[0]

    @property
    def n1(self):
        return self._counts[1]

    @property
    def n2(self):
        return self._counts[2]

    @property
    def n(self):
        """Control degree n(b) = n1 + n2 = |b| - n0."""
        return self._counts[1] + self._counts[2]

    @property
    def multidegree(self):
        """(n1, n2, n0)."""
        return (self._counts[1], self._counts[2], self._counts[0])

    def x0_tail(self):
        """Number of trailing right X0 factors: b = c 0^tail with c not of that form."""
        tail = 0
        cur = self
        while not cur.is_leaf and cur.right.is_leaf and cur.right.letter == X0_LETTER:
            tail += 1
            cur = cur.left
        return tail

    # -- order ---------------------------------------------------------------

    def _lex_key(self):
        if self.is_leaf:
            return (0, self.letter)
        return (1, self.left._lex_key(), self.right._lex_key())

    def sort_key(self):
        """Total-order key: B1 by (n, |b|, lex), X0 maximal, ties by lex tree key."""
        if self._key is None:
            if self.is_leaf and self.letter == X0_LETTER:
                self._key = (1,)
            else:
                self._key = (0, self.n, self._len, self._lex_key())
        return self._key

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def __le__(self, other):
        return self is other or self.sort_key() < other.sort_key()

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return self is other  # interned

    # -- text form -----------------------------------------------------------

    def __str__(self):
        if self.is_leaf:
            return f"X{self.letter}"
        return f"({self.left},{self.right})"

    def __repr__(self):
        return f"Bracket[{self}]"


def leaf(letter: int) -> Bracket:
    return Bracket(letter=letter)


def node(left: Bracket, right: Bracket) -> Bracket:
    return Bracket(left=left, right=right)


X0 = leaf(0)
X1 = leaf(1)
X2 = leaf(2)


def parse_bracket(text: str) -> Bracket:
    """Parse the textual form, e.g. "((X1,X0),X2)"."""
    s = text.replace(" ", "")
    pos = 0

    def parse() -> Bracket:
        nonlocal pos
        if pos >= len(s):
            raise ValueError(f"unexpected end of bracket text {text!r}")
        if s[pos] == "(":
            pos += 1
            left = parse()
            if pos >= len(s) or s[pos] != ",":
                raise ValueError(f"expected ',' at {pos} in {text!r}")
            pos += 1
            right = parse()
            if pos >= len(s) or s[pos] != ")":
                raise ValueError(f"expected ')' at {pos} in {text!r}")
            pos += 1
            return node(left, right)
        if s[pos] == "X" and pos + 1 < len(s) and s[pos + 1] in "012":
            pos += 2
            return leaf(int(s[pos - 1]))
        raise ValueError(f"unexpected char {s[pos]!r} at {pos} in {text!r}")

    out = parse()
    if pos != len(s):
        raise ValueError(f"trailing text after bracket in {text!r}")
    return out


# -- closed-form families ----------------------------------------------------

def x0_power(b: Bracket, nu: int) -> Bracket:
    """b 0^nu: right-iterated bracket with X0."""
    if nu < 0:
        raise ValueError("nu must be >= 0")
    for _ in range(nu):
        b = node(b, X0)
    return b


def make_M(i: int, j: int) -> Bracket:
    """M_j^i = Xi 0^j for i in {1,2}, j >= 0."""
    if i not in (1, 2):
        raise ValueError("i must be 1 or 2")
    return x0_power(leaf(i), j)


def make_W(i: int, j: int, l: int) -> Bracket:
    """W_{j,l}^i = (M_{j-1}^i, M_j^i) 0^l, the bad (same-letter) family, j >= 1."""
    if j < 1:
        raise ValueError("W requires j >= 1")
    return x0_power(node(make_M(i, j - 1), make_M(i, j)), l)


def make_C(j: int, l: int) -> Bracket:
    """C_{j,l} = (-1)^j (M_{(j+1)//2}^1, M_{j//2}^2) 0^l, the good (mixed) family.

    (-1)^j b denotes the swapped pair when j is odd, so the stored tree is
    always a Hall element (no sign is carried here; see hall_expand for signs
    of general Lie elements).
    """
    if j < 0 or l < 0:
        raise ValueError("C requires j, l >= 0")
    a = make_M(1, (j + 1) // 2)
    b = make_M(2, j // 2)
    pair = node(b, a) if j % 2 == 1 else node(a, b)
    return x0_power(pair, l)


def classify(b: Bracket) -> str:
    """Class tag by control multidegree: B0 (drift only), B1, B2good, B2bad."""
    n1, n2 = b.n1, b.n2
    if n1 + n2 == 0:
        return "B0"
    if n1 + n2 == 1:
        return "B1"
    if (n1, n2) == (1, 1):
        return "B2good"
    if (n1, n2) in ((2, 0), (0, 2)):
        return "B2bad"
    raise ValueError(f"control degree {n1 + n2} > 2 not classified")


# -- Hall set ------------------------------------------------------------------

def is_hall(b: Bracket) -> bool:
    """Check the Hall axioms for a single tree under the module order."""
    if b.is_leaf:
        return True
    b1, b2 = b.left, b.right
    if not (is_hall(b1) and is_hall(b2)):
        return False
    if not b1 < b2:
        return False
    if not b2.is_leaf and b1 < b2.left:  # need lambda(b2) <= b1
        return False
    return True


@dataclass
class HallBasis:
    """Hall basis elements with control degree <= 2 under the stated caps."""

    max_len: int
    nu_max: int
    elements: list = field(default_factory=list)

    def __post_init__(self):
        if not self.elements:
            self.elements = _complete_hall(self.max_len, self.nu_max)
        self._index = {b: k for k, b in enumerate(self.elements)}

    def __iter__(self):
        return iter(self.elements)

    def __len__(self):
        return len(self.elements)

    def __contains__(self, b):
        return b in self._index

    def index(self, b: Bracket) -> int:
        return self._index[b]

    def of_class(self, tag: str) -> list:
        return [b for b in self.elements if classify(b) == tag]

    def of_degree(self, n: int) -> list:
        return [b for b in self.elements if b.n == n]

    def to_json(self) -> str:
        rows = [
            {
                "expr": str(b),
                "len": len(b),
                "n0": b.n0,
                "n1": b.n1,
                "n2": b.n2,
                "class": classify(b),
            }
            for b in self.elements
        ]
        return json.dumps(rows, indent=1)

    @staticmethod
    def from_json(text: str) -> "HallBasis":
        rows = json.loads(text)
        elements = [parse_bracket(r["expr"]) for r in rows]
        max_len = max((len(b) for b in elements), default=1)
        nu_max = max((b.x0_tail() for b in elements), default=0)
        return HallBasis(max_len=max_len, nu_max=nu_max, elements=elements)


def _complete_hall(max_len: int, nu_max: int) -> list:
    """Generic Hall completion up to control degree 2 within the caps.

    Grows by length; a pair (a, b) is admitted when a < b, b is a letter or
    lambda(b) <= a, the control degree stays <= 2 and the X0 tail stays
    <= nu_max.  With the module order this reproduces exactly the M/W/C
    families (tested structurally).
    """
    basis = [X1, X2]
    if max_len >= 1:
        basis.append(X0)
    by_len = {1: [X0, X1, X2]}
    for L in range(2, max_len + 1):
        new = []
        for la in range(1, L):
            for a, b in itertools.product(by_len.get(la, []), by_len.get(L - la, [])):
                if a.n + b.n > 2 or (a.n + b.n == 0):
                    continue
                if not a < b:
                    continue
                if not b.is_leaf and a < b.left:
                    continue
                cand = node(a, b)
                if cand.x0_tail() > nu_max:
                    continue
                new.append(cand)
        new = sorted(set(new), key=Bracket.sort_key)
        by_len[L] = new
        basis.extend(new)
    basis.sort(key=Bracket.sort_key)
    return basis


def build_hall_basis(max_len: int, nu_max: int) -> HallBasis:
    """All Hall elements with n(b) <= 2, |b| <= max_len, X0-tail <= nu_max."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if nu_max < 0:
        raise ValueError("nu_max must be >= 0")
    return HallBasis(max_len=max_len, nu_max=nu_max)


def hall_layer(n1: int, n2: int, n0: int) -> list:
    """Hall elements of a given multidegree (control degree <= 2), closed form.

    Layers: (1,0): [M_{n0}^1]; (2,0): W_{j,l}^1 with 2j-1+l = n0; (1,1):
    C_{j,l} with j+l = n0; symmetric for the letter-2 versions.
    """
    if (n1, n2) == (1, 0):
        return [make_M(1, n0)]
    if (n1, n2) == (0, 1):
        return [make_M(2, n0)]
    if (n1, n2) == (2, 0):
        return [make_W(1, j, n0 - (2 * j - 1)) for j in range(1, (n0 + 1) // 2 + 1)
                if n0 - (2 * j - 1) >= 0]
    if (n1, n2) == (0, 2):
        return [make_W(2, j, n0 - (2 * j - 1)) for j in range(1, (n0 + 1) // 2 + 1)
                if n0 - (2 * j - 1) >= 0]
    if (n1, n2) == (1, 1):
        return [make_C(j, n0 - j) for j in range(n0 + 1)]
    if (n1, n2) == (0, 0):
        return [X0] if n0 == 1 else []
    raise ValueError(f"no closed-form layer for control degree {n1 + n2}")


def strip_x0_tail(b: Bracket):
    """(core, l) with b = core 0^l and core not ending in a right X0."""
    l = 0
    while not b.is_leaf and b.right is X0:
        l += 1
        b = b.left
    return b, l


def _as_M(b: Bracket):
    """(i, j) if b = M_j^i, else None."""
    core, j = strip_x0_tail(b)
    if core.is_leaf and core.letter in (1, 2):
        return core.letter, j
    return None


def recognize_family(b: Bracket):
    """Closed-form family of a Hall element with control degree <= 2.

    Returns ("X0",), ("M", i, j), ("W", i, j, l) or ("C", j, l); None when b
    is not of one of those shapes.
    """
    if b is X0:
        return ("X0",)
    core, l = strip_x0_tail(b)
    if core.is_leaf:
        return ("M", core.letter, l) if core.letter in (1, 2) else None
    left, right = _as_M(core.left), _as_M(core.right)
    if left is None or right is None:
        return None
    (il, jl), (ir, jr) = left, right
    if il == ir and jr == jl + 1:
        return ("W", il, jr, l)
    if (il, ir) == (1, 2) and jl == jr:
        return ("C", 2 * jl, l)
    if (il, ir) == (2, 1) and jr == jl + 1:
        return ("C", 2 * jl + 1, l)
    return None


# -- tensor expansion and Hall coordinates -------------------------------------

def tensor_expand(b: Bracket) -> dict:
    """Expansion of E(b) in the free associative algebra: word tuple -> Fraction."""
    if b.is_leaf:
        return {(b.letter,): Fraction(1)}
    lw = tensor_expand(b.left)
    rw = tensor_expand(b.right)
    out: dict = {}
    for wa, ca in lw.items():
        for wb, cb in rw.items():
            w = wa + wb
            out[w] = out.get(w, Fraction(0)) + ca * cb
            w = wb + wa
            out[w] = out.get(w, Fraction(0)) - ca * cb
    return {w: c for w, c in out.items() if c != 0}


def _word_multidegree(word: tuple) -> tuple:
    return (word.count(1), word.count(2), word.count(0))


def hall_expand(element: dict) -> dict:
    """Expand a Lie element (dict Bracket -> Fraction/int) on the Hall basis.

    Returns a dict Bracket -> Fraction over closed-form Hall layer elements.
    Raises ValueError if a nonzero non-Lie (or out-of-layer) residual remains;
    this is exact rational arithmetic, so zero means zero.
    """
    words: dict = {}
    for b, c in element.items():
        c = Fraction(c)
        if c == 0:
            continue
        for w, cw in tensor_expand(b).items():
            words[w] = words.get(w, Fraction(0)) + c * cw
    words = {w: c for w, c in words.items() if c != 0}
    out: dict = {}
    by_layer: dict = {}
    for w, c in words.items():
        by_layer.setdefault(_word_multidegree(w), {})[w] = c
    for (n1, n2, n0), rhs in by_layer.items():
        halls = hall_layer(n1, n2, n0)
        exps = [tensor_expand(h) for h in halls]
        coeffs = _solve_layer(exps, dict(rhs))
        for h, c in zip(halls, coeffs):
            if c != 0:
                out[h] = out.get(h, Fraction(0)) + c
    return out


def _solve_layer(exps: list, rhs: dict) -> list:
    """Exact RREF solve: write rhs as a combination of the word-expansions.

    The system is overdetermined (words x halls); Hall expansions of one layer
    are independent and a Lie element lies in their span, so inconsistency or
    rank deficiency is an error.
    """
    n = len(exps)
    words = sorted(set().union(*[set(e) for e in exps], set(rhs)))
    rows = [[e.get(w, Fraction(0)) for e in exps] + [rhs.get(w, Fraction(0))]
            for w in words]
    pivot_cols = []
    r = 0
    for c in range(n):
        pr = next((i for i in range(r, len(rows)) if rows[i][c] != 0), None)
        if pr is None:
            continue
        rows[r], rows[pr] = rows[pr], rows[r]
        pv = rows[r][c]
        rows[r] = [x / pv for x in rows[r]]
        for i in range(len(rows)):
            if i != r and rows[i][c] != 0:
                f = rows[i][c]
                rows[i] = [x - f * y for x, y in zip(rows[i], rows[r])]
        pivot_cols.append(c)
        r += 1
        if r == len(rows):
            break
    if len(pivot_cols) != n:
        raise ValueError("dependent Hall layer expansions")
    coeffs = [Fraction(0)] * n
    for i, c in enumerate(pivot_cols):
        coeffs[c] = rows[i][n]
    for i in range(r, len(rows)):
        if rows[i][n] != 0:
            raise ValueError("non-Lie residual in hall_expand")
    return coeffs


def lie_bracket_expand(a: Bracket, b: Bracket) -> dict:
    """Hall expansion of [E(a), E(b)] as dict Bracket -> Fraction."""
    return hall_expand({node(a, b): Fraction(1)})


def adjoint_decomposition(b: Bracket):
    """Unique (b1, m, b2) with b = ad_{b1}^m(b2), m maximal (b not a leaf)."""
    if b.is_leaf:
        raise ValueError("leaves have no adjoint decomposition")
    b1 = b.left
    m = 1
    cur = b.right
    while not cur.is_leaf and cur.left is b1:
        m += 1
        cur = cur.right
    return b1, m, cur


def mirror(b: Bracket) -> Bracket:
    """Swap letters X1 <-> X2 throughout the tree (X0 fixed)."""
    if b.is_leaf:
        if b.letter == 1:
            return X2
        if b.letter == 2:
            return X1
        return X0
    return node(mirror(b.left), mirror(b.right))


def sigma(b: Bracket) -> dict:
    """sigma(b) = E(b) + pi(E(b)) with the letters of the controls swapped,
    expanded on the Hall basis.  Returns dict Bracket -> Fraction; the result
    may be empty (e.g. sigma((X1,X2)) = [X1,X2] + [X2,X1] = 0).
    """
    return hall_expand({b: Fraction(1), mirror(b): Fraction(1)})
