"""Exact Boolean-circuit views of associative recall.

Three constructions, all over {0,1} with integer arithmetic so claims can be
checked exactly: the per-pair recall polynomial, the p-hot token encoding
with its block-exclusive equality polynomial, and a one-attention-layer +
two-MLP network that solves recall outright. A tiny integer polynomial type
backs the symbolic degree audits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import EncodingError, InputError, ParameterError


class Polynomial:
    """Multivariate polynomial with integer coefficients.

    Monomials are tuples of (variable, exponent) pairs sorted by variable;
    variables are arbitrary hashable labels. Exact by construction, which is
    the point: degree claims are statements about integers, not floats.
    """

    __slots__ = ("terms",)

    def __init__(self, terms: dict | None = None):
        self.terms = {}
        if terms:
            for mono, coeff in terms.items():
                if coeff != 0:
                    self.terms[mono] = coeff

    @classmethod
    def const(cls, c: int) -> "Polynomial":
        return cls({(): int(c)})

    @classmethod
    def variable(cls, name) -> "Polynomial":
        return cls({((name, 1),): 1})

    def __add__(self, other) -> "Polynomial":
        other = other if isinstance(other, Polynomial) else Polynomial.const(other)
        out = dict(self.terms)
        for mono, coeff in other.terms.items():
            out[mono] = out.get(mono, 0) + coeff
        return Polynomial(out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial({m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        other = other if isinstance(other, Polynomial) else Polynomial.const(other)
        return self + (-other)

    def __rsub__(self, other) -> "Polynomial":
        return Polynomial.const(other) + (-self)

    def __mul__(self, other) -> "Polynomial":
        other = other if isinstance(other, Polynomial) else Polynomial.const(other)
        out: dict = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                exps: dict = {}
                for var, e in m1 + m2:
                    exps[var] = exps.get(var, 0) + e
                mono = tuple(sorted(exps.items()))
                out[mono] = out.get(mono, 0) + c1 * c2
        return Polynomial(out)

    __rmul__ = __mul__

    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(e for _, e in mono) for mono in self.terms)

    def is_multilinear(self) -> bool:
        return all(e == 1 for mono in self.terms for _, e in mono)

    def is_block_exclusive(self, block_of: dict) -> bool:
        """No monomial may touch one block twice (squares count as twice)."""
        for mono in self.terms:
            blocks = [block_of[var] for var, e in mono for _ in range(e)]
            if len(blocks) != len(set(blocks)):
                return False
        return True

    def evaluate(self, assignment: dict) -> int:
        total = 0
        for mono, coeff in self.terms.items():
            value = coeff
            for var, e in mono:
                value *= assignment[var] ** e
            total += value
        return total

    def __eq__(self, other) -> bool:
        return isinstance(other, Polynomial) and self.terms == other.terms

    def __repr__(self) -> str:
        if not self.terms:
            return "Polynomial(0)"
        parts = []
        for mono, coeff in sorted(self.terms.items()):
            vars_part = "*".join(f"{v}^{e}" if e > 1 else str(v) for v, e in mono)
            parts.append(f"{coeff}" if not mono else f"{coeff}*{vars_part}")
        return f"Polynomial({' + '.join(parts)})"


def _as_bits(u, name: str = "u") -> np.ndarray:
    arr = np.asarray(u)
    if not np.isin(arr, (0, 1)).all():
        raise InputError(f"{name} must contain only 0/1 entries")
    return arr.astype(np.int64)


# -- recall polynomial --------------------------------------------------------


def mqar_poly(u, i: int, j: int) -> np.ndarray:
    """Value row j+1 if rows i and j agree bitwise, else the zero vector.

    The gate is the XNOR product prod_k [u_ik u_jk + (1-u_ik)(1-u_jk)]; one
    disagreeing bit zeroes it.
    """
    mat = _as_bits(u)
    if mat.ndim != 2:
        raise InputError(f"u must be 2-D, got shape {mat.shape}")
    n = mat.shape[0]
    for name, row in (("i", i), ("j", j), ("j+1", j + 1)):
        if not 0 <= row < n:
            raise IndexError(f"row {name}={row} out of range for {n} rows")
    if i <= j:
        raise ParameterError(f"query row i={i} must follow key row j={j}")
    gate = int(np.prod(mat[i] * mat[j] + (1 - mat[i]) * (1 - mat[j])))
    return gate * mat[j + 1]


def mqar_poly_symbolic(d: int) -> list[Polynomial]:
    """The recall polynomial over formal bits, one polynomial per output bit.

    Variables: ("k", c) key bits, ("v", c) value bits, ("q", c) query bits.
    Each output bit is multilinear of degree 2d + 1.
    """
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    q = [Polynomial.variable(("q", c)) for c in range(d)]
    k = [Polynomial.variable(("k", c)) for c in range(d)]
    v = [Polynomial.variable(("v", c)) for c in range(d)]
    gate = Polynomial.const(1)
    for c in range(d):
        gate = gate * (q[c] * k[c] + (1 - q[c]) * (1 - k[c]))
    return [gate * v[c] for c in range(d)]


# -- p-hot encoding -----------------------------------------------------------


def _phot_base(p: int, c: int) -> int:
    if p < 1 or c < 1:
        raise ParameterError(f"need p >= 1 and c >= 1, got p={p} c={c}")
    base = round(c ** (1.0 / p))
    for candidate in (base - 1, base, base + 1):
        if candidate >= 1 and candidate**p == c:
            return candidate
    raise ParameterError(f"c={c} is not a perfect {p}-th power")


def phot_encode(t: int, p: int, c: int) -> np.ndarray:
    """Encode token t as p concatenated one-hot blocks of its base-c^(1/p)
    digits, most significant digit first."""
    base = _phot_base(p, c)
    if not 0 <= t < c:
        raise ParameterError(f"token {t} outside [0, {c})")
    out = np.zeros(p * base, dtype=np.int64)
    rest = t
    for block in range(p - 1, -1, -1):
        rest, digit = divmod(rest, base)
        out[block * base + digit] = 1
    return out


def phot_decode(vec, p: int, c: int) -> int:
    base = _phot_base(p, c)
    bits = _as_bits(vec, "encoding")
    if bits.shape != (p * base,):
        raise EncodingError(f"expected length {p * base}, got shape {bits.shape}")
    t = 0
    for block in range(p):
        chunk = bits[block * base : (block + 1) * base]
        if chunk.sum() != 1:
            raise EncodingError(f"block {block} has {int(chunk.sum())} ones, expected exactly 1")
        t = t * base + int(np.argmax(chunk))
    return t


def eq_phot_poly(u1, u2, p: int) -> int:
    """1 iff the two encodings agree in every block.

    Accepts p-hot and almost-p-hot inputs (a block may be all zeros); a block
    with two or more ones is malformed.
    """
    a = _as_bits(u1, "u1")
    b = _as_bits(u2, "u2")
    if a.shape != b.shape or a.ndim != 1:
        raise EncodingError(f"encodings must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.shape[0] % p != 0:
        raise EncodingError(f"length {a.shape[0]} is not divisible by p={p}")
    base = a.shape[0] // p
    result = 1
    for block in range(p):
        s = slice(block * base, (block + 1) * base)
        s1, s2 = int(a[s].sum()), int(b[s].sum())
        if s1 > 1 or s2 > 1:
            raise EncodingError(f"block {block} has more than one set bit")
        result *= int((a[s] * b[s]).sum()) + (1 - s1) * (1 - s2)
    return result


def eq_phot_poly_symbolic(p: int, base: int) -> Polynomial:
    """The block-product equality polynomial over formal bits.

    Variables ("a", j, k) and ("b", j, k); block labels pair the side with
    the block index, so block-exclusivity means no monomial reads the same
    side of the same block twice. Degree is exactly 2p.
    """
    if p < 1 or base < 2:
        raise ParameterError(f"need p >= 1 and base >= 2, got p={p} base={base}")
    product = Polynomial.const(1)
    for j in range(p):
        a = [Polynomial.variable(("a", j, k)) for k in range(base)]
        b = [Polynomial.variable(("b", j, k)) for k in range(base)]
        dot = Polynomial.const(0)
        sum_a = Polynomial.const(0)
        sum_b = Polynomial.const(0)
        for k in range(base):
            dot = dot + a[k] * b[k]
            sum_a = sum_a + a[k]
            sum_b = sum_b + b[k]
        product = product * (dot + (1 - sum_a) * (1 - sum_b))
    return product


def phot_blocks(p: int, base: int) -> dict:
    """Variable -> block label map matching eq_phot_poly_symbolic."""
    blocks = {}
    for j in range(p):
        for k in range(base):
            blocks[("a", j, k)] = ("a", j)
            blocks[("b", j, k)] = ("b", j)
    return blocks


# -- exact attention construction ----------------------------------------------


def exact_attention_mqar(u, with_match_matrix: bool = False):
    """Solve recall with one masked-attention layer and two linear+ReLU maps.

    Input rows come in (key, value, query) triples. Keys and queries are
    remapped to +/-1 so the biased inner product w_q . w_k - (d - 1) is 1 on
    equal rows and <= -1 otherwise; after ReLU and the causal mask that is
    the exact match indicator Z. A suffix-sum matrix, a subtract-first-column
    + 1 + ReLU stage, and an adjacent-difference matrix turn each Z row into
    a first-match one-hot. The selector carries one extra column backed by an
    appended zero value row, where queries with no match land.
    """
    mat = _as_bits(u)
    if mat.ndim != 2 or mat.shape[0] % 3 != 0 or mat.shape[0] == 0:
        raise InputError(f"expected (3N, d) bit rows, got shape {mat.shape}")
    n = mat.shape[0] // 3
    d = mat.shape[1]
    w = 2 * mat - 1
    q, k = w[2::3], w[0::3]
    values = mat[1::3]

    scores = q @ k.T - (d - 1)
    mask = np.tril(np.ones((n, n), dtype=np.int64))
    z = np.maximum(scores, 0) * mask

    w1 = np.zeros((n, n + 1), dtype=np.int64)  # suffix sums, plus a sink column
    for col in range(n):
        w1[col:, col] = 1
    counts = z @ w1
    kept = np.maximum(counts - counts[:, :1] + 1, 0)
    w3 = np.eye(n + 1, dtype=np.int64)
    for col in range(n):
        w3[col + 1, col] = -1
    selector = kept @ w3
    v_ext = np.concatenate([values, np.zeros((1, d), dtype=np.int64)])
    out = selector @ v_ext
    if with_match_matrix:
        return out, z
    return out


# -- exhaustive verification -----------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    instances: int


def all_bit_matrices(rows: int, cols: int) -> Iterator[np.ndarray]:
    """Every {0,1} matrix of the given shape, in counting order."""
    bits = rows * cols
    for code in range(2**bits):
        flat = (code >> np.arange(bits, dtype=np.int64)) & 1
        yield flat.reshape(rows, cols)


def _check_mqar_poly() -> CheckResult:
    rows, d = 6, 2
    pairs = [(i, j) for j in range(rows - 1) for i in range(j + 1, rows)]
    instances = 0
    for mat in all_bit_matrices(rows, d):
        for i, j in pairs:
            got = mqar_poly(mat, i, j)
            want = mat[j + 1] if np.array_equal(mat[i], mat[j]) else np.zeros(d, dtype=np.int64)
            if not np.array_equal(got, want):
                return CheckResult("mqar_poly exhaustive", False, instances)
            instances += 1
    return CheckResult("mqar_poly exhaustive", True, instances)


def _check_mqar_degree() -> CheckResult:
    instances = 0
    for d in (1, 2, 3):
        for poly in mqar_poly_symbolic(d):
            if poly.degree() != 2 * d + 1 or not poly.is_multilinear():
                return CheckResult("mqar_poly degree audit", False, instances)
            instances += 1
    return CheckResult("mqar_poly degree audit", True, instances)


def _check_phot_roundtrip() -> CheckResult:
    instances = 0
    if phot_encode(3, 2, 4).tolist() != [0, 1, 0, 1]:
        return CheckResult("p-hot round trip", False, instances)
    instances += 1
    for p, c in ((1, 7), (2, 16), (3, 27)):
        for t in range(c):
            vec = phot_encode(t, p, c)
            if int(vec.sum()) != p or phot_decode(vec, p, c) != t:
                return CheckResult("p-hot round trip", False, instances)
            instances += 1
    return CheckResult("p-hot round trip", True, instances)


def _check_eq_phot() -> CheckResult:
    instances = 0
    for c in (9, 81):
        codes = [phot_encode(t, 2, c) for t in range(c)]
        for t1 in range(c):
            for t2 in range(c):
                if eq_phot_poly(codes[t1], codes[t2], 2) != int(t1 == t2):
                    return CheckResult("eq_phot_poly exhaustive", False, instances)
                instances += 1
    p = 2
    base = 3
    block_choices = [np.zeros(base, dtype=np.int64)] + [np.eye(base, dtype=np.int64)[k] for k in range(base)]
    almost = [np.concatenate(pair) for pair in ((x, y) for x in block_choices for y in block_choices)]
    for v1 in almost:
        for v2 in almost:
            if eq_phot_poly(v1, v2, p) != int(np.array_equal(v1, v2)):
                return CheckResult("eq_phot_poly exhaustive", False, instances)
            instances += 1
    return CheckResult("eq_phot_poly exhaustive", True, instances)


def _check_eq_phot_degree() -> CheckResult:
    instances = 0
    for p in (1, 2, 3):
        base = 3 if p < 3 else 2
        poly = eq_phot_poly_symbolic(p, base)
        if poly.degree() != 2 * p or not poly.is_block_exclusive(phot_blocks(p, base)):
            return CheckResult("eq_phot_poly degree audit", False, instances)
        instances += 1
    return CheckResult("eq_phot_poly degree audit", True, instances)


def _first_match_oracle(mat: np.ndarray) -> np.ndarray:
    n, d = mat.shape[0] // 3, mat.shape[1]
    out = np.zeros((n, d), dtype=np.int64)
    for t in range(n):
        for s in range(t + 1):
            if np.array_equal(mat[3 * s], mat[3 * t + 2]):
                out[t] = mat[3 * s + 1]
                break
    return out


def _check_exact_attention() -> CheckResult:
    n, d = 2, 2
    instances = 0
    for mat in all_bit_matrices(3 * n, d):
        got, z = exact_attention_mqar(mat, with_match_matrix=True)
        if not np.array_equal(got, _first_match_oracle(mat)):
            return CheckResult("exact attention recall", False, instances)
        for t in range(n):
            for s in range(n):
                want = int(s <= t and np.array_equal(mat[3 * t + 2], mat[3 * s]))
                if z[t, s] != want:
                    return CheckResult("exact attention recall", False, instances)
        instances += 1
    return CheckResult("exact attention recall", True, instances)


def run_all_checks() -> list[CheckResult]:
    """Every exhaustive oracle and degree audit; all should pass."""
    return [
        _check_mqar_poly(),
        _check_mqar_degree(),
        _check_phot_roundtrip(),
        _check_eq_phot(),
        _check_eq_phot_degree(),
        _check_exact_attention(),
    ]
