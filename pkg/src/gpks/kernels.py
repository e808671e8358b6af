"""Base kernels, composite kernel expressions and the kernel grammar.

A kernel expression is a binary tree whose leaves are base kernels and whose
internal nodes are sums or products. Every leaf owns a contiguous run of
hyperparameter slots; slots are numbered left to right, depth first, and the
observation-noise slot always comes last. All hyperparameters live in natural
log space.

Apart from the periodic kernel, every base kernel is a function of two
pairwise quantities, the squared distance ``|x - x'|^2`` and the inner product
``x . x'``; Gram matrices are built from those arrays, which are reused across
evaluations. The periodic kernel sums ``sin^2`` over input dimensions, which
equals the textbook ``sin^2(pi r / p)`` form in one dimension and, unlike that
form, stays positive semidefinite in several.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Union

import numpy as np

__all__ = [
    "Kind",
    "BASE_KINDS",
    "Leaf",
    "Sum",
    "Product",
    "KernelExpr",
    "KernelSyntaxError",
    "UnknownKernelError",
    "LayoutError",
    "Pairwise",
    "n_slots",
    "num_hyperparams",
    "noise_slot",
    "leaves",
    "layout",
    "depth",
    "eval_base",
    "eval_expr",
    "grad_expr",
    "gram_matrix",
    "kernel_diag",
    "pairwise",
    "gram_from_pairs",
    "is_stationary",
    "parse_kernel_expr",
    "format_kernel_expr",
    "relabel",
]


class Kind(enum.Enum):
    SE = "SE"
    Ma5 = "Ma5"
    Pe = "Pe"
    Lin = "Lin"
    RQ = "RQ"

    @property
    def order(self) -> int:
        return _ORDER[self]

    def __lt__(self, other):
        if not isinstance(other, Kind):
            return NotImplemented
        return self.order < other.order


BASE_KINDS = (Kind.SE, Kind.Ma5, Kind.Pe, Kind.Lin, Kind.RQ)
_ORDER = {k: i for i, k in enumerate(BASE_KINDS)}

# Log-space parameters of each leaf, in slot order. sigma_f is always last.
PARAM_NAMES = {
    Kind.SE: ("lengthscale", "sigma_f"),
    Kind.Ma5: ("lengthscale", "sigma_f"),
    Kind.Pe: ("lengthscale", "period", "sigma_f"),
    Kind.Lin: ("sigma_f",),
    Kind.RQ: ("lengthscale", "alpha", "sigma_f"),
}
SLOT_COUNT = {k: len(v) for k, v in PARAM_NAMES.items()}

_SQRT5 = math.sqrt(5.0)


class KernelSyntaxError(ValueError):
    """Raised when a kernel string does not match the grammar."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnknownKernelError(KernelSyntaxError):
    pass


class LayoutError(ValueError):
    """Hyperparameter vector does not fit the expression's slot layout."""


@dataclass(frozen=True)
class Leaf:
    kind: Kind
    slot: int = 0


@dataclass(frozen=True)
class Sum:
    left: "KernelExpr"
    right: "KernelExpr"


@dataclass(frozen=True)
class Product:
    left: "KernelExpr"
    right: "KernelExpr"


KernelExpr = Union[Leaf, Sum, Product]


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------


def leaves(expr: KernelExpr) -> Iterator[Leaf]:
    """Yield leaves left to right."""
    if isinstance(expr, Leaf):
        yield expr
    else:
        yield from leaves(expr.left)
        yield from leaves(expr.right)


def n_slots(expr: KernelExpr) -> int:
    """Number of kernel slots, excluding the noise slot."""
    return sum(SLOT_COUNT[leaf.kind] for leaf in leaves(expr))


def num_hyperparams(expr: KernelExpr) -> int:
    """Total count of optimized hyperparameters, noise included."""
    return n_slots(expr) + 1


def noise_slot(expr: KernelExpr) -> int:
    return n_slots(expr)


def depth(expr: KernelExpr) -> int:
    if isinstance(expr, Leaf):
        return 1
    return 1 + max(depth(expr.left), depth(expr.right))


def relabel(expr: KernelExpr) -> KernelExpr:
    """Return a copy of ``expr`` with fresh left-to-right slot numbering."""
    counter = [0]

    def walk(node):
        if isinstance(node, Leaf):
            leaf = Leaf(node.kind, counter[0])
            counter[0] += SLOT_COUNT[node.kind]
            return leaf
        return type(node)(walk(node.left), walk(node.right))

    return walk(expr)


def layout(expr: KernelExpr) -> list[dict]:
    """Slot map of every leaf, as ``{leaf_index, kind, slots}`` records."""
    return [
        {
            "leaf_index": i,
            "kind": leaf.kind.value,
            "slots": list(range(leaf.slot, leaf.slot + SLOT_COUNT[leaf.kind])),
        }
        for i, leaf in enumerate(leaves(expr))
    ]


def check_layout(expr: KernelExpr, theta) -> np.ndarray:
    """Validate that ``theta`` matches ``expr`` and return it as an array."""
    theta = np.asarray(theta, dtype=float)
    m = num_hyperparams(expr)
    if theta.ndim != 1 or theta.shape[0] != m:
        raise LayoutError(
            f"expected {m} hyperparameters for {format_kernel_expr(expr)}, "
            f"got shape {theta.shape}"
        )
    expected = 0
    for leaf in leaves(expr):
        if leaf.slot != expected:
            raise LayoutError(
                f"leaf {leaf.kind.value} starts at slot {leaf.slot}, expected {expected}"
            )
        expected += SLOT_COUNT[leaf.kind]
    return theta


def is_stationary(expr: KernelExpr) -> bool:
    return all(leaf.kind is not Kind.Lin for leaf in leaves(expr))


# ---------------------------------------------------------------------------
# Scalar reference evaluation
# ---------------------------------------------------------------------------


def eval_base(kind: Kind, x, x_prime, raw_params) -> float:
    """Evaluate one base kernel at a pair of points.

    ``raw_params`` are positive (not log) values in slot order, e.g.
    ``(lengthscale, period, sigma_f)`` for the periodic kernel.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != x_prime.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x_prime.shape}")
    params = [float(v) for v in raw_params]
    if len(params) != SLOT_COUNT[kind]:
        raise ValueError(f"{kind.value} takes {SLOT_COUNT[kind]} parameters")
    if any(not v > 0 for v in params):
        raise ValueError(f"{kind.value} parameters must be positive, got {params}")

    sf2 = params[-1] ** 2
    r = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, x_prime)))
    if kind is Kind.SE:
        ell = params[0]
        return sf2 * math.exp(-(r**2) / (2 * ell**2))
    if kind is Kind.Ma5:
        ell = params[0]
        u = _SQRT5 * r / ell
        return sf2 * (1 + u + 5 * r**2 / (3 * ell**2)) * math.exp(-u)
    if kind is Kind.Pe:
        ell, period = params[0], params[1]
        s2 = sum(math.sin(math.pi * (a - b) / period) ** 2 for a, b in zip(x, x_prime))
        return sf2 * math.exp(-2 * s2 / ell**2)
    if kind is Kind.Lin:
        return sf2 * sum(a * b for a, b in zip(x, x_prime))
    ell, alpha = params[0], params[1]
    return sf2 * (1 + r**2 / (2 * alpha * ell**2)) ** (-alpha)


# ---------------------------------------------------------------------------
# Vectorized evaluation
# ---------------------------------------------------------------------------


class Pairwise(NamedTuple):
    """Squared distances and inner products between two point sets.

    ``A`` and ``B`` are kept for the periodic kernel; when they are ``None``
    the arrays describe coincident pairs (a Gram diagonal).
    """

    d2: np.ndarray
    dot: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None


def _as_points(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D point array, got shape {A.shape}")
    return A


def pairwise(A, B=None) -> Pairwise:
    A = _as_points(A)
    B = A if B is None else _as_points(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]} columns")
    d2 = np.zeros((A.shape[0], B.shape[0]))
    # column loop keeps memory at n*m and makes d2 exactly symmetric for A is B
    for j in range(A.shape[1]):
        d2 += (A[:, j, None] - B[None, :, j]) ** 2
    return Pairwise(d2, A @ B.T, A, B)


def _leaf_values(kind: Kind, logp: np.ndarray, pw: Pairwise, want_grad: bool):
    sf2 = math.exp(2 * logp[-1])
    d2 = pw.d2
    grads = []
    if kind is Kind.SE:
        ell2 = math.exp(2 * logp[0])
        k = sf2 * np.exp(-0.5 * d2 / ell2)
        if want_grad:
            grads = [k * d2 / ell2]
    elif kind is Kind.Ma5:
        ell = math.exp(logp[0])
        u = _SQRT5 * np.sqrt(d2) / ell
        e = np.exp(-u)
        k = sf2 * (1 + u + u * u / 3) * e
        if want_grad:
            grads = [sf2 * e * u * u * (1 + u) / 3]
    elif kind is Kind.Pe:
        ell2 = math.exp(2 * logp[0])
        period = math.exp(logp[1])
        s2 = np.zeros_like(d2)
        qs = np.zeros_like(d2)  # sum of q sin(2q), the period derivative
        if pw.A is not None:
            for j in range(pw.A.shape[1]):
                q = (math.pi / period) * (pw.A[:, j, None] - pw.B[None, :, j])
                s2 += np.sin(q) ** 2
                if want_grad:
                    qs += q * np.sin(2 * q)
        k = sf2 * np.exp(-2 * s2 / ell2)
        if want_grad:
            grads = [k * 4 * s2 / ell2, k * 2 * qs / ell2]
    elif kind is Kind.Lin:
        k = sf2 * pw.dot
    else:
        ell2 = math.exp(2 * logp[0])
        alpha = math.exp(logp[1])
        z = d2 / (2 * alpha * ell2)
        lz = np.log1p(z)
        k = sf2 * np.exp(-alpha * lz)
        if want_grad:
            grads = [k * d2 / (ell2 * (1 + z)), k * alpha * (z / (1 + z) - lz)]
    if want_grad:
        grads.append(2 * k)
    return k, grads


def _evaluate(expr: KernelExpr, theta: np.ndarray, pw: Pairwise, want_grad: bool):
    """Return (K, {slot: dK/dtheta_slot})."""
    if isinstance(expr, Leaf):
        n = SLOT_COUNT[expr.kind]
        k, grads = _leaf_values(expr.kind, theta[expr.slot : expr.slot + n], pw, want_grad)
        return k, {expr.slot + i: g for i, g in enumerate(grads)}
    kl, gl = _evaluate(expr.left, theta, pw, want_grad)
    kr, gr = _evaluate(expr.right, theta, pw, want_grad)
    if isinstance(expr, Sum):
        gl.update(gr)
        return kl + kr, gl
    grads = {s: g * kr for s, g in gl.items()}
    grads.update({s: kl * g for s, g in gr.items()})
    return kl * kr, grads


def gram_from_pairs(expr: KernelExpr, theta, pw: Pairwise, want_grad: bool = False):
    """Gram matrix (and per-slot derivatives) from precomputed pairwise arrays.

    With ``want_grad`` the second return value is a list with one array per
    kernel slot; the noise slot is not included.
    """
    theta = check_layout(expr, theta)
    k, grads = _evaluate(expr, theta, pw, want_grad)
    if not want_grad:
        return k
    return k, [grads[j] for j in range(n_slots(expr))]


def gram_matrix(expr: KernelExpr, theta, A, B=None) -> np.ndarray:
    """Cross-covariance matrix between rows of ``A`` and rows of ``B``."""
    return gram_from_pairs(expr, theta, pairwise(A, B))


def kernel_diag(expr: KernelExpr, theta, A) -> np.ndarray:
    """Prior variances k(x_i, x_i) without building the full Gram matrix."""
    A = _as_points(A)
    pw = Pairwise(np.zeros(A.shape[0]), np.einsum("ij,ij->i", A, A))
    return gram_from_pairs(expr, theta, pw)


def eval_expr(expr: KernelExpr, x, x_prime, theta) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    return float(gram_matrix(expr, theta, x[None, :], x_prime[None, :])[0, 0])


def grad_expr(expr: KernelExpr, x, x_prime, theta) -> np.ndarray:
    """d k(x, x') / d theta_j for every slot, zero at the noise slot."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    _, grads = gram_from_pairs(expr, theta, pairwise(x[None, :], x_prime[None, :]), True)
    return np.array([g[0, 0] for g in grads] + [0.0])


# ---------------------------------------------------------------------------
# Grammar
#
#   Expr   := Term ('+' Term)*
#   Term   := Factor (('*' | '×') Factor)*
#   Factor := NAME | '(' Expr ')'
# ---------------------------------------------------------------------------

_NAMES = {k.value: k for k in BASE_KINDS}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        c = text[i]
        offset = len(text[:i].encode("utf-8"))
        if c.isspace():
            i += 1
        elif c in "+*()":
            tokens.append((c, c, offset))
            i += 1
        elif c == "×":
            tokens.append(("*", c, offset))
            i += 1
        elif c.isalpha():
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], offset))
            i = j
        else:
            raise KernelSyntaxError(f"unexpected character {c!r}", offset)
    tokens.append(("end", "", len(text.encode("utf-8"))))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expr(self):
        node = self.term()
        while self.peek()[0] == "+":
            self.take()
            node = Sum(node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[0] == "*":
            self.take()
            node = Product(node, self.factor())
        return node

    def factor(self):
        kind, text, offset = self.take()
        if kind == "name":
            if text not in _NAMES:
                raise UnknownKernelError(f"unknown kernel {text!r}", offset)
            return Leaf(_NAMES[text])
        if kind == "(":
            node = self.expr()
            closing = self.take()
            if closing[0] != ")":
                raise KernelSyntaxError("expected ')'", closing[2])
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise KernelSyntaxError(f"expected a kernel name or '(', found {what}", offset)


def parse_kernel_expr(text: str) -> KernelExpr:
    """Parse e.g. ``"(Ma5 + Ma5) * Ma5"`` into an expression tree."""
    parser = _Parser(text)
    node = parser.expr()
    kind, tok, offset = parser.peek()
    if kind != "end":
        raise KernelSyntaxError(f"unexpected {tok!r}", offset)
    return relabel(node)


def format_kernel_expr(expr: KernelExpr) -> str:
    """Render with the fewest parentheses that preserve the tree shape."""
    if isinstance(expr, Leaf):
        return expr.kind.value
    left = format_kernel_expr(expr.left)
    right = format_kernel_expr(expr.right)
    if isinstance(expr, Sum):
        if isinstance(expr.right, Sum):
            right = f"({right})"
        return f"{left} + {right}"
    if isinstance(expr.left, Sum):
        left = f"({left})"
    if not isinstance(expr.right, Leaf):
        right = f"({right})"
    return f"{left} * {right}"
