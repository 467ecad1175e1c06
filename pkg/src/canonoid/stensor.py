"""The mixed (1,1) structure tensor S of a transformation.

S is assembled pointwise from the Lagrange brackets: on the (q, p) rows
S^a_B solves eps_{la} S^a_B = [x^B, x^l], i.e. the x-rows are
eps_inv @ Lam[x, :].  The time row is zero by construction and the z
row is the momentum-weighted combination S^z_B = sum_i p_i S^{q_i}_B;
both constraints are applied exactly, not numerically.

Traces of matrix powers of S are the candidate constants of motion.
The Nijenhuis torsion of the x-block is the obstruction to their
pairwise involution, and the Lenard trace identity

    N^l_{bg} (S^{k-1})^g_l
        = (1/k) S^n_b d tr(S^k)/dx^n - (1/(k+1)) d tr(S^{k+1})/dx^b

holds for every (1,1) tensor field: the two cross terms of the torsion
contraction cancel identically, leaving only the normalized trace
gradients.  lenard_identity_residual evaluates the two sides through
disjoint code paths (explicit product-rule assembly of dS on the left,
first-order dual arithmetic pushed through the matrix powers on the
right), which makes it a strong end-to-end check of every derivative
in this module.

Torsion and the Lenard identity live on the x-block only; the trace
and involution computations use the full matrix, whose constrained
rows keep the extra columns out of the trace algebra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import transform
from .expr import DualScalar
from .geometry import canonical_eps, canonical_eps_inv

__all__ = [
    "STensorSample",
    "TorsionSample",
    "InvolutionResult",
    "SingularPullback",
    "s_tensor",
    "trace_powers",
    "nijenhuis_torsion",
    "lenard_identity_residual",
    "involution_matrix",
    "KMAX_LIMIT",
    "CONDITION_LIMIT",
]

KMAX_LIMIT = 10
CONDITION_LIMIT = 1e12


class SingularPullback(ValueError):
    """The x-block of the Lagrange matrix was singular at every sample,
    so the barred bracket variant could not be computed anywhere."""


@dataclass(frozen=True)
class STensorSample:
    """S at one point over the full coordinate list.  structural_zeros
    marks the rows fixed by the geometry (zero t-row, momentum-weighted
    z-row) rather than computed from brackets."""

    matrix: np.ndarray
    structural_zeros: np.ndarray


@dataclass(frozen=True)
class TorsionSample:
    """Torsion components N^l_{bg} over the x-block, antisymmetric in
    the two lower slots."""

    components: np.ndarray


@dataclass(frozen=True)
class InvolutionResult:
    """Pairwise bracket magnitudes of the trace functions: entry (i, j)
    holds max |{tr S^(i+1), tr S^(j+1)}| over the samples.  skipped
    counts samples where the barred variant was dropped because the
    Lagrange x-block was singular or too ill-conditioned."""

    unbarred: np.ndarray
    barred: np.ndarray
    skipped: int
    max_condition: float


def _check_kmax(kmax):
    k = int(kmax)
    if k < 1 or k > KMAX_LIMIT:
        raise ValueError(f"kmax must be in 1..{KMAX_LIMIT}, got {kmax}")
    return k


def _assemble(g, lam, x):
    d = g.dim
    xi = list(g.x_indices)
    S = np.zeros((d, d))
    S[np.ix_(xi, list(range(d)))] = canonical_eps_inv(g.n) @ lam[xi, :]
    zi = g.z_index
    if zi is not None:
        for qi, pi in zip(g.q_indices, g.p_indices):
            S[zi, :] += x[pi] * S[qi, :]
    return S


def s_tensor(g, F, x):
    """S^A_B at x, rows = output index."""
    x = g.check_state(x)
    lam = transform.lagrange_brackets(F, x).entries
    S = _assemble(g, lam, x)
    mask = np.zeros(S.shape, dtype=bool)
    if g.t_index is not None:
        mask[g.t_index, :] = True
    if g.z_index is not None:
        mask[g.z_index, :] = True
    return STensorSample(matrix=S, structural_zeros=mask)


def trace_powers(g, F, x, kmax):
    """tr(S^k) for k = 1..kmax, by repeated multiplication."""
    kmax = _check_kmax(kmax)
    S = s_tensor(g, F, x).matrix
    out = np.zeros(kmax)
    P = S.copy()
    out[0] = np.trace(P)
    for k in range(1, kmax):
        P = P @ S
        out[k] = np.trace(P)
    return out


def _x_block_and_derivs(g, F, x):
    """x-block A of S and its derivatives dA[n] = dA/dx^n along the
    x-directions, via explicit product-rule assembly of the bracket
    derivatives."""
    x = g.check_state(x)
    xi = list(g.x_indices)
    _, J, Hc = transform.jacobian_and_hessians(F, x)
    lam = transform._lagrange_from_jacobian(g, J)
    dLam = transform.lagrange_derivative(F, x, J=J, H=Hc)
    eps_inv = canonical_eps_inv(g.n)
    A = eps_inv @ lam[np.ix_(xi, xi)]
    dA = np.array([eps_inv @ dLam[nu][np.ix_(xi, xi)] for nu in xi])
    return A, dA


def nijenhuis_torsion(g, F, x):
    """N^l_{bg} = dA^l_g/dx^n A^n_b - dA^l_b/dx^n A^n_g
    + (dA^n_b/dx^g - dA^n_g/dx^b) A^l_n, over the x-block."""
    A, dA = _x_block_and_derivs(g, F, x)
    # half with the beta slot fixed; antisymmetrizing it reproduces all
    # four terms of the component formula and keeps N^l_{bg} = -N^l_{gb}
    # exact in floating point
    M = (np.einsum("nlg,nb->lbg", dA, A)
         + np.einsum("gnb,ln->lbg", dA, A))
    return TorsionSample(components=M - M.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# Dual-arithmetic route to trace gradients (independent of the explicit
# product-rule assembly above)


def _dual_matmul(P, Q):
    m = len(P)
    return [[sum(P[i][k] * Q[k][j] for k in range(m)) for j in range(m)]
            for i in range(m)]


def _dual_value_grad(s, nd):
    if isinstance(s, DualScalar):
        return s.value, s.d1
    return float(s), np.zeros(nd)


def _dual_entries(g, F, x):
    """Jacobian entries of F lifted to first-order duals whose partials
    run over the x-directions."""
    xi = list(g.x_indices)
    _, J, Hc = transform.jacobian_and_hessians(F, x)
    d = g.dim
    Jd = [[DualScalar(J[c, mu], Hc[c][mu, xi]) for mu in range(d)]
          for c in range(d)]
    return Jd, J


def _dual_s_matrix(g, F, x, block):
    """S (full chart, block='full') or its x-block (block='x') with
    dual entries carrying d/dx partials."""
    xi = list(g.x_indices)
    nd = len(xi)
    Jd, _ = _dual_entries(g, F, x)
    idx = xi if block == "x" else list(range(g.dim))
    m = len(idx)
    lam = [[0.0] * m for _ in range(m)]
    for a, mu in enumerate(idx):
        for b, nu in enumerate(idx):
            acc = 0.0
            for qi, pi in zip(g.q_indices, g.p_indices):
                acc = acc + Jd[qi][mu] * Jd[pi][nu] - Jd[pi][mu] * Jd[qi][nu]
            lam[a][b] = acc
    eps_inv = canonical_eps_inv(g.n)
    S = [[0.0] * m for _ in range(m)]
    x_rows = [idx.index(i) for i in xi]
    for r, row in enumerate(x_rows):
        for j in range(m):
            acc = 0.0
            for c, col in enumerate(x_rows):
                acc = acc + eps_inv[r, c] * lam[col][j]
            S[row][j] = acc
    if block == "full" and g.z_index is not None:
        zr = idx.index(g.z_index)
        for qi, pi in zip(g.q_indices, g.p_indices):
            d1 = np.zeros(nd)
            d1[xi.index(pi)] = 1.0
            p_dual = DualScalar(x[pi], d1)
            qr = idx.index(qi)
            for j in range(m):
                S[zr][j] = S[zr][j] + p_dual * S[qr][j]
    return S


def _dual_trace_grads(g, F, x, kmax, block):
    """(values, gradients) of tr(S^k), k = 1..kmax, gradients over the
    x-directions, computed entirely in dual arithmetic."""
    nd = 2 * g.n
    S = _dual_s_matrix(g, F, x, block)
    m = len(S)
    vals = np.zeros(kmax)
    grads = np.zeros((kmax, nd))
    P = S
    for k in range(kmax):
        if k > 0:
            P = _dual_matmul(P, S)
        tr = 0.0
        for i in range(m):
            tr = tr + P[i][i]
        vals[k], grads[k] = _dual_value_grad(tr, nd)
    return vals, grads


def lenard_identity_residual(g, F, x, k):
    """Sup-norm gap between the two sides of the trace identity at x.

    Left side: torsion contracted with S^(k-1), both from the explicit
    derivative assembly.  Right side: normalized trace gradients from
    the dual-arithmetic route.  The identity is unconditional, so any
    nonzero residual beyond rounding exposes a derivative bug.
    """
    k = int(k)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k + 1 > KMAX_LIMIT:
        raise ValueError(f"k + 1 exceeds the power limit {KMAX_LIMIT}")
    x = g.check_state(x)
    N = nijenhuis_torsion(g, F, x).components
    A, _ = _x_block_and_derivs(g, F, x)
    Ak1 = np.linalg.matrix_power(A, k - 1)
    lhs = np.einsum("lbg,gl->b", N, Ak1)
    _, grads = _dual_trace_grads(g, F, x, k + 1, block="x")
    rhs = A.T @ grads[k - 1] / k - grads[k] / (k + 1)
    return float(np.max(np.abs(lhs - rhs)))


def involution_matrix(g, F, samples, kmax):
    """Pairwise brackets of the trace functions over samples.

    unbarred entry (i, j): max |{tr S^(i+1), tr S^(j+1)}| with the flat
    bracket grad_f^T eps grad_h.  barred: the bracket of the pulled-back
    structure, -grad_f^T L^{-1} grad_h with L the Lagrange x-block
    (inverted by LU with partial pivoting; condition number reported).
    Samples whose L is singular or has condition number beyond
    CONDITION_LIMIT are skipped for the barred variant and counted;
    if every sample is skipped the barred bracket is unavailable and
    SingularPullback is raised.
    """
    kmax = _check_kmax(kmax)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("samples must be non-empty")
    xi = list(g.x_indices)
    eps = canonical_eps(g.n)
    unbarred = np.zeros((kmax, kmax))
    barred = np.zeros((kmax, kmax))
    skipped = 0
    max_condition = 0.0
    any_barred = False
    for x in samples:
        x = g.check_state(x)
        _, grads = _dual_trace_grads(g, F, x, kmax, block="full")
        flat = grads @ eps @ grads.T
        unbarred = np.maximum(unbarred, np.abs(flat))
        lam = transform.lagrange_brackets(F, x).entries
        L = lam[np.ix_(xi, xi)]
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.linalg.cond(L)
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            skipped += 1
            continue
        max_condition = max(max_condition, float(cond))
        pulled = -grads @ np.linalg.solve(L, grads.T)
        barred = np.maximum(barred, np.abs(pulled))
        any_barred = True
    if not any_barred:
        raise SingularPullback(
            f"Lagrange x-block singular at all {samples.shape[0]} samples")
    return InvolutionResult(unbarred=unbarred, barred=barred,
                            skipped=skipped, max_condition=max_condition)
