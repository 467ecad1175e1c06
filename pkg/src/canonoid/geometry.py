"""Darboux-coordinate phase-space structures.

Four geometries are supported, with fixed coordinate layouts:

    symplectic    dim 2n    (q1..qn, p1..pn)
    cosymplectic  dim 2n+1  (q1..qn, p1..pn, t)
    contact       dim 2n+1  (q1..qn, p1..pn, z)
    cocontact     dim 2n+2  (t, q1..qn, p1..pn, z)

All matrices in the library use these orderings.  The canonical
two-form block follows the convention (dq ∧ dp)(X, Y) =
dq(X) dp(Y) - dq(Y) dp(X), so that omega(e_mu, e_nu) equals the
constant matrix eps = [[0, I], [-I, 0]] on the (q, p) block.

Interior products use (X ⌟ omega)(Y) = omega(X, Y); in components that
is M.T @ X for a two-form with matrix M (see contract()).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr

__all__ = [
    "GeometryKind",
    "StructureAtPoint",
    "WrongGeometry",
    "structure_at_point",
    "hamiltonian_vf",
    "evolution_vf",
    "poisson_bracket",
    "jacobi_bracket",
    "canonical_eps",
    "canonical_eps_inv",
    "contract",
]

KINDS = ("symplectic", "cosymplectic", "contact", "cocontact")


class WrongGeometry(TypeError):
    """Operation not defined for this geometry kind."""


@dataclass(frozen=True)
class GeometryKind:
    """One of the four phase-space structures with n degrees of freedom."""

    kind: str
    n: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")

    @property
    def dim(self):
        base = 2 * self.n
        if self.kind in ("cosymplectic", "contact"):
            return base + 1
        if self.kind == "cocontact":
            return base + 2
        return base

    @property
    def chart_vars(self):
        qs = [f"q{i}" for i in range(1, self.n + 1)]
        ps = [f"p{i}" for i in range(1, self.n + 1)]
        if self.kind == "symplectic":
            return tuple(qs + ps)
        if self.kind == "cosymplectic":
            return tuple(qs + ps + ["t"])
        if self.kind == "contact":
            return tuple(qs + ps + ["z"])
        return tuple(["t"] + qs + ps + ["z"])

    # -- index layout -------------------------------------------------------

    @property
    def q_indices(self):
        off = 1 if self.kind == "cocontact" else 0
        return tuple(range(off, off + self.n))

    @property
    def p_indices(self):
        off = 1 if self.kind == "cocontact" else 0
        return tuple(range(off + self.n, off + 2 * self.n))

    @property
    def x_indices(self):
        """Positions of the (q, p) block in chart order."""
        return self.q_indices + self.p_indices

    @property
    def t_index(self):
        if self.kind == "cosymplectic":
            return 2 * self.n
        if self.kind == "cocontact":
            return 0
        return None

    @property
    def z_index(self):
        if self.kind == "contact":
            return 2 * self.n
        if self.kind == "cocontact":
            return 2 * self.n + 1
        return None

    def check_state(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(
                f"state has shape {x.shape}, chart dimension is {self.dim}")
        return x

    def env(self, x):
        return dict(zip(self.chart_vars, self.check_state(x)))

    def parse(self, source):
        return expr.parse(source, self.chart_vars)


def canonical_eps(n):
    """eps = [[0, I], [-I, 0]]: the matrix of dq^i ∧ dp_i on the x-block."""
    eps = np.zeros((2 * n, 2 * n))
    eps[:n, n:] = np.eye(n)
    eps[n:, :n] = -np.eye(n)
    return eps


def canonical_eps_inv(n):
    """Inverse of canonical_eps: [[0, -I], [I, 0]]."""
    eps = np.zeros((2 * n, 2 * n))
    eps[:n, n:] = -np.eye(n)
    eps[n:, :n] = np.eye(n)
    return eps


def contract(two_form, X):
    """Interior product (X ⌟ omega) as a covector: omega(X, .)."""
    return np.asarray(two_form).T @ np.asarray(X)


@dataclass(frozen=True)
class StructureAtPoint:
    """Constant Darboux-form structure data at a point.

    two_form is the full chart-dimension matrix (the canonical eps block
    embedded at the x-indices).  theta/eta are one-form component
    vectors, reeb the single Reeb field where the geometry has one, and
    reeb_z/reeb_t the two cocontact Reeb fields.  Fields that do not
    apply are None.
    """

    two_form: np.ndarray
    theta: np.ndarray | None = None
    eta: np.ndarray | None = None
    reeb: np.ndarray | None = None
    reeb_z: np.ndarray | None = None
    reeb_t: np.ndarray | None = None


def full_two_form(g):
    """The canonical two-form (omega, Omega, or d theta) on the full chart."""
    d = g.dim
    M = np.zeros((d, d))
    xi = np.array(g.x_indices)
    M[np.ix_(xi, xi)] = canonical_eps(g.n)
    return M


def structure_at_point(g, x=None):
    """Structure tensors of g in Darboux form (point-independent except
    for theta, which carries the p-coordinates of x)."""
    d = g.dim
    M = full_two_form(g)
    if g.kind == "symplectic":
        return StructureAtPoint(two_form=M)
    if g.kind == "cosymplectic":
        eta = np.zeros(d)
        eta[g.t_index] = 1.0
        reeb = np.zeros(d)
        reeb[g.t_index] = 1.0
        return StructureAtPoint(two_form=M, eta=eta, reeb=reeb)
    # theta = dz - p_i dq^i needs the point for its p-components
    if x is None:
        raise ValueError(f"{g.kind} structure needs the evaluation point")
    x = g.check_state(x)
    theta = np.zeros(d)
    theta[g.z_index] = 1.0
    for qi, pi in zip(g.q_indices, g.p_indices):
        theta[qi] = -x[pi]
    if g.kind == "contact":
        reeb = np.zeros(d)
        reeb[g.z_index] = 1.0
        return StructureAtPoint(two_form=M, theta=theta, reeb=reeb)
    eta = np.zeros(d)
    eta[g.t_index] = 1.0
    reeb_z = np.zeros(d)
    reeb_z[g.z_index] = 1.0
    reeb_t = np.zeros(d)
    reeb_t[g.t_index] = 1.0
    return StructureAtPoint(two_form=M, theta=theta, eta=eta,
                            reeb_z=reeb_z, reeb_t=reeb_t)


# ---------------------------------------------------------------------------
# Vector fields


def hamiltonian_vf(g, H, x):
    """Components of the Hamiltonian vector field X_H at x.

    symplectic/cosymplectic: (dH/dp, -dH/dq), zero t-component;
    contact/cocontact: (dH/dp, -(dH/dq + p dH/dz), p.dH/dp - H), zero
    t-component.
    """
    x = g.check_state(x)
    grad = expr.gradient(H, x)
    X = np.zeros(g.dim)
    qi = list(g.q_indices)
    pi = list(g.p_indices)
    if g.kind in ("symplectic", "cosymplectic"):
        X[qi] = grad[pi]
        X[pi] = -grad[qi]
        return X
    zi = g.z_index
    Hval = expr.evaluate(H, g.env(x))
    X[qi] = grad[pi]
    X[pi] = -(grad[qi] + x[pi] * grad[zi])
    X[zi] = float(np.dot(x[pi], grad[pi])) - Hval
    return X


def evolution_vf(g, H, x):
    """X_H plus the unit time component for the time-dependent
    geometries; identical to hamiltonian_vf otherwise."""
    X = hamiltonian_vf(g, H, x)
    if g.kind in ("cosymplectic", "cocontact"):
        X[g.t_index] += 1.0
    return X


def hamiltonian_vf_jacobian(g, H, x):
    """(X_H, dX_H) with the Jacobian assembled from the gradient and
    Hessian of H; row = component, column = derivative direction."""
    x = g.check_state(x)
    Hval, grad, hess = expr.value_and_derivatives(H, x)
    d = g.dim
    X = np.zeros(d)
    dX = np.zeros((d, d))
    qi = list(g.q_indices)
    pi = list(g.p_indices)
    if g.kind in ("symplectic", "cosymplectic"):
        X[qi] = grad[pi]
        X[pi] = -grad[qi]
        dX[qi, :] = hess[pi, :]
        dX[pi, :] = -hess[qi, :]
        return X, dX
    zi = g.z_index
    X[qi] = grad[pi]
    X[pi] = -(grad[qi] + x[pi] * grad[zi])
    X[zi] = float(np.dot(x[pi], grad[pi])) - Hval
    dX[qi, :] = hess[pi, :]
    dX[pi, :] = -(hess[qi, :] + np.outer(x[pi], hess[zi, :]))
    dX[zi, :] = x[pi] @ hess[pi, :] - grad
    for pa in pi:
        dX[pa, pa] -= grad[zi]   # the -p_a dH/dz term differentiated in p_a
        dX[zi, pa] += grad[pa]   # the p_a dH/dp_a term differentiated in p_a
    return X, dX


def evolution_vf_jacobian(g, H, x):
    """(E_H, dE_H); the added time component is constant, so the
    Jacobian equals that of X_H."""
    X, dX = hamiltonian_vf_jacobian(g, H, x)
    if g.kind in ("cosymplectic", "cocontact"):
        X = X.copy()
        X[g.t_index] += 1.0
    return X, dX


def dynamical_vf(g, H, x):
    """The field whose integral curves are the physical trajectories:
    X_H for symplectic/contact, E_H for cosymplectic/cocontact."""
    if g.kind in ("cosymplectic", "cocontact"):
        return evolution_vf(g, H, x)
    return hamiltonian_vf(g, H, x)


def dynamical_vf_jacobian(g, H, x):
    if g.kind in ("cosymplectic", "cocontact"):
        return evolution_vf_jacobian(g, H, x)
    return hamiltonian_vf_jacobian(g, H, x)


# ---------------------------------------------------------------------------
# Brackets


def poisson_bracket(g, f, h, x):
    """Canonical-coordinate Poisson bracket sum_i (df/dq dh/dp -
    df/dp dh/dq); t-derivatives never enter."""
    if g.kind not in ("symplectic", "cosymplectic"):
        raise WrongGeometry(f"Poisson bracket undefined for {g.kind}")
    x = g.check_state(x)
    gf = expr.gradient(f, x)
    gh = expr.gradient(h, x)
    qi = list(g.q_indices)
    pi = list(g.p_indices)
    return float(np.dot(gf[qi], gh[pi]) - np.dot(gf[pi], gh[qi]))


def jacobi_bracket(g, f, h, x):
    """Contact/cocontact Jacobi bracket: the Poisson terms plus
    df/dz (p.dh/dp - h) - dh/dz (p.df/dp - f)."""
    if g.kind not in ("contact", "cocontact"):
        raise WrongGeometry(f"Jacobi bracket undefined for {g.kind}")
    x = g.check_state(x)
    env = g.env(x)
    fval = expr.evaluate(f, env)
    hval = expr.evaluate(h, env)
    gf = expr.gradient(f, x)
    gh = expr.gradient(h, x)
    qi = list(g.q_indices)
    pi = list(g.p_indices)
    zi = g.z_index
    p = x[pi]
    core = float(np.dot(gf[qi], gh[pi]) - np.dot(gf[pi], gh[qi]))
    return (core
            + gf[zi] * (float(np.dot(p, gh[pi])) - hval)
            - gh[zi] * (float(np.dot(p, gf[pi])) - fval))
