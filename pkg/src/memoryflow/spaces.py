"""Discrete memory and state spaces over a Dirichlet eigenbasis.

All fields store modal coefficient rows on a uniform midpoint grid.  A
history field is weighted by mu(s)*ds, a state field by nu(tau)*dtau; the
component norm at regularity index iota uses the eigenvalue weight
lambda^(iota-1), matching position space H^(iota+1) x H^iota.
"""

import logging

import numpy as np

from .kernels import _as_array

logger = logging.getLogger(__name__)

GRID_EQ_TOL = 1e-12
STATE_TAIL_DROP = 1e-12     # relative weighted mass below which tail nodes are zeroed


class ModalVector:
    """Coefficients against Dirichlet eigenfunctions with their eigenvalues."""

    __slots__ = ("coeffs", "lambdas")

    def __init__(self, coeffs, lambdas):
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.lambdas = np.asarray(lambdas, dtype=float)
        if self.coeffs.shape != self.lambdas.shape:
            raise ValueError("coefficient and eigenvalue lists must match")
        if self.lambdas.size and self.lambdas[0] <= 0:
            raise ValueError("eigenvalues must be positive")

    @classmethod
    def zeros(cls, lambdas):
        lambdas = np.asarray(lambdas, dtype=float)
        return cls(np.zeros_like(lambdas), lambdas)

    def sigma_norm(self, sigma):
        """Weighted l2 norm (sum lambda^sigma a^2)^(1/2)."""
        return float(np.sqrt(np.sum(self.lambdas ** sigma * self.coeffs ** 2)))

    def copy(self):
        return ModalVector(self.coeffs.copy(), self.lambdas)

    def __add__(self, other):
        return ModalVector(self.coeffs + other.coeffs, self.lambdas)

    def __sub__(self, other):
        return ModalVector(self.coeffs - other.coeffs, self.lambdas)

    def __mul__(self, a):
        return ModalVector(self.coeffs * a, self.lambdas)

    __rmul__ = __mul__

    def __repr__(self):
        return "ModalVector(J=%d)" % self.coeffs.size


class _GridField:
    """Shared storage for weighted grid functions of modal vectors."""

    kind = "field"

    def __init__(self, nodes, values, weights, lambdas, ds):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.lambdas = np.asarray(lambdas, dtype=float)
        self.ds = float(ds)
        if self.values.shape != (self.nodes.size, self.lambdas.size):
            raise ValueError("values must be (n_nodes, n_modes)")
        if self.weights.shape != self.nodes.shape:
            raise ValueError("one weight per node")

    def norm(self, iota=0):
        """Field norm at regularity iota: component weight lambda^(iota-1)."""
        lamw = self.lambdas ** (iota - 1)
        return float(np.sqrt(np.sum(self.weights * (self.values ** 2 @ lamw))))

    def value_at(self, i):
        return ModalVector(self.values[i], self.lambdas)

    def copy(self):
        return type(self)(self.nodes, self.values.copy(), self.weights,
                          self.lambdas, self.ds)

    def _lin(self, other, a, b):
        if other.nodes.size != self.nodes.size or \
                np.max(np.abs(other.nodes - self.nodes)) > GRID_EQ_TOL:
            raise ValueError("grid mismatch")
        return type(self)(self.nodes, a * self.values + b * other.values,
                          self.weights, self.lambdas, self.ds)

    def __add__(self, other):
        return self._lin(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._lin(other, 1.0, -1.0)

    def __mul__(self, a):
        return type(self)(self.nodes, self.values * a, self.weights,
                          self.lambdas, self.ds)

    __rmul__ = __mul__


class HistoryField(_GridField):
    """Past-history variable eta(s) with node weights mu(s)*ds."""

    kind = "history"

    @classmethod
    def zeros(cls, kernel, lambdas):
        nodes = kernel.grid
        lambdas = np.asarray(lambdas, dtype=float)
        return cls(nodes, np.zeros((nodes.size, lambdas.size)),
                   kernel.mu_grid * kernel.ds, lambdas, kernel.ds)

    @classmethod
    def from_profile(cls, kernel, lambdas, profile):
        """Sample profile(s) -> (J,) row (or scalar for J=1) on the grid."""
        out = cls.zeros(kernel, lambdas)
        for i, s in enumerate(out.nodes):
            out.values[i] = profile(s)
        return out


class StateField(_GridField):
    """Minimal-state variable xi(tau) with node weights nu(tau)*dtau.

    nu = 1/mu grows without bound, so far-tail nodes whose cumulative
    weighted mass falls below STATE_TAIL_DROP of the total are zeroed.
    """

    kind = "state"

    def __init__(self, nodes, values, weights, lambdas, ds, clamp=True):
        super().__init__(nodes, values, weights, lambdas, ds)
        if clamp:
            self._clamp_tail()

    def _clamp_tail(self):
        lamw = self.lambdas ** (-1.0)
        contrib = self.weights * (self.values ** 2 @ lamw)
        total = float(np.sum(contrib))
        if total <= 0:
            return
        tail = np.cumsum(contrib[::-1])[::-1]
        drop = tail / total < STATE_TAIL_DROP
        if np.any(drop & (np.abs(self.values).sum(axis=1) > 0)):
            dropped = float(tail[np.argmax(drop)] / total)
            if dropped > 1e-9:
                logger.warning("state field tail clamped (%.3g of weighted mass)",
                               dropped)
            self.values[drop] = 0.0

    @classmethod
    def zeros(cls, kernel, lambdas):
        nodes = kernel.grid
        lambdas = np.asarray(lambdas, dtype=float)
        return cls(nodes, np.zeros((nodes.size, lambdas.size)),
                   kernel.nu(nodes) * kernel.ds, lambdas, kernel.ds)


class ExtendedVector:
    """(u, v, memory) with memory either a history or a state field."""

    __slots__ = ("u", "v", "memory")

    def __init__(self, u, v, memory):
        if u.coeffs.shape != v.coeffs.shape:
            raise ValueError("mismatched modal dimensions")
        if memory.lambdas.shape != u.lambdas.shape:
            raise ValueError("memory field must share the eigenvalue list")
        self.u = u
        self.v = v
        self.memory = memory

    def copy(self):
        return ExtendedVector(self.u.copy(), self.v.copy(), self.memory.copy())

    def __sub__(self, other):
        return ExtendedVector(self.u - other.u, self.v - other.v,
                              self.memory - other.memory)

    def __add__(self, other):
        return ExtendedVector(self.u + other.u, self.v + other.v,
                              self.memory + other.memory)


def norm_H(z, iota=0):
    """Extended norm: ||u||_{iota+1}^2 + ||v||_iota^2 + ||memory||^2."""
    if iota not in (0, 1):
        raise ValueError("iota must be 0 or 1")
    return float(np.sqrt(z.u.sigma_norm(iota + 1) ** 2
                         + z.v.sigma_norm(iota) ** 2
                         + z.memory.norm(iota) ** 2))


# ---------------------------------------------------------------------------
# tail function and compactness functional
# ---------------------------------------------------------------------------

def tail_function(eta, y):
    """Weighted mass of eta beyond y.

    Quadrature over the nodes at or beyond y, with the node cell straddling
    y counted by its covered fraction, so the value is the exact integral of
    the per-cell constant extension of mu(s)*||eta(s)||_{-1}^2.
    """
    if y < 1.0:
        raise ValueError("tail function is defined for y >= 1")
    lamw = eta.lambdas ** (-1.0)
    contrib = eta.weights * (eta.values ** 2 @ lamw)
    cover = np.clip((eta.nodes + 0.5 * eta.ds - y) / eta.ds, 0.0, 1.0)
    return float(np.sum(cover * contrib))


def s_derivative(eta):
    """Centered finite-difference derivative in s, one-sided at the ends."""
    vals = np.gradient(eta.values, eta.nodes, axis=0)
    return type(eta)(eta.nodes, vals, eta.weights, eta.lambdas, eta.ds)


def h_functional(eta, eta_prime=None):
    """||eta'||_{M0}^2 plus the sup over grid nodes y >= 1 of y * tail(y).

    eta_prime defaults to the finite-difference derivative of eta; if given
    it must live on the same grid.
    """
    if eta_prime is None:
        eta_prime = s_derivative(eta)
    if eta_prime.nodes.size != eta.nodes.size or \
            np.max(np.abs(eta_prime.nodes - eta.nodes)) > GRID_EQ_TOL:
        raise ValueError("grid mismatch")
    lamw = eta.lambdas ** (-1.0)
    contrib = eta.weights * (eta.values ** 2 @ lamw)
    # tails at every node: reverse cumulative sum, half of the node's own cell
    tails = np.cumsum(contrib[::-1])[::-1] - 0.5 * contrib
    sel = eta.nodes >= 1.0
    sup_term = float(np.max(eta.nodes[sel] * tails[sel])) if np.any(sel) else 0.0
    return eta_prime.norm(0) ** 2 + sup_term


# ---------------------------------------------------------------------------
# the history -> state bridge
# ---------------------------------------------------------------------------

def lambda_map(eta, kernel, tau_nodes=None):
    """Map a history field to the state field it induces.

    (L eta)(tau) = -int mu'(tau + s) eta(s) ds + sum over jumps s_n > tau
    of mu_n * eta(s_n - tau), with eta linearly interpolated off-grid.
    """
    s = eta.nodes
    ds = eta.ds
    tau = kernel.grid if tau_nodes is None else _as_array(tau_nodes)
    out = np.zeros((tau.size, eta.lambdas.size))
    block = max(1, int(2e6 // max(s.size, 1)))
    for lo in range(0, tau.size, block):
        tb = tau[lo:lo + block]
        w = -_as_array(kernel.mu_prime(tb[:, None] + s[None, :]))
        out[lo:lo + block] = (w @ eta.values) * ds
    for s_n, mu_n in kernel.jumps:
        sel = tau < s_n
        if not np.any(sel):
            continue
        pts = s_n - tau[sel]
        for j in range(eta.lambdas.size):
            out[sel, j] += mu_n * np.interp(pts, s, eta.values[:, j],
                                            left=0.0, right=0.0)
    weights = kernel.nu(tau) * ds
    return StateField(tau, out, weights, eta.lambdas, ds)


def lambda_map_pointwise(eta, kernel, tau):
    """Values of the mapped field at arbitrary tau points (no weights)."""
    tau = np.atleast_1d(_as_array(tau))
    w = -_as_array(kernel.mu_prime(tau[:, None] + eta.nodes[None, :]))
    out = (w @ eta.values) * eta.ds
    for s_n, mu_n in kernel.jumps:
        sel = tau < s_n
        pts = s_n - tau[sel]
        for j in range(eta.lambdas.size):
            out[sel, j] += mu_n * np.interp(pts, eta.nodes, eta.values[:, j],
                                            left=0.0, right=0.0)
    return out


def lambda_identity_residual(eta, kernel, tau):
    """|int mu(tau+s) eta(s) ds  -  int_tau^inf (L eta)(y) dy| per mode, l2.

    Left side by the field's midpoint rule; right side by composite Simpson
    in y with the same spacing, each integrand value being a fresh
    s-quadrature.  Used as a consistency diagnostic of the bridge map.
    """
    s = eta.nodes
    lhs = (_as_array(kernel.mu(tau + s)) @ eta.values) * eta.ds
    h = eta.ds
    y_max = kernel.s_max + tau
    n = int(np.ceil((y_max - tau) / h))
    if n % 2 == 1:
        n += 1
    y = tau + np.arange(n + 1) * h
    vals = lambda_map_pointwise(eta, kernel, y)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    rhs = (h / 3.0) * (w @ vals)
    return float(np.linalg.norm(lhs - rhs))


def big_l_map(z, kernel):
    """(x, eta) -> (x, L eta): history representation to state representation."""
    if not isinstance(z.memory, HistoryField):
        raise ValueError("memory must be a history field")
    return ExtendedVector(z.u.copy(), z.v.copy(), lambda_map(z.memory, kernel))


# ---------------------------------------------------------------------------
# translation semigroup
# ---------------------------------------------------------------------------

def right_translate(eta, t):
    """(R(t) eta)(s) = eta(s - t) for s > t, zero otherwise.

    Shifts by whole cells are exact; fractional shifts interpolate linearly.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0.0:
        return eta.copy()
    n_cells = t / eta.ds
    k = int(round(n_cells))
    vals = np.zeros_like(eta.values)
    if abs(n_cells - k) < 1e-9:
        if k < eta.nodes.size:
            vals[k:] = eta.values[:eta.nodes.size - k]
    else:
        pts = eta.nodes - t
        for j in range(eta.lambdas.size):
            vals[:, j] = np.interp(pts, eta.nodes, eta.values[:, j],
                                   left=0.0, right=0.0)
        vals[eta.nodes <= t] = 0.0
    return type(eta)(eta.nodes, vals, eta.weights, eta.lambdas, eta.ds)


# ---------------------------------------------------------------------------
# snapshot persistence
# ---------------------------------------------------------------------------

def save_field_csv(field, path, kernel_id="", sigma_convention="lambda^(iota-1)"):
    header = ["node"] + ["mode_%d" % (j + 1) for j in range(field.lambdas.size)]
    with open(path, "w") as fh:
        fh.write("# kind=%s kernel=%s ds=%.17g sigma=%s\n"
                 % (field.kind, kernel_id, field.ds, sigma_convention))
        fh.write("# lambdas=%s\n" % ",".join("%.17g" % l for l in field.lambdas))
        fh.write(",".join(header) + "\n")
        for i, s in enumerate(field.nodes):
            row = [("%.17g" % s)] + ["%.17g" % v for v in field.values[i]]
            fh.write(",".join(row) + "\n")


def load_field_csv(path, kernel):
    with open(path) as fh:
        meta = fh.readline().strip().lstrip("# ").split()
        lam_line = fh.readline().strip()
        fh.readline()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    kind = dict(item.split("=", 1) for item in meta)["kind"]
    lambdas = np.array([float(x) for x in lam_line.split("=", 1)[1].split(",")])
    nodes = data[:, 0]
    values = data[:, 1:]
    ds = float(nodes[1] - nodes[0]) if nodes.size > 1 else kernel.ds
    if kind == "history":
        return HistoryField(nodes, values, kernel.mu(nodes) * ds, lambdas, ds)
    return StateField(nodes, values, kernel.nu(nodes) * ds, lambdas, ds)
