"""Memory kernels: construction, admissibility checks, derived quantities.

A memory kernel is a nonincreasing summable weight mu on (0, inf) with unit
first moment.  From it we derive k(s) = integral of mu over [s, inf), the
convolution kernel actually seen by the equation, and nu = 1/mu, the weight
of the minimal-state space.  Kernels carry a decay certificate (theta,
delta_decay) asserting the exponential-domination inequality

    mu(t + s) <= theta * exp(-delta * t) * mu(s)   for all t, s > 0,

which is checked on a grid at construction time.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DS = 0.01
TAIL_FLOOR = 1e-10          # s_max chosen so theta*exp(-delta*s_max) < TAIL_FLOOR
ANALYTIC_RTOL = 1e-9        # inequality tolerance for closed-form kernels
TABULATED_RTOL = 1e-6       # looser: linear interpolation noise


class KernelError(ValueError):
    """Raised when a kernel fails an admissibility requirement."""


def _as_array(s):
    return np.asarray(s, dtype=float)


def default_s_max(theta, delta, ds=DEFAULT_DS, floor=TAIL_FLOOR):
    """Smallest grid-aligned cutoff with theta*exp(-delta*s_max) < floor."""
    s = math.log(theta / floor) / delta
    return math.ceil(s / ds) * ds


class MemoryKernel:
    """Nonincreasing summable kernel with decay certificate and jump list.

    Evaluators must be vectorized over numpy arrays.  `jumps` is an ordered
    list of (s_n, mu_n) with mu_n = mu(s_n-) - mu(s_n) > 0.  `k_exact` and
    `first_moment_exact`, when supplied by a constructor, bypass grid
    quadrature for the derived kernel and the unit-moment check.
    """

    def __init__(self, mu, mu_prime, *, theta, delta_decay, s_max,
                 ds=DEFAULT_DS, jumps=(), kernel_id="custom",
                 k_exact=None, first_moment_exact=None,
                 rtol=ANALYTIC_RTOL, validate=True):
        if theta < 1:
            raise KernelError("theta must be >= 1")
        if delta_decay <= 0:
            raise KernelError("delta_decay must be positive")
        if s_max <= 0 or ds <= 0:
            raise KernelError("s_max and ds must be positive")
        self.mu = mu
        self.mu_prime = mu_prime
        self.theta = float(theta)
        self.delta_decay = float(delta_decay)
        self.s_max = float(s_max)
        self.ds = float(ds)
        self.jumps = [(float(s), float(a)) for s, a in jumps]
        self.kernel_id = kernel_id
        self._k_exact = k_exact
        self._first_moment_exact = first_moment_exact
        self.rtol = rtol

        n = int(round(self.s_max / self.ds))
        self.grid = (np.arange(n) + 0.5) * self.ds   # midpoint nodes, never 0
        self.mu_grid = _as_array(self.mu(self.grid))
        if not np.all(np.isfinite(self.mu_grid)) or np.any(self.mu_grid < 0):
            raise KernelError("mu must be finite and nonnegative on the grid")
        self._cum_mass = np.cumsum(self.mu_grid) * self.ds

        if validate:
            report = admissibility_report(self)
            if not report.admissible:
                raise KernelError(
                    "inadmissible kernel %r: %s" % (kernel_id, "; ".join(report.failures)))

    # -- derived evaluators -------------------------------------------------

    def k(self, s):
        """k(s) = integral of mu over [s, s_max]; zero beyond the cutoff."""
        s = _as_array(s)
        if self._k_exact is not None:
            return np.where(s >= self.s_max, 0.0, self._k_exact(np.minimum(s, self.s_max)))
        # fallback: trapezoid on the cached grid
        total = self._cum_mass[-1]
        partial = np.interp(s, self.grid, self._cum_mass, left=0.0, right=total)
        return np.maximum(total - partial, 0.0)

    def nu(self, tau):
        """nu = 1/mu, set to zero wherever mu vanishes (finite delay case)."""
        tau = _as_array(tau)
        m = _as_array(self.mu(tau))
        with np.errstate(divide="ignore"):
            out = np.where(m > 0, 1.0 / np.where(m > 0, m, 1.0), 0.0)
        return out

    @property
    def mass(self):
        """Total mass of mu, i.e. k(0)."""
        return float(self.k(0.0))

    @property
    def first_moment(self):
        if self._first_moment_exact is not None:
            return float(self._first_moment_exact)
        return float(np.sum(self.grid * self.mu_grid) * self.ds)

    @property
    def d_const(self):
        """Smallest D on the grid with k(s) <= D*mu(s)."""
        pos = self.mu_grid > 0
        ratios = self.k(self.grid[pos]) / self.mu_grid[pos]
        return float(np.max(ratios))

    @property
    def has_jumps(self):
        return len(self.jumps) > 0

    def check_grid(self, max_nodes=400):
        """Strided copy of the quadrature grid, avoiding jump points."""
        stride = max(1, len(self.grid) // max_nodes)
        g = self.grid[::stride]
        for s_n, _ in self.jumps:
            g = g[np.abs(g - s_n) > 1e-9]
        return g

    def __repr__(self):
        return "MemoryKernel(%s)" % self.kernel_id


@dataclass
class DerivedKernels:
    """Derived evaluators bundled for convenience."""
    k: object
    nu: object
    d_const: float


def derived(kernel):
    return DerivedKernels(k=kernel.k, nu=kernel.nu, d_const=kernel.d_const)


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------

def make_exponential_kernel(delta, *, ds=DEFAULT_DS, s_max=None):
    """mu(s) = delta^2 exp(-delta s): unit first moment for every delta.

    k(s) = delta*exp(-delta*s), so delta = 1 also satisfies k(0) = 1.
    The domination certificate is (theta, delta) = (1, delta), with equality.
    """
    if delta <= 0:
        raise KernelError("delta must be positive")
    d = float(delta)
    if s_max is None:
        s_max = default_s_max(1.0, d, ds)
    return MemoryKernel(
        mu=lambda s: d * d * np.exp(-d * _as_array(s)),
        mu_prime=lambda s: -d ** 3 * np.exp(-d * _as_array(s)),
        theta=1.0, delta_decay=d, s_max=s_max, ds=ds,
        kernel_id="exponential(delta=%g)" % d,
        k_exact=lambda s: d * np.exp(-d * _as_array(s)),
        first_moment_exact=1.0)


# piecewise profile exp(-s) / exp(-1) / exp(1-s), normalized to unit moment
_FLAT_C = 1.0 / (1.0 + 2.5 * math.exp(-1.0))


def make_flatzone_kernel(*, ds=DEFAULT_DS, s_max=None):
    """Kernel with a flat plateau on [1, 2): decays, stalls, decays again.

    Fails the pointwise condition mu' + delta*mu <= 0 for every delta, yet
    satisfies exponential domination with theta = e, delta = 1 (sharp on the
    region s <= 1, t + s >= 2).
    """
    c = _FLAT_C

    def mu(s):
        s = _as_array(s)
        return c * np.where(s < 1.0, np.exp(-s),
                            np.where(s < 2.0, math.exp(-1.0), np.exp(1.0 - s)))

    def mu_prime(s):
        s = _as_array(s)
        return c * np.where(s < 1.0, -np.exp(-s),
                            np.where(s < 2.0, 0.0, -np.exp(1.0 - s)))

    def k_exact(s):
        s = _as_array(s)
        return c * np.where(
            s < 1.0, np.exp(-s) + math.exp(-1.0),
            np.where(s < 2.0, math.exp(-1.0) * (3.0 - s), np.exp(1.0 - s)))

    if s_max is None:
        s_max = default_s_max(math.e, 1.0, ds)
    return MemoryKernel(
        mu=mu, mu_prime=mu_prime, theta=math.e, delta_decay=1.0,
        s_max=s_max, ds=ds, kernel_id="flatzone",
        k_exact=k_exact, first_moment_exact=1.0)


def make_jump_exponential_kernel(delta, jump_spec, *, ds=DEFAULT_DS, s_max=None):
    """Exponential profile with downward jumps at given points.

    jump_spec is a sequence of (s_n, drop_n) with drop_n in (0, 1); the
    density is C * delta^2 * exp(-delta s) * prod_{s_n <= s} (1 - drop_n),
    with C fixed by the unit-first-moment requirement.  The certificate
    theta = 1 / prod(1 - drop_n) covers the worst jump crossing.
    """
    if delta <= 0:
        raise KernelError("delta must be positive")
    spec = sorted((float(s), float(r)) for s, r in jump_spec)
    if any(not 0.0 < r < 1.0 for _, r in spec) or any(s <= 0 for s, _ in spec):
        raise KernelError("jump drops must be in (0,1) at positive locations")
    d = float(delta)
    edges = [0.0] + [s for s, _ in spec] + [math.inf]
    levels = [1.0]
    for _, r in spec:
        levels.append(levels[-1] * (1.0 - r))

    def _moment_piece(a, b):
        # integral of s * d^2 * exp(-d s) over [a, b]
        def prim(x):
            if math.isinf(x):
                return 0.0
            return -(d * x + 1.0) * math.exp(-d * x)
        return prim(b) - prim(a)

    moment = sum(lv * _moment_piece(a, b)
                 for lv, a, b in zip(levels, edges[:-1], edges[1:]))
    c = 1.0 / moment

    edge_arr = np.array(edges[1:-1])
    level_arr = np.array(levels)

    def _level(s):
        idx = np.searchsorted(edge_arr, _as_array(s), side="right")
        return level_arr[idx]

    def mu(s):
        s = _as_array(s)
        return c * d * d * np.exp(-d * s) * _level(s)

    def mu_prime(s):
        s = _as_array(s)
        return -d * c * d * d * np.exp(-d * s) * _level(s)

    def k_exact(s):
        s = _as_array(s).ravel()
        out = np.zeros_like(s)
        for i, x in enumerate(s):
            acc = 0.0
            for lv, a, b in zip(levels, edges[:-1], edges[1:]):
                lo = max(a, x)
                if math.isinf(b):
                    if lo < 1e308:
                        acc += lv * d * math.exp(-d * lo)
                elif lo < b:
                    acc += lv * d * (math.exp(-d * lo) - math.exp(-d * b))
            out[i] = c * acc
        return out if out.size > 1 else float(out[0])

    jumps = []
    for (s_n, r), lv in zip(spec, levels[:-1]):
        jumps.append((s_n, c * d * d * math.exp(-d * s_n) * lv * r))
    theta = 1.0 / levels[-1]
    if s_max is None:
        s_max = default_s_max(theta, d, ds)
    return MemoryKernel(
        mu=mu, mu_prime=mu_prime, theta=theta, delta_decay=d,
        s_max=s_max, ds=ds, jumps=jumps,
        kernel_id="jump_exponential(delta=%g,n=%d)" % (d, len(spec)),
        k_exact=k_exact, first_moment_exact=1.0)


def make_tabulated_kernel(s_pts, mu_pts, *, theta, delta_decay,
                          ds=None, kernel_id="tabulated", normalize=False,
                          validate=True):
    """Piecewise-linear kernel from (s, mu) samples.

    The interpolant itself is the kernel: k and the first moment are exact
    integrals of the broken line, constant before the first sample and zero
    beyond the last.  With `normalize` the table is rescaled to unit first
    moment.
    """
    s_pts = np.asarray(s_pts, dtype=float)
    mu_pts = np.asarray(mu_pts, dtype=float).copy()
    if s_pts.ndim != 1 or s_pts.size < 2 or np.any(np.diff(s_pts) <= 0):
        raise KernelError("table abscissae must be strictly increasing")
    if np.any(mu_pts < 0):
        raise KernelError("table values must be nonnegative")
    s0, s_end = float(s_pts[0]), float(s_pts[-1])

    def _moment_of_table(sp, mp):
        # integral of s*mu(s) with mu the broken line, flat on [0, s0]
        total = mp[0] * s0 ** 2 / 2.0
        for a, b, fa, fb in zip(sp[:-1], sp[1:], mp[:-1], mp[1:]):
            h = b - a
            # linear f on [a,b]: int s*f(s) ds
            total += h * (fa * (2 * a + b) + fb * (a + 2 * b)) / 6.0
        return total

    if normalize:
        mu_pts /= _moment_of_table(s_pts, mu_pts)

    def mu(s):
        s = _as_array(s)
        return np.interp(s, s_pts, mu_pts, left=mu_pts[0], right=0.0) \
            * (s <= s_end)

    slopes = np.diff(mu_pts) / np.diff(s_pts)

    def mu_prime(s):
        s = _as_array(s)
        idx = np.clip(np.searchsorted(s_pts, s, side="right") - 1, 0, slopes.size - 1)
        out = slopes[idx]
        return np.where((s < s0) | (s >= s_end), 0.0, out)

    # exact tail integrals of the broken line at the breakpoints
    seg = 0.5 * (mu_pts[:-1] + mu_pts[1:]) * np.diff(s_pts)
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])

    def k_exact(s):
        s = _as_array(s)
        sc = np.clip(s, s0, s_end)
        idx = np.clip(np.searchsorted(s_pts, sc, side="right") - 1, 0, slopes.size - 1)
        a = s_pts[idx]
        fa = mu_pts[idx]
        x = sc - a
        partial = fa * x + 0.5 * slopes[idx] * x * x
        out = tail[idx] - partial
        out = np.where(s < s0, out[()] + (s0 - np.maximum(s, 0.0)) * mu_pts[0], out)
        return np.where(s >= s_end, 0.0, np.maximum(out, 0.0))

    fm = _moment_of_table(s_pts, mu_pts)
    return MemoryKernel(
        mu=mu, mu_prime=mu_prime, theta=theta, delta_decay=delta_decay,
        s_max=s_end, ds=ds if ds is not None else min(DEFAULT_DS, s_end / 100),
        kernel_id=kernel_id, k_exact=k_exact, first_moment_exact=fm,
        rtol=TABULATED_RTOL, validate=validate)


# ---------------------------------------------------------------------------
# checks and derived operations
# ---------------------------------------------------------------------------

def k_from_mu(kernel, s):
    """Tail integral of mu from s to the support cutoff (0 beyond it)."""
    s = _as_array(s)
    if np.any(s < 0):
        raise KernelError("s must be nonnegative")
    out = kernel.k(s)
    return float(out) if np.ndim(s) == 0 else out


@dataclass
class NecResult:
    passed: bool
    worst_ratio: float

    def __bool__(self):
        return self.passed


def check_nec(kernel, theta, delta, grid=None, rtol=None):
    """Grid scan of mu(t+s) <= theta*exp(-delta t)*mu(s)*(1+tol).

    Both t and s range over the grid; pairs with mu(s) = 0 are skipped.
    Returns the pass flag and the worst ratio mu(t+s)*e^{delta t}/(theta mu(s)).
    """
    if theta < 1:
        raise KernelError("theta must be >= 1")
    grid = kernel.check_grid() if grid is None else _as_array(grid)
    rtol = kernel.rtol if rtol is None else rtol
    mu_s = _as_array(kernel.mu(grid))
    pos = mu_s > 0
    if not np.any(pos):
        return NecResult(True, 0.0)
    s = grid[pos]
    mu_s = mu_s[pos]
    worst = 0.0
    # chunk over t to bound the pair matrix
    for t_block in np.array_split(grid, max(1, grid.size // 256)):
        lhs = _as_array(kernel.mu(t_block[:, None] + s[None, :]))
        ratio = lhs * np.exp(delta * t_block)[:, None] / (theta * mu_s[None, :])
        worst = max(worst, float(ratio.max()))
    return NecResult(worst <= 1.0 + rtol, worst)


def check_dafermos(kernel, delta, grid=None, rtol=None):
    """Pointwise check of mu'(s) + delta*mu(s) <= 0 on the grid."""
    if delta <= 0:
        raise KernelError("delta must be positive")
    grid = kernel.check_grid() if grid is None else _as_array(grid)
    rtol = kernel.rtol if rtol is None else rtol
    vals = _as_array(kernel.mu_prime(grid)) + delta * _as_array(kernel.mu(grid))
    tol = rtol * delta * np.maximum(_as_array(kernel.mu(grid)), 1.0)
    return bool(np.all(vals <= tol))


def flatness_rate(kernel):
    """mu-mass of the flat set {mu' = 0, mu > 0}, normalized by k(0)."""
    g = kernel.grid
    mu = kernel.mu_grid
    mup = _as_array(kernel.mu_prime(g))
    flat = (np.abs(mup) <= kernel.rtol * kernel.delta_decay * np.maximum(mu, 1e-300)) & (mu > 0)
    plateau_mass = float(np.sum(mu[flat]) * kernel.ds)
    k0 = kernel.mass
    if k0 <= 0:
        return 0.0
    return min(plateau_mass / k0, 1.0)


def truncated_kernel(kernel, nu_small):
    """Level the kernel below s_nu, the largest node with mass <= nu_small/2.

    Returns (s_nu, mu_nu) where mu_nu(s) = mu(max(s, s_nu)); the truncated
    kernel is bounded by mu(s_nu) near zero and untouched beyond s_nu.
    """
    if nu_small <= 0:
        raise KernelError("nu_small must be positive")
    if nu_small / 2.0 >= kernel.mass:
        raise KernelError("truncation exceeds kernel mass")
    # mass up to node i: full cells below plus half of the node cell
    cum_at_node = kernel._cum_mass - 0.5 * kernel.mu_grid * kernel.ds
    ok = np.nonzero(cum_at_node <= nu_small / 2.0)[0]
    s_nu = float(kernel.grid[ok[-1]]) if ok.size else float(kernel.grid[0])

    def mu_nu(s):
        return kernel.mu(np.maximum(_as_array(s), s_nu))

    return s_nu, mu_nu


def split_sets(kernel, delta_split, grid=None):
    """Complementary masks {mu' + delta*mu > 0} and {<= 0} over the grid."""
    if delta_split <= 0:
        raise KernelError("delta_split must be positive")
    grid = kernel.grid if grid is None else _as_array(grid)
    vals = _as_array(kernel.mu_prime(grid)) + delta_split * _as_array(kernel.mu(grid))
    p_mask = vals > 0
    return p_mask, ~p_mask


# ---------------------------------------------------------------------------
# admissibility
# ---------------------------------------------------------------------------

@dataclass
class KernelReport:
    kernel_id: str
    mass: float
    first_moment: float
    grid_moment: float
    monotone: bool
    moment_ok: bool
    jumps_ok: bool
    nec_ok: bool
    nec_worst: float
    theta: float
    delta_decay: float
    failures: list = field(default_factory=list)

    @property
    def admissible(self):
        return not self.failures


def admissibility_report(kernel):
    """Run the construction-time invariants and collect failures."""
    failures = []
    mu = kernel.mu_grid
    tol = kernel.rtol * np.maximum(mu[:-1], 1.0)
    monotone = bool(np.all(mu[1:] <= mu[:-1] + tol))
    if kernel.jumps:
        # exclude cells crossing a jump from the monotone scan: handled below
        monotone = True
        drop = np.diff(mu) > tol
        jump_cells = np.zeros(mu.size - 1, dtype=bool)
        for s_n, _ in kernel.jumps:
            jump_cells |= (kernel.grid[:-1] <= s_n) & (kernel.grid[1:] >= s_n)
        monotone = bool(np.all(~drop | jump_cells))
    if not monotone:
        failures.append("mu is not nonincreasing on the grid")

    fm = kernel.first_moment
    grid_fm = float(np.sum(kernel.grid * mu) * kernel.ds)
    moment_tol = 10 * kernel.rtol if kernel._first_moment_exact is not None \
        else max(100 * kernel.ds ** 2, TABULATED_RTOL)
    moment_ok = abs(fm - 1.0) <= moment_tol
    if not moment_ok:
        failures.append("first moment %.6g differs from 1" % fm)

    jumps_ok = True
    last = 0.0
    for s_n, a_n in kernel.jumps:
        if a_n <= 0 or s_n <= last:
            jumps_ok = False
        last = s_n
    if not jumps_ok:
        failures.append("jump list must have increasing points, positive amplitudes")

    nec = check_nec(kernel, kernel.theta, kernel.delta_decay)
    if not nec.passed:
        failures.append("decay certificate (theta=%g, delta=%g) fails: worst ratio %.6g"
                        % (kernel.theta, kernel.delta_decay, nec.worst_ratio))

    return KernelReport(
        kernel_id=kernel.kernel_id, mass=kernel.mass, first_moment=fm,
        grid_moment=grid_fm, monotone=monotone, moment_ok=moment_ok,
        jumps_ok=jumps_ok, nec_ok=nec.passed, nec_worst=nec.worst_ratio,
        theta=kernel.theta, delta_decay=kernel.delta_decay, failures=failures)


# ---------------------------------------------------------------------------
# kernel definition files
# ---------------------------------------------------------------------------

def load_kernel_file(path):
    """Build a kernel from a JSON definition.

    Fields: family (exponential | flatzone | tabulated), delta, theta,
    jumps [(s, drop), ...], table (CSV path with s, mu columns), ds, s_max.
    """
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise KernelError("parse error in %s at line %d: %s"
                              % (path, exc.lineno, exc.msg)) from exc
    family = spec.get("family")
    ds = spec.get("ds", DEFAULT_DS)
    if family == "exponential":
        jumps = spec.get("jumps") or []
        if jumps:
            return make_jump_exponential_kernel(
                spec["delta"], jumps, ds=ds, s_max=spec.get("s_max"))
        return make_exponential_kernel(spec["delta"], ds=ds, s_max=spec.get("s_max"))
    if family == "flatzone":
        return make_flatzone_kernel(ds=ds, s_max=spec.get("s_max"))
    if family == "tabulated":
        table_path = spec["table"]
        data = np.genfromtxt(table_path, delimiter=",", names=True)
        return make_tabulated_kernel(
            data["s"], data["mu"], theta=spec["theta"],
            delta_decay=spec["delta"], ds=spec.get("ds"),
            kernel_id=spec.get("id", "tabulated:%s" % table_path),
            normalize=spec.get("normalize", False))
    raise KernelError("unknown kernel family %r in %s" % (family, path))
