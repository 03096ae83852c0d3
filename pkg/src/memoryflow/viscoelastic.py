"""Spectral Galerkin viscoelastic wave model and its energy diagnostics.

The equation u_tt - Lap(u) - int k(s) Lap(u_t(t-s)) ds + f(u) = g with
Dirichlet conditions is discretized on the eigenpairs of -Lap; the default
domain is the interval (0, pi) with lambda_j = j^2 and sine eigenfunctions.
The nonlinearity is evaluated pseudospectrally on a 4J-point collocation
grid, which de-aliases cubic products exactly.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .evolution import (
    MemoryForce,
    ModelOperators,
    Trajectory,
    _interp_many,
    _rk4,
    integrate,
)
from .kernels import KernelError, flatness_rate, split_sets, truncated_kernel
from .spaces import ExtendedVector, HistoryField, ModalVector, StateField, norm_H

F_SELECTORS = ("zero", "cubic", "cubic_minus_linear")


class CollocationTransform:
    """Modal <-> pointwise transforms on the de-aliasing grid.

    Quadrature at x_m = pi*m/M, m = 1..M-1 with M = 4J is exact for products
    of sine modes up to degree 2M - 1, so projecting u^3 back onto the first
    J modes is exact for trigonometric polynomials.
    """

    def __init__(self, n_modes, oversample=4):
        M = oversample * n_modes
        m = np.arange(1, M)
        j = np.arange(1, n_modes + 1)
        x = math.pi * m / M
        self.sines = math.sqrt(2.0 / math.pi) * np.sin(np.outer(x, j))
        self.quad_w = math.pi / M
        self.x = x

    def to_physical(self, u):
        return self.sines @ u

    def to_modal(self, phys):
        return self.quad_w * (self.sines.T @ phys)


@dataclass
class GalerkinModel:
    """Eigenpairs, collocation transforms, nonlinearity, and forcing."""
    lambdas: np.ndarray
    collocation: CollocationTransform
    f_spec: str
    beta: float
    g: np.ndarray
    f_growth_c: float

    @property
    def J(self):
        return self.lambdas.size


def make_model(J, f="cubic", beta=0.0, g=None, lambdas=None):
    """Build a model on (0, pi) (lambda_j = j^2) or on given eigenvalues.

    Admissible nonlinearities: zero, cubic u^3, and u^3 - beta*u with
    beta < lambda_1 so the dissipation condition holds structurally.
    """
    lam = np.arange(1, J + 1, dtype=float) ** 2 if lambdas is None \
        else np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lam) < 0) or lam[0] <= 0:
        raise ValueError("eigenvalues must be positive and nondecreasing")
    if f not in F_SELECTORS:
        raise ValueError("unknown nonlinearity %r" % f)
    if f == "cubic_minus_linear" and not beta < lam[0]:
        raise ValueError("beta must be below the first eigenvalue")
    if f != "cubic_minus_linear":
        beta = 0.0
    g_arr = np.zeros(lam.size) if g is None else np.asarray(g, dtype=float)
    if g_arr.shape != lam.shape:
        raise ValueError("g must supply one coefficient per mode")
    growth = 0.0 if f == "zero" else 6.0
    return GalerkinModel(lambdas=lam, collocation=CollocationTransform(lam.size),
                         f_spec=f, beta=float(beta), g=g_arr, f_growth_c=growth)


def f_modal(model, u):
    """Modal coefficients of f(u) by de-aliased collocation."""
    if model.f_spec == "zero":
        return np.zeros_like(u)
    phys = model.collocation.to_physical(u)
    out = model.collocation.to_modal(phys ** 3)
    if model.f_spec == "cubic_minus_linear":
        out = out - model.beta * u
    return out


def assemble(model, kernel):
    """Model operators for the memory systems; checks kernel admissibility.

    The simulated model requires an absolutely continuous kernel (no jumps)
    whose density is strictly decreasing almost everywhere.
    """
    if kernel.has_jumps:
        raise KernelError("viscoelastic model requires a jump-free kernel")
    if flatness_rate(kernel) > 0.0:
        raise KernelError("viscoelastic model requires mu' < 0 a.e. "
                          "(kernel has flat zones)")
    lam = model.lambdas
    g = model.g
    if model.f_spec == "zero":
        def B(u, v, F):
            return v, -lam * u - F + g
    else:
        def B(u, v, F):
            return v, -lam * u - F - f_modal(model, u) + g
    return ModelOperators(
        lambdas=lam,
        apply_A=lambda u, v: lam * v,
        apply_B_force=B,
        a_primitive=lambda u, v: lam * u,
        label="viscoelastic")


# ---------------------------------------------------------------------------
# energy functionals
# ---------------------------------------------------------------------------

def sigma_state_norm(z, sigma):
    """Extended norm at real regularity index sigma in [0, 1]."""
    lam = z.u.lambdas
    part_u = np.sum(lam ** (sigma + 1) * z.u.coeffs ** 2)
    part_v = np.sum(lam ** sigma * z.v.coeffs ** 2)
    mem = z.memory
    part_m = np.sum(mem.weights * (mem.values ** 2 @ lam ** (sigma - 1.0)))
    return float(np.sqrt(part_u + part_v + part_m))


def energy_sigma(z, sigma, model):
    """E_sigma: squared norms plus twice the pairing of f(u) - g with A^sigma u."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    lam = model.lambdas
    u = z.u.coeffs
    pairing = float(np.sum((f_modal(model, u) - model.g) * lam ** sigma * u))
    return sigma_state_norm(z, sigma) ** 2 + 2.0 * pairing


def dissipation_rhs(z, sigma, kernel):
    """Grid value of int mu'(s) ||eta(s)||^2_{sigma-1} ds (nonpositive)."""
    mem = z.memory
    mup = np.asarray(kernel.mu_prime(mem.nodes), dtype=float)
    lamw = mem.lambdas ** (sigma - 1.0)
    return float(np.sum(mup * (mem.values ** 2 @ lamw)) * mem.ds)


def phi_functional(z, sigma, nu_small, delta_split, model, kernel):
    """Three-term auxiliary functional used to reconstruct the energy.

    Term 1 pairs v against the history through the truncated kernel, term 2
    is (1 - 2 nu) <v, u>_sigma, term 3 integrates the forward mass of the
    non-dissipative set against ||eta - A u||^2_{sigma-1}.
    """
    mem = z.memory
    if not isinstance(mem, HistoryField):
        raise ValueError("phi functional needs a history-type state")
    lam = model.lambdas
    u, v = z.u.coeffs, z.v.coeffs
    s_nu, mu_nu = truncated_kernel(kernel, nu_small)
    lamw = lam ** (sigma - 1.0)

    mu_nu_vals = np.asarray(mu_nu(mem.nodes), dtype=float)
    t1 = -float(np.sum(mu_nu_vals * (mem.values @ (lamw * v)))) * mem.ds

    t2 = (1.0 - 2.0 * nu_small) * float(np.sum(lam ** sigma * v * u))

    p_mask, _ = split_sets(kernel, delta_split, mem.nodes)
    mu_p = np.asarray(kernel.mu(mem.nodes), dtype=float) * p_mask
    # forward cumulative mass of P from each node (its own cell counted half)
    kappa = (np.cumsum((mu_p * mem.ds)[::-1])[::-1] - 0.5 * mu_p * mem.ds)
    diff = mem.values - (lam * u)[None, :]
    t3 = float(np.sum(kappa * (diff ** 2 @ lamw))) * mem.ds
    return t1 + t2 + t3


def phi_control_ratio(z, sigma, nu_small, delta_split, model, kernel):
    """Observed constant in |Phi| <= C * ||state||^2."""
    denom = sigma_state_norm(z, sigma) ** 2
    if denom == 0.0:
        return 0.0
    return abs(phi_functional(z, sigma, nu_small, delta_split, model, kernel)) / denom


def gamma_functional(z, sigma, eps, nu_small, delta_split, model, kernel):
    """E_sigma + eps * Phi."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    e = energy_sigma(z, sigma, model)
    if eps == 0.0:
        return e
    return e + eps * phi_functional(z, sigma, nu_small, delta_split, model, kernel)


def dissipation_integral_probe(traj, eps_level):
    """sup over windows [tau, t] of int ||u_t|| dy - eps*(t - tau).

    A finite value supports the averaged-dissipation bound; zero for
    trajectories at rest.
    """
    speed = np.sqrt(np.sum(traj.v_snaps ** 2, axis=1))
    dt = traj.dt
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * dt)])
    drift = cum - eps_level * traj.times
    running_min = np.minimum.accumulate(drift)
    return float(np.max(drift - running_min))


# ---------------------------------------------------------------------------
# trajectory difference decomposition
# ---------------------------------------------------------------------------

@dataclass
class LKSplitResult:
    l_traj: Trajectory
    k_traj: Trajectory
    d_traj: Trajectory
    base1: Trajectory
    base2: Trajectory
    residual_rel: np.ndarray          # per step, relative to the state scale
    base_gap_rel: float               # D versus literal difference of bases
    degenerate: bool


def lk_split(z1, z2, model, kernel, t_end, dt, *, window=None):
    """Decompose the difference of two runs into linear and forced parts.

    Five systems advance in lockstep: the two nonlinear bases, the
    difference system D driven by the recorded stage values of
    f(u1) - f(u2), the homogeneous linear part L with data z1 - z2, and the
    forced part K with zero data.  D, L and K share one affine code path and
    the same forcing arrays, so L + K = D up to roundoff, which the
    residual series records relative to the base state scale.
    """
    lam = model.lambdas
    J = lam.size
    g = model.g
    n_steps = int(round(t_end / dt))
    window = kernel.s_max if window is None else window

    d0u = z1.u.coeffs - z2.u.coeffs
    d0v = z1.v.coeffs - z2.v.coeffs
    mem_d = z1.memory - z2.memory
    degenerate = bool(np.max(np.abs(d0u)) == 0.0 and np.max(np.abs(d0v)) == 0.0
                      and not np.any(mem_d.values))

    def B_base(u, v, F):
        return v, -lam * u - F - f_modal(model, u) + g

    def B_lin(u, v, F):
        return v, -lam * u - F

    names = ("b1", "b2", "d", "l", "k")
    U = {q: np.empty((n_steps + 1, J)) for q in names}
    V = {q: np.empty((n_steps + 1, J)) for q in names}
    P = {q: np.empty((n_steps + 1, J)) for q in names}
    U["b1"][0], V["b1"][0] = z1.u.coeffs, z1.v.coeffs
    U["b2"][0], V["b2"][0] = z2.u.coeffs, z2.v.coeffs
    U["d"][0], V["d"][0] = d0u, d0v
    U["l"][0], V["l"][0] = d0u.copy(), d0v.copy()
    U["k"][0], V["k"][0] = np.zeros(J), np.zeros(J)
    for q in names:
        P[q][0] = lam * U[q][0]

    mems = {"b1": z1.memory, "b2": z2.memory, "d": mem_d, "l": mem_d,
            "k": HistoryField.zeros(kernel, lam)}
    mf = {}
    for q in names:
        mf[q] = MemoryForce(kernel, "history", dt, n_steps, window)
        mf[q].set_initial_memory(mems[q])

    residual = np.zeros(n_steps + 1)
    scale0 = max(norm_H(z1, 0), norm_H(z2, 0), 1e-30)

    def stage_sources(st1, st2):
        return tuple(f_modal(model, u1) - f_modal(model, u2)
                     for (u1, _), (u2, _) in zip(st1, st2))

    for n in range(n_steps):
        F0 = {q: mf[q].history_force(n, P[q]) for q in names}
        # predictor: frozen forces, base stages drive the difference forcing
        u1s, v1s, st1 = _rk4(U["b1"][n], V["b1"][n], B_base, dt, F0["b1"], F0["b1"])
        u2s, v2s, st2 = _rk4(U["b2"][n], V["b2"][n], B_base, dt, F0["b2"], F0["b2"])
        r_pred = stage_sources(st1, st2)
        neg_r_pred = tuple(-r for r in r_pred)
        uds, vds, _ = _rk4(U["d"][n], V["d"][n], B_lin, dt, F0["d"], F0["d"],
                           neg_r_pred)
        uls, vls, _ = _rk4(U["l"][n], V["l"][n], B_lin, dt, F0["l"], F0["l"])
        uks, vks, _ = _rk4(U["k"][n], V["k"][n], B_lin, dt, F0["k"], F0["k"],
                           neg_r_pred)
        prov = {"b1": (u1s, v1s), "b2": (u2s, v2s), "d": (uds, vds),
                "l": (uls, vls), "k": (uks, vks)}
        for q in names:
            U[q][n + 1], V[q][n + 1] = prov[q]
            P[q][n + 1] = lam * U[q][n + 1]
        F1 = {q: mf[q].history_force(n + 1, P[q]) for q in names}
        # corrector: forces linear in time, fresh base stages, same r arrays
        u1c, v1c, st1c = _rk4(U["b1"][n], V["b1"][n], B_base, dt, F0["b1"], F1["b1"])
        u2c, v2c, st2c = _rk4(U["b2"][n], V["b2"][n], B_base, dt, F0["b2"], F1["b2"])
        r_corr = stage_sources(st1c, st2c)
        neg_r_corr = tuple(-r for r in r_corr)
        udc, vdc, _ = _rk4(U["d"][n], V["d"][n], B_lin, dt, F0["d"], F1["d"],
                           neg_r_corr)
        ulc, vlc, _ = _rk4(U["l"][n], V["l"][n], B_lin, dt, F0["l"], F1["l"])
        ukc, vkc, _ = _rk4(U["k"][n], V["k"][n], B_lin, dt, F0["k"], F1["k"],
                           neg_r_corr)
        final = {"b1": (u1c, v1c), "b2": (u2c, v2c), "d": (udc, vdc),
                 "l": (ulc, vlc), "k": (ukc, vkc)}
        for q in names:
            U[q][n + 1], V[q][n + 1] = final[q]
            P[q][n + 1] = lam * U[q][n + 1]
        gap_u = U["l"][n + 1] + U["k"][n + 1] - U["d"][n + 1]
        gap_v = V["l"][n + 1] + V["k"][n + 1] - V["d"][n + 1]
        num = math.sqrt(float(np.sum(lam * gap_u ** 2) + np.sum(gap_v ** 2)))
        sc = max(scale0,
                 math.sqrt(float(np.sum(lam * U["b1"][n + 1] ** 2)
                                 + np.sum(V["b1"][n + 1] ** 2))))
        residual[n + 1] = num / sc

    times = np.arange(n_steps + 1) * dt

    def as_traj(q, mem):
        A = V[q] * lam[None, :]
        return Trajectory(times=times, u_snaps=U[q], v_snaps=V[q], a_prim=P[q],
                          a_vals=A, force_snaps=np.zeros_like(U[q]),
                          initial_memory=mem, window=window,
                          framework="history", dt=dt,
                          kernel_id=kernel.kernel_id, lambdas=lam)

    d_traj = as_traj("d", mem_d)
    base_gap = float(np.max(np.abs(U["d"] - (U["b1"] - U["b2"]))))
    return LKSplitResult(
        l_traj=as_traj("l", mem_d.copy()),
        k_traj=as_traj("k", HistoryField.zeros(kernel, lam)),
        d_traj=d_traj,
        base1=as_traj("b1", z1.memory), base2=as_traj("b2", z2.memory),
        residual_rel=residual, base_gap_rel=base_gap / scale0,
        degenerate=degenerate)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class ConditionProbeReport:
    sup_norm: float
    t_at_sup: float
    times: np.ndarray = field(repr=False)
    series: np.ndarray = field(repr=False)


def condition_asso_probe(traj, kernel, n_samples=60):
    """sup over time of the extended norm of (x(t), psi^t).

    psi^t(s) = A u(t) - A u((t-s)+) is assembled from stored snapshots; its
    component norm is ||u(t) - u((t-s)+)||_1.
    """
    lam = traj.lambdas
    nodes = kernel.grid
    wts = np.asarray(kernel.mu(nodes), dtype=float) * kernel.ds
    ts = np.unique(np.round(np.linspace(0.0, traj.times[-1], n_samples)
                            / traj.dt) * traj.dt)
    series = np.empty(ts.size)
    for i, t in enumerate(ts):
        idx = traj.index_of(t)
        u_t = traj.u_snaps[idx]
        past = _interp_many(traj.u_snaps, np.maximum(t - nodes, 0.0) / traj.dt)
        diff = u_t[None, :] - past
        psi_sq = float(np.sum(wts * (diff ** 2 @ lam)))
        x_sq = float(np.sum(lam * u_t ** 2) + np.sum(traj.v_snaps[idx] ** 2))
        series[i] = math.sqrt(x_sq + psi_sq)
    i_max = int(np.argmax(series))
    return ConditionProbeReport(float(series[i_max]), float(ts[i_max]), ts, series)


def draw_random_state(model, kernel, radius, space, rng, framework="history"):
    """Random modal data with lambda^{-1} spectral decay, rescaled to a ball.

    Memory starts empty; `space` picks the norm (H0 or H1) that the radius
    refers to.
    """
    lam = model.lambdas
    u = rng.standard_normal(lam.size) / lam
    v = rng.standard_normal(lam.size) / lam
    mem = HistoryField.zeros(kernel, lam) if framework == "history" \
        else StateField.zeros(kernel, lam)
    z = ExtendedVector(ModalVector(u, lam), ModalVector(v, lam), mem)
    iota = {"H0": 0, "H1": 1}[space]
    nz = norm_H(z, iota)
    if nz > 0:
        z.u.coeffs *= radius / nz
        z.v.coeffs *= radius / nz
    return z


@dataclass
class HypothesisProbeReport:
    radii: tuple
    plateau_h1: dict                  # radius -> plateau of the H1 norm
    accel_sup: dict                   # radius -> sup_t ||u_tt||
    identity_gap: float               # max |  ||A v||_{-1} - ||v||_1  |
    sigma_plateaus: dict              # sigma -> plateau at the largest radius
    plateau_spread: float             # max/min - 1 across radii


def hypothesis_probe_suite(model, kernel, radii, *, t_end=30.0, dt=2e-3,
                           ensemble=2, seed=0, window=None):
    """Empirical boundedness probes over ensembles of ball data.

    Reports the late-time plateau of the H1 norm per radius, the sup of the
    acceleration read off the equation, the exact bound ||A v||_{-1} =
    ||v||_1 on random data, and sigma-indexed plateaus for the bootstrap
    regularity ladder.
    """
    ops = assemble(model, kernel)
    lam = model.lambdas
    rng = np.random.default_rng(seed)
    # (iii): definitional identity on random pairs
    gap = 0.0
    for _ in range(20):
        v = rng.standard_normal(lam.size)
        lhs = math.sqrt(float(np.sum(lam ** (-1.0) * (lam * v) ** 2)))
        rhs = math.sqrt(float(np.sum(lam * v ** 2)))
        gap = max(gap, abs(lhs - rhs))

    plateau_h1 = {}
    accel_sup = {}
    sigma_plateaus = {}
    for radius in radii:
        h1_tails = []
        acc_vals = []
        for e in range(ensemble):
            z0 = draw_random_state(model, kernel, radius, "H1",
                                   np.random.default_rng([seed, int(radius * 1000), e]))
            traj = integrate(z0, ops, kernel, "history", dt, t_end, window=window)
            ts = traj.times[::max(1, traj.n_steps // 60)]
            tail = ts[ts >= (2.0 / 3.0) * t_end]
            vals = [norm_H(traj.state_at(t, kernel), 1) for t in tail]
            h1_tails.extend(vals)
            fu = np.array([f_modal(model, traj.u_snaps[i])
                           for i in range(0, traj.n_steps + 1,
                                          max(1, traj.n_steps // 400))])
            idxs = np.arange(0, traj.n_steps + 1, max(1, traj.n_steps // 400))
            acc = -(lam * traj.u_snaps[idxs]) - traj.force_snaps[idxs] - fu \
                + model.g[None, :]
            acc_vals.append(float(np.max(np.sqrt(np.sum(acc ** 2, axis=1)))))
            if radius == max(radii) and e == 0:
                for sigma in (0.0, 1.0 / 3.0, 1.0):
                    sig_vals = [sigma_state_norm(traj.state_at(t, kernel), sigma)
                                for t in tail]
                    sigma_plateaus[sigma] = float(np.median(sig_vals))
        plateau_h1[radius] = float(np.median(h1_tails))
        accel_sup[radius] = max(acc_vals)
    vals = list(plateau_h1.values())
    spread = max(vals) / min(vals) - 1.0 if min(vals) > 0 else math.inf
    return HypothesisProbeReport(tuple(radii), plateau_h1, accel_sup, gap,
                                 sigma_plateaus, spread)


# ---------------------------------------------------------------------------
# model configuration files
# ---------------------------------------------------------------------------

def load_g_csv(path, J):
    data = np.genfromtxt(path, delimiter=",", names=True)
    g = np.zeros(J)
    modes = np.atleast_1d(data["mode"]).astype(int)
    coeffs = np.atleast_1d(data["coeff"])
    for m, c in zip(modes, coeffs):
        if 1 <= m <= J:
            g[m - 1] = c
    return g


def load_model_file(path):
    """Model config: {J, domain, f, g, kernel}; returns (model, kernel_path)."""
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError("parse error in %s at line %d: %s"
                             % (path, exc.lineno, exc.msg)) from exc
    J = int(spec["J"])
    domain = spec.get("domain", "interval_pi")
    lambdas = None
    if isinstance(domain, dict) and "eigenfile" in domain:
        lambdas = np.loadtxt(domain["eigenfile"], ndmin=1)
    elif domain != "interval_pi":
        raise ValueError("unknown domain %r" % domain)
    f_spec = spec.get("f", "cubic")
    beta = 0.0
    if isinstance(f_spec, dict):
        beta = float(f_spec["cubic_minus_linear"])
        f_spec = "cubic_minus_linear"
    g_spec = spec.get("g", 0)
    if isinstance(g_spec, str):
        g = load_g_csv(g_spec, J)
    elif isinstance(g_spec, list):
        g = np.asarray(g_spec, dtype=float)
    else:
        g = None
    model = make_model(J, f=f_spec, beta=beta, g=g, lambdas=lambdas)
    return model, spec.get("kernel")
