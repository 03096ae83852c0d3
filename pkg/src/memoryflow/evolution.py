"""Time integration of the coupled memory systems.

The (u, v) pair advances by a classical four-stage Runge-Kutta step with the
memory force interpolated linearly in time between its values at the step
endpoints; the endpoint at t+dt comes from a predictor pass.  The memory
variable itself is never stepped: it is reconstructed on demand from stored
snapshots through the explicit representation formulas, so the history
transport is exact and free of CFL constraints.  The coupled scheme is
second order overall.
"""

from dataclasses import dataclass, field

import numpy as np

from .spaces import (
    ExtendedVector,
    HistoryField,
    ModalVector,
    StateField,
    lambda_map,
    norm_H,
)

BLOWUP_GUARD = 1e8


class BlowUpError(RuntimeError):
    def __init__(self, t):
        super().__init__("blow-up detected at t=%.6g" % t)
        self.t = t


@dataclass
class ModelOperators:
    """Model callbacks for the abstract coupled system.

    apply_A(u, v) is the source feeding the memory variable; apply_B_force
    (u, v, memforce) returns the (du, dv) right-hand side given the memory
    force.  a_primitive, when the memory source is a time derivative (the
    viscoelastic case: source = d/dt(A u)), returns its primitive so history
    reconstruction can use exact differences instead of time quadrature.
    """
    lambdas: np.ndarray
    apply_A: object
    apply_B_force: object
    a_primitive: object = None
    label: str = "model"


@dataclass
class Trajectory:
    """Uniformly spaced snapshots plus the stored data propagators need."""
    times: np.ndarray
    u_snaps: np.ndarray            # (n+1, J)
    v_snaps: np.ndarray
    a_prim: np.ndarray             # primitive of the memory source per snapshot
    a_vals: np.ndarray             # memory source per snapshot
    force_snaps: np.ndarray        # memory force as used at each snapshot
    initial_memory: object
    window: float
    framework: str                 # "history" | "state"
    dt: float
    kernel_id: str
    lambdas: np.ndarray

    @property
    def n_steps(self):
        return self.times.size - 1

    def index_of(self, t):
        idx = int(round(t / self.dt))
        if idx < 0 or idx > self.n_steps or abs(idx * self.dt - t) > 1e-9 * max(1.0, t):
            raise ValueError("t=%g is off the time grid" % t)
        return idx

    def u_at(self, t):
        """Linear interpolation of u between snapshots (vector over modes)."""
        return _interp_rows(self.u_snaps, t / self.dt)

    def state_at(self, t, kernel):
        idx = self.index_of(t)
        if self.framework == "history":
            mem = reconstruct_eta(self, t, kernel)
        else:
            mem = reconstruct_xi(self, t, kernel)
        return ExtendedVector(ModalVector(self.u_snaps[idx].copy(), self.lambdas),
                              ModalVector(self.v_snaps[idx].copy(), self.lambdas),
                              mem)


def _interp_rows(arr, x):
    """Row interpolation of a snapshot array at fractional index x >= 0."""
    n = arr.shape[0] - 1
    if x <= 0:
        return arr[0]
    if x >= n:
        return arr[n]
    i = int(x)
    frac = x - i
    if frac == 0.0:
        return arr[i]
    return (1.0 - frac) * arr[i] + frac * arr[i + 1]


def _interp_many(arr, xs):
    """Vectorized row interpolation at fractional indices (m,) -> (m, J)."""
    n = arr.shape[0] - 1
    xs = np.clip(xs, 0.0, float(n))
    i = np.minimum(xs.astype(int), n - 1) if n > 0 else np.zeros_like(xs, dtype=int)
    frac = (xs - i)[:, None]
    return (1.0 - frac) * arr[i] + frac * arr[i + 1]


class MemoryForce:
    """Memory-force evaluation at snapshot times from stored arrays.

    History framework: F(t) = int_0^t mu(s) [P(t) - P(t-s)] ds
                              + k(t) [P(t) - P(0)] + int mu(t+s) eta0(s) ds,
    with P the primitive of the memory source, so constant trajectories give
    an exactly zero force regardless of quadrature error.  State framework:
    F(t) = int_t^inf xi0 + int_0^t k(s) a(t-s) ds.  Convolutions use the
    trapezoid rule on the snapshot spacing and honor the truncation window.
    """

    def __init__(self, kernel, framework, dt, n_max, window):
        self.kernel = kernel
        self.framework = framework
        self.dt = dt
        self.w_nodes = min(n_max, max(1, int(round(window / dt))))
        i = np.arange(n_max + 1)
        s = i * dt
        if framework == "history":
            mu = np.asarray(kernel.mu(s), dtype=float)
            mu[0] = 0.0 if not np.isfinite(mu[0]) else mu[0]
            self.mu_dt = mu
            self.mu_rev = mu[::-1].copy()     # contiguous for BLAS dots
            self.mu_cum = np.cumsum(mu) - mu[0]   # sum of mu_dt[1..i]
            self.k_dt = np.asarray(kernel.k(s), dtype=float)
        else:
            self.k_dt = np.asarray(kernel.k(s), dtype=float)
            self.k_rev = self.k_dt[::-1].copy()

    def set_initial_memory(self, mem):
        self._mem0 = mem
        self._mem0_zero = mem is None or not np.any(mem.values)

    def history_force(self, n, P):
        """Force at t = n*dt given primitive snapshots P[0..n]."""
        m = min(n, self.w_nodes)
        dt = self.dt
        if m > 0:
            w = self.mu_dt
            # sum_{i=1..m} mu_i P_{n-i} as a correlation with reversed weights,
            # keeping both operands contiguous
            L = self.mu_rev.size
            dot = self.mu_rev[L - 1 - m:L - 1] @ P[n - m:n]
            dot -= 0.5 * w[m] * P[n - m]
            wsum = self.mu_cum[m] - 0.5 * w[m]
            conv = dt * (wsum * P[n] - dot)
        else:
            conv = np.zeros_like(P[0])
        out = conv + self.k_dt[m] * (P[n] - P[n - m])
        if m == n and not self._mem0_zero:
            mem = self._mem0
            wts = np.asarray(self.kernel.mu(n * dt + mem.nodes), dtype=float)
            out = out + (wts @ mem.values) * mem.ds
        return out

    def state_force(self, n, a):
        """Force at t = n*dt given memory-source snapshots a[0..n]."""
        m = min(n, self.w_nodes)
        dt = self.dt
        if m > 0:
            w = self.k_dt
            L = self.k_rev.size
            dot = self.k_rev[L - 1 - m:L] @ a[n - m:n + 1]
            dot -= 0.5 * (w[0] * a[n] + w[m] * a[n - m])
            conv = dt * dot
        else:
            conv = np.zeros_like(a[0])
        if not self._mem0_zero:
            mem = self._mem0
            theta = n * dt
            cover = np.clip((mem.nodes + 0.5 * mem.ds - theta) / mem.ds, 0.0, 1.0)
            conv = conv + (cover @ mem.values) * mem.ds
        return conv

    def force(self, n, P, a):
        if self.framework == "history":
            return self.history_force(n, P)
        return self.state_force(n, a)


def _rk4(u, v, B, dt, F0, F1, src=None):
    """One RK4 pass with the memory force linear in time across the step.

    src, when given, holds four per-stage extra forcings added to dv.
    Returns the advanced pair and the per-stage (u, v) values for callers
    that need to re-evaluate nonlinear terms stage by stage.
    """
    Fm = 0.5 * (F0 + F1)
    stages_uv = []
    k1u, k1v = B(u, v, F0)
    k1v = k1v + src[0] if src is not None else k1v
    stages_uv.append((u, v))
    u2, v2 = u + 0.5 * dt * k1u, v + 0.5 * dt * k1v
    k2u, k2v = B(u2, v2, Fm)
    k2v = k2v + src[1] if src is not None else k2v
    stages_uv.append((u2, v2))
    u3, v3 = u + 0.5 * dt * k2u, v + 0.5 * dt * k2v
    k3u, k3v = B(u3, v3, Fm)
    k3v = k3v + src[2] if src is not None else k3v
    stages_uv.append((u3, v3))
    u4, v4 = u + dt * k3u, v + dt * k3v
    k4u, k4v = B(u4, v4, F1)
    k4v = k4v + src[3] if src is not None else k4v
    stages_uv.append((u4, v4))
    un = u + (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    vn = v + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return un, vn, stages_uv


def _check_state(u, v, t):
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise BlowUpError(t)
    if max(np.max(np.abs(u)), np.max(np.abs(v))) > BLOWUP_GUARD:
        raise BlowUpError(t)


def integrate(z0, ops, kernel, framework, dt, t_end, *, window=None, source=None):
    """Advance the coupled system from z0 to t_end; returns the trajectory.

    z0.memory must match the framework (history field or state field).  The
    truncation window defaults to the kernel support cutoff, which the decay
    certificate makes safe to 1e-10.
    """
    if framework not in ("history", "state"):
        raise ValueError("framework must be 'history' or 'state'")
    want = HistoryField if framework == "history" else StateField
    if not isinstance(z0.memory, want):
        raise ValueError("initial memory does not match framework %r" % framework)
    if dt <= 0 or t_end < dt:
        raise ValueError("need 0 < dt <= t_end")
    lam = ops.lambdas
    n_steps = int(round(t_end / dt))
    window = kernel.s_max if window is None else window

    U = np.empty((n_steps + 1, lam.size))
    V = np.empty_like(U)
    P = np.empty_like(U)
    A = np.empty_like(U)
    F = np.empty_like(U)
    U[0] = z0.u.coeffs
    V[0] = z0.v.coeffs
    prim = ops.a_primitive
    P[0] = prim(U[0], V[0]) if prim is not None else np.zeros(lam.size)
    A[0] = ops.apply_A(U[0], V[0])

    mf = MemoryForce(kernel, framework, dt, n_steps, window)
    mf.set_initial_memory(z0.memory)
    B = ops.apply_B_force

    for n in range(n_steps):
        t = n * dt
        F0 = mf.force(n, P, A)
        if source is not None:
            src0 = source(t)
            src1 = source(t + 0.5 * dt)
            src2 = source(t + dt)
            src_pred = (src0, src1, src1, src2)
        else:
            src_pred = None
        u_star, v_star, _ = _rk4(U[n], V[n], B, dt, F0, F0, src_pred)
        U[n + 1] = u_star
        V[n + 1] = v_star
        P[n + 1] = prim(u_star, v_star) if prim is not None else \
            P[n] + 0.5 * dt * (A[n] + ops.apply_A(u_star, v_star))
        A[n + 1] = ops.apply_A(u_star, v_star)
        F1 = mf.force(n + 1, P, A)
        un, vn, _ = _rk4(U[n], V[n], B, dt, F0, F1, src_pred)
        U[n + 1] = un
        V[n + 1] = vn
        P[n + 1] = prim(un, vn) if prim is not None else \
            P[n] + 0.5 * dt * (A[n] + ops.apply_A(un, vn))
        A[n + 1] = ops.apply_A(un, vn)
        F[n] = F0
        _check_state(un, vn, t + dt)
    F[n_steps] = mf.force(n_steps, P, A)

    return Trajectory(
        times=np.arange(n_steps + 1) * dt, u_snaps=U, v_snaps=V,
        a_prim=P, a_vals=A, force_snaps=F,
        initial_memory=z0.memory.copy(), window=window, framework=framework,
        dt=dt, kernel_id=kernel.kernel_id, lambdas=np.asarray(lam, dtype=float))


def step(traj, ops, kernel, framework, dt):
    """Append one snapshot to a trajectory; dt must equal its spacing."""
    if abs(dt - traj.dt) > 1e-12 * dt:
        raise ValueError("dt must equal the trajectory spacing")
    if framework != traj.framework:
        raise ValueError("framework mismatch")
    n = traj.n_steps
    ext = lambda arr: np.vstack([arr, np.empty((1, arr.shape[1]))])
    U, V, P, A, F = (ext(traj.u_snaps), ext(traj.v_snaps), ext(traj.a_prim),
                     ext(traj.a_vals), ext(traj.force_snaps))
    mf = MemoryForce(kernel, framework, dt, n + 1, traj.window)
    mf.set_initial_memory(traj.initial_memory)
    B = ops.apply_B_force
    prim = ops.a_primitive
    F0 = mf.force(n, P, A)
    u_star, v_star, _ = _rk4(U[n], V[n], B, dt, F0, F0)
    U[n + 1], V[n + 1] = u_star, v_star
    P[n + 1] = prim(u_star, v_star) if prim is not None else \
        P[n] + 0.5 * dt * (A[n] + ops.apply_A(u_star, v_star))
    A[n + 1] = ops.apply_A(u_star, v_star)
    F1 = mf.force(n + 1, P, A)
    un, vn, _ = _rk4(U[n], V[n], B, dt, F0, F1)
    U[n + 1], V[n + 1] = un, vn
    P[n + 1] = prim(un, vn) if prim is not None else \
        P[n] + 0.5 * dt * (A[n] + ops.apply_A(un, vn))
    A[n + 1] = ops.apply_A(un, vn)
    F[n] = F0
    F[n + 1] = mf.force(n + 1, P, A)
    _check_state(un, vn, (n + 1) * dt)
    return Trajectory(
        times=np.arange(n + 2) * dt, u_snaps=U, v_snaps=V, a_prim=P,
        a_vals=A, force_snaps=F, initial_memory=traj.initial_memory,
        window=traj.window, framework=framework, dt=dt,
        kernel_id=traj.kernel_id, lambdas=traj.lambdas)


# ---------------------------------------------------------------------------
# representation-formula propagators
# ---------------------------------------------------------------------------

def reconstruct_eta(traj, t, kernel):
    """History variable at time t, assembled from snapshots.

    eta^t(s) = P(t) - P(t-s) for s <= t (P the memory-source primitive,
    interpolated between snapshots) and the right-translated initial history
    plus P(t) - P(0) beyond.
    """
    idx = traj.index_of(t)
    nodes = kernel.grid
    eta0 = traj.initial_memory
    out = HistoryField.zeros(kernel, traj.lambdas)
    past = nodes <= t
    future = ~past
    if isinstance(eta0, HistoryField) and np.any(eta0.values) and np.any(future):
        # translated initial history, interpolated onto the evaluation grid
        pts = nodes[future] - t
        for j in range(traj.lambdas.size):
            out.values[future, j] = np.interp(pts, eta0.nodes, eta0.values[:, j],
                                              left=eta0.values[0, j], right=0.0)
    Pt = traj.a_prim[idx]
    out.values[past] = Pt[None, :] - _interp_many(traj.a_prim,
                                                  (t - nodes[past]) / traj.dt)
    out.values[future] += (Pt - traj.a_prim[0])[None, :]
    return out


def reconstruct_xi(traj, t, kernel):
    """State variable at time t: left-shifted xi0 plus the mu convolution."""
    idx = traj.index_of(t)
    if not isinstance(traj.initial_memory, StateField):
        raise ValueError("trajectory does not carry a state-type initial memory")
    xi0 = traj.initial_memory
    tau = kernel.grid
    J = traj.lambdas.size
    vals = np.zeros((tau.size, J))
    for j in range(J):
        vals[:, j] = np.interp(tau + t, xi0.nodes, xi0.values[:, j],
                               left=xi0.values[0, j], right=0.0)
    if idx > 0:
        dt = traj.dt
        a = traj.a_vals[:idx + 1]
        w_t = np.full(idx + 1, dt)
        w_t[0] = w_t[-1] = 0.5 * dt
        block = max(1, int(2e6 // (idx + 1)))
        a_rev = a[::-1]
        for lo in range(0, tau.size, block):
            tb = tau[lo:lo + block]
            muM = np.asarray(kernel.mu(tb[:, None] + (np.arange(idx + 1) * dt)[None, :]))
            vals[lo:lo + block] += (muM * w_t[None, :]) @ a_rev
    return StateField(tau, vals, kernel.nu(tau) * kernel.ds, traj.lambdas,
                      kernel.ds)


# ---------------------------------------------------------------------------
# diagnostics across the two frameworks
# ---------------------------------------------------------------------------

def sample_times(t_end, dt, n_samples):
    ts = np.linspace(0.0, t_end, n_samples + 1)[1:]
    return np.round(ts / dt) * dt


def norm_series(traj, kernel, ts, iota=0):
    """Extended norms along the trajectory at the given grid times."""
    return np.array([norm_H(traj.state_at(t, kernel), iota) for t in ts])


def intertwine_residual(z0, ops, kernel, t_end, dt, *, n_samples=8, window=None):
    """Max over sample times of the state-space gap between the two routes.

    Runs the history semigroup on z0 and the state semigroup on its bridge
    image, then compares bridging-after-evolving with evolving-after-bridging
    in the extended state norm.
    """
    traj_h = integrate(z0, ops, kernel, "history", dt, t_end, window=window)
    xi0 = lambda_map(z0.memory, kernel)
    z0_s = ExtendedVector(z0.u.copy(), z0.v.copy(), xi0)
    traj_s = integrate(z0_s, ops, kernel, "state", dt, t_end, window=window)
    worst = 0.0
    for t in sample_times(t_end, dt, n_samples):
        idx = traj_h.index_of(t)
        du = traj_h.u_snaps[idx] - traj_s.u_snaps[idx]
        dv = traj_h.v_snaps[idx] - traj_s.v_snaps[idx]
        eta_t = reconstruct_eta(traj_h, t, kernel)
        xi_via_l = lambda_map(eta_t, kernel)
        xi_t = reconstruct_xi(traj_s, t, kernel)
        dxi = xi_via_l - xi_t
        lam = traj_h.lambdas
        gap = float(np.sqrt(np.sum(lam * du ** 2) + np.sum(dv ** 2)
                            + dxi.norm(0) ** 2))
        worst = max(worst, gap)
    return worst


@dataclass
class GrowthFit:
    rate: float
    q: float
    degenerate: bool
    note: str = ""
    times: np.ndarray = field(default=None, repr=False)
    separations: np.ndarray = field(default=None, repr=False)


def holder_growth_probe(z1, z2, ops, kernel, framework, t_end, dt, *,
                        n_samples=25, window=None):
    """Fit log separation of two trajectories against time.

    Reports the least-squares slope and intercept; separations below the
    floating-point floor make the probe degenerate.
    """
    traj1 = integrate(z1, ops, kernel, framework, dt, t_end, window=window)
    traj2 = integrate(z2, ops, kernel, framework, dt, t_end, window=window)
    ts = sample_times(t_end, dt, n_samples)
    seps = np.empty(ts.size)
    for i, t in enumerate(ts):
        d = traj1.state_at(t, kernel) - traj2.state_at(t, kernel)
        seps[i] = norm_H(d, 0)
    if np.all(seps < 1e-14):
        return GrowthFit(0.0, 0.0, True, "indistinguishable", ts, seps)
    ok = seps > 1e-300
    coeffs = np.polyfit(ts[ok], np.log(seps[ok]), 1)
    return GrowthFit(float(coeffs[0]), float(np.exp(coeffs[1])), False, "",
                     ts, seps)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_trajectory_csv(traj, path):
    J = traj.lambdas.size
    cols = ["time"] + ["u_%d" % (j + 1) for j in range(J)] \
        + ["v_%d" % (j + 1) for j in range(J)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i, t in enumerate(traj.times):
            row = [t] + list(traj.u_snaps[i]) + list(traj.v_snaps[i])
            fh.write(",".join("%.17g" % x for x in row) + "\n")


def trajectory_metadata(traj, extra=None):
    meta = {
        "kernel": traj.kernel_id,
        "dt": traj.dt,
        "window": traj.window,
        "framework": traj.framework,
        "n_modes": int(traj.lambdas.size),
        "lambdas": [float(l) for l in traj.lambdas],
    }
    if extra:
        meta.update(extra)
    return meta
