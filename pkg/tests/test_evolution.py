import math

import numpy as np
import pytest
from scipy.linalg import expm

from memoryflow.kernels import make_exponential_kernel
from memoryflow.spaces import (
    ExtendedVector,
    HistoryField,
    ModalVector,
    StateField,
    lambda_map,
)
from memoryflow.evolution import (
    BlowUpError,
    ModelOperators,
    Trajectory,
    holder_growth_probe,
    integrate,
    intertwine_residual,
    reconstruct_eta,
    reconstruct_xi,
    save_trajectory_csv,
    step,
)


@pytest.fixture(scope="module")
def exp1():
    return make_exponential_kernel(1.0)


def linear_ops(lam):
    lam = np.asarray(lam, dtype=float)
    return ModelOperators(
        lambdas=lam,
        apply_A=lambda u, v: lam * v,
        apply_B_force=lambda u, v, F: (v, -lam * u - F),
        a_primitive=lambda u, v: lam * u,
    )


def single_mode_state(exp1, u0=1.0, v0=0.0):
    lam = np.array([1.0])
    return ExtendedVector(ModalVector(np.array([u0]), lam),
                          ModalVector(np.array([v0]), lam),
                          HistoryField.zeros(exp1, lam)), lam


def oracle_solution(u0, v0, lam, delta, times):
    """Single-mode reduced system (u, v, m) solved by matrix exponential."""
    M = np.array([[0.0, 1.0, 0.0],
                  [-lam, 0.0, -1.0],
                  [0.0, delta * lam, -delta]])
    dt = times[1] - times[0]
    E = expm(M * dt)
    y = np.array([u0, v0, 0.0])
    out = np.empty((times.size, 3))
    for i in range(times.size):
        out[i] = y
        y = E @ y
    return out


def test_zero_data_stays_zero(exp1):
    lam = np.array([1.0, 4.0])
    ops = linear_ops(lam)
    z0 = ExtendedVector(ModalVector.zeros(lam), ModalVector.zeros(lam),
                        HistoryField.zeros(exp1, lam))
    traj = integrate(z0, ops, exp1, "history", 1e-2, 1.0)
    assert np.all(traj.u_snaps == 0.0)
    assert np.all(traj.v_snaps == 0.0)


def test_single_mode_oracle(exp1):
    z0, lam = single_mode_state(exp1)
    ops = linear_ops(lam)
    dt = 2e-3
    traj = integrate(z0, ops, exp1, "history", dt, 4.0)
    oracle = oracle_solution(1.0, 0.0, 1.0, 1.0, traj.times)
    err = np.max(np.abs(traj.u_snaps[:, 0] - oracle[:, 0]))
    assert err < 5e-6


def test_convergence_order(exp1):
    z0, lam = single_mode_state(exp1)
    ops = linear_ops(lam)
    errs = []
    for dt in (8e-3, 4e-3):
        traj = integrate(z0, ops, exp1, "history", dt, 4.0)
        oracle = oracle_solution(1.0, 0.0, 1.0, 1.0, traj.times)
        errs.append(np.max(np.abs(traj.u_snaps[:, 0] - oracle[:, 0])))
    order = math.log2(errs[0] / errs[1])
    assert order > 1.8


def test_state_framework_oracle(exp1):
    lam = np.array([1.0])
    ops = linear_ops(lam)
    z0 = ExtendedVector(ModalVector(np.array([1.0]), lam),
                        ModalVector.zeros(lam), StateField.zeros(exp1, lam))
    dt = 2e-3
    traj = integrate(z0, ops, exp1, "state", dt, 4.0)
    oracle = oracle_solution(1.0, 0.0, 1.0, 1.0, traj.times)
    err = np.max(np.abs(traj.u_snaps[:, 0] - oracle[:, 0]))
    assert err < 5e-6


def test_framework_mismatch_rejected(exp1):
    z0, lam = single_mode_state(exp1)
    with pytest.raises(ValueError, match="framework"):
        integrate(z0, linear_ops(lam), exp1, "state", 1e-2, 1.0)


def test_step_matches_integrate(exp1):
    z0, lam = single_mode_state(exp1)
    ops = linear_ops(lam)
    full = integrate(z0, ops, exp1, "history", 1e-2, 0.1)
    traj = integrate(z0, ops, exp1, "history", 1e-2, 1e-2)
    for _ in range(9):
        traj = step(traj, ops, exp1, "history", 1e-2)
    assert np.allclose(traj.u_snaps, full.u_snaps, atol=1e-15)
    assert np.allclose(traj.v_snaps, full.v_snaps, atol=1e-15)


# -- history reconstruction ----------------------------------------------------

def test_reconstruct_eta_at_zero(exp1):
    lam = np.array([1.0])
    eta0 = HistoryField.from_profile(exp1, lam, lambda s: math.sin(s))
    z0 = ExtendedVector(ModalVector(np.array([0.3]), lam),
                        ModalVector.zeros(lam), eta0)
    traj = integrate(z0, linear_ops(lam), exp1, "history", 1e-2, 0.1)
    back = reconstruct_eta(traj, 0.0, exp1)
    assert np.allclose(back.values, eta0.values, atol=1e-14)


def test_reconstruct_eta_constant_trajectory(exp1):
    # f = 0, g = 0 with zero velocity and zero force: u frozen only if u = 0;
    # instead check the formula directly on a frozen snapshot array
    lam = np.array([1.0, 4.0])
    n = 20
    u = np.tile([0.7, -0.2], (n + 1, 1))
    traj = Trajectory(
        times=np.arange(n + 1) * 0.01, u_snaps=u, v_snaps=np.zeros_like(u),
        a_prim=u * lam, a_vals=np.zeros_like(u), force_snaps=np.zeros_like(u),
        initial_memory=HistoryField.zeros(exp1, lam), window=exp1.s_max,
        framework="history", dt=0.01, kernel_id=exp1.kernel_id, lambdas=lam)
    eta = reconstruct_eta(traj, 0.2, exp1)
    assert np.allclose(eta.values, 0.0, atol=1e-15)


def test_reconstruct_eta_upwind_transport_oracle(exp1):
    # independent method-of-lines check: first-order upwind on the same grid
    lam = np.array([1.0])
    ops = linear_ops(lam)
    z0, _ = single_mode_state(exp1, 1.0, 0.0)
    dt, t_end = 5e-3, 1.0
    traj = integrate(z0, ops, exp1, "history", dt, t_end)
    nodes = exp1.grid
    ds = exp1.ds
    eta = np.zeros(nodes.size)
    c = dt / ds
    assert c <= 1.0
    for n in range(traj.n_steps):
        src = traj.a_vals[n, 0]
        shifted = np.empty_like(eta)
        shifted[0] = eta[0] - c * (eta[0] - 0.0)
        shifted[1:] = eta[1:] - c * (eta[1:] - eta[:-1])
        eta = shifted + dt * src
    got = reconstruct_eta(traj, t_end, exp1).values[:, 0]
    sel = nodes < 5.0
    err = np.max(np.abs(got[sel] - eta[sel]))
    assert err < 10 * (dt + ds)


def test_reconstruct_eta_boundary_zero(exp1):
    z0, lam = single_mode_state(exp1)
    traj = integrate(z0, linear_ops(lam), exp1, "history", 1e-2, 2.0)
    eta = reconstruct_eta(traj, 2.0, exp1)
    # eta(0+) = 0 for bounded sources: first node value is O(ds)
    assert abs(eta.values[0, 0]) < 5 * exp1.ds


def test_representation_shift_consistency(exp1):
    # eta at t+h equals the translate of eta at t corrected by new increments
    z0, lam = single_mode_state(exp1, 0.8, 0.1)
    dt = 1e-2
    traj = integrate(z0, linear_ops(lam), exp1, "history", dt, 2.0)
    t, h = 1.0, 0.2
    eta_t = reconstruct_eta(traj, t, exp1)
    eta_th = reconstruct_eta(traj, t + h, exp1)
    from memoryflow.spaces import right_translate
    base = right_translate(eta_t, h)
    nodes = base.nodes
    Pt = traj.a_prim[traj.index_of(t)]
    Pth = traj.a_prim[traj.index_of(t + h)]
    base.values[nodes > h] += (Pth - Pt)[None, :]
    recent = nodes <= h
    from memoryflow.evolution import _interp_many
    base.values[recent] = Pth[None, :] - _interp_many(
        traj.a_prim, (t + h - nodes[recent]) / dt)
    assert np.allclose(base.values, eta_th.values, atol=1e-12)


# -- state reconstruction --------------------------------------------------------

def test_reconstruct_xi_at_zero(exp1):
    lam = np.array([1.0])
    xi0 = StateField.zeros(exp1, lam)
    xi0.values[:, 0] = np.asarray(exp1.mu(xi0.nodes))
    z0 = ExtendedVector(ModalVector(np.array([0.4]), lam),
                        ModalVector.zeros(lam), xi0)
    traj = integrate(z0, linear_ops(lam), exp1, "state", 1e-2, 0.1)
    back = reconstruct_xi(traj, 0.0, exp1)
    assert np.allclose(back.values, xi0.values, atol=1e-12)


def test_reconstruct_xi_pure_shift(exp1):
    # v stays zero when u = v = 0 and xi0 decays: force acts, so instead use
    # zero (u, v) with a nonzero xi0 and f = 0: v no longer stays zero.
    # Freeze the trajectory by hand to test the shift in isolation.
    lam = np.array([1.0])
    xi0 = StateField.zeros(exp1, lam)
    xi0.values[:, 0] = np.asarray(exp1.mu(xi0.nodes))
    n = 30
    dt = 0.01
    traj = Trajectory(
        times=np.arange(n + 1) * dt,
        u_snaps=np.zeros((n + 1, 1)), v_snaps=np.zeros((n + 1, 1)),
        a_prim=np.zeros((n + 1, 1)), a_vals=np.zeros((n + 1, 1)),
        force_snaps=np.zeros((n + 1, 1)), initial_memory=xi0,
        window=exp1.s_max, framework="state", dt=dt,
        kernel_id=exp1.kernel_id, lambdas=lam)
    t = 0.3
    xi_t = reconstruct_xi(traj, t, exp1)
    expect = np.asarray(exp1.mu(xi_t.nodes + t))
    sel = xi_t.nodes < 15.0
    assert np.allclose(xi_t.values[sel, 0], expect[sel], rtol=1e-3, atol=1e-12)


def test_xi_integral_swap_oracle(exp1):
    # int_0^inf xi^t = int_t^inf xi0 + int_0^t k(s) a(t-s) ds
    lam = np.array([1.0])
    ops = linear_ops(lam)
    z0 = ExtendedVector(ModalVector(np.array([1.0]), lam),
                        ModalVector.zeros(lam), StateField.zeros(exp1, lam))
    dt = 2e-3
    traj = integrate(z0, ops, exp1, "state", dt, 2.0)
    t = 2.0
    xi_t = reconstruct_xi(traj, t, exp1)
    lhs = np.sum(xi_t.values[:, 0]) * exp1.ds
    idx = traj.index_of(t)
    a = traj.a_vals[:idx + 1, 0]
    ks = np.asarray(exp1.k(np.arange(idx + 1) * dt))
    w = np.full(idx + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    rhs = float(np.sum(w * ks * a[::-1]))
    assert lhs == pytest.approx(rhs, rel=1e-3, abs=1e-6)


# -- cross-framework and structural properties -----------------------------------

def test_force_agrees_across_bridged_representations(exp1):
    # int xi dtau == int mu(s) eta(s) ds when xi is the bridged history
    z0, lam = single_mode_state(exp1, 1.0, 0.4)
    traj = integrate(z0, linear_ops(lam), exp1, "history", 2e-3, 2.0)
    eta = reconstruct_eta(traj, 2.0, exp1)
    xi = lambda_map(eta, exp1)
    mu_w = np.asarray(exp1.mu(eta.nodes))
    f_eta = float((mu_w @ eta.values[:, 0]) * eta.ds)
    f_xi = float(np.sum(xi.values[:, 0]) * exp1.ds)
    assert f_xi == pytest.approx(f_eta, rel=1e-3, abs=1e-8)


def test_framework_equivalence_with_memory(exp1):
    # nonzero initial history; state run started from its bridge image
    lam = np.array([1.0])
    ops = linear_ops(lam)
    eta0 = HistoryField.from_profile(exp1, lam, lambda s: 1.0 - math.exp(-s))
    z0 = ExtendedVector(ModalVector(np.array([0.5]), lam),
                        ModalVector(np.array([-0.2]), lam), eta0)
    dt = 2e-3
    traj_h = integrate(z0, ops, exp1, "history", dt, 3.0)
    z0s = ExtendedVector(z0.u.copy(), z0.v.copy(), lambda_map(eta0, exp1))
    traj_s = integrate(z0s, ops, exp1, "state", dt, 3.0)
    err = np.max(np.abs(traj_h.u_snaps - traj_s.u_snaps))
    assert err < 5e-4


def test_intertwine_zero(exp1):
    lam = np.array([1.0])
    z0 = ExtendedVector(ModalVector.zeros(lam), ModalVector.zeros(lam),
                        HistoryField.zeros(exp1, lam))
    res = intertwine_residual(z0, linear_ops(lam), exp1, 1.0, 1e-2, n_samples=3)
    assert res == 0.0


def test_intertwine_refinement(exp1):
    z0, lam = single_mode_state(exp1)
    ops = linear_ops(lam)
    r_coarse = intertwine_residual(z0, ops, exp1, 2.0, 8e-3, n_samples=4)
    r_fine = intertwine_residual(z0, ops, exp1, 2.0, 4e-3, n_samples=4)
    assert r_fine < r_coarse
    assert math.log2(r_coarse / r_fine) > 0.9


def test_superposition_linear(exp1):
    lam = np.array([1.0, 4.0])
    ops = linear_ops(lam)
    rng = np.random.default_rng(2)
    mk = lambda: ExtendedVector(
        ModalVector(rng.normal(size=2), lam),
        ModalVector(rng.normal(size=2), lam),
        HistoryField.zeros(exp1, lam))
    z1, z2 = mk(), mk()
    dt = 1e-2
    t1 = integrate(z1, ops, exp1, "history", dt, 1.0)
    t2 = integrate(z2, ops, exp1, "history", dt, 1.0)
    t12 = integrate(z1 + z2, ops, exp1, "history", dt, 1.0)
    gap = np.max(np.abs(t12.u_snaps - t1.u_snaps - t2.u_snaps))
    assert gap < 1e-12


def test_window_truncation_bound(exp1):
    z0, lam = single_mode_state(exp1)
    ops = linear_ops(lam)
    dt = 5e-3
    full = integrate(z0, ops, exp1, "history", dt, 6.0)
    cut = integrate(z0, ops, exp1, "history", dt, 6.0, window=4.0)
    gap = np.max(np.abs(full.u_snaps - cut.u_snaps))
    # truncation error is controlled by theta*exp(-delta*window)
    bound = 50 * exp1.theta * math.exp(-exp1.delta_decay * 4.0)
    assert gap < bound


def test_blowup_guard(exp1):
    lam = np.array([1.0])
    # explosive right-hand side
    ops = ModelOperators(
        lambdas=lam,
        apply_A=lambda u, v: lam * v,
        apply_B_force=lambda u, v, F: (v, (u ** 3) * 1e3 + 1.0),
        a_primitive=lambda u, v: lam * u)
    z0 = ExtendedVector(ModalVector(np.array([2.0]), lam),
                        ModalVector.zeros(lam), HistoryField.zeros(exp1, lam))
    with pytest.raises(BlowUpError, match="blow-up detected at t="):
        integrate(z0, ops, exp1, "history", 1e-2, 50.0)


def test_holder_probe_degenerate(exp1):
    z0, lam = single_mode_state(exp1)
    fit = holder_growth_probe(z0, z0.copy(), linear_ops(lam), exp1,
                              "history", 1.0, 1e-2, n_samples=5)
    assert fit.degenerate


def test_holder_probe_linear_contraction(exp1):
    z0, lam = single_mode_state(exp1, 1.0, 0.0)
    z1, _ = single_mode_state(exp1, 1.001, 0.0)
    fit = holder_growth_probe(z0, z1, linear_ops(lam), exp1,
                              "history", 8.0, 5e-3, n_samples=10)
    assert not fit.degenerate
    assert fit.rate <= 0.0


def test_trajectory_csv(tmp_path, exp1):
    z0, lam = single_mode_state(exp1)
    traj = integrate(z0, linear_ops(lam), exp1, "history", 1e-2, 0.2)
    p = tmp_path / "traj.csv"
    save_trajectory_csv(traj, p)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    assert data.shape == (traj.n_steps + 1, 3)
    assert np.array_equal(data[:, 1], traj.u_snaps[:, 0])
