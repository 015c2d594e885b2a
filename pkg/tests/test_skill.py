import numpy as np
import pytest

from tlsf.skill import (
    A_RED_PATTERN,
    BoundsError,
    Layout,
    ParameterVector,
    SkillModel,
    SkillModelError,
    Trajectory,
    apply_parameters,
    current_values,
    default_bounds,
    double_integrator,
    duration_steps,
    fit_model,
    max_parameter_counts,
    nominal_parameters,
    normalize_transitions,
    parameter_count,
    read_demo_csv,
    retrieve,
    retrieve_chain,
    state_sequence,
)


def chain_model(K=3, dur=1.0, dt=0.05, horizon=None, var=1e-4, A=None, means=None):
    if means is None:
        means = np.column_stack([np.arange(K) * 0.1, np.zeros(K), np.zeros(K)])
    if A is None:
        A = np.eye(K, k=1) * 0.8 + np.eye(K, k=2) * 0.2
    return SkillModel(
        means=means,
        covariances=np.repeat(np.eye(3)[None] * var, K, axis=0),
        duration_means=np.full(K, dur),
        duration_stds=np.full(K, 0.25 * dur),
        transition=A,
        start=np.zeros(3),
        dt=dt,
        horizon=horizon or K * dur + 1.0,
    )


# -------------------------------------------------------------- model


def test_model_validation():
    m = chain_model()
    with pytest.raises(SkillModelError):
        SkillModel(m.means, -m.covariances, m.duration_means, m.duration_stds, m.transition, m.start)
    with pytest.raises(SkillModelError):
        SkillModel(m.means, m.covariances, np.zeros(3), m.duration_stds, m.transition, m.start)
    with pytest.raises(SkillModelError):
        SkillModel(m.means, m.covariances, m.duration_means, m.duration_stds, m.transition * 2, m.start)
    with pytest.raises(ValueError):
        m.means[0, 0] = 1.0


def test_model_json_round_trip(tmp_path):
    m = chain_model()
    m.save(tmp_path / "m.json")
    back = SkillModel.load(tmp_path / "m.json")
    for name in ("means", "covariances", "duration_means", "duration_stds", "transition", "start"):
        assert np.array_equal(getattr(back, name), getattr(m, name))
    assert (back.dt, back.horizon, back.control_cost) == (m.dt, m.horizon, m.control_cost)


def test_model_load_checks_horizon():
    d = chain_model().to_dict()
    d["horizon"] = 2.0
    with pytest.raises(SkillModelError, match="horizon"):
        SkillModel.from_dict(d)
    d = chain_model().to_dict()
    d["K"] = 4
    with pytest.raises(SkillModelError):
        SkillModel.from_dict(d)


# ---------------------------------------------------------- parameter space


def test_parameter_counts():
    K = 6
    assert parameter_count(Layout.build(means=range(K))) == 18
    assert parameter_count(Layout.build(means=[0, 1], durations=range(6))) == 12
    assert parameter_count(Layout.build(means=[0, 1], durations=range(6), transitions=A_RED_PATTERN)) == 21
    assert max_parameter_counts(K) == {"means": 18, "durations": 6, "transitions": 15}
    assert len(A_RED_PATTERN) == 9


def test_layout_dict_round_trip_and_labels():
    lay = Layout.build(means=[0, 1], durations=[2], transitions=[(0, 2)])
    assert Layout.from_dict(lay.to_dict()) == lay
    assert lay.labels() == ["mu0.x", "mu0.y", "mu0.z", "mu1.x", "mu1.y", "mu1.z", "muS2", "A02"]
    assert Layout.from_dict({"transitions": "A_red"}) == Layout.build(transitions=A_RED_PATTERN)


def test_layout_validation():
    m = chain_model(K=3)
    with pytest.raises(SkillModelError):
        Layout.build(means=[3]).validate(m)
    with pytest.raises(SkillModelError):
        Layout.build(durations=[0, 0]).validate(m)


def test_default_bounds():
    m = chain_model(K=2, var=0.01)
    m = SkillModel(m.means, m.covariances, m.duration_means, np.array([0.0, 0.25]), m.transition, m.start, horizon=3.0)
    lay = Layout.build(means=[0], durations=[0, 1], transitions=[(0, 1)])
    lo, hi = default_bounds(m, lay)
    assert hi[:3] - m.means[0] == pytest.approx([0.2, 0.2, 0.2])
    assert m.means[0] - lo[:3] == pytest.approx([0.2, 0.2, 0.2])
    assert lo[3] == hi[3] == 1.0
    assert (lo[4], hi[4]) == pytest.approx((0.75, 1.25))
    assert (lo[5], hi[5]) == (0.0, 1.0)


def test_duration_bound_clipped_at_dt():
    m = chain_model(K=1, dur=0.06)
    m = SkillModel(m.means, m.covariances, m.duration_means, np.array([0.05]), m.transition, m.start, horizon=1.0)
    lo, hi = default_bounds(m, Layout.build(durations=[0]))
    assert lo[0] == pytest.approx(m.dt)
    assert hi[0] == pytest.approx(0.11)


def test_parameter_vector_bounds():
    lay = Layout.build(durations=[0])
    with pytest.raises(BoundsError, match="muS0"):
        ParameterVector(np.array([3.0]), np.array([0.5]), np.array([2.0]), lay)
    with pytest.raises(BoundsError):
        ParameterVector(np.array([1.0]), np.array([2.0]), np.array([0.5]), lay)


def test_apply_parameters():
    m = chain_model(K=4)
    same = apply_parameters(m, ParameterVector(np.zeros(0), np.zeros(0), np.zeros(0), Layout()))
    assert np.array_equal(same.means, m.means) and np.array_equal(same.transition, m.transition)

    lay = Layout.build(means=[2])
    p = nominal_parameters(m, lay)
    shifted = apply_parameters(m, p.with_values(p.values + np.array([0.005, 0.0, 0.0])))
    diff = shifted.means - m.means
    assert diff[2, 0] == pytest.approx(0.005)
    diff[2, 0] = 0.0
    assert not diff.any()

    lay = Layout.build(transitions=[(1, 3)])
    p = ParameterVector(np.array([0.9]), np.zeros(1), np.ones(1), lay)
    m2 = apply_parameters(m, p)
    assert m2.transition[1, 3] == 0.9 and m.transition[1, 3] == 0.2
    assert normalize_transitions(m2.transition)[1] == pytest.approx([0, 0, 0.8 / 1.7, 0.9 / 1.7])
    assert np.array_equal(current_values(m2, lay), [0.9])


def test_apply_is_idempotent_and_commutes():
    m = chain_model(K=4)
    a = Layout.build(durations=[0])
    b = Layout.build(transitions=[(0, 2)])
    pa = ParameterVector(np.array([1.1]), np.array([0.5]), np.array([2.0]), a)
    pb = ParameterVector(np.array([0.7]), np.zeros(1), np.ones(1), b)
    ab = apply_parameters(apply_parameters(m, pa), pb)
    ba = apply_parameters(apply_parameters(m, pb), pa)
    aa = apply_parameters(apply_parameters(m, pa), pa)
    assert np.array_equal(ab.duration_means, ba.duration_means) and np.array_equal(ab.transition, ba.transition)
    assert np.array_equal(aa.duration_means, apply_parameters(m, pa).duration_means)


# -------------------------------------------------------------- transitions


def test_normalize_rows():
    A = np.zeros((3, 6))
    A[0] = (0, 2, 2, 0, 0, 0)
    A[1] = (0, 0, 0.3, 0.7, 0, 0)
    out = normalize_transitions(A)
    assert out[0] == pytest.approx([0, 0.5, 0.5, 0, 0, 0])
    assert out[1] == pytest.approx(A[1])
    assert not out[2].any()
    with pytest.raises(SkillModelError):
        normalize_transitions([[0, -0.1], [0, 0]])


def test_duration_rounding():
    assert duration_steps(0.125, 0.05) == 3
    assert duration_steps(0.12, 0.05) == 2
    assert duration_steps(0.001, 0.05) == 1


def test_state_sequence_chain():
    m = chain_model(K=6, dur=1.0)
    seq = state_sequence(m)
    assert [k for k, _ in seq] == [0, 1, 2, 3, 4, 5]
    assert all(n == 20 for _, n in seq)


def test_state_sequence_skip():
    A = np.eye(6, k=1) * 0.8 + np.eye(6, k=2) * 0.2
    A[1, 3] = 0.9
    seq = state_sequence(chain_model(K=6, A=A))
    assert [k for k, _ in seq] == [0, 1, 3, 4, 5]


def test_state_sequence_durations_and_tie():
    m = chain_model(K=3, dur=2.0, dt=0.1, horizon=6.1)
    assert state_sequence(m) == [(0, 20), (1, 20), (2, 20)]
    A = np.zeros((3, 3))
    A[0, 1] = A[0, 2] = 0.5
    assert [k for k, _ in state_sequence(chain_model(K=3, A=A))] == [0, 1]


def test_state_sequence_truncates_at_horizon():
    m = chain_model(K=3, dur=1.0, horizon=2.5)
    seq = state_sequence(m)
    assert sum(n for _, n in seq) == m.n_samples - 1
    assert seq[-1] == (2, 9)


def test_state_sequence_scale_invariant():
    A = np.eye(6, k=1) * 0.6 + np.eye(6, k=2) * 0.4
    A[2, 4] = 0.7
    m = chain_model(K=6, A=A)
    scaled = chain_model(K=6, A=A * 0.5)
    assert state_sequence(m) == state_sequence(scaled)


def test_state_sequence_cycle():
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 0] = 1.0
    with pytest.raises(SkillModelError, match="cycle"):
        state_sequence(chain_model(K=3, A=A))


def test_doubling_durations_doubles_dwell():
    m = chain_model(K=3, dur=0.5, horizon=5.0)
    m2 = SkillModel(m.means, m.covariances, 2 * m.duration_means, m.duration_stds, m.transition, m.start, horizon=5.0)
    assert [n for _, n in state_sequence(m2)] == [2 * n for _, n in state_sequence(m)]


# ---------------------------------------------------------------- retrieval


def batch_lqt(A, B, Qs, refs, R, x0):
    """Solve the tracking problem as one least-squares system over all inputs."""
    n = len(refs)
    nu = B.shape[1]
    nx = A.shape[0]
    # x_t = Phi_t x0 + G_t u, u stacked u_0..u_{n-2}
    Phi = [np.linalg.matrix_power(A, t) for t in range(n)]
    G = np.zeros((n, nx, nu * (n - 1)))
    for t in range(1, n):
        for j in range(t):
            G[t, :, j * nu : (j + 1) * nu] = np.linalg.matrix_power(A, t - 1 - j) @ B
    rows, rhs = [], []
    for t in range(1, n):
        W = np.linalg.cholesky(Qs[t]).T if Qs[t].any() else np.zeros((3, 3))
        rows.append(W @ G[t, :3])
        rhs.append(W @ (refs[t] - (Phi[t] @ x0)[:3]))
    Rw = np.linalg.cholesky(R).T
    for j in range(n - 1):
        blk = np.zeros((nu, nu * (n - 1)))
        blk[:, j * nu : (j + 1) * nu] = Rw
        rows.append(blk)
        rhs.append(np.zeros(nu))
    u = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    return np.array([Phi[t] @ x0 + G[t] @ u for t in range(n)])


def test_lqt_matches_batch_least_squares():
    means = np.array([[0.1, -0.05, 0.02], [0.2, 0.05, 0.0]])
    m = chain_model(K=2, dur=0.2, dt=0.05, horizon=0.5, var=1e-3, means=means)
    assert m.n_samples == 10
    traj = retrieve(m)
    labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]
    assert traj.states.tolist() == labels
    refs = means[labels]
    Qs = np.array([np.linalg.inv(m.covariances[k]) for k in labels])
    Qs[0] = 0.0
    A, B = double_integrator(m.dt)
    X = batch_lqt(A, B, Qs, refs, m.control_cost * np.eye(3), np.zeros(6))
    assert np.allclose(traj.positions, X[:, :3], atol=1e-9)
    assert np.allclose(traj.velocities, X[:, 3:], atol=1e-9)


def test_retrieve_constant_at_start():
    m = SkillModel(
        means=[[0.3, 0.2, 0.1]],
        covariances=[np.eye(3) * 1e-4],
        duration_means=[1.0],
        duration_stds=[0.1],
        transition=[[0.0]],
        start=[0.3, 0.2, 0.1],
        horizon=2.0,
    )
    traj = retrieve(m)
    assert np.allclose(traj.positions, [0.3, 0.2, 0.1], atol=1e-12)
    assert len(traj) == 40


def test_retrieve_reaches_last_mean():
    means = np.array([[0.1, 0.0, 0.0], [0.3, 0.2, -0.1]])
    m = chain_model(K=2, dur=2.0, var=1e-5, means=means, horizon=5.0)
    traj = retrieve(m)
    assert np.linalg.norm(traj.positions[-1] - means[1]) < 1e-2
    assert np.array_equal(retrieve(m).positions, traj.positions)


def test_retrieve_length_independent_of_durations():
    m = chain_model(K=3, dur=1.0, horizon=4.0)
    for scale in (0.3, 1.0, 1.3):
        edited = SkillModel(m.means, m.covariances, scale * m.duration_means, m.duration_stds, m.transition, m.start, horizon=4.0)
        assert len(retrieve(edited)) == 80


def test_retrieve_chain_continuity():
    a = chain_model(K=2, dur=1.0, horizon=2.5)
    b = chain_model(K=2, dur=1.0, horizon=2.5, means=np.array([[0.0, 0.1, 0.0], [0.0, 0.2, 0.0]]))
    ta = retrieve(a)
    tab = retrieve_chain([a, b])
    assert len(tab) == 2 * len(ta)
    assert np.array_equal(tab.positions[: len(ta)], ta.positions)
    assert np.array_equal(tab.positions[len(ta)], ta.positions[-1])


def test_trajectory_csv_round_trip(tmp_path):
    traj = retrieve(chain_model(K=3))
    traj.to_csv(tmp_path / "t.csv")
    back = Trajectory.from_csv(tmp_path / "t.csv")
    assert np.array_equal(back.positions, traj.positions)
    assert np.array_equal(back.velocities, traj.velocities)
    assert np.array_equal(back.states, traj.states)
    assert back.dt == pytest.approx(traj.dt)


# ------------------------------------------------------------------ fitting


def test_fit_straight_line_two_parts():
    t = np.arange(100) * 0.05
    P = np.column_stack([np.linspace(0, 1, 100), np.zeros(100), np.zeros(100)])
    m = fit_model(t, P, 2)
    assert m.means[:, 0] == pytest.approx([P[:50, 0].mean(), P[50:, 0].mean()])
    assert m.duration_means.sum() == pytest.approx(t[-1] + 0.05)
    assert abs(m.duration_means.sum() - t[-1]) <= 0.05 + 1e-12
    assert m.duration_stds == pytest.approx(0.25 * m.duration_means)
    assert m.transition[0, 1] == 0.8 and m.transition[1].sum() == 0.0


def test_fit_transition_pattern_and_single_state():
    t = np.arange(60) * 0.05
    P = np.random.default_rng(0).normal(size=(60, 3))
    m = fit_model(t, P, 6)
    assert all(m.transition[i, i + 1] == 0.8 for i in range(5))
    assert all(m.transition[i, i + 2] == 0.2 for i in range(4))
    one = fit_model(t, P, 1)
    assert one.K == 1 and not one.transition.any()
    with pytest.raises(SkillModelError):
        fit_model(t, P, 0)
    with pytest.raises(SkillModelError):
        fit_model(t[:3], P[:3], 5)


def test_read_demo_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("t,x,y,z\n0,1,2,3\n0.05,1,2,4\n")
    t, P = read_demo_csv(p)
    assert t.tolist() == [0, 0.05] and P[1].tolist() == [1, 2, 4]
    p.write_text("t,x\n0,1\n")
    with pytest.raises(SkillModelError):
        read_demo_csv(p)
