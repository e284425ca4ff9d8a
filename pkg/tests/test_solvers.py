import numpy as np
import pytest

from sparsepose.geom import (
    ORTHOGRAPHIC, PERSPECTIVE, Hyperparams, ModelParams, PoseDictionary,
    PoseSequence2D, calibration_matrix, chain_skeleton, is_rotation, loss, objective, project,
)
from sparsepose.solvers import (
    SolverError, apg_l1, rotation_gradient, rotation_subproblem_value, so3_exp, soft_threshold, update_C,
    update_R, update_T, update_Z,
)

from conftest import random_params, random_rotations, small_dictionary


def _instance(rng, camera=ORTHOGRAPHIC, n=3, k=4, p=5, noise=0.3):
    d = small_dictionary(rng, k=k, p=p)
    params = random_params(rng, d, n, camera)
    K = calibration_matrix(2.0, 2.5, 0.1, -0.2)
    hyper = Hyperparams(calibration=K if camera == PERSPECTIVE else None)
    W = project(params, d, hyper)
    W = PoseSequence2D(W.coords + noise * rng.standard_normal(W.coords.shape))
    return d, params, hyper, W


# -- APG ----------------------------------------------------------------------


def test_soft_threshold_is_inclusive():
    x = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0])
    assert soft_threshold(x, 1.0).tolist() == [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]


def test_apg_on_a_separable_problem_matches_soft_threshold():
    b = np.array([3.0, -0.2, 0.7, -5.0])
    x, rep = apg_l1(lambda x: 0.5 * np.sum((x - b) ** 2), lambda x: x - b,
                    np.zeros(4), 0.5, 1.0, 100, 1e-14)
    assert np.allclose(x, soft_threshold(b, 0.5), atol=1e-12)
    assert rep.converged


def test_apg_never_returns_a_worse_point_than_the_start():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((6, 4))
    y = rng.standard_normal(6)

    def f(x):
        return 0.5 * np.sum((A @ x - y) ** 2)

    x0 = rng.standard_normal(4)
    L = np.linalg.eigvalsh(A.T @ A).max()
    x, rep = apg_l1(f, lambda x: A.T @ (A @ x - y), x0, 0.3, L, 3)
    assert rep.objective <= f(x0) + 0.3 * np.abs(x0).sum()
    assert rep.objective == pytest.approx(f(x) + 0.3 * np.abs(x).sum(), rel=1e-12)


def test_update_C_large_alpha_gives_zero(rng):
    d, params, hyper, W = _instance(rng)
    h = hyper.replace(alpha=1e6)
    C, _ = update_C(params, W, d, h)
    assert np.all(C == 0)


def test_update_C_scalar_soft_threshold_oracle():
    # one frame, one atom, one joint moving along x: (nu/2)(w - b c)^2 + alpha |c|
    sk = chain_skeleton(2)
    atoms = np.zeros((1, 3, 2))
    atoms[0, 0, 1] = 0.6
    d = PoseDictionary(sk, atoms, 1.0, 1.0)
    params = ModelParams(np.zeros((1, 1)), np.eye(3), np.zeros(2))
    nu, alpha, w = 2.0, 0.3, 1.7
    W = PoseSequence2D(np.array([[[0.0, w], [0.0, 0.0]]]))
    C, _ = update_C(params, W, d, Hyperparams(alpha=alpha, nu=nu, apg_tol=1e-20))
    b = 0.6
    expected = soft_threshold(np.array(nu * b * w), alpha) / (nu * b * b)
    assert C[0, 0] == pytest.approx(float(expected), abs=1e-8)


def _kkt_violation(params, W, d, hyper, C):
    """Largest violation of the subgradient optimality conditions of the C-step."""
    eps = 1e-6

    def smooth(Cx):
        p = params.replace(C=Cx)
        return objective(p, W, d, hyper) - hyper.alpha * np.abs(Cx).sum()

    g = np.zeros_like(C)
    for idx in np.ndindex(C.shape):
        e = np.zeros_like(C)
        e[idx] = eps
        g[idx] = (smooth(C + e) - smooth(C - e)) / (2 * eps)
    nz = C != 0
    v_nz = np.abs(g[nz] + hyper.alpha * np.sign(C[nz])).max(initial=0.0)
    v_z = np.maximum(np.abs(g[~nz]) - hyper.alpha, 0).max(initial=0.0)
    return max(v_nz, v_z)


@pytest.mark.parametrize("camera", [ORTHOGRAPHIC, PERSPECTIVE])
def test_update_C_satisfies_optimality_conditions(rng, camera):
    for _ in range(3):
        d, params, hyper, W = _instance(rng, camera)
        hyper = hyper.replace(apg_tol=1e-14, apg_max_iter=20000, alpha=0.2, beta=0.5)
        C, rep = update_C(params, W, d, hyper)
        assert _kkt_violation(params, W, d, hyper, C) < 1e-5
        assert objective(params.replace(C=C), W, d, hyper) <= objective(params, W, d, hyper) + 1e-10


def test_update_C_rejects_non_finite_data(rng):
    d, params, hyper, W = _instance(rng)
    params = params.replace(T=np.full_like(params.T, 1e308))
    with pytest.raises(SolverError, match="non-finite"):
        update_C(params, W, d, hyper)


# -- rotations ----------------------------------------------------------------


def test_update_R_is_stationary_at_the_truth(rng):
    d = small_dictionary(rng)
    params = random_params(rng, d, 4)
    params = params.replace(R=np.tile(params.R[0], (4, 1, 1)))
    hyper = Hyperparams()
    W = project(params, d, hyper)
    R, rep = update_R(params, W, d, hyper)
    assert rep.grad_norm <= 1e-8
    assert np.allclose(R, params.R, atol=1e-12)


def test_update_R_reaches_the_procrustes_optimum(rng):
    # single frame, gamma = 0, W an exact orthographic view of a rigid pose:
    # the optimum is the generating rotation with zero residual
    d = small_dictionary(rng, k=1, p=6)
    R_true = random_rotations(rng, 1)
    params = ModelParams(np.array([[3.0]]), R_true, np.zeros((1, 2)))
    hyper = Hyperparams(gamma=0.0)
    W = project(params, d, hyper)
    start = params.replace(R=R_true @ so3_exp(np.array([[[0, -0.3, 0.2], [0.3, 0, -0.1],
                                                          [-0.2, 0.1, 0]]])))
    for _ in range(40):
        R, rep = update_R(start, W, d, hyper)
        start = start.replace(R=R)
    assert rotation_subproblem_value(start, W, d, hyper) <= 1e-6
    assert is_rotation(start.R)


@pytest.mark.parametrize("camera", [ORTHOGRAPHIC, PERSPECTIVE])
def test_rotation_gradient_matches_finite_differences(rng, camera):
    d, params, hyper, W = _instance(rng, camera)
    Om = rotation_gradient(params, W, d, hyper)
    eps = 1e-6
    for t in range(params.n):
        for _ in range(3):
            v = rng.standard_normal(3)
            X = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
            Rp, Rm = params.R.copy(), params.R.copy()
            Rp[t] = params.R[t] @ so3_exp(eps * X)
            Rm[t] = params.R[t] @ so3_exp(-eps * X)
            fd = (rotation_subproblem_value(params, W, d, hyper, Rp)
                  - rotation_subproblem_value(params, W, d, hyper, Rm)) / (2 * eps)
            analytic = float(np.sum(Om[t] * X))
            assert abs(fd - analytic) <= 1e-4 * max(1.0, abs(analytic))


@pytest.mark.parametrize("camera", [ORTHOGRAPHIC, PERSPECTIVE])
def test_update_R_decreases_and_stays_on_the_manifold(rng, camera):
    for _ in range(3):
        d, params, hyper, W = _instance(rng, camera, n=5)
        R, rep = update_R(params, W, d, hyper)
        assert rep.objective_after <= rep.objective_before + 1e-12
        assert is_rotation(R)
        assert objective(params.replace(R=R), W, d, hyper) <= objective(params, W, d, hyper) + 1e-10


# -- closed forms -------------------------------------------------------------


def test_update_T_examples(rng):
    d = small_dictionary(rng)
    params = random_params(rng, d, 2)
    params = params.replace(T=np.zeros((2, 2)))
    W = project(params, d, Hyperparams())
    assert np.allclose(update_T(params, W, d, Hyperparams()), 0.0, atol=1e-12)
    shifted = PoseSequence2D(W.coords + np.array([3.0, -2.0])[None, :, None])
    assert np.allclose(update_T(params, shifted, d, Hyperparams()), [[3.0, -2.0]] * 2, atol=1e-12)


@pytest.mark.parametrize("camera", [ORTHOGRAPHIC, PERSPECTIVE])
def test_update_T_is_stationary(rng, camera):
    d, params, hyper, W = _instance(rng, camera)
    params = params.replace(T=update_T(params, W, d, hyper))
    eps = 1e-6
    for idx in np.ndindex(params.T.shape):
        e = np.zeros_like(params.T)
        e[idx] = eps
        g = (loss(params.replace(T=params.T + e), W, d, hyper)
             - loss(params.replace(T=params.T - e), W, d, hyper)) / (2 * eps)
        assert abs(g) <= 1e-6


def _single_joint_persp(u_target, v):
    sk = chain_skeleton(2)
    d = PoseDictionary(sk, np.zeros((1, 3, 2)), 1.0, 1.0)
    params = ModelParams(np.zeros((1, 1)), np.eye(3), np.asarray(v, float), np.ones((1, 2)),
                         PERSPECTIVE)
    W = PoseSequence2D(np.array([[[u_target[0], u_target[0]], [u_target[1], u_target[1]]]]))
    return d, params, W


def test_update_Z_examples():
    hyper = Hyperparams(calibration=np.eye(3))
    d, params, W = _single_joint_persp((0.0, 0.0), (0.0, 0.0, 5.0))
    Z = update_Z(params, W, d, hyper)
    assert Z[0, 0] == 1.0 and Z[0, 1] == 5.0
    d, params, W = _single_joint_persp((0.3, -0.4), (0.3, -0.4, 1.0))
    assert update_Z(params, W, d, hyper)[0, 1] == pytest.approx(1.0, abs=1e-15)


def test_update_Z_degenerate_ray_reports_indices():
    d, params, W = _single_joint_persp((0.0, 0.0), (0.0, 0.0, 5.0))
    hyper = Hyperparams(calibration=np.diag([1.0, 1.0, 1e7]))
    with pytest.raises(SolverError, match="frame 0, joint 1"):
        update_Z(params, W, d, hyper)


def test_update_Z_is_stationary_and_keeps_the_root(rng):
    for _ in range(5):
        d, params, hyper, W = _instance(rng, PERSPECTIVE)
        before = loss(params, W, d, hyper)
        Z = update_Z(params, W, d, hyper)
        assert np.all(Z[:, 0] == 1.0)
        params = params.replace(Z=Z)
        assert loss(params, W, d, hyper) <= before + 1e-12
        eps = 1e-6
        for t in range(params.n):
            for i in range(1, d.p):
                e = np.zeros_like(Z)
                e[t, i] = eps
                g = (loss(params.replace(Z=Z + e), W, d, hyper)
                     - loss(params.replace(Z=Z - e), W, d, hyper)) / (2 * eps)
                assert abs(g) <= 1e-6


def test_updates_are_deterministic(rng):
    d, params, hyper, W = _instance(rng, PERSPECTIVE)
    a = update_C(params, W, d, hyper)[0], update_R(params, W, d, hyper)[0]
    b = update_C(params, W, d, hyper)[0], update_R(params, W, d, hyper)[0]
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
