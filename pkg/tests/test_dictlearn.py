import numpy as np
import pytest

from sparsepose.dictlearn import (
    TrainingDataError, learn_dictionary, limb_lengths, preprocess, sparse_code,
)
from sparsepose.geom import chain_skeleton, human15
from sparsepose.synth import training_poses


def test_preprocess_removes_the_root_translation():
    sk = human15()
    raw = training_poses(4, seed=2)
    base = preprocess(raw, sk)
    assert np.array_equal(preprocess(base.poses, sk).poses, base.poses)
    moved = preprocess(raw + np.array([10.0, 20.0, 30.0])[None, :, None], sk)
    assert np.allclose(moved.poses, base.poses, atol=1e-12)
    assert np.all(base.poses[:, :, sk.root_index] == 0.0)


def test_mean_limb_length_by_hand():
    sk = chain_skeleton(3)
    a = np.array([[0.0, 3.0, 3.0], [0.0, 4.0, 4.0], [0.0, 0.0, 2.0]])  # edges 5, 2
    b = np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 2.0], [1.0, 1.0, 7.0]])  # edges 1, 6
    assert preprocess(np.stack([a, b]), sk).mean_limb_length == pytest.approx(3.5, abs=1e-15)
    assert limb_lengths(a, sk).tolist() == [5.0, 2.0]


def test_preprocess_rejects_collapsed_limbs():
    sk = chain_skeleton(3)
    poses = np.random.default_rng(0).standard_normal((50, 3, 3))
    poses[:2, :, 2] = poses[:2, :, 1]
    with pytest.raises(TrainingDataError, match="zero-length"):
        preprocess(poses, sk)
    with pytest.raises(TrainingDataError):
        preprocess(np.full((2, 3, 3), np.nan), sk)


def _replay(k=8, p=15, copies=6, scale=1000.0, seed=0):
    rng = np.random.default_rng(seed)
    atoms = np.linalg.qr(rng.standard_normal((3 * p, k)))[0].T.reshape(k, 3, p)
    atoms -= atoms[:, :, :1]
    atoms /= np.linalg.norm(atoms.reshape(k, -1), axis=1)[:, None, None]
    return np.repeat(atoms, copies, axis=0) * scale, atoms


def test_replayed_atoms_are_learned_back():
    raw, _ = _replay()
    train = preprocess(raw, chain_skeleton(15))
    d, rep = learn_dictionary(train, k=8, seed=0)
    assert rep.reconstruction_error <= 1e-3 * 1000.0
    norms = np.linalg.norm(d.atoms.reshape(d.k, -1), axis=1)
    assert np.all(norms <= 1.0 + 1e-9)


def test_single_atom_matches_the_rank_one_oracle():
    rng = np.random.default_rng(4)
    raw = rng.standard_normal((40, 3, 5)) * np.array([5.0, 2.0, 1.0])[None, :, None]
    train = preprocess(raw, chain_skeleton(5))
    d, rep = learn_dictionary(train, k=1, alpha=1e-9, rounds=3000, tol=0.0)
    # independent oracle: the leading singular direction minimizes the rank-one fit
    X = train.poses.reshape(train.m, -1).T
    u = np.linalg.svd(X, full_matrices=False)[0][:, 0]
    oracle = np.linalg.norm(X - np.outer(u, u @ X), axis=0).mean()
    assert rep.reconstruction_error == pytest.approx(oracle, abs=1e-6)


def test_identical_poses_are_reproduced():
    pose = training_poses(1, seed=3)[0]
    train = preprocess(np.repeat(pose[None], 12, axis=0), human15())
    d, rep = learn_dictionary(train, k=3, alpha=1e-9, seed=1)
    assert rep.reconstruction_error <= 1e-6


def test_learning_objective_never_rises_and_is_seeded():
    train = preprocess(training_poses(150, seed=5), human15())
    d1, r1 = learn_dictionary(train, k=10, seed=7, rounds=8)
    d2, r2 = learn_dictionary(train, k=10, seed=7, rounds=8)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(r1.objective, r1.objective[1:]))
    assert np.array_equal(d1.atoms, d2.atoms) and r1 == r2
    assert d1.alpha_used == 0.5 and d1.seed == 7
    assert d1.mean_limb_length == train.mean_limb_length
    d3, _ = learn_dictionary(train, k=10, seed=8, rounds=8)
    assert not np.array_equal(d1.atoms, d3.atoms)


def test_more_atoms_than_poses_warns():
    train = preprocess(training_poses(5, seed=0), human15())
    with pytest.warns(UserWarning, match="5 training poses for 8 atoms"):
        d, _ = learn_dictionary(train, k=8, rounds=3)
    assert d.k == 8
    with pytest.raises(ValueError):
        learn_dictionary(train, k=0)


def test_sparse_code_recovers_a_basis_atom(dict16):
    code = sparse_code(dict16.atoms[3], dict16, alpha=1e-8)
    e3 = np.zeros(dict16.k)
    e3[3] = 1.0
    assert np.abs(code - e3).max() <= 1e-4


def test_sparse_code_trivial_cases(dict16):
    pose = training_poses(1, seed=9)[0]
    pose = pose - pose[:, :1]
    D = dict16.atoms.reshape(dict16.k, -1)
    bound = np.abs(D @ pose.reshape(-1)).max()
    assert np.all(sparse_code(pose, dict16, alpha=bound * 1.0001) == 0.0)
    assert np.all(sparse_code(np.zeros((3, 15)), dict16, alpha=0.5) == 0.0)


def _lasso_oracle(D, x, alpha, sweeps=20000):
    """Cyclic coordinate descent, run far past convergence."""
    c = np.zeros(D.shape[1])
    col2 = np.sum(D * D, axis=0)
    r = x.copy()
    for _ in range(sweeps):
        for i in range(D.shape[1]):
            r += D[:, i] * c[i]
            rho = D[:, i] @ r
            c[i] = np.sign(rho) * max(abs(rho) - alpha, 0.0) / col2[i]
            r -= D[:, i] * c[i]
    return c


def test_sparse_code_is_optimal(dict16):
    pose = training_poses(1, seed=11)[0]
    x = (pose - pose[:, :1]).reshape(-1)
    D = dict16.atoms.reshape(dict16.k, -1).T
    alpha = 5.0

    def F(c):
        return 0.5 * np.sum((D @ c - x) ** 2) + alpha * np.abs(c).sum()

    best = F(_lasso_oracle(D, x, alpha, sweeps=3000))
    assert F(sparse_code(pose - pose[:, :1], dict16, alpha)) <= best + 1e-6 * max(1.0, best)
