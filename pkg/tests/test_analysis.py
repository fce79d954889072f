import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tkl import analysis, data, kernel, nn, training
from tkl.nn import ModelSpec
from tkl.training import TrainConfig


@pytest.fixture(scope="module")
def ball_path():
    spec = ModelSpec.mlp(2, 6)
    ds = data.gen_ball_sphere(128, 0)
    path = training.train_full_batch(spec, nn.init_params(spec, 0), ds, TrainConfig(50, 0.05))
    return path, ds


# --------------------------------------------------------------- neighbors

def test_euclidean_topk_brute_force(rng):
    X = rng.normal(size=(5, 3))
    q = rng.normal(size=3)
    dist = [np.linalg.norm(x - q) for x in X]
    want = sorted(range(5), key=lambda i: (dist[i], i))
    assert analysis.euclidean_topk(X, q, 5).tolist() == want


def test_euclidean_ties_by_index():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [3.0, 3.0]])
    assert analysis.euclidean_topk(X, [0.0, 0.0], 3).tolist() == [0, 1, 2]
    assert analysis.euclidean_topk(X, X[3], 1).tolist() == [3]


def test_query_on_dataset_point_ranks_first(ball_path):
    path, ds = ball_path
    w = path.weights_at(path.steps - 1)
    F = nn.batch_jacobian(path.spec, w, ds.inputs)[:, 0, :]
    idx, sim = analysis.ntk_topk(F, F[17], 10)
    assert idx[0] == 17 or sim[0] == sim[list(idx).index(17)]
    assert sim[list(idx).index(17)] == pytest.approx(1.0, abs=1e-15)
    assert np.all(np.diff(sim) <= 0)


def test_full_permutation(ball_path):
    path, ds = ball_path
    u = np.array([0.6, 0.8])
    rep = analysis.neighbor_sweep(path, ds, u, lambdas=[0.5], k=ds.n)
    assert sorted(rep.ntk_indices[0].tolist()) == list(range(ds.n))
    assert sorted(rep.euclidean_indices[0].tolist()) == list(range(ds.n))
    assert rep.overlaps[0] == 1.0


def test_neighbor_sweep_report(ball_path, tmp_path):
    path, ds = ball_path
    rep = analysis.neighbor_sweep(path, ds, [1.0, 0.0])
    assert rep.lambdas == analysis.DEFAULT_LAMBDAS
    assert rep.snapshot == path.steps - 1
    assert all(len(i) == 100 for i in rep.ntk_indices)
    assert all(0.0 <= o <= 1.0 for o in rep.overlaps)
    analysis.write_neighbors_csv(rep, tmp_path / "nb.csv")
    lines = (tmp_path / "nb.csv").read_text().splitlines()
    assert lines[0] == "lambda,rank,index,similarity"
    assert len(lines) == 1 + 7 * 100
    with pytest.raises(ValueError):
        analysis.neighbor_sweep(path, ds, [1.0, 1.0])


def test_ranking_invariant_to_feature_scale(rng):
    F = rng.normal(size=(30, 7))
    phi = rng.normal(size=7)
    a, _ = analysis.ntk_topk(F, phi, 30)
    b, _ = analysis.ntk_topk(3.5 * F, 3.5 * phi, 30)
    assert np.array_equal(a, b)


def test_zero_feature_is_degenerate():
    with pytest.raises(kernel.UndefinedSimilarityError):
        analysis.ntk_similarities(np.ones((3, 2)), np.zeros(2))


def test_jaccard():
    assert analysis.jaccard([1, 2, 3], [2, 3, 4]) == 0.5
    assert analysis.jaccard([], []) == 1.0


# ------------------------------------------------------------------ probe

def test_probe_trivial():
    probe = analysis.linear_probe_train([[-1.0], [1.0]], [-1, 1])
    assert probe.train_accuracy == 1.0
    assert np.all(np.isfinite(probe.weight))


def test_probe_single_class():
    with pytest.raises(ValueError):
        analysis.linear_probe_train([[0.0], [1.0]], [1, 1])


def test_probe_raw_ball_sphere_fails():
    ds = data.gen_ball_sphere(256, 0)
    assert analysis.linear_probe_train(ds.inputs, ds.labels).train_accuracy < 1.0


def test_probe_is_deterministic(rng):
    F = rng.normal(size=(40, 3))
    y = np.where(F[:, 0] > 0, 1, -1)
    a = analysis.linear_probe_train(F, y)
    b = analysis.linear_probe_train(F, y)
    assert np.array_equal(a.weight, b.weight) and a.bias == b.bias


# -------------------------------------------------------- embedded regressor

@pytest.mark.parametrize("spec", [ModelSpec.mlp(2, 10), ModelSpec.mlp(3, 4, q=2),
                                  ModelSpec.conv1d_parity(8, 2, q=1),
                                  ModelSpec.conv1d_parity(8, 3, q=4), ModelSpec.linear(3)],
                         ids=["mlp", "mlp-q2", "conv", "conv-q4", "linear"])
def test_embedded_identity(spec, rng):
    w = rng.uniform(-1, 1, spec.n_params)
    a = analysis.embedded_regressor(spec, w)
    X = rng.normal(size=(100, spec.input_dim))
    J = nn.batch_jacobian(spec, w, X)
    assert np.max(np.abs(J @ a - nn.predict(spec, w, X))) <= 1e-10


def test_embedded_regressor_coordinates(rng):
    spec = ModelSpec.mlp(2, 4)
    w = nn.ParamVector.of(spec, rng.uniform(-1, 1, spec.n_params))
    a = nn.ParamVector.of(spec, analysis.embedded_regressor(spec, w))
    assert a.segment("b1")[0] == w.segment("b1")[0]
    assert np.array_equal(a.segment("W1"), w.segment("W1"))
    assert not a.segment("W2").any() and not a.segment("b3").any()
    lin = ModelSpec.linear(3)
    assert np.array_equal(analysis.embedded_regressor(lin, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


def test_regressor_probe_reproduces_decisions(ball_path):
    path, ds = ball_path
    spec, w = path.spec, path.final
    probe = analysis.probe_from_regressor(spec, w)
    F = nn.batch_jacobian(spec, w, ds.inputs)[:, 0, :]
    net = np.where(nn.predict(spec, w, ds.inputs)[:, 0] >= 0, 1.0, -1.0)
    assert np.array_equal(probe.predict(F), net)


# -------------------------------------------------------------------- PCA

def test_pca_matches_covariance_eigen(rng):
    F = rng.normal(size=(10, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.1])
    coords, var = analysis.pca_project(F, 2)
    C = np.cov(F, rowvar=False)
    ev = kernel.jacobi_eigvalsh(0.5 * (C + C.T))[::-1]
    assert np.allclose(var, ev[:2], rtol=1e-10)
    assert np.allclose(np.var(coords, axis=0, ddof=1), ev[:2], rtol=1e-10)


def test_pca_2d_is_rotation(rng):
    F = rng.normal(size=(20, 2))
    F -= F.mean(axis=0)
    coords, var = analysis.pca_project(F, 2)
    assert np.allclose(np.linalg.norm(coords, axis=1), np.linalg.norm(F, axis=1))
    assert var[0] >= var[1]


def test_pca_rank_one(rng):
    F = np.outer(rng.normal(size=15), rng.normal(size=4))
    _, var = analysis.pca_project(F, 2)
    assert var[1] <= 1e-20 * var[0] + 1e-28


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_pca_row_order_invariance(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(12, 4))
    perm = rng.permutation(12)
    a, _ = analysis.pca_project(F, 2)
    b, _ = analysis.pca_project(F[perm], 2)
    for j in range(2):
        assert (np.allclose(a[perm, j], b[:, j], atol=1e-10)
                or np.allclose(a[perm, j], -b[:, j], atol=1e-10))


def test_pca_csv(tmp_path, rng):
    coords, _ = analysis.pca_project(rng.normal(size=(4, 3)))
    analysis.write_pca_csv(coords, [0, 1, 1, 0], tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "index,label,c1,c2" and len(lines) == 5


# ------------------------------------------------------- decision boundary

def test_decision_radius_of_lines():
    # w = (1, 0) puts the level set on the line x = threshold; with an even
    # grid size each row crosses it exactly once
    spec = ModelSpec.linear(2)
    assert np.isnan(analysis.decision_radius(spec, [0.0, 0.0]))
    t = np.linspace(-1.25, 1.25, 200)
    assert analysis.decision_radius(spec, [1.0, 0.0]) == pytest.approx(np.abs(t).mean(), rel=1e-12)
    got = analysis.decision_radius(spec, [1.0, 0.0], threshold=0.5)
    assert got == pytest.approx(np.hypot(0.5, t).mean(), rel=1e-12)
    with pytest.raises(ValueError):
        analysis.decision_radius(ModelSpec.linear(3), np.ones(3))
