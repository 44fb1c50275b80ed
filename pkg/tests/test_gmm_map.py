import numpy as np
import pytest

from semgmm_ba.cloud_io import LabelMap
from semgmm_ba.em_solver import EcmConfig, e_step
from semgmm_ba.geometry import Pose, Twist, exp_map
from semgmm_ba.gmm_map import (
    EPS_REG,
    InitializationError,
    LayerParams,
    SemanticGMM,
    VoxelGrid,
    init_from_voxels,
    regularize_covariance,
    set_mixing,
    update_landmarks,
)

from conftest import make_scan, random_pose


def single_layer_model(means, covs, label=1, voxel_size=10.0, weights=None):
    means = np.atleast_2d(means)
    n = len(means)
    weights = np.full(n, 1.0 / n) if weights is None else weights
    layer = LayerParams(label, means, covs, weights, np.full(n, 10), voxel_size)
    return SemanticGMM({label: layer})


ONE_CLASS = LabelMap({1: ("thing", True)})


def test_voxel_grid_cell_rule():
    grid = VoxelGrid.from_points([[0.5, 0.5, 0.5], [-0.5, 0.5, 0.5], [3.5, 0.1, 0.1]], 1.0)
    assert set(grid.cells) == {(0, 0, 0), (-1, 0, 0), (3, 0, 0)}


def test_init_four_point_voxel_sample_statistics():
    # cluster centered away from cell boundaries so all 4 land in one voxel
    c = np.array([5.0, 5.0, 5.0])
    pts = c + np.array([[1, 1, 0], [1, -1, 0], [-1, 1, 0], [-1, -1, 0]], dtype=float)
    scan = make_scan(pts, 1)
    model = init_from_voxels([scan], [Pose.identity()], ONE_CLASS, 10.0, min_points_per_voxel=4)
    layer = model.layers[1]
    assert len(layer) == 1
    assert np.allclose(layer.means[0], c, atol=1e-12)
    # unbiased sample covariance of +-1 coordinates is 4/3; flat axis is floored
    assert np.allclose(layer.covs[0], np.diag([4.0 / 3.0, 4.0 / 3.0, EPS_REG]), atol=1e-12)
    assert layer.support[0] == 4


def test_init_identity_prior_means_are_voxel_centroids(rng):
    pts = rng.uniform(2.0, 4.0, size=(50, 3))  # single voxel under size 10 grid
    scan = make_scan(pts, 1)
    model = init_from_voxels([scan], [Pose.identity()], ONE_CLASS, 10.0)
    assert np.allclose(model.layers[1].means[0], pts.mean(axis=0), atol=1e-12)


def test_init_respects_min_points_threshold():
    pts = np.array([[5.0, 5.0, 5.0]]) + 0.1 * np.arange(4)[:, None]
    scan = make_scan(pts, 1)
    with pytest.raises(InitializationError):
        init_from_voxels([scan], [Pose.identity()], ONE_CLASS, 10.0, min_points_per_voxel=5)


def test_init_transforms_by_priors(rng):
    pts = rng.uniform(2.0, 4.0, size=(30, 3))
    scan = make_scan(pts, 1)
    prior = random_pose(rng)
    model = init_from_voxels([scan], [prior], ONE_CLASS, 50.0)
    expected = (pts @ prior.rotation.T + prior.translation).mean(axis=0)
    assert np.allclose(model.layers[1].means[0], expected, atol=1e-12)


def test_init_drops_empty_layer_with_warning(caplog):
    lm = LabelMap({1: ("thing", True), 2: ("sparse", True)})
    pts = np.vstack([np.random.default_rng(0).uniform(2, 4, (20, 3)), [[50.0, 50.0, 50.0]]])
    labels = np.array([1] * 20 + [2], dtype=np.uint16)
    scan = make_scan(pts, labels)
    with caplog.at_level("WARNING"):
        model = init_from_voxels([scan], [Pose.identity()], lm, 10.0)
    assert list(model.layers) == [1]
    assert any("dropping layer" in r.message for r in caplog.records)


def test_init_permutation_invariance(rng):
    pts = rng.uniform(-10, 10, size=(400, 3))
    labels = rng.choice([1, 2], size=400).astype(np.uint16)
    lm = LabelMap({1: ("a", True), 2: ("b", True)})
    m1 = init_from_voxels([make_scan(pts, labels)], [Pose.identity()], lm, 4.0)
    perm = rng.permutation(400)
    m2 = init_from_voxels([make_scan(pts[perm], labels[perm])], [Pose.identity()], lm, 4.0)
    for s in m1.labels:
        assert np.allclose(m1.layers[s].means, m2.layers[s].means, atol=1e-12)
        assert np.allclose(m1.layers[s].covs, m2.layers[s].covs, atol=1e-12)
        assert np.array_equal(m1.layers[s].support, m2.layers[s].support)


def test_set_mixing_two_layers_of_five():
    model = SemanticGMM(
        {
            s: LayerParams(s, np.zeros((5, 3)), np.stack([np.eye(3)] * 5), np.ones(5), np.ones(5, int), 1.0)
            for s in (1, 2)
        }
    )
    mixed = set_mixing(model)
    for s in (1, 2):
        assert np.allclose(mixed.layers[s].weights, 0.1)


def test_set_mixing_single_component():
    model = single_layer_model(np.zeros(3), np.eye(3)[None])
    assert set_mixing(model).layers[1].weights[0] == pytest.approx(1.0)


def test_set_mixing_unequal_layers_sum_to_one():
    sizes = {1: 2, 2: 4, 3: 8}
    layers = {
        s: LayerParams(s, np.zeros((n, 3)), np.stack([np.eye(3)] * n), np.ones(n), np.ones(n, int), 1.0)
        for s, n in sizes.items()
    }
    mixed = set_mixing(SemanticGMM(layers))
    assert np.allclose(mixed.layers[1].weights, 1.0 / 6.0)
    assert np.allclose(mixed.layers[2].weights, 1.0 / 12.0)
    assert np.allclose(mixed.layers[3].weights, 1.0 / 24.0)
    assert mixed.weight_sum() == pytest.approx(1.0, abs=1e-9)
    for s, n in sizes.items():
        assert mixed.layers[s].weights.sum() == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_regularize_identity_unchanged():
    assert np.allclose(regularize_covariance(np.eye(3)), np.eye(3))


def test_regularize_clamps_flat_direction():
    out = regularize_covariance(np.diag([1.0, 1.0, 0.0]))
    assert np.allclose(out, np.diag([1.0, 1.0, EPS_REG]))


def test_regularize_rank_one_eigen_oracle(rng):
    v = rng.normal(size=3)
    S = np.outer(v, v)
    out = regularize_covariance(S)
    evals_out = np.sort(np.linalg.eigvalsh(out))
    expected = np.sort(np.clip(np.linalg.eigvalsh(S), EPS_REG, None))
    assert np.allclose(evals_out, expected, atol=1e-12)


def test_regularize_applies_cap():
    out = regularize_covariance(np.diag([100.0, 1.0, 1.0]), cap=9.0)
    assert np.allclose(np.sort(np.linalg.eigvalsh(out)), [1.0, 1.0, 9.0])


def test_regularize_rejects_non_symmetric():
    S = np.eye(3)
    S[0, 1] = 0.5
    with pytest.raises(ValueError):
        regularize_covariance(S)


class FakeTable:
    def __init__(self, blocks):
        self.blocks = blocks


class FakeBlock:
    def __init__(self, point_idx, alpha):
        self.point_idx = np.asarray(point_idx)
        self.alpha = np.asarray(alpha, dtype=float)


def test_update_single_point_full_responsibility(rng):
    model = single_layer_model(np.zeros(3), np.eye(3)[None])
    z = np.array([[1.0, 2.0, 3.0]])
    scan = make_scan(z, 1)
    pose = random_pose(rng)
    table = FakeTable({(0, 1): FakeBlock([0], [[1.0]])})
    out = update_landmarks(model, [scan], [pose], table)
    expected_mu = pose.rotation @ z[0] + pose.translation
    assert np.allclose(out.layers[1].means[0], expected_mu, atol=1e-12)
    assert np.allclose(out.layers[1].covs[0], EPS_REG * np.eye(3), atol=1e-15)


def test_update_weighted_mean_two_points():
    model = single_layer_model(np.zeros(3), np.eye(3)[None])
    a, b = np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.0])
    scan = make_scan([a, b], 1)
    table = FakeTable({(0, 1): FakeBlock([0, 1], [[0.25], [0.75]])})
    out = update_landmarks(model, [scan], [Pose.identity()], table)
    assert np.allclose(out.layers[1].means[0], 0.25 * a + 0.75 * b, atol=1e-12)


def test_update_zero_mass_component_frozen():
    mu0 = np.array([3.0, 3.0, 3.0])
    model = single_layer_model(mu0, np.eye(3)[None])
    scan = make_scan([[0.0, 0.0, 0.0]], 1)
    table = FakeTable({(0, 1): FakeBlock([0], [[1e-9]])})
    out = update_landmarks(model, [scan], [Pose.identity()], table)
    assert np.allclose(out.layers[1].means[0], mu0)
    assert np.allclose(out.layers[1].covs[0], np.eye(3))


def test_update_weights_untouched(rng):
    model = single_layer_model(np.zeros((2, 3)), np.stack([np.eye(3)] * 2), weights=np.array([0.25, 0.75]))
    scan = make_scan(rng.normal(size=(5, 3)), 1)
    table = FakeTable({(0, 1): FakeBlock(np.arange(5), np.tile([0.4, 0.6], (5, 1)))})
    out = update_landmarks(model, [scan], [Pose.identity()], table)
    assert np.allclose(out.layers[1].weights, [0.25, 0.75])


def test_update_matches_weighted_moments_oracle(rng):
    J = 3
    model = single_layer_model(rng.normal(size=(J, 3)), np.stack([np.eye(3)] * J))
    scans, poses, blocks = [], [], {}
    for k in range(2):
        pts = rng.normal(scale=2.0, size=(40, 3))
        scans.append(make_scan(pts, 1))
        poses.append(random_pose(rng))
        alpha = rng.dirichlet(np.ones(J), size=40)
        blocks[(k, 1)] = FakeBlock(np.arange(40), alpha)
    out = update_landmarks(model, scans, poses, FakeTable(blocks))
    for j in range(J):
        num = np.zeros(3)
        mass = 0.0
        for k in range(2):
            g = scans[k].positions @ poses[k].rotation.T + poses[k].translation
            a = blocks[(k, 1)].alpha[:, j]
            num += a @ g
            mass += a.sum()
        mu = num / mass
        scatter = np.zeros((3, 3))
        for k in range(2):
            g = scans[k].positions @ poses[k].rotation.T + poses[k].translation
            a = blocks[(k, 1)].alpha[:, j]
            d = g - mu
            scatter += (a[:, None] * d).T @ d
        scatter /= mass
        assert np.allclose(out.layers[1].means[j], mu, atol=1e-10)
        expected = regularize_covariance(0.5 * (scatter + scatter.T), EPS_REG, 100.0)
        assert np.allclose(out.layers[1].covs[j], expected, atol=1e-9)


def test_every_covariance_floor_property(rng):
    model = single_layer_model(rng.normal(size=(4, 3)), np.stack([np.eye(3)] * 4))
    for trial in range(10):
        pts = rng.normal(scale=0.001, size=(30, 3))  # nearly degenerate scatter
        scan = make_scan(pts, 1)
        alpha = rng.dirichlet(np.ones(4), size=30)
        table = FakeTable({(0, 1): FakeBlock(np.arange(30), alpha)})
        model = update_landmarks(model, [scan], [Pose.identity()], table)
        for layer in model.layers.values():
            assert np.linalg.eigvalsh(layer.covs).min() >= EPS_REG - 1e-12


def test_update_recovers_generator_means(rng):
    # points drawn around known centers; full responsibility on the true
    # generator must recover those centers to sampling error
    centers = np.array([[0.0, 0.0, 0.0], [8.0, 0.0, 0.0], [0.0, 8.0, 0.0]])
    model = single_layer_model(centers + 0.5, np.stack([np.eye(3)] * 3))
    pts = np.vstack([c + rng.normal(scale=0.05, size=(200, 3)) for c in centers])
    alpha = np.zeros((600, 3))
    for j in range(3):
        alpha[200 * j : 200 * (j + 1), j] = 1.0
    table = FakeTable({(0, 1): FakeBlock(np.arange(600), alpha)})
    out = update_landmarks(model, [make_scan(pts, 1)], [Pose.identity()], table)
    for j in range(3):
        assert np.linalg.norm(out.layers[1].means[j] - centers[j]) < 0.05 / np.sqrt(200) * 4
