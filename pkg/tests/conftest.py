import numpy as np
import pytest

from semgmm_ba.cloud_io import LabelMap, Scan
from semgmm_ba.geometry import Pose, Twist, exp_map


def random_pose(rng, max_angle=np.pi / 2, max_trans=5.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return exp_map(Twist(angle * axis, rng.uniform(-max_trans, max_trans, 3)))


def make_scan(positions, labels, index=0) -> Scan:
    positions = np.asarray(positions, dtype=float)
    labels = np.full(len(positions), labels, dtype=np.uint16) if np.isscalar(labels) else labels
    return Scan(index=index, positions=positions, labels=np.asarray(labels, dtype=np.uint16))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_class_map():
    return LabelMap({1: ("alpha", True), 2: ("beta", True), 9: ("mover", False)})
