import struct

import numpy as np
import pytest

from semgmm_ba.cloud_io import (
    FormatError,
    LabelMap,
    Scan,
    default_label_map,
    parse_label_map,
    read_labels,
    read_poses,
    read_scan,
    split_layers,
    write_poses,
)

from conftest import make_scan, random_pose


def write_bin(path, records):
    with open(path, "wb") as f:
        for rec in records:
            f.write(struct.pack("<4f", *rec))


def write_label_file(path, values):
    with open(path, "wb") as f:
        for v in values:
            f.write(struct.pack("<I", v))


def test_read_scan_two_records(tmp_path):
    p = tmp_path / "a.bin"
    write_bin(p, [(1.0, 2.0, 3.0, 0.5), (-1.0, 0.0, 4.0, 0.1)])
    scan = read_scan(p)
    assert scan.point_count == 2
    assert np.allclose(scan.positions, [[1, 2, 3], [-1, 0, 4]])
    assert np.all(scan.labels == 0)  # unpaired until read_labels


def test_read_scan_empty_file(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    assert read_scan(p).point_count == 0


def test_read_scan_truncated_file_names_offset(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 17)
    with pytest.raises(FormatError, match="16"):
        read_scan(p)


def test_read_scan_skips_non_finite(tmp_path, caplog):
    p = tmp_path / "nan.bin"
    write_bin(p, [(1.0, 2.0, 3.0, 0.0), (np.nan, 0.0, 0.0, 0.0), (4.0, 5.0, 6.0, 0.0)])
    with caplog.at_level("WARNING"):
        scan = read_scan(p)
    assert scan.point_count == 2
    assert scan.raw_count == 3
    assert list(scan.source_indices) == [0, 2]
    assert any("non-finite" in r.message for r in caplog.records)


def test_read_scan_drops_beyond_max_range(tmp_path):
    p = tmp_path / "far.bin"
    write_bin(p, [(1.0, 0.0, 0.0, 0.0), (500.0, 0.0, 0.0, 0.0)])
    scan = read_scan(p, max_range=120.0)
    assert scan.point_count == 1


def test_read_labels_positional_and_masking(tmp_path):
    pb = tmp_path / "a.bin"
    write_bin(pb, [(0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 0.0)])
    pl = tmp_path / "a.label"
    # class id in the low 16 bits, instance id above: 0x0001_0028 -> class 40
    write_label_file(pl, [0x00010028, 0x0000000A])
    scan = read_labels(pl, read_scan(pb))
    assert list(scan.labels) == [40, 10]


def test_read_labels_count_mismatch_names_both(tmp_path):
    pb = tmp_path / "a.bin"
    write_bin(pb, [(0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 0.0)])
    pl = tmp_path / "a.label"
    write_label_file(pl, [40, 40, 40])
    with pytest.raises(FormatError, match="3.*2|2.*3"):
        read_labels(pl, read_scan(pb))


def test_read_labels_pairs_by_raw_record_after_skips(tmp_path):
    pb = tmp_path / "a.bin"
    write_bin(pb, [(0.0, 0.0, 0.0, 0.0), (np.inf, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 0.0)])
    pl = tmp_path / "a.label"
    write_label_file(pl, [40, 99, 80])
    scan = read_labels(pl, read_scan(pb))
    assert list(scan.labels) == [40, 80]


def test_identity_pose_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    poses = read_poses(p)
    assert len(poses) == 1
    assert np.allclose(poses[0].rotation, np.eye(3))
    assert np.allclose(poses[0].translation, 0.0)


def test_pose_round_trip_many(tmp_path):
    rng = np.random.default_rng(3)
    poses = [random_pose(rng, max_angle=3.0, max_trans=100.0) for _ in range(1000)]
    p = tmp_path / "poses.txt"
    write_poses(p, poses)
    back = read_poses(p)
    for a, b in zip(poses, back):
        assert np.max(np.abs(a.rotation - b.rotation)) < 1e-15
        assert np.max(np.abs(a.translation - b.translation)) < 1e-15


def test_pose_line_wrong_token_count(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(FormatError, match=":1"):
        read_poses(p)


def test_pose_reorthonormalization_warns(tmp_path, caplog):
    p = tmp_path / "poses.txt"
    p.write_text("1.01 0 0 0 0 1 0 0 0 0 1 0\n")
    with caplog.at_level("WARNING"):
        poses = read_poses(p)
    R = poses[0].rotation
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
    assert any("re-orthonormalizing" in r.message for r in caplog.records)


def test_label_map_parse_and_flags():
    lm = parse_label_map("# comment\n40 road stable\n30 person excluded\n")
    assert lm.id_of("road") == 40
    assert lm.name_of(30) == "person"
    assert lm.is_stable(40) and not lm.is_stable(30)
    assert lm.stable_ids() == [40]


def test_label_map_rejects_bad_lines():
    with pytest.raises(FormatError):
        parse_label_map("40 road\n")
    with pytest.raises(FormatError):
        parse_label_map("40 road sometimes\n")
    with pytest.raises(FormatError):
        parse_label_map("40 road stable\n40 lane stable\n")


def test_default_label_map_has_initial_set_classes():
    lm = default_label_map()
    for name in ("car", "road", "pole", "lane-marking", "trunk"):
        assert lm.is_stable(lm.id_of(name))
    assert not lm.is_stable(lm.id_of("person"))


def test_split_layers_partitions(two_class_map):
    scan = make_scan(np.zeros((3, 3)), np.array([40, 40, 80], dtype=np.uint16))
    lm = LabelMap({40: ("road", True), 80: ("pole", True)})
    layers = split_layers(scan, lm)
    assert sorted((l.label, len(l)) for l in layers) == [(40, 2), (80, 1)]


def test_split_layers_all_excluded(two_class_map):
    scan = make_scan(np.zeros((4, 3)), 9)
    assert split_layers(scan, two_class_map) == []


def test_split_layers_partition_property(two_class_map):
    rng = np.random.default_rng(5)
    for _ in range(25):
        n = rng.integers(1, 200)
        labels = rng.choice([1, 2, 9, 77], size=n).astype(np.uint16)  # 77 unknown
        scan = make_scan(rng.normal(size=(n, 3)), labels)
        layers = split_layers(scan, two_class_map)
        seen = np.concatenate([l.point_refs for l in layers]) if layers else np.array([], int)
        assert len(np.unique(seen)) == len(seen)  # disjoint
        excluded = np.sum((labels == 9) | (labels == 77))
        assert len(seen) + excluded == n
        for layer in layers:
            assert np.all(scan.labels[layer.point_refs] == layer.label)


def test_scan_invariants():
    with pytest.raises(ValueError):
        Scan(index=0, positions=np.zeros((2, 3)), labels=np.zeros(3, dtype=np.uint16))
