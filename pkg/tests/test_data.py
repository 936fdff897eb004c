"""Tests for dataset generation, partitioning, poisoning, and file loaders."""
import math
import struct

import numpy as np
import pytest

from fedarena.data import (
    Dataset,
    Partition,
    flip_labels,
    load_csv,
    load_idx,
    partition_dirichlet,
    shift_features,
    subset,
    synth_blobs,
)
from fedarena.model import Batch, ModelSpec, accuracy, grad
from fedarena.numerics import Rng


def entropy(counts):
    """Independent histogram entropy oracle (natural log)."""
    total = sum(counts)
    h = 0.0
    for c in counts:
        if c:
            p = c / total
            h -= p * math.log(p)
    return h


# ------------------------------------------------------------------ blobs


def test_blobs_vanishing_spread_is_perfectly_learnable():
    ds = synth_blobs(Rng(5).substream("data"), classes=3, dim=4, per_class=30, spread=1e-6)
    spec = ModelSpec("softmax_regression", 4, 3)
    batch = Batch(ds.inputs, ds.labels)
    w = np.zeros(spec.weight_dim)
    for _ in range(200):
        w -= 0.5 * grad(spec, w, batch)
    assert accuracy(spec, w, batch) == 1.0


def test_blobs_repeated_calls_are_byte_identical():
    a = synth_blobs(Rng(5).substream("data"), classes=2, dim=2, per_class=50, spread=1.0)
    b = synth_blobs(Rng(5).substream("data"), classes=2, dim=2, per_class=50, spread=1.0)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_blobs_class_priors_exactly_uniform():
    ds = synth_blobs(Rng(0), classes=5, dim=8, per_class=17, spread=1.0)
    counts = np.bincount(ds.labels, minlength=5)
    np.testing.assert_array_equal(counts, 17)


def test_blobs_parameter_validation():
    with pytest.raises(ValueError):
        synth_blobs(Rng(0), classes=1, dim=4, per_class=5, spread=1.0)
    with pytest.raises(ValueError):
        synth_blobs(Rng(0), classes=3, dim=2, per_class=5, spread=1.0)
    with pytest.raises(ValueError):
        synth_blobs(Rng(0), classes=3, dim=4, per_class=5, spread=0.0)


# -------------------------------------------------------------- partition


def test_partition_iid_limit_matches_global_histogram():
    deviations = []
    for seed in range(100):
        rng = Rng(seed)
        ds = synth_blobs(rng.substream("data"), classes=4, dim=4, per_class=100, spread=1.0)
        part = partition_dirichlet(rng.substream("partition"), ds, m=10, alpha=1e6, ref_size=0)
        global_hist = np.bincount(ds.labels, minlength=4) / ds.n
        for shard in part.client_indices:
            hist = np.bincount(ds.labels[shard], minlength=4) / shard.size
            deviations.append(np.abs(hist - global_hist).max())
    assert np.mean(deviations) < 0.05


def test_partition_reference_holdout_size_and_disjointness():
    rng = Rng(3)
    ds = synth_blobs(rng.substream("data"), classes=10, dim=16, per_class=60, spread=1.0)
    part = partition_dirichlet(rng.substream("partition"), ds, m=30, alpha=0.5, ref_size=100)
    assert part.reference_indices.size == 100
    ref = set(part.reference_indices.tolist())
    for shard in part.client_indices:
        assert not ref & set(shard.tolist())


def test_partition_low_alpha_reduces_label_entropy():
    def mean_client_entropy(alpha, seed):
        rng = Rng(seed)
        ds = synth_blobs(rng.substream("data"), classes=10, dim=16, per_class=100, spread=1.0)
        part = partition_dirichlet(rng.substream("partition"), ds, m=10, alpha=alpha, ref_size=0)
        ents = []
        for shard in part.client_indices:
            counts = [int(np.sum(ds.labels[shard] == c)) for c in range(10)]
            ents.append(entropy(counts))
        return np.mean(ents)

    skewed = np.mean([mean_client_entropy(0.1, s) for s in range(5)])
    iid = np.mean([mean_client_entropy(1e6, s) for s in range(5)])
    assert skewed < iid


def test_partition_is_a_subpartition_of_the_dataset():
    rng = Rng(12)
    ds = synth_blobs(rng.substream("data"), classes=3, dim=4, per_class=40, spread=1.0)
    part = partition_dirichlet(rng.substream("partition"), ds, m=7, alpha=0.5, ref_size=10)
    all_ids = np.concatenate([part.reference_indices] + list(part.client_indices))
    assert len(set(all_ids.tolist())) == all_ids.size
    assert all_ids.size <= ds.n
    assert all_ids.min() >= 0 and all_ids.max() < ds.n
    # everything is covered here because assignment is exhaustive
    assert all_ids.size == ds.n


def test_partition_reproducible():
    rng1, rng2 = Rng(8), Rng(8)
    ds = synth_blobs(rng1.substream("data"), classes=4, dim=4, per_class=50, spread=1.0)
    ds2 = synth_blobs(rng2.substream("data"), classes=4, dim=4, per_class=50, spread=1.0)
    p1 = partition_dirichlet(rng1.substream("partition"), ds, m=6, alpha=0.3, ref_size=20)
    p2 = partition_dirichlet(rng2.substream("partition"), ds2, m=6, alpha=0.3, ref_size=20)
    assert p1.reference_indices.tobytes() == p2.reference_indices.tobytes()
    for a, b in zip(p1.client_indices, p2.client_indices):
        assert a.tobytes() == b.tobytes()


def test_partition_infeasible_raises():
    ds = Dataset(inputs=np.zeros((3, 2)), labels=np.array([0, 0, 0]))
    with pytest.raises(ValueError, match="infeasible partition"):
        partition_dirichlet(Rng(0), ds, m=5, alpha=1.0, ref_size=0)


def test_partition_type_rejects_overlap_and_empty_shards():
    with pytest.raises(ValueError):
        Partition(client_indices=(np.array([0, 1]), np.array([1, 2])))
    with pytest.raises(ValueError):
        Partition(client_indices=(np.array([0]), np.array([], dtype=np.int64)))
    with pytest.raises(ValueError):
        Partition(client_indices=(np.array([0]),), reference_indices=np.array([0]))


# ---------------------------------------------------------------- flipping


def test_flip_labels_no_source_is_identity():
    ds = Dataset(inputs=np.zeros((3, 2)), labels=np.array([1, 1, 2]))
    out = flip_labels(ds, source=0, target=2)
    np.testing.assert_array_equal(out.labels, ds.labels)


def test_flip_labels_all_source():
    ds = Dataset(inputs=np.zeros((4, 2)), labels=np.array([1, 1, 1, 1]))
    out = flip_labels(ds, source=1, target=0)
    np.testing.assert_array_equal(out.labels, 0)
    np.testing.assert_array_equal(out.inputs, ds.inputs)


def test_flip_labels_conserves_counts_and_is_idempotent():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=200)
    ds = Dataset(inputs=np.zeros((200, 2)), labels=labels)
    n_src = int(np.sum(labels == 3))
    n_tgt = int(np.sum(labels == 1))
    once = flip_labels(ds, source=3, target=1)
    assert int(np.sum(once.labels == 1)) == n_src + n_tgt
    assert int(np.sum(once.labels == 3)) == 0
    twice = flip_labels(once, source=3, target=1)
    np.testing.assert_array_equal(twice.labels, once.labels)


def test_flip_labels_rejects_invalid_classes():
    ds = Dataset(inputs=np.zeros((2, 2)), labels=np.array([0, 1]))
    with pytest.raises(ValueError):
        flip_labels(ds, source=0, target=0)
    with pytest.raises(ValueError, match="invalid class"):
        flip_labels(ds, source=0, target=7)


def test_shift_and_subset_helpers():
    ds = Dataset(inputs=np.ones((3, 2)), labels=np.array([0, 1, 0]))
    shifted = shift_features(ds, [1.0, -1.0])
    np.testing.assert_array_equal(shifted.inputs, [[2.0, 0.0]] * 3)
    sub = subset(ds, [2, 0])
    np.testing.assert_array_equal(sub.labels, [0, 0])


# ------------------------------------------------------------------ files


def write_idx_pair(tmp_path, images, labels):
    """Author an IDX fixture byte by byte; see the hex layout in README."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes())
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, n) + labels.tobytes())
    return img_path, lbl_path


def test_idx_fixture_round_trip(tmp_path):
    # 4 examples of 2x3 pixels, authored from an explicit reference dump
    images = np.arange(4 * 2 * 3, dtype=np.uint8).reshape(4, 2, 3) * 10
    labels = [3, 1, 4, 1]
    img_path, lbl_path = write_idx_pair(tmp_path, images, labels)
    # header: 00000803 00000004 00000002 00000003
    assert img_path.read_bytes()[:16].hex() == "00000803000000040000000200000003"
    ds = load_idx(img_path, lbl_path)
    assert ds.inputs.shape == (4, 6)
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_allclose(ds.inputs[1], np.array([60, 70, 80, 90, 100, 110]) / 255.0)
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0


def test_idx_truncated_file_reports_byte_counts(tmp_path):
    images = np.zeros((4, 2, 3), dtype=np.uint8)
    img_path, lbl_path = write_idx_pair(tmp_path, images, [0, 1, 2, 3])
    img_path.write_bytes(img_path.read_bytes()[:-5])
    with pytest.raises(ValueError, match=r"expected 24 bytes at offset 16, only 19 available"):
        load_idx(img_path, lbl_path)


def test_idx_bad_magic_reports_offset(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    img_path, lbl_path = write_idx_pair(tmp_path, images, [0])
    raw = bytearray(img_path.read_bytes())
    raw[3] = 0x99
    img_path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic 0x00000899 at byte offset 0"):
        load_idx(img_path, lbl_path)


def test_idx_count_mismatch(tmp_path):
    img_path, lbl_path = write_idx_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [0, 1])
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([0, 1, 2]))
    with pytest.raises(ValueError, match="2 images but 3 labels"):
        load_idx(img_path, lbl_path)


def test_csv_loads_and_zscores(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text(
        "f1,f2,f3,label\n"
        "1.0,10.0,5.0,0\n"
        "2.0,20.0,5.0,1\n"
        "3.0,30.0,5.0,1\n"
    )
    ds = load_csv(p)
    assert ds.inputs.shape == (3, 3)
    np.testing.assert_allclose(ds.inputs.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_array_equal(ds.inputs[:, 2], 0.0)  # constant column stays zero
    np.testing.assert_array_equal(ds.labels, [0, 1, 1])


def test_csv_ragged_row_reports_line_number(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,label\n1.0,2.0,0\n1.0,0\n")
    with pytest.raises(ValueError, match="line 3: expected 3 fields, got 2"):
        load_csv(p)


def test_csv_non_numeric_reports_line_number(tmp_path):
    p = tmp_path / "bad2.csv"
    p.write_text("a,b,label\n1.0,oops,0\n")
    with pytest.raises(ValueError, match="line 2"):
        load_csv(p)
