import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glacier.data import (
    AugSpec,
    augment,
    load_idx,
    next_batch,
    sample_epoch,
    synth_dataset,
)


# ---------------------------------------------------------------------------
# IDX loading
# ---------------------------------------------------------------------------


def write_idx_pair(tmp_path, pixels, labels):
    n, rows, cols = pixels.shape
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
    return str(images_path), str(labels_path)


def test_load_idx_known_pixels(tmp_path):
    pixels = np.arange(4 * 2 * 3, dtype=np.uint8).reshape(4, 2, 3)
    img, lab = write_idx_pair(tmp_path, pixels, [0, 1, 2, 1])
    ds = load_idx(img, lab)
    assert len(ds) == 4
    np.testing.assert_allclose(ds.samples, pixels / 255.0, atol=1e-7)
    np.testing.assert_array_equal(ds.labels, [0, 1, 2, 1])
    np.testing.assert_array_equal(ds.sample_ids, np.arange(4, dtype=np.uint64))


def test_load_idx_truncated_rejected(tmp_path):
    pixels = np.zeros((4, 2, 3), dtype=np.uint8)
    img, lab = write_idx_pair(tmp_path, pixels, [0, 0, 0, 0])
    data = open(img, "rb").read()
    with open(img, "wb") as f:
        f.write(data[:-5])
    with pytest.raises(ValueError, match="truncated"):
        load_idx(img, lab)


def test_load_idx_bad_magic(tmp_path):
    pixels = np.zeros((1, 2, 2), dtype=np.uint8)
    img, lab = write_idx_pair(tmp_path, pixels, [0])
    data = bytearray(open(img, "rb").read())
    data[3] = 0x99
    open(img, "wb").write(bytes(data))
    with pytest.raises(ValueError, match="magic"):
        load_idx(img, lab)


def test_load_idx_count_mismatch(tmp_path):
    pixels = np.zeros((4, 2, 3), dtype=np.uint8)
    img, _ = write_idx_pair(tmp_path, pixels, [0, 0, 0, 0])
    other = tmp_path / "other"
    other.mkdir()
    _, lab = write_idx_pair(other, np.zeros((3, 2, 3), dtype=np.uint8), [0, 0, 0])
    with pytest.raises(ValueError, match="label count"):
        load_idx(img, lab)


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


def test_synth_deterministic():
    a = synth_dataset("blobs", 3, 10, 5, seed=42)
    b = synth_dataset("blobs", 3, 10, 5, seed=42)
    assert a.samples.tobytes() == b.samples.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_zero_noise_hits_centers():
    ds = synth_dataset("blobs", 2, 3, 4, seed=1, noise=0.0)
    for cls in (0, 1):
        rows = ds.samples[ds.labels == cls]
        assert np.ptp(rows, axis=0).max() == 0.0
        assert np.linalg.norm(rows[0]) == pytest.approx(1.0, abs=1e-5)


def test_synth_balanced_counts():
    ds = synth_dataset("blobs", 2, 100, 3, seed=0)
    assert len(ds) == 200
    assert (ds.labels == 0).sum() == 100
    assert (ds.labels == 1).sum() == 100


def test_synth_val_split_disjoint_noise_same_centers():
    train = synth_dataset("blobs", 4, 10, 6, seed=5, noise=0.0)
    val = synth_dataset("blobs", 4, 5, 6, seed=5, noise=0.0, start_index=40)
    # zero noise: same centers exactly
    np.testing.assert_array_equal(train.samples[:4], val.samples[:4])
    noisy_train = synth_dataset("blobs", 4, 10, 6, seed=5)
    noisy_val = synth_dataset("blobs", 4, 5, 6, seed=5, start_index=40)
    assert not np.array_equal(noisy_train.samples[:4], noisy_val.samples[:4])


def test_spirals_shape_and_determinism():
    a = synth_dataset("spirals", 3, 20, 2, seed=9)
    b = synth_dataset("spirals", 3, 20, 2, seed=9)
    assert a.samples.shape == (60, 2)
    assert a.samples.tobytes() == b.samples.tobytes()
    with pytest.raises(ValueError):
        synth_dataset("spirals", 3, 20, 5, seed=9)


# ---------------------------------------------------------------------------
# epoch schedules
# ---------------------------------------------------------------------------


def test_schedule_deterministic():
    ds = synth_dataset("blobs", 2, 50, 3, seed=3)
    s1 = sample_epoch(ds, seed=7, epoch=2, batch_size=8)
    s2 = sample_epoch(ds, seed=7, epoch=2, batch_size=8)
    np.testing.assert_array_equal(s1.order, s2.order)


def test_schedule_workers_disjoint_and_cover():
    ds = synth_dataset("blobs", 2, 500, 3, seed=3)
    shards = [
        sample_epoch(ds, seed=7, epoch=0, worker_id=w, batch_size=8, num_workers=4).order
        for w in range(4)
    ]
    all_ids = np.concatenate(shards)
    assert len(all_ids) == len(ds)
    assert len(np.unique(all_ids)) == len(ds)


def test_schedule_changes_across_epochs():
    ds = synth_dataset("blobs", 2, 500, 3, seed=3)
    e0 = sample_epoch(ds, seed=7, epoch=0, batch_size=8).order
    e1 = sample_epoch(ds, seed=7, epoch=1, batch_size=8).order
    assert not np.array_equal(e0, e1)


def test_schedule_coverage_single_worker():
    ds = synth_dataset("blobs", 2, 17, 3, seed=3)
    sched = sample_epoch(ds, seed=1, epoch=0, batch_size=4)
    seen = np.concatenate(sched.batches)
    assert sorted(seen.tolist()) == list(range(34))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def test_augment_identity():
    x = np.ones((2, 2), dtype=np.float32)
    assert augment(x, 5, None) is x
    assert augment(x, 5, AugSpec(seed=1)) is x


def test_augment_stateless_across_epochs():
    x = np.random.default_rng(0).normal(size=(1, 4, 4)).astype(np.float32)
    aug = AugSpec(seed=11, flip_p=0.5, pad_crop=1)
    outs = [augment(x, 123, aug) for _ in range(5)]
    for o in outs[1:]:
        assert o.tobytes() == outs[0].tobytes()


def test_augment_flip_p1_reverses_columns():
    x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    out = augment(x, 0, AugSpec(seed=0, flip_p=1.0))
    np.testing.assert_array_equal(out, [[2.0, 1.0], [4.0, 3.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**63), st.integers(min_value=0, max_value=1000))
def test_augment_depends_only_on_seed_and_id(seed, sample_id):
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    aug = AugSpec(seed=seed, flip_p=0.5, pad_crop=1)
    a = augment(x, sample_id, aug)
    b = augment(x.copy(), sample_id, aug)
    assert a.shape == x.shape
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def test_next_batch_matches_schedule_prefix():
    ds = synth_dataset("blobs", 2, 20, 3, seed=3)
    sched = sample_epoch(ds, seed=1, epoch=0, batch_size=8)
    batch = next_batch(ds, sched, 0)
    np.testing.assert_array_equal(batch.sample_ids, sched.order[:8])
    np.testing.assert_array_equal(batch.labels, ds.labels[sched.order[:8].astype(int)])


def test_next_batch_short_tail():
    ds = synth_dataset("blobs", 2, 5, 3, seed=3)  # N=10, b=4 -> last batch 2
    sched = sample_epoch(ds, seed=1, epoch=0, batch_size=4)
    assert sched.num_batches == 3
    assert len(next_batch(ds, sched, 2).labels) == 2


def test_next_batch_pure():
    ds = synth_dataset("blobs", 2, 20, 3, seed=3)
    sched = sample_epoch(ds, seed=1, epoch=0, batch_size=8, aug=AugSpec(seed=2, flip_p=0.5))
    b1 = next_batch(ds, sched, 1)
    b2 = next_batch(ds, sched, 1)
    assert b1.inputs.tobytes() == b2.inputs.tobytes()


def test_next_batch_out_of_range():
    ds = synth_dataset("blobs", 2, 4, 3, seed=3)
    sched = sample_epoch(ds, seed=1, epoch=0, batch_size=4)
    with pytest.raises(IndexError):
        next_batch(ds, sched, 99)
