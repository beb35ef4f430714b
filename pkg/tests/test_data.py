import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from unlearn_inversion import data
from unlearn_inversion.data import (
    ByClass, ByClasses, ByIndex, DataFormatError, Dataset, SelectionError, denormalize, load_csv,
    load_image_bin, minmax_normalize, parse_selection, save_image_bin, select_unlearn,
    split_pretrain_private, synth_dataset,
)
from unlearn_inversion.tensor import mlp
from unlearn_inversion.training import TrainConfig, evaluate, init_model, sgd_train


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def test_csv_basic(tmp_path):
    ds = load_csv(_write(tmp_path, "0.1,0.2,0\n0.3,0.4,1\n0.5,0.6,1\n"))
    assert len(ds) == 3 and ds.input_dim == 2
    assert ds.labels.tolist() == [0, 1, 1]
    assert ds.norm is None


def test_csv_header_skipped_and_named_label(tmp_path):
    p = _write(tmp_path, "a,label,b\n1,0,2\n3,1,4\n")
    ds = load_csv(p, label_column="label", header=True)
    assert ds.features.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert load_csv(p, label_column=1, header=True).labels.tolist() == [0, 1]


def test_csv_credit_style_shape(tmp_path):
    rng = np.random.default_rng(0)
    rows = [",".join(f"{v:.5f}" for v in rng.uniform(0, 50, 24)) + f",{i % 2}" for i in range(20)]
    ds = load_csv(_write(tmp_path, "\n".join(rows) + "\n"))
    assert ds.input_dim == 24 and ds.num_classes == 2


def test_csv_errors_name_the_line(tmp_path):
    with pytest.raises(DataFormatError, match=r":2: non-numeric"):
        load_csv(_write(tmp_path, "1,2,0\n1,x,1\n"))
    with pytest.raises(DataFormatError, match=r":3: expected 3 columns"):
        load_csv(_write(tmp_path, "1,2,0\n1,2,1\n1,1\n", "b.csv"))
    with pytest.raises(DataFormatError, match="missing label column"):
        load_csv(_write(tmp_path, "1,2,0\n", "c.csv"), label_column=5)
    with pytest.raises(DataFormatError, match="missing label column"):
        load_csv(_write(tmp_path, "a,b\n1,0\n", "e.csv"), label_column="y", header=True)
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "none.csv")


# ---------------------------------------------------------------------------
# Binary tensors
# ---------------------------------------------------------------------------


def test_image_bin_shape(tmp_path):
    ds = synth_dataset("pattern_images", 8, 4, (3, 16, 16), seed=0)
    save_image_bin(ds, tmp_path / "x.uipd")
    back = load_image_bin(tmp_path / "x.uipd")
    assert back.features.shape == (8, 3, 16, 16) and back.input_dim == 768


@settings(max_examples=30, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(allow_nan=False, allow_infinity=False, width=64)),
    st.integers(2, 7), st.integers(0, 10**6),
)
def test_image_bin_round_trip_bit_exact(tmp_path_factory, feats, c, seed):
    labels = np.random.default_rng(seed).integers(0, c, size=feats.shape[0])
    ds = Dataset(feats, labels, c)
    path = tmp_path_factory.mktemp("bin") / "x.uipd"
    save_image_bin(ds, path)
    back = load_image_bin(path)
    assert back.features.tobytes() == ds.features.reshape(back.features.shape).tobytes()
    assert back.labels.tolist() == ds.labels.tolist() and back.num_classes == c


def test_image_bin_header_layout(tmp_path):
    ds = Dataset(np.zeros((2, 1, 2, 3)), [0, 1], 2)
    save_image_bin(ds, tmp_path / "x.uipd")
    blob = (tmp_path / "x.uipd").read_bytes()
    assert struct.unpack_from("<4s6I", blob) == (b"UIPD", 1, 2, 1, 2, 3, 2)
    assert len(blob) == 28 + 8 * 12 + 4 * 2


def test_image_bin_corruption_is_rejected(tmp_path):
    ds = synth_dataset("pattern_images", 4, 2, (1, 4, 4), seed=0)
    path = tmp_path / "x.uipd"
    save_image_bin(ds, path)
    blob = bytearray(path.read_bytes())
    bad_len = bytearray(blob)
    struct.pack_into("<I", bad_len, 8, 5)  # n field
    (tmp_path / "n.uipd").write_bytes(bytes(bad_len))
    with pytest.raises(DataFormatError, match="header implies"):
        load_image_bin(tmp_path / "n.uipd")
    (tmp_path / "t.uipd").write_bytes(bytes(blob[:-3]))
    with pytest.raises(DataFormatError):
        load_image_bin(tmp_path / "t.uipd")
    (tmp_path / "m.uipd").write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(DataFormatError, match="magic"):
        load_image_bin(tmp_path / "m.uipd")
    bad_ver = bytearray(blob)
    struct.pack_into("<I", bad_ver, 4, 9)
    (tmp_path / "v.uipd").write_bytes(bytes(bad_ver))
    with pytest.raises(DataFormatError, match="version"):
        load_image_bin(tmp_path / "v.uipd")


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def test_minmax_examples():
    ds = Dataset(np.array([[2.0, 5.0], [4.0, 5.0]]), [0, 1], 2)
    n = minmax_normalize(ds)
    assert n.features.tolist() == [[0.0, 0.0], [1.0, 0.0]]
    again = minmax_normalize(n)
    assert np.array_equal(again.features, n.features)
    assert np.array_equal(again.norm.minimum, n.norm.minimum)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 5)),
                  elements=st.floats(-1e3, 1e3)))
def test_normalisation_round_trip(x):
    ds = Dataset(x, np.zeros(x.shape[0], dtype=int), 2)
    n = minmax_normalize(ds)
    assert n.features.min() >= 0 and n.features.max() <= 1
    back = denormalize(n).features
    live = x.max(axis=0) > x.min(axis=0)
    assert np.allclose(back[:, live], x[:, live], rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


# ---------------------------------------------------------------------------
# Splits and selections
# ---------------------------------------------------------------------------


def test_split_sizes_and_determinism():
    ds = synth_dataset("tabular_blobs", 10, 2, 3, seed=0)
    d0, du = split_pretrain_private(ds, seed=5)
    assert (len(d0), len(du)) == (8, 2)
    d0b, dub = split_pretrain_private(ds, seed=5)
    assert np.array_equal(d0.features, d0b.features) and np.array_equal(du.labels, dub.labels)
    with pytest.raises(SelectionError):
        split_pretrain_private(ds.subset([0, 1, 2, 3]), seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 200), st.integers(0, 1000))
def test_split_is_disjoint_and_exhaustive(n, seed):
    keep, private = data.split_indices(n, 0.2, seed)
    assert private.size == int(np.floor(0.2 * n))
    assert sorted(np.concatenate([keep, private]).tolist()) == list(range(n))


def test_parse_selection():
    assert parse_selection("index:17") == ByIndex((17,))
    assert parse_selection("index:1,2") == ByIndex((1, 2))
    assert parse_selection("class:0:0.5", seed=3) == ByClass(0, 0.5, 3)
    assert parse_selection("class:2") == ByClass(2, 1.0, 0)
    assert parse_selection("classes:0,3") == ByClasses((0, 3))
    for bad in ("foo:1", "index:", "class:a"):
        with pytest.raises(SelectionError):
            parse_selection(bad)


def test_select_whole_class():
    ds = synth_dataset("tabular_blobs", 40, 4, 3, seed=1)
    kept, removed, idx = select_unlearn(ds, ByClass(0, 1.0))
    assert np.all(removed.labels == 0) and len(removed) == ds.class_counts()[0]
    assert not np.any(kept.labels == 0)


def test_select_proportion_on_fifty_samples():
    labels = np.r_[np.zeros(50, int), np.ones(30, int)]
    ds = Dataset(np.random.default_rng(0).uniform(size=(80, 2)), labels, 2)
    _, removed, idx = select_unlearn(ds, ByClass(0, 0.1, seed=2))
    assert len(removed) == 5 and np.all(ds.labels[idx] == 0)


def test_select_single_and_classes():
    ds = synth_dataset("tabular_blobs", 20, 4, 3, seed=2)
    kept, removed, idx = select_unlearn(ds, ByIndex((7,)))
    assert len(removed) == 1 and idx.tolist() == [7]
    assert np.array_equal(kept.features, np.delete(ds.features, 7, axis=0))
    _, removed, _ = select_unlearn(ds, ByClasses((1, 3)))
    assert set(removed.labels.tolist()) == {1, 3}


def test_select_errors():
    ds = synth_dataset("tabular_blobs", 20, 4, 3, seed=2)
    with pytest.raises(SelectionError):
        select_unlearn(ds, ByIndex((20,)))
    with pytest.raises(SelectionError):
        select_unlearn(ds, ByIndex(()))
    with pytest.raises(SelectionError):
        select_unlearn(ds, ByClass(0, 0.01))  # rounds to zero samples
    with pytest.raises(SelectionError):
        select_unlearn(ds, ByClass(0, 1.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 3), st.floats(0.05, 1.0), st.integers(0, 100))
def test_selection_partitions_dataset(cls, p, seed):
    ds = synth_dataset("tabular_blobs", 60, 4, 2, seed=seed)
    members = int((ds.labels == cls).sum())
    want = int(np.floor(p * members + 0.5))
    if want == 0:
        with pytest.raises(SelectionError):
            select_unlearn(ds, ByClass(cls, p, seed))
        return
    kept, removed, idx = select_unlearn(ds, ByClass(cls, p, seed))
    assert len(removed) == want and len(set(idx.tolist())) == want
    assert (0 if kept is None else len(kept)) + len(removed) == len(ds)
    again = select_unlearn(ds, ByClass(cls, p, seed))[2]
    assert np.array_equal(idx, again)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind,shape", [("tabular_blobs", 5), ("pattern_images", (3, 8, 8))])
def test_synth_deterministic_balanced_in_box(kind, shape):
    a = synth_dataset(kind, 51, 4, shape, seed=9)
    b = synth_dataset(kind, 51, 4, shape, seed=9)
    assert a.features.tobytes() == b.features.tobytes()
    counts = a.class_counts()
    assert counts.max() - counts.min() <= 1
    assert a.features.min() >= 0 and a.features.max() <= 1


def test_tabular_blobs_are_learnable():
    ds = synth_dataset("tabular_blobs", 200, 4, 24, seed=0)
    model = sgd_train(init_model(mlp(24, [32, 32], 4), 0), ds, TrainConfig(0.1, 8, 20, seed=0))
    assert evaluate(model, ds)["accuracy"] >= 0.95
