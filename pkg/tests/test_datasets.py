import struct

import numpy as np
import pytest

from crossdomain.datasets import (SOURCE_GENERATED, SOURCE_REAL, TARGET, TransitionDataset, compute_norm_stats,
                                  concat, csv_header, load_dataset, read_csv, save_dataset, write_csv)
from crossdomain.errors import DimensionError, FormatError, ValidationError


def make(n=10, sd=3, ad=2, seed=0, origin=SOURCE_REAL):
    rng = np.random.default_rng(seed)
    return TransitionDataset(rng.normal(size=(n, sd)), rng.uniform(-1, 1, (n, ad)), rng.normal(size=n),
                             rng.normal(size=(n, sd)), rng.integers(0, 2, n), origin=origin)


def test_basic_shape_and_dtypes():
    ds = make()
    assert (ds.n_rows, ds.state_dim, ds.action_dim) == (10, 3, 2)
    assert ds.states.dtype == np.float32
    assert ds.features().shape == (10, 8)
    assert ds.vectors().shape == (10, 9)
    with pytest.raises(ValueError):
        ds.states[0, 0] = 1.0


def test_terminal_must_be_binary():
    with pytest.raises(ValidationError):
        TransitionDataset(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2), np.zeros((2, 1)), [0, 0.5])


def test_concat_keeps_origin_and_checks_dims():
    a, b = make(origin=SOURCE_REAL), make(seed=1, origin="source-generated")
    c = concat(a, b)
    assert len(c) == 20
    assert list(np.unique(c.origin)) == [SOURCE_REAL, SOURCE_GENERATED]
    with pytest.raises(DimensionError):
        concat(a, make(sd=4))


def test_norm_stats_population_std_with_guard():
    ds = TransitionDataset(np.array([[1.0], [3.0]]), np.array([[0.5], [0.5]]), [0.0, 2.0],
                           np.array([[0.0], [0.0]]), [0, 0])
    ns = compute_norm_stats(ds)
    np.testing.assert_allclose(ns.mean, [2.0, 0.5, 0.0])
    np.testing.assert_allclose(ns.std, [1.0, 1.0, 1.0])   # second/third columns constant -> guard 1
    assert ns.reward_std == 1.0 and ns.reward_mean == 1.0
    z = ns.normalize(ds.features())
    np.testing.assert_allclose(ns.denormalize(z), ds.features())


def test_dmcd_round_trip_bit_exact(tmp_path):
    ds = make(50, 4, 3, seed=7)
    save_dataset(ds, tmp_path / "d.dmcd")
    back = load_dataset(tmp_path / "d.dmcd", origin=TARGET)
    assert back.records().tobytes() == ds.records().tobytes()
    assert back.fingerprint() == ds.fingerprint()
    assert (back.origin == TARGET).all()
    raw = (tmp_path / "d.dmcd").read_bytes()
    assert raw[:4] == b"DMC1"
    assert struct.unpack_from("<IIIII", raw, 4) == (1, 50, 4, 3, 3)


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"NOPE" + b[4:], 0),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], 4),
    (lambda b: b[:8] + struct.pack("<I", 0) + b[12:], 8),
    (lambda b: b[:20] + struct.pack("<I", 1) + b[24:], 20),
    (lambda b: b[:-4], None),
    (lambda b: b + b"\0\0\0\0", None),
])
def test_dmcd_corruption_is_rejected_with_offset(tmp_path, mutate, offset):
    save_dataset(make(), tmp_path / "d.dmcd")
    (tmp_path / "bad.dmcd").write_bytes(mutate((tmp_path / "d.dmcd").read_bytes()))
    with pytest.raises(FormatError) as exc:
        load_dataset(tmp_path / "bad.dmcd")
    assert exc.value.offset is not None
    if offset is not None:
        assert exc.value.offset == offset


def test_dmcd_bad_terminal_points_at_the_value(tmp_path):
    ds = make(3, 1, 1)
    save_dataset(ds, tmp_path / "d.dmcd")
    raw = bytearray((tmp_path / "d.dmcd").read_bytes())
    width = 2 * 1 + 1 + 2
    off = 24 + 4 * (1 * width + width - 1)
    raw[off:off + 4] = struct.pack("<f", 0.5)
    (tmp_path / "bad.dmcd").write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        load_dataset(tmp_path / "bad.dmcd")
    assert exc.value.offset == off


def test_empty_dataset_cannot_be_saved(tmp_path):
    empty = make().subset(np.array([], dtype=int))
    with pytest.raises(ValidationError):
        save_dataset(empty, tmp_path / "e.dmcd")


def test_csv_header_convention_and_round_trip(tmp_path):
    assert ",".join(csv_header(2, 1)) == "s0,s1,a0,r,ns0,ns1,terminal"
    ds = make(5, 2, 1)
    write_csv(ds, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv")
    assert back.records().tobytes() == ds.records().tobytes()


def test_csv_with_wrong_header_is_rejected(tmp_path):
    (tmp_path / "d.csv").write_text("a0,s0,r,ns0,terminal\n1,2,3,4,0\n")
    with pytest.raises(FormatError):
        read_csv(tmp_path / "d.csv")


def test_from_vectors_forces_terminal_zero_and_generated_origin():
    x = np.arange(14, dtype=np.float32).reshape(2, 7)
    ds = TransitionDataset.from_vectors(x, 2, 2)
    assert (ds.terminals == 0).all() and (ds.origin == SOURCE_GENERATED).all()
    np.testing.assert_array_equal(ds.vectors(), x)
    with pytest.raises(DimensionError):
        TransitionDataset.from_vectors(x, 3, 2)
