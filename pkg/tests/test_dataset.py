"""Corpus loading, patchify, and the line-delimited record envelope."""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from codechain import records
from codechain import dataset as ds
from codechain.errors import ConfigError, DataError, ParseError


def make_instance(iid, values, label=None):
    return ds.TimeSeriesInstance(id=iid, values=np.asarray(values, dtype=np.float64), label=label)


def tiny_dataset(role="source", n=3, d=2, t=8, n_classes=2):
    rng = np.random.default_rng(7)
    instances = [
        make_instance(f"i{k}", rng.normal(size=(d, t)), label=k % n_classes if role == "source" else None)
        for k in range(n)
    ]
    return ds.DomainDataset.build(instances, n_classes=n_classes, role=role)


# ---------------------------------------------------------------- records

def test_dump_line_is_sorted_and_compact():
    line = records.dump_line({"b": 1, "a": [1.5, 2]})
    assert line == '{"a":[1.5,2],"b":1}'


def test_dump_line_floats_round_trip_exactly():
    values = [0.1, 1 / 3, 1e-300, 2.5e17, -0.0]
    out = json.loads(records.dump_line({"v": values}))["v"]
    assert all(a == b for a, b in zip(out, values))


def test_dump_line_rejects_nan():
    with pytest.raises(ValueError):
        records.dump_line({"v": float("nan")})


def test_record_file_round_trip(tmp_path):
    path = tmp_path / "r.jsonl"
    header = {"kind": "corpus", "config": {"x": 1}}
    recs = [{"id": "a", "v": 1.25}, {"id": "b", "v": -3.0}]
    records.write_record_file(path, header, recs)
    got_header, got_recs = records.read_record_file(path, expected_kind="corpus")
    assert got_header["kind"] == "corpus"
    assert got_header["format"] == records.FORMAT
    assert got_recs == recs


def test_record_file_kind_mismatch(tmp_path):
    path = tmp_path / "r.jsonl"
    records.write_record_file(path, {"kind": "corpus"}, [])
    with pytest.raises(ParseError):
        records.read_record_file(path, expected_kind="quantizer")


def test_record_file_reports_bad_line_number(tmp_path):
    path = tmp_path / "r.jsonl"
    records.write_record_file(path, {"kind": "corpus"}, [{"id": "a"}])
    with open(path, "a") as f:
        f.write("{not json\n")
    with pytest.raises(ParseError) as exc:
        records.read_record_file(path, expected_kind="corpus")
    assert exc.value.line_no == 3


# ---------------------------------------------------------------- types

def test_instance_requires_2d_finite():
    with pytest.raises(DataError):
        make_instance("a", [1.0, 2.0])
    with pytest.raises(DataError):
        make_instance("a", [[1.0, np.nan]])


def test_dataset_rejects_shape_mismatch():
    good = make_instance("a", np.zeros((2, 8)), label=0)
    bad = make_instance("b", np.zeros((2, 7)), label=0)
    with pytest.raises(DataError) as exc:
        ds.DomainDataset.build([good, bad], n_classes=2, role="source")
    assert "b" in str(exc.value)


def test_dataset_rejects_duplicate_ids():
    a = make_instance("a", np.zeros((1, 4)), label=0)
    b = make_instance("a", np.ones((1, 4)), label=1)
    with pytest.raises(DataError):
        ds.DomainDataset.build([a, b], n_classes=2, role="source")


def test_source_requires_labels():
    a = make_instance("a", np.zeros((1, 4)))
    with pytest.raises(DataError):
        ds.DomainDataset.build([a], n_classes=2, role="source")


def test_label_out_of_range():
    a = make_instance("a", np.zeros((1, 4)), label=5)
    with pytest.raises(DataError):
        ds.DomainDataset.build([a], n_classes=2, role="source")


def test_role_validated():
    a = make_instance("a", np.zeros((1, 4)), label=0)
    with pytest.raises(DataError):
        ds.DomainDataset.build([a], n_classes=2, role="validation")


# ---------------------------------------------------------------- patchify

def test_patchify_128_by_8():
    inst = make_instance("a", np.arange(3 * 128, dtype=np.float64).reshape(3, 128))
    grid = ds.patchify(inst, 8)
    assert grid.n_patches == 16
    assert grid.patches.shape == (3, 16, 8)


def test_patchify_300_by_15():
    inst = make_instance("a", np.zeros((1, 300)))
    assert ds.patchify(inst, 15).n_patches == 20


def test_patchify_drops_trailing_remainder():
    inst = make_instance("a", np.arange(10, dtype=np.float64)[None, :])
    grid = ds.patchify(inst, 8)
    assert grid.n_patches == 1
    assert_array_equal(grid.patches[0, 0], np.arange(8, dtype=np.float64))


def test_patchify_lossless_up_to_truncation():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(2, 23))
    grid = ds.patchify(make_instance("a", values), 5)
    for d in range(2):
        assert_array_equal(grid.patches[d].reshape(-1), values[d, :20])


def test_patchify_rejects_small_m():
    inst = make_instance("a", np.zeros((1, 8)))
    with pytest.raises(ConfigError):
        ds.patchify(inst, 1)


def test_patchify_rejects_m_longer_than_series():
    inst = make_instance("a", np.zeros((1, 4)))
    with pytest.raises(DataError):
        ds.patchify(inst, 8)


# ---------------------------------------------------------------- corpus io

def test_minimal_corpus_round_trip(tmp_path):
    inst = make_instance("only", np.array([[1.0, 2.0, 3.0, 4.0]]), label=0)
    data = ds.DomainDataset.build([inst], n_classes=1, role="source")
    path = tmp_path / "c.jsonl"
    ds.save_corpus(path, data)
    back = ds.load_corpus(path)
    assert len(back) == 1
    assert back.n_channels == 1 and back.length == 4
    assert back.instances[0].label == 0


def test_corpus_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(2, 12)) * np.array([[1e-7], [1e9]])
    vals[0, 0] = 1 / 3
    vals[1, 0] = -0.0
    data = ds.DomainDataset.build([make_instance("x", vals, label=1)], n_classes=2, role="source")
    path = tmp_path / "c.jsonl"
    ds.save_corpus(path, data)
    back = ds.load_corpus(path)
    assert back.instances[0].values.tobytes() == vals.tobytes()


def test_save_load_save_is_byte_stable(tmp_path):
    data = tiny_dataset()
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    ds.save_corpus(p1, data, config={"seed": 0})
    ds.save_corpus(p2, ds.load_corpus(p1), config={"seed": 0})
    assert p1.read_bytes() == p2.read_bytes()


def test_load_corpus_dimension_mismatch_names_id(tmp_path):
    path = tmp_path / "c.jsonl"
    header = {"kind": "corpus", "role": "source", "n_channels": 1, "length": 3, "n_classes": 1}
    recs = [
        {"id": "ok", "label": 0, "channels": [[1.0, 2.0, 3.0]]},
        {"id": "short", "label": 0, "channels": [[1.0, 2.0]]},
    ]
    records.write_record_file(path, header, recs)
    with pytest.raises(DataError) as exc:
        ds.load_corpus(path)
    assert "short" in str(exc.value)


def test_load_corpus_missing_label_for_source(tmp_path):
    path = tmp_path / "c.jsonl"
    header = {"kind": "corpus", "role": "source", "n_channels": 1, "length": 2, "n_classes": 1}
    records.write_record_file(path, header, [{"id": "a", "label": None, "channels": [[0.0, 1.0]]}])
    with pytest.raises(DataError):
        ds.load_corpus(path)


def test_strip_labels():
    data = tiny_dataset(role="target")
    labeled = ds.DomainDataset.build(
        [make_instance(i.id, i.values, label=0) for i in data.instances],
        n_classes=2,
        role="target",
    )
    stripped = ds.strip_labels(labeled)
    assert all(i.label is None for i in stripped.instances)
    assert stripped.role == "target"


def test_truth_round_trip(tmp_path):
    insts = [make_instance(f"t{k}", np.zeros((1, 4)), label=k % 3) for k in range(5)]
    data = ds.DomainDataset.build(insts, n_classes=3, role="target")
    path = tmp_path / "truth.jsonl"
    ds.save_truth(path, data)
    mapping, n_classes = ds.load_truth(path)
    assert n_classes == 3
    assert mapping == {f"t{k}": k % 3 for k in range(5)}
