import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from corona.errors import AlignmentError, IngestionError, MissingArtifactError, UnknownIdError, ValidationError
from corona.features import (FeatureHeaderError, FeatureStore, NonFiniteError, TextAttributes, TruncatedPayloadError,
                             decode_matrix, encode_matrix, load_features, load_tensors, read_jsonl, save_features,
                             save_tensors)
from corona.graph import build_graph


def test_header_layout():
    blob = encode_matrix(np.array([[1.5, -2.0, 0.25]]))
    assert blob[:4] == b"CRNF"
    assert struct.unpack("<III", blob[4:16]) == (1, 1, 3)
    assert np.frombuffer(blob[16:], "<f4").tolist() == [1.5, -2.0, 0.25]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_is_bit_exact(mat):
    out, end = decode_matrix(encode_matrix(mat))
    assert end == 16 + mat.size * 4
    assert out.tobytes() == mat.astype("<f4").tobytes()


def test_file_errors(tmp_path):
    p = tmp_path / "f.crnf"
    with pytest.raises(MissingArtifactError):
        load_features(p)
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FeatureHeaderError, match="magic"):
        load_features(p)
    p.write_bytes(struct.pack("<4sIII", b"CRNF", 2, 1, 1) + bytes(4))
    with pytest.raises(FeatureHeaderError, match="version"):
        load_features(p)
    p.write_bytes(encode_matrix(np.ones((2, 3)))[:-4])
    with pytest.raises(TruncatedPayloadError):
        load_features(p)
    p.write_bytes(encode_matrix(np.ones((2, 3))) + b"\0")
    with pytest.raises(FeatureHeaderError, match="trailing"):
        load_features(p)
    save_features(p, np.array([[np.nan, 1.0]]))
    with pytest.raises(NonFiniteError):
        load_features(p)
    save_features(p, np.ones((2, 3)))
    with pytest.raises(AlignmentError):
        load_features(p, expected_rows=3)
    with pytest.raises(AlignmentError):
        load_features(p, expected_dim=4)
    # every ingestion error names the file
    with pytest.raises(IngestionError, match="f.crnf"):
        p.write_bytes(b"CR")
        load_features(p)


def test_store_alignment():
    g = build_graph([("a", "x", 1), ("b", "y", 2)])
    FeatureStore(np.ones((2, 4)), np.ones((2, 4))).check_alignment(g)
    with pytest.raises(AlignmentError):
        FeatureStore(np.ones((3, 4)), np.ones((2, 4))).check_alignment(g)
    with pytest.raises(AlignmentError):
        FeatureStore(np.ones((2, 4)), np.ones((2, 5)))
    with pytest.raises(NonFiniteError):
        FeatureStore(np.full((2, 4), np.inf), np.ones((2, 4)))


def test_tensor_bundle(tmp_path):
    tensors = {"W": np.arange(6.0).reshape(2, 3), "b": np.array([0.5, -1.0]), "e": np.ones((3, 2))}
    save_tensors(tmp_path / "ck", tensors, {"kind": "demo", "seed": 3})
    out, manifest = load_tensors(tmp_path / "ck")
    assert manifest["kind"] == "demo" and manifest["seed"] == 3
    for k, v in tensors.items():
        assert out[k].shape == v.shape
        np.testing.assert_array_equal(out[k], v)
    with pytest.raises(MissingArtifactError):
        load_tensors(tmp_path / "nope")


def test_text_attributes(tmp_path, caplog):
    g = build_graph([("a", "x", 1), ("a", "y", 2), ("b", "x", 3)])
    t = TextAttributes.from_records(
        g, [{"id": "a", "Age": 30}, {"id": "ghost", "Age": 1}],
        [{"id": "y", "title": "Y", "year": "1999"}, {"id": "x", "title": "X", "year": 2001}])
    assert "ghost" in caplog.text
    assert t.profile(0) == {"Age": 30}
    assert t.profile(1) == {}
    assert [r["id"] for r in t.item_text([1, 0, 1])] == ["x", "y"]
    assert [r["id"] for r in t.history_texts([1, 0, 1])] == ["y", "x", "y"]
    assert t.item_text([1])[0]["year"] == 1999
    with pytest.raises(UnknownIdError):
        t.item_text([5])
    with pytest.raises(ValidationError, match="year"):
        TextAttributes([], [{"title": "Z", "year": "99"}])
    t.save(g, tmp_path / "u.jsonl", tmp_path / "i.jsonl")
    again = TextAttributes.load(g, tmp_path / "u.jsonl", tmp_path / "i.jsonl")
    assert again.item_texts == t.item_texts and again.user_profiles == t.user_profiles


def test_jsonl_errors(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"id": "a"}\n{broken\n')
    with pytest.raises(IngestionError, match="t.jsonl:2"):
        read_jsonl(p)
    p.write_text('{"name": "a"}\n')
    with pytest.raises(IngestionError, match="id"):
        read_jsonl(p)
