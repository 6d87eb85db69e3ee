import json
import struct

import numpy as np
import pytest

from tcvads.errors import FormatError, LengthError, ParameterError, ShapeError
from tcvads.formats import (
    ClassSet,
    ManifestEntry,
    decode_features,
    decode_tcvt,
    encode_features,
    encode_tcvt,
    read_feature_header,
    read_features,
    read_manifest,
    read_tcvt,
    validate_entry,
    write_features,
    write_manifest,
    write_tcvt,
)
from tcvads.synthetic import SyntheticSpec, class_directions, gen_synthetic, gen_videos


# feature files


def test_feature_round_trip_bit_exact(tmp_path):
    m = np.random.default_rng(0).normal(size=(10, 8)).astype(np.float32)
    write_features(tmp_path / "a.vfea", m)
    back = read_features(tmp_path / "a.vfea")
    assert back.dtype == np.float64
    assert back.astype(np.float32).tobytes() == m.tobytes()
    assert read_feature_header(tmp_path / "a.vfea") == (10, 8)
    write_features(tmp_path / "b.vfea", back)
    assert (tmp_path / "a.vfea").read_bytes() == (tmp_path / "b.vfea").read_bytes()


def test_feature_header_layout():
    buf = encode_features(np.ones((2, 3)))
    assert buf[:4] == b"VFEA"
    assert struct.unpack_from("<III", buf, 4) == (1, 2, 3)
    assert len(buf) == 16 + 4 * 6
    assert np.frombuffer(buf[16:], "<f4").tolist() == [1.0] * 6


def test_feature_narrowing_to_float32():
    back = decode_features(encode_features([[0.1]]))
    assert back[0, 0] == float(np.float32(0.1))


def test_feature_errors():
    good = encode_features(np.zeros((2, 2)))
    with pytest.raises(FormatError, match="offset 0"):
        decode_features(b"XFEA" + good[4:])
    with pytest.raises(FormatError, match="version"):
        decode_features(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(LengthError):
        decode_features(good[:-4])
    with pytest.raises(LengthError):
        decode_features(good[:4] + struct.pack("<III", 1, 1000, 1000) + good[16:])
    with pytest.raises(ShapeError):
        encode_features(np.zeros(3))


# checkpoints


def test_tcvt_round_trip(tmp_path):
    blocks = [np.arange(6.0).reshape(2, 3), np.array([1e-300, -2.5]), np.zeros((1, 2, 2))]
    write_tcvt(tmp_path / "m.tcvt", "AFED", [4, 2], blocks)
    tag, dims, back = read_tcvt(tmp_path / "m.tcvt", "AFED")
    assert tag == "AFED" and dims == [4, 2]
    for a, b in zip(blocks, back):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()


def test_tcvt_errors():
    buf = encode_tcvt("QACM", [1], [np.ones(3)])
    with pytest.raises(FormatError, match="expected"):
        decode_tcvt(buf, "AFED")
    with pytest.raises(FormatError):
        decode_tcvt(b"NOPE" + buf[4:])
    with pytest.raises(LengthError):
        decode_tcvt(buf[:-3])
    with pytest.raises(LengthError):
        decode_tcvt(buf + b"\0")
    with pytest.raises(FormatError):
        encode_tcvt("TOOLONG", [], [])


# class sets


def test_class_set_defaults():
    c = ClassSet()
    assert len(c.labels) == 7 and c.normal == "normal"
    assert c.anomalies == ("verbal abuse", "car accident", "explosion", "fighting", "riot", "shooting")


def test_class_set_json_round_trip():
    c = ClassSet(("calm", "fire", "flood"), "calm")
    assert json.loads(c.to_json()) == ["*calm", "fire", "flood"]
    assert ClassSet.from_json(c.to_json()) == c


def test_class_set_errors():
    with pytest.raises(FormatError):
        ClassSet(("a", "a"), "a")
    with pytest.raises(FormatError):
        ClassSet(("a", "b"), "c")
    with pytest.raises(FormatError):
        ClassSet.from_json('["a", "b"]')
    with pytest.raises(FormatError):
        ClassSet.from_json('["*a", "*b"]')
    with pytest.raises(FormatError):
        ClassSet.from_json('{"a": 1}')


# manifests


@pytest.fixture
def feature_file(tmp_path):
    write_features(tmp_path / "v.vfea", np.zeros((4, 2)))
    return tmp_path


def entry(**kw):
    base = dict(id="vid7", feature_path="v.vfea", video_label=1, class_name="riot")
    base.update(kw)
    return ManifestEntry(**base)


def test_manifest_round_trip(feature_file):
    entries = [
        entry(frame_labels=[0, 1, 1, 0], frame_spans=[[1, 3, "riot"]], split="test"),
        entry(id="n1", video_label=0, class_name="normal"),
    ]
    write_manifest(feature_file / "manifest.jsonl", entries)
    assert read_manifest(feature_file / "manifest.jsonl") == entries
    line = json.loads((feature_file / "manifest.jsonl").read_text().splitlines()[1])
    assert line == {"id": "n1", "feature_path": "v.vfea", "video_label": 0, "class": "normal"}


@pytest.mark.parametrize(
    "kw, fragment",
    [
        (dict(video_label=2), "video_label"),
        (dict(class_name="looting"), "unknown class"),
        (dict(video_label=0), "inconsistent"),
        (dict(class_name="normal"), "inconsistent"),
        (dict(frame_labels=[0, 1, 2, 0]), "frame_labels"),
        (dict(frame_labels=[0, 1]), "2 frame labels for 4"),
        (dict(frame_spans=[[3, 1, "riot"]]), "frame span"),
        (dict(frame_spans=[[0, 2, "looting"]]), "frame span"),
    ],
)
def test_manifest_validation_names_entry(feature_file, kw, fragment):
    with pytest.raises(FormatError, match=fragment) as info:
        validate_entry(entry(**kw), feature_file)
    assert "vid7" in str(info.value)


def test_manifest_duplicate_and_missing_fields(tmp_path):
    p = tmp_path / "m.jsonl"
    row = {"id": "a", "feature_path": "x", "video_label": 0, "class": "normal"}
    p.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
    with pytest.raises(FormatError, match="duplicate"):
        read_manifest(p)
    p.write_text(json.dumps({"id": "b", "video_label": 0}) + "\n")
    with pytest.raises(FormatError, match="'b'"):
        read_manifest(p)
    p.write_text("{not json\n")
    with pytest.raises(FormatError, match=":1:"):
        read_manifest(p)


# synthetic data


def test_synthetic_deterministic(tmp_path):
    spec = SyntheticSpec(n_videos_per_class=2, train_per_class=1, frames=16, burst_length=4)
    gen_synthetic(tmp_path / "a", spec)
    gen_synthetic(tmp_path / "b", spec)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 7 * 2 + 2
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    entries = read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert {e.split for e in entries} == {"train", "test"}


def test_synthetic_default_sizes():
    vids = gen_videos()
    assert len(vids) == 98
    assert sum(v.split == "train" for v in vids) == 70
    assert {v.features.shape for v in vids} == {(64, 32)}


def test_synthetic_frame_labels_mark_the_burst():
    spec = SyntheticSpec(seed=3)
    _, dirs = class_directions(spec, ClassSet())
    for v in gen_videos(spec):
        labels = np.array(v.frame_labels)
        if v.video_label == 0:
            assert not labels.any() and v.frame_spans == []
            continue
        (start, end, c), = v.frame_spans
        assert c == v.class_name and end - start == spec.burst_length
        assert labels[start:end].all() and labels.sum() == spec.burst_length
        # the class direction is visible exactly on the burst
        proj = v.features @ dirs[c]
        assert proj[start:end].min() > proj[labels == 0].max()


def test_synthetic_spec_validation():
    with pytest.raises(ParameterError):
        SyntheticSpec(separation=0.0)
    with pytest.raises(ParameterError):
        SyntheticSpec(burst_length=100)


def test_linear_probe_separates_classes():
    vids = gen_videos()
    classes = ClassSet().labels

    def design(vs):
        x = np.array([v.features.mean(axis=0) for v in vs])
        return np.hstack([x, np.ones((len(vs), 1))])

    train = [v for v in vids if v.split == "train"]
    test = [v for v in vids if v.split == "test"]
    targets = np.eye(len(classes))[[classes.index(v.class_name) for v in train]]
    w, *_ = np.linalg.lstsq(design(train), targets, rcond=None)
    pred = np.argmax(design(test) @ w, axis=1)
    acc = np.mean(pred == [classes.index(v.class_name) for v in test])
    assert acc >= 0.9
