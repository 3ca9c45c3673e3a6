import json
import struct

import numpy as np
import pytest

from mqmk.binio import FormatError
from mqmk.data import (
    LabeledSet,
    SynthSpec,
    dataset_bytes,
    generate,
    nearest_template_predict,
    parse_dataset,
    read_dataset,
    read_stream,
    split_stream,
    write_dataset,
    write_stream,
)

SMALL = SynthSpec(num_classes=6, train_per_class=10, test_per_class=5, image_size=8)


def independent_pcld(labels, images, num_classes):
    """Reference writer built directly from the byte layout."""
    n, c, h, w = images.shape
    out = b"PCLD" + struct.pack("<6I", 1, n, c, h, w, num_classes)
    out += b"".join(struct.pack("<I", int(y)) for y in labels)
    out += b"".join(struct.pack("<f", float(v)) for v in images.reshape(-1))
    return out


def test_default_shapes_and_range():
    ds = generate(SynthSpec())
    assert ds.train.images.shape == (2000, 3, 16, 16)
    assert ds.test.images.shape == (1000, 3, 16, 16)
    assert ds.train.images.dtype == np.float32
    assert 0.0 <= ds.train.images.min() and ds.train.images.max() <= 1.0
    assert np.array_equal(np.bincount(ds.test.labels), [50] * 20)


def test_generation_deterministic():
    assert generate(SMALL).train.equals(generate(SMALL).train)
    other = generate(SynthSpec(**{**SMALL.__dict__, "seed": 1}))
    assert not other.train.equals(generate(SMALL).train)


def test_classes_stable_under_num_classes():
    """Class c has the same pattern whatever the total class count."""
    a = generate(SMALL)
    b = generate(SynthSpec(**{**SMALL.__dict__, "num_classes": 9}))
    assert a.patterns == b.patterns[:6]
    assert a.train.subset(a.train.labels == 2).equals(b.train.subset(b.train.labels == 2))


def test_nearest_template_oracle_is_accurate():
    ds = generate(SynthSpec())
    pred = nearest_template_predict(ds.test.images, ds.templates())
    assert np.mean(pred == ds.test.labels) > 0.95


def test_pretext_offset_changes_patterns():
    bench = generate(SMALL)
    pre = generate(SynthSpec(**{**SMALL.__dict__, "class_offset": 1000}))
    assert not {p.as_tuple() for p in bench.patterns} & {p.as_tuple() for p in pre.patterns}


def test_spec_validation():
    with pytest.raises(ValueError):
        generate(SynthSpec(num_classes=0))
    with pytest.raises(ValueError):
        generate(SynthSpec(noise_sigma=-1.0))


def test_split_stream_partition():
    ds = generate(SMALL)
    stream = split_stream(ds.train, ds.test, 3, seed=5)
    classes = [c for t in stream for c in t.class_ids]
    assert sorted(classes) == list(range(6))
    for t in stream:
        assert set(t.train.labels.tolist()) == set(t.class_ids)
        assert len(t.test) == 2 * 5
    assert stream.task_of_class()[classes[0]] == 1
    again = split_stream(ds.train, ds.test, 3, seed=5)
    assert [t.class_ids for t in again] == [t.class_ids for t in stream]


def test_split_stream_rejects_uneven():
    ds = generate(SMALL)
    with pytest.raises(ValueError, match="equal"):
        split_stream(ds.train, ds.test, 4, seed=0)


def test_pcld_matches_independent_writer():
    ds = generate(SMALL)
    raw = dataset_bytes(ds.test, 6)
    assert raw == independent_pcld(ds.test.labels, ds.test.images, 6)
    back, nc = parse_dataset(raw)
    assert nc == 6 and back.equals(ds.test)


def test_pcld_file_round_trip(tmp_path):
    ds = generate(SMALL)
    write_dataset(tmp_path / "d.pcld", ds.train)
    back, nc = read_dataset(tmp_path / "d.pcld")
    assert back.equals(ds.train) and nc == 6
    assert dataset_bytes(back, nc) == (tmp_path / "d.pcld").read_bytes()


@pytest.mark.parametrize("mutate, offset", [
    (lambda r: b"PCLX" + r[4:], 3),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], 4),
    (lambda r: r[:-1], None),
    (lambda r: r[:10], None),
])
def test_pcld_malformed(mutate, offset):
    raw = dataset_bytes(generate(SMALL).test, 6)
    with pytest.raises(FormatError) as err:
        parse_dataset(mutate(raw))
    assert "offset" in str(err.value)
    if offset is not None:
        assert err.value.offset == offset


def test_pcld_label_out_of_range():
    data = LabeledSet(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 5]))
    with pytest.raises(FormatError, match="label 5") as err:
        parse_dataset(dataset_bytes(data, 3))
    assert err.value.offset == 28 + 4


def test_read_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "missing.pcld")


def test_stream_directory_round_trip(tmp_path):
    ds = generate(SMALL)
    stream = split_stream(ds.train, ds.test, 2, seed=3)
    write_stream(tmp_path, stream)
    meta = json.loads((tmp_path / "stream.json").read_text())
    assert meta["num_tasks"] == 2
    back = read_stream(tmp_path)
    assert [t.class_ids for t in back] == [t.class_ids for t in stream]
    for a, b in zip(back, stream):
        assert a.train.equals(b.train) and a.test.equals(b.test)
