import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microevo.field import (
    ChecksumError,
    DigitalLibrary,
    Field2D,
    LibraryFormatError,
    SampleSequence,
    SequenceTooShortError,
    export_pgm,
    library_digest,
    load_library,
    make_manifest,
    read_blob,
    read_pgm,
    save_library,
    slide_windows,
    split_library,
    window_count,
    window_library,
    write_blob,
)


def _seq(t, h=2, w=2, offset=0.0):
    return SampleSequence(np.arange(t * h * w, dtype=np.float32).reshape(t, h, w) + offset)


def _lib(n, t=4, h=2, w=2):
    return DigitalLibrary(tuple(_seq(t, h, w, offset=100 * i) for i in range(n)), make_manifest("test", 0, {}, deterministic=True))


# -- containers ----------------------------------------------------------------


def test_field_rejects_non_finite():
    with pytest.raises(ValueError):
        Field2D(np.array([[0.0, np.nan]]))


def test_field_is_read_only_float32():
    f = Field2D(np.zeros((3, 4)), 0.5)
    assert f.values.dtype == np.float32
    assert (f.height, f.width) == (3, 4)
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


def test_sequence_needs_two_frames_and_equal_shapes():
    with pytest.raises(ValueError):
        SampleSequence(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        SampleSequence.from_frames([Field2D(np.zeros((2, 2))), Field2D(np.zeros((2, 3)))])


def test_library_requires_uniform_samples():
    with pytest.raises(ValueError):
        DigitalLibrary((_seq(4), _seq(5)), {})


# -- windowing -----------------------------------------------------------------


def test_window_examples():
    assert len(slide_windows(_seq(8), 3, 1, 1)) == 5
    only = slide_windows(_seq(4), 3, 1, 1)
    assert len(only) == 1
    np.testing.assert_array_equal(np.concatenate(only[0]), _seq(4).data)
    starts = [int(x[0, 0, 0]) // 4 for x, _ in slide_windows(_seq(10), 2, 2, 3)]
    assert starts == [0, 3, 6]


def test_window_too_short():
    with pytest.raises(SequenceTooShortError):
        slide_windows(_seq(3), 3, 1)


@given(st.integers(2, 30), st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_window_count_matches_enumeration(t, n_in, n_out, step):
    brute = sum(1 for s in range(t) if s % step == 0 and s + n_in + n_out <= t)
    assert window_count(t, n_in, n_out, step) == brute
    if brute:
        items = slide_windows(_seq(t, 1, 1), n_in, n_out, step)
        assert len(items) == brute
        for j, (x, y) in enumerate(items):
            assert x.shape[0] == n_in and y.shape[0] == n_out
            assert x[0, 0, 0] == j * step


def test_window_library_shapes():
    ds = window_library(_lib(3, t=8), 3, 1)
    assert ds.inputs.shape == (15, 3, 2, 2) and ds.targets.shape == (15, 1, 2, 2)
    assert ds.in_len == 3 and ds.out_len == 1
    assert len(ds.items) == 15


# -- splitting -----------------------------------------------------------------


@pytest.mark.parametrize("n,n_train", [(908, 800), (15, 10), (2, 1)])
def test_split_sizes(n, n_train):
    tr, te = split_library(_lib(n, t=2, h=1, w=1), n_train)
    assert (len(tr), len(te)) == (n_train, n - n_train)
    assert tr.manifest["split"]["part"] == "train"


def test_split_rejects_bad_sizes():
    for bad in (0, 5, 7):
        with pytest.raises(ValueError):
            split_library(_lib(5), bad)


@given(st.integers(2, 40), st.data(), st.booleans(), st.integers(0, 100))
@settings(max_examples=50)
def test_split_is_partition(n, data, shuffle, seed):
    n_train = data.draw(st.integers(1, n - 1))
    lib = _lib(n, t=2, h=1, w=1)
    tr, te = split_library(lib, n_train, seed, shuffle)
    ids = sorted(int(s.data[0, 0, 0]) for s in tr.samples + te.samples)
    assert ids == sorted(int(s.data[0, 0, 0]) for s in lib.samples)
    assert not set(tr.manifest["split"]["indices"]) & set(te.manifest["split"]["indices"])
    again = split_library(lib, n_train, seed, shuffle)
    assert again[0] == tr


def test_split_default_takes_first_samples():
    tr, te = split_library(_lib(5), 3)
    assert tr.manifest["split"]["indices"] == [0, 1, 2]
    assert te.samples[0] == _lib(5).samples[3]


# -- serialization -------------------------------------------------------------


def test_round_trip_small(tmp_path):
    lib = DigitalLibrary(
        (SampleSequence(np.array([[[1, 2], [3, 4]], [[5, 6], [7, 8.5]]]), 0.075, "label", {"k": [1, 2]}),),
        make_manifest("t", 3, {"a": 1}),
    )
    save_library(lib, tmp_path / "lib")
    back = load_library(tmp_path / "lib")
    assert back == lib
    assert back.manifest == lib.manifest


@given(st.integers(1, 4), st.integers(2, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_round_trip_identity(tmp_path_factory, n, t, h, w, seed):
    rng = np.random.default_rng(seed)
    samples = tuple(SampleSequence(rng.normal(size=(t, h, w)).astype(np.float32), 0.5, "x", {"i": i}) for i in range(n))
    lib = DigitalLibrary(samples, make_manifest("rand", seed, {"n": n}))
    d = tmp_path_factory.mktemp("lib")
    save_library(lib, d)
    back = load_library(d)
    assert back == lib
    assert library_digest(back) == library_digest(lib)


def test_truncated_blob_raises_checksum(tmp_path):
    write_blob(tmp_path / "a.bin", np.ones((2, 3, 3)))
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "a.bin").write_bytes(raw[:-7])
    with pytest.raises(ChecksumError):
        read_blob(tmp_path / "a.bin")


def test_flipped_byte_raises_checksum(tmp_path):
    write_blob(tmp_path / "a.bin", np.ones((2, 3, 3)))
    raw = bytearray((tmp_path / "a.bin").read_bytes())
    raw[20] ^= 0xFF
    (tmp_path / "a.bin").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_blob(tmp_path / "a.bin")


def test_bad_magic_and_version(tmp_path):
    write_blob(tmp_path / "a.bin", np.ones((1, 2, 2)), magic=b"XXXX")
    with pytest.raises(LibraryFormatError):
        read_blob(tmp_path / "a.bin")
    save_library(_lib(1), tmp_path / "lib")
    m = json.loads((tmp_path / "lib" / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "lib" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(LibraryFormatError):
        load_library(tmp_path / "lib")


def test_blob_layout_is_little_endian_with_16_byte_header(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    write_blob(tmp_path / "a.bin", a)
    raw = (tmp_path / "a.bin").read_bytes()
    assert len(raw) == 16 + 24 + 4
    assert raw[:4] == b"MEVF"
    np.testing.assert_array_equal(np.frombuffer(raw[16:40], "<f4"), a.ravel())


def test_deterministic_manifest_has_fixed_timestamp():
    assert make_manifest("g", 1, {}, deterministic=True)["created"] == "1970-01-01T00:00:00Z"


def test_pgm_export(tmp_path):
    v = np.array([[0.0, 0.5], [1.0, 0.25]])
    export_pgm(v, tmp_path / "f.pgm")
    img = read_pgm(tmp_path / "f.pgm")
    np.testing.assert_array_equal(img, [[0, 128], [255, 64]])
    export_pgm(np.full((3, 3), 7.0), tmp_path / "c.pgm")
    assert not read_pgm(tmp_path / "c.pgm").any()


def test_pgm_payload_starting_with_whitespace_bytes(tmp_path):
    # a leading value that scales to 10 ('\n') must not be eaten by the header parser
    v = np.array([[10.0, 0.0, 255.0]])
    export_pgm(v, tmp_path / "w.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "w.pgm"), [[10, 0, 255]])


def test_digest_ignores_timestamp_only():
    a = DigitalLibrary((_seq(2),), {"generator": "g", "created": "x"})
    b = DigitalLibrary((_seq(2),), {"generator": "g", "created": "y"})
    c = DigitalLibrary((_seq(2, offset=1),), {"generator": "g", "created": "x"})
    assert library_digest(a) == library_digest(b) != library_digest(c)
