"""Container round-trips and the corruption -> error-type matrix."""

import json
import struct
import zlib

import numpy as np
import pytest

from tsaflow.dataio import (
    CHECKPOINT_MAGIC,
    DATASET_MAGIC,
    load_checkpoint,
    read_dataset,
    read_framed,
    read_pgm,
    save_checkpoint,
    write_dataset,
    write_framed,
    write_pgm,
)
from tsaflow.errors import (
    DatasetChecksumError,
    DatasetFormatError,
    DatasetShapeError,
    DatasetTruncatedError,
)
from tsaflow.scenegen import SceneConfig, SceneSample, generate_dataset


@pytest.fixture(scope="module")
def samples():
    cfg = SceneConfig(height=32, width=32, sprite_count=(1, 2), sprite_size=(16, 16), seed=3)
    return generate_dataset(cfg, count=3, seed=3)


def test_dataset_round_trip_bit_exact(tmp_path, samples):
    path = tmp_path / "d.tsa"
    write_dataset(path, samples)
    back = read_dataset(path)
    assert len(back) == len(samples)
    for orig, got in zip(samples, back):
        for name, _, dtype in SceneSample.FIELD_SPECS:
            a, b = getattr(orig, name), getattr(got, name)
            assert b.dtype == np.dtype(dtype)
            assert np.array_equal(a, b), name


def test_dataset_write_is_deterministic(tmp_path, samples):
    p1, p2 = tmp_path / "a.tsa", tmp_path / "b.tsa"
    write_dataset(p1, samples)
    write_dataset(p2, samples)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_dataset_refused(tmp_path):
    with pytest.raises(DatasetFormatError):
        write_dataset(tmp_path / "e.tsa", [])


def test_mixed_sizes_refused(tmp_path, samples):
    other = generate_dataset(
        SceneConfig(height=40, width=40, sprite_count=(1, 1), sprite_size=(16, 16), seed=9),
        count=1,
        seed=9,
    )
    with pytest.raises(DatasetShapeError):
        write_dataset(tmp_path / "m.tsa", list(samples) + other)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "encoder.conv0.w": rng.normal(size=(8, 3, 4, 4)).astype(np.float32),
        "encoder.conv0.b": np.zeros(8, np.float32),
        "attention.wq": rng.normal(size=(12, 16)).astype(np.float64),
        "mask": rng.integers(0, 2, size=(4, 4)).astype(np.uint8),
    }
    config = {"feat_channels": 8, "iters": 3, "use_extension": True, "lr": 2e-4}
    path = tmp_path / "c.tsac"
    save_checkpoint(path, params, config, step=117)
    got_params, got_config, got_step = load_checkpoint(path)
    assert got_step == 117
    assert got_config == config
    assert set(got_params) == set(params)
    for k in params:
        assert got_params[k].dtype == params[k].dtype
        assert np.array_equal(got_params[k], params[k]), k


def test_magic_selects_container_kind(tmp_path, samples):
    ds = tmp_path / "d.tsa"
    write_dataset(ds, samples)
    with pytest.raises(DatasetFormatError, match="bad magic"):
        read_framed(ds, CHECKPOINT_MAGIC)


def test_kind_field_checked_even_with_right_magic(tmp_path):
    # Hand-build a container with dataset magic but a checkpoint header.
    path = tmp_path / "odd.tsa"
    arr = np.arange(4, dtype=np.float32)
    write_framed(
        path,
        DATASET_MAGIC,
        {"kind": "checkpoint", "arrays": [{"name": "x", "shape": [4], "dtype": "float32"}]},
        [arr],
    )
    with pytest.raises(DatasetFormatError, match="not a dataset"):
        read_dataset(path)


# ---------------------------------------------------------------------
# corruption matrix: every mode must land on its own error type
# ---------------------------------------------------------------------


@pytest.fixture()
def framed(tmp_path):
    path = tmp_path / "f.bin"
    rng = np.random.default_rng(1)
    arrays = [rng.normal(size=(3, 5)).astype(np.float32), rng.integers(0, 9, size=7).astype(np.uint8)]
    header = {
        "kind": "dataset",
        "arrays": [
            {"name": "a", "shape": [3, 5], "dtype": "float32"},
            {"name": "b", "shape": [7], "dtype": "uint8"},
        ],
    }
    write_framed(path, DATASET_MAGIC, header, arrays)
    return path


def _rewrite(path, data: bytes):
    path.write_bytes(data)
    return path


def test_clean_file_parses(framed):
    header, payload = read_framed(framed, DATASET_MAGIC)
    assert header["payload_bytes"] == len(payload) == 3 * 5 * 4 + 7


def test_bad_magic(framed):
    data = bytearray(framed.read_bytes())
    data[:4] = b"WHAT"
    with pytest.raises(DatasetFormatError, match="bad magic"):
        read_framed(_rewrite(framed, bytes(data)), DATASET_MAGIC)


def test_shorter_than_prologue(framed):
    with pytest.raises(DatasetTruncatedError):
        read_framed(_rewrite(framed, framed.read_bytes()[:5]), DATASET_MAGIC)


def test_header_cut_short(framed):
    with pytest.raises(DatasetTruncatedError, match="header"):
        read_framed(_rewrite(framed, framed.read_bytes()[:12]), DATASET_MAGIC)


def test_payload_cut_short(framed):
    with pytest.raises(DatasetTruncatedError, match="payload"):
        read_framed(_rewrite(framed, framed.read_bytes()[:-10]), DATASET_MAGIC)


def test_missing_checksum_counts_as_truncated(framed):
    with pytest.raises(DatasetTruncatedError):
        read_framed(_rewrite(framed, framed.read_bytes()[:-4]), DATASET_MAGIC)


def test_flipped_payload_byte(framed):
    data = bytearray(framed.read_bytes())
    (hlen,) = struct.unpack("<I", data[4:8])
    data[8 + hlen + 3] ^= 0xFF
    with pytest.raises(DatasetChecksumError, match="CRC32"):
        read_framed(_rewrite(framed, bytes(data)), DATASET_MAGIC)


def test_trailing_garbage(framed):
    with pytest.raises(DatasetFormatError, match="trailing"):
        read_framed(_rewrite(framed, framed.read_bytes() + b"\x00\x01"), DATASET_MAGIC)


def test_header_not_json(framed):
    data = bytearray(framed.read_bytes())
    (hlen,) = struct.unpack("<I", data[4:8])
    data[8 : 8 + hlen] = b"\xff" * hlen
    with pytest.raises(DatasetFormatError, match="JSON"):
        read_framed(_rewrite(framed, bytes(data)), DATASET_MAGIC)


def _repack_header(path, mutate):
    """Parse, mutate the header dict, and re-frame with a correct length."""
    data = path.read_bytes()
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    mutate(header)
    hbytes = json.dumps(header, separators=(",", ":")).encode()
    return _rewrite(path, data[:4] + struct.pack("<I", len(hbytes)) + hbytes + data[8 + hlen :])


def test_inflated_declared_shape(framed):
    # CRC still matches; only the shape arithmetic is off.
    def grow(header):
        header["arrays"][0]["shape"][0] += 1

    with pytest.raises(DatasetShapeError, match="declared shapes"):
        read_framed(_repack_header(framed, grow), DATASET_MAGIC)


def test_unknown_dtype(framed):
    def poison(header):
        header["arrays"][1]["dtype"] = "complex128"

    with pytest.raises(DatasetFormatError, match="dtype"):
        read_framed(_repack_header(framed, poison), DATASET_MAGIC)


def test_missing_header_keys(framed):
    def strip(header):
        del header["arrays"]

    with pytest.raises(DatasetFormatError, match="missing"):
        read_framed(_repack_header(framed, strip), DATASET_MAGIC)


# ---------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------


def test_pgm_round_trip_scales_max(tmp_path):
    path = tmp_path / "v.pgm"
    vals = np.array([[0.0, 0.25], [0.5, 2.0]])
    write_pgm(path, vals)
    back = read_pgm(path)
    assert back.shape == (2, 2)
    assert back[1, 1] == 65535
    assert back[0, 0] == 0
    # linear in between
    assert abs(back[1, 0] - 65535 * 0.25) <= 1


def test_pgm_header_bytes(tmp_path):
    path = tmp_path / "h.pgm"
    write_pgm(path, np.ones((3, 5)))
    data = path.read_bytes()
    assert data.startswith(b"P5\n5 3\n65535\n")
    # 16-bit big-endian payload, all at max
    pix = np.frombuffer(data.split(b"\n", 3)[3], dtype=">u2")
    assert pix.size == 15 and (pix == 65535).all()


def test_pgm_zero_and_negative(tmp_path):
    path = tmp_path / "z.pgm"
    write_pgm(path, np.zeros((2, 2)))
    assert (read_pgm(path) == 0).all()
    write_pgm(path, np.array([[-3.0, 1.0]]))
    assert read_pgm(path)[0, 0] == 0  # negatives clip to black


def test_pgm_rejects_non_2d(tmp_path):
    with pytest.raises(DatasetShapeError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
