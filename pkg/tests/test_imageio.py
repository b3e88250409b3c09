"""Netpbm image round-trips, manifest parsing, and the weight checkpoint format."""

import os
import struct

import numpy as np
import pytest

from videoface import checkpoint, imageio
from videoface.errors import CheckpointError, ImageFormatError, ManifestError


# ------------------------------------------------------------------- images


@pytest.mark.parametrize("seed,channels", [(0, 1), (1, 1), (2, 3), (3, 3)])
def test_image_round_trip_is_exact_after_quantization(tmp_path, seed, channels):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (channels, 9, 7))
    path = str(tmp_path / "img.pnm")
    imageio.write_image(path, img)
    back = imageio.read_image(path)
    assert back.shape == (channels, 9, 7)
    assert back.dtype == np.float32
    expected = np.rint(img * 255.0) / 255.0
    np.testing.assert_allclose(back, expected, rtol=0, atol=1e-7)


def test_grayscale_file_layout(tmp_path):
    img = np.array([[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]])  # [1,2,3]
    path = str(tmp_path / "tiny.pgm")
    imageio.write_image(path, img)
    raw = open(path, "rb").read()
    assert raw == b"P5\n3 2\n255\n" + bytes([0, 255, 0, 255, 0, 255])


def test_rgb_file_is_p6_with_interleaved_pixels(tmp_path):
    img = np.zeros((3, 1, 2))
    img[0, 0, 0] = 1.0  # red pixel first, green second
    img[1, 0, 1] = 1.0
    path = str(tmp_path / "tiny.ppm")
    imageio.write_image(path, img)
    raw = open(path, "rb").read()
    assert raw == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0])


def test_write_clips_out_of_range_values(tmp_path):
    img = np.array([[[-0.4, 1.7]]])
    path = str(tmp_path / "clip.pgm")
    imageio.write_image(path, img)
    back = imageio.read_image(path)
    np.testing.assert_array_equal(back[0, 0], [0.0, 1.0])


@pytest.mark.parametrize("shape", [(2, 4, 4), (4, 4), (1, 2, 3, 4)])
def test_write_rejects_non_image_shapes(tmp_path, shape):
    with pytest.raises(ImageFormatError, match="1|3"):
        imageio.write_image(str(tmp_path / "bad.pgm"), np.zeros(shape))


def test_read_skips_header_comments(tmp_path):
    path = str(tmp_path / "c.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n# a comment line\n2 # trailing\n1\n255\n\x10\x20")
    img = imageio.read_image(path)
    assert img.shape == (1, 1, 2)
    np.testing.assert_allclose(img[0, 0], [16 / 255, 32 / 255], atol=1e-7)


def test_read_rejects_unknown_magic(tmp_path):
    path = str(tmp_path / "bad.pbm")
    with open(path, "wb") as fh:
        fh.write(b"P4\n2 2\n255\n\x00\x00\x00\x00")
    with pytest.raises(ImageFormatError, match="magic"):
        imageio.read_image(path)


def test_read_rejects_wide_maxval(tmp_path):
    path = str(tmp_path / "deep.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n2 1\n65535\n\x00\x00\x00\x00")
    with pytest.raises(ImageFormatError, match="maxval"):
        imageio.read_image(path)


def test_read_rejects_truncated_pixels(tmp_path):
    path = str(tmp_path / "cut.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n4 4\n255\n\x00\x01\x02")  # 3 of 16 bytes
    with pytest.raises(ImageFormatError, match="truncated"):
        imageio.read_image(path)


def test_read_rejects_zero_dimension(tmp_path):
    path = str(tmp_path / "zero.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n0 3\n255\n")
    with pytest.raises(ImageFormatError, match="dimensions"):
        imageio.read_image(path)


def test_read_rejects_header_eof(tmp_path):
    path = str(tmp_path / "eof.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n2")
    with pytest.raises(ImageFormatError, match="end of file"):
        imageio.read_image(path)


# ----------------------------------------------------------------- manifests


def _records():
    return [
        imageio.Record("still/a.pgm", "s000", None, None, "still", "gallery"),
        imageio.Record("still/b.pgm", "s000", None, None, "still", "train"),
        imageio.Record("video/v0/f00.pgm", "s001", "s001_v0", 0, "real_video", "probe"),
        imageio.Record("sim/a_m7.pgm", "s000", None, None, "sim_video", "train"),
        imageio.Record("odd.pgm", "s002", None, None, "still", None),
    ]


def test_manifest_round_trip(tmp_path):
    path = str(tmp_path / "manifest.tsv")
    imageio.write_manifest(path, _records())
    assert imageio.read_manifest(path) == _records()


def test_manifest_nulls_are_dashes(tmp_path):
    path = str(tmp_path / "manifest.tsv")
    imageio.write_manifest(path, _records())
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[0] == "still/a.pgm\ts000\t-\t-\tstill\tgallery"
    assert lines[4].endswith("\tstill\t-")


def test_manifest_blank_lines_skipped(tmp_path):
    path = str(tmp_path / "manifest.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\na.pgm\ts0\t-\t-\tstill\ttrain\n\n")
    recs = imageio.read_manifest(path)
    assert len(recs) == 1 and recs[0].subject_id == "s0"


def test_manifest_field_count_error_names_line(tmp_path):
    path = str(tmp_path / "manifest.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("a.pgm\ts0\t-\t-\tstill\ttrain\n")
        fh.write("b.pgm\ts0\t-\t-\tstill\n")
    with pytest.raises(ManifestError, match=":2:"):
        imageio.read_manifest(path)


@pytest.mark.parametrize(
    "line,complaint",
    [
        ("a.pgm\ts0\t-\t-\tdvd\ttrain", "stream"),
        ("a.pgm\ts0\t-\t-\tstill\tjudge", "role"),
        ("a.pgm\ts0\tv0\tx9\treal_video\tprobe", "frame_idx"),
    ],
)
def test_manifest_rejects_bad_fields(tmp_path, line, complaint):
    path = str(tmp_path / "manifest.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(line + "\n")
    with pytest.raises(ManifestError, match=complaint):
        imageio.read_manifest(path)


def test_write_manifest_rejects_bad_record(tmp_path):
    bad = imageio.Record("a.pgm", "s0", None, None, "webcam", None)
    with pytest.raises(ManifestError, match="stream"):
        imageio.write_manifest(str(tmp_path / "m.tsv"), [bad])


def test_record_paths_resolve_against_manifest_directory(tmp_path):
    sub = tmp_path / "corpus"
    sub.mkdir()
    manifest = str(sub / "manifest.tsv")
    rec = imageio.Record("still/a.pgm", "s0", None, None, "still", None)
    assert imageio.record_abspath(manifest, rec) == str(sub / "still" / "a.pgm")


def test_empty_manifest_round_trip(tmp_path):
    path = str(tmp_path / "empty.tsv")
    imageio.write_manifest(path, [])
    assert os.path.getsize(path) == 0
    assert imageio.read_manifest(path) == []


# --------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    arrays = {
        "trunk.conv1.w": rng.standard_normal((4, 1, 3, 3)).astype(np.float32),
        "trunk.conv1.b": rng.standard_normal(4).astype(np.float32),
        "fusion.w": rng.standard_normal((8, 2)).astype(np.float32),
        "step": np.array([3.0], dtype=np.float32),
    }
    path = str(tmp_path / "w.tbew")
    checkpoint.save_arrays(path, arrays)
    back = checkpoint.load_arrays(path)
    assert set(back) == set(arrays)
    for name in arrays:
        assert back[name].dtype == np.float32
        assert back[name].shape == arrays[name].shape
        assert np.array_equal(
            back[name].view(np.uint32), np.asarray(arrays[name], dtype=np.float32).view(np.uint32)
        )


def test_checkpoint_same_content_same_bytes(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {"b": rng.standard_normal(5).astype(np.float32), "a": np.ones(2, np.float32)}
    p1, p2 = str(tmp_path / "1.tbew"), str(tmp_path / "2.tbew")
    checkpoint.save_arrays(p1, arrays)
    checkpoint.save_arrays(p2, dict(reversed(list(arrays.items()))))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_records_are_name_sorted_on_disk(tmp_path):
    path = str(tmp_path / "w.tbew")
    checkpoint.save_arrays(path, {"zz": np.zeros(1, np.float32), "aa": np.ones(1, np.float32)})
    raw = open(path, "rb").read()
    assert raw.find(b"aa") < raw.find(b"zz")


def test_checkpoint_promotes_scalars_to_length_one_vectors(tmp_path):
    path = str(tmp_path / "w.tbew")
    checkpoint.save_arrays(path, {"step": np.float32(3.0)})
    back = checkpoint.load_arrays(path)
    assert back["step"].shape == (1,)
    assert back["step"][0] == np.float32(3.0)


def test_checkpoint_casts_float64_to_float32(tmp_path):
    path = str(tmp_path / "w.tbew")
    checkpoint.save_arrays(path, {"x": np.array([1.0 / 3.0], dtype=np.float64)})
    back = checkpoint.load_arrays(path)
    assert back["x"].dtype == np.float32
    assert back["x"][0] == np.float32(1.0 / 3.0)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "bad.tbew")
    with open(path, "wb") as fh:
        fh.write(b"NOPE!")
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load_arrays(path)


@pytest.mark.parametrize("keep", [6, 8, 9, 12])
def test_checkpoint_rejects_truncation_anywhere(tmp_path, keep):
    path = str(tmp_path / "w.tbew")
    checkpoint.save_arrays(path, {"ab": np.arange(3, dtype=np.float32)})
    raw = open(path, "rb").read()
    cut = str(tmp_path / "cut.tbew")
    with open(cut, "wb") as fh:
        fh.write(raw[:keep])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.load_arrays(cut)


def test_checkpoint_rejects_out_of_order_records(tmp_path):
    def record(name):
        body = struct.pack("<H", len(name)) + name.encode() + struct.pack("<B", 1)
        return body + struct.pack("<I", 1) + struct.pack("<f", 0.0)

    path = str(tmp_path / "w.tbew")
    with open(path, "wb") as fh:
        fh.write(checkpoint.MAGIC + record("b") + record("a"))
    with pytest.raises(CheckpointError, match="order"):
        checkpoint.load_arrays(path)
