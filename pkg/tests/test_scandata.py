import binascii
import json

import numpy as np
import pytest
from PIL import Image

from ndtsynth.scandata import (
    CScanImage,
    Dataset,
    RngSpec,
    VolumeFormatError,
    VolumeScan,
    export_png,
    load_dataset,
    load_volume,
    make_rng,
    save_dataset,
    save_volume,
    spawn_rngs,
)
from ndtsynth.scandata import _HEADER_LEN, _write_array


def random_volume(rng, n_b=4, n_t=128, normalized=False):
    samples = rng.random((n_b, 64, n_t), dtype=np.float32)
    return VolumeScan(samples=samples, normalized=normalized)


def test_round_trip_bit_exact(tmp_path):
    v = random_volume(make_rng(1))
    path = tmp_path / "vol.bin"
    save_volume(v, path)
    back = load_volume(path)
    assert back.samples.tobytes() == v.samples.tobytes()
    # float metadata travels through the header's f32 fields
    assert back.sample_rate_hz == pytest.approx(v.sample_rate_hz, rel=1e-6)
    assert back.element_pitch_mm == pytest.approx(v.element_pitch_mm, rel=1e-6)
    assert back.scan_step_mm == pytest.approx(v.scan_step_mm, rel=1e-6)
    assert back.normalized == v.normalized
    assert back.time_offset == v.time_offset


def test_round_trip_preserves_flags_and_offset(tmp_path):
    samples = make_rng(2).random((4, 64, 80), dtype=np.float32)
    v = VolumeScan(samples=samples, normalized=True, time_offset=90)
    path = tmp_path / "vol.bin"
    save_volume(v, path)
    back = load_volume(path)
    assert back.normalized is True
    assert back.time_offset == 90
    sidecar = json.loads((tmp_path / "vol.bin.json").read_text())
    assert sidecar["dims"] == [4, 64, 80]
    assert sidecar["normalized"] is True


def test_load_rejects_wrong_element_dim(tmp_path):
    arr = np.zeros((4, 32, 128), dtype=np.float32)
    path = tmp_path / "bad.bin"
    _write_array(path, arr, sample_rate_hz=1e8, pitch_mm=0.8, step_mm=0.8,
                 flags=0, time_offset=0)
    with pytest.raises(ValueError, match=r"expected 64.*actual 32"):
        load_volume(path)


def test_corrupt_magic_is_structured_error(tmp_path):
    path = tmp_path / "vol.bin"
    save_volume(random_volume(make_rng(3)), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError) as err:
        load_volume(path)
    assert err.value.reason == "magic"


def test_truncated_header_is_structured_error(tmp_path):
    path = tmp_path / "vol.bin"
    path.write_bytes(b"\x00" * 10)
    with pytest.raises(VolumeFormatError) as err:
        load_volume(path)
    assert err.value.reason == "header"


def test_flipped_payload_byte_fails_checksum(tmp_path):
    path = tmp_path / "vol.bin"
    save_volume(random_volume(make_rng(4)), path)
    raw = bytearray(path.read_bytes())
    # independent checksum of the untouched payload matches the header field
    stored_crc = int.from_bytes(raw[36:40], "little")
    assert binascii.crc32(bytes(raw[_HEADER_LEN:])) == stored_crc
    raw[_HEADER_LEN + 17] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError) as err:
        load_volume(path)
    assert err.value.reason == "checksum"


def test_volume_scan_validates_element_dim():
    with pytest.raises(ValueError, match="expected 64"):
        VolumeScan(samples=np.zeros((4, 32, 128), dtype=np.float32))


def test_normalized_volume_range_checked():
    samples = np.full((2, 64, 64), 1.5, dtype=np.float32)
    with pytest.raises(ValueError, match=r"outside \[0, 1\]"):
        VolumeScan(samples=samples, normalized=True)


def uniform_image(value, label="clean"):
    return CScanImage(
        pixels=np.full((64, 64), value, dtype=np.float32),
        depth_gate=(0, 5),
        label=label,
    )


def test_export_png_levels(tmp_path):
    img = uniform_image(0.0)
    img.pixels[0, 0] = 0.5
    img.pixels[0, 1] = 1.0
    path = tmp_path / "img.png"
    export_png(img, path)
    levels = np.asarray(Image.open(path))
    assert levels.dtype == np.uint8
    # half rounds up
    assert levels[0, 0] == 128
    assert levels[0, 1] == 255
    assert levels[1:].max() == 0


def test_export_png_all_black_all_white(tmp_path):
    export_png(uniform_image(0.0), tmp_path / "black.png")
    export_png(uniform_image(1.0), tmp_path / "white.png")
    assert np.asarray(Image.open(tmp_path / "black.png")).max() == 0
    assert np.asarray(Image.open(tmp_path / "white.png")).min() == 255


def test_export_png_rejects_out_of_range(tmp_path):
    img = uniform_image(0.5)
    img.pixels = img.pixels + 1.0  # bypass construction check
    with pytest.raises(ValueError, match="refusing to clip"):
        export_png(img, tmp_path / "bad.png")


def test_cscan_image_validation():
    with pytest.raises(ValueError, match="64x64"):
        CScanImage(pixels=np.zeros((32, 32)), depth_gate=(0, 5), label="clean")
    with pytest.raises(ValueError, match=r"outside \[0, 1\]"):
        CScanImage(pixels=np.full((64, 64), 2.0), depth_gate=(0, 5), label="clean")
    with pytest.raises(ValueError, match="label"):
        CScanImage(pixels=np.zeros((64, 64)), depth_gate=(0, 5), label="broken")


def test_rng_reproducibility():
    a = make_rng(99).random(16)
    b = make_rng(99).random(16)
    assert np.array_equal(a, b)
    spec = RngSpec(seed=99)
    assert np.array_equal(spec.generator().random(16), a)


def test_spawned_streams_differ_and_reproduce():
    first = [g.random(8) for g in spawn_rngs(5, 3)]
    second = [g.random(8) for g in spawn_rngs(5, 3)]
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
    assert not np.array_equal(first[0], first[1])
    assert not np.array_equal(first[0], make_rng(5).random(8))


def test_rng_spec_rejects_unknown_algorithm():
    with pytest.raises(ValueError, match="algorithm"):
        RngSpec(seed=1, algorithm="mt19937").generator()


def sample_dataset():
    rng = make_rng(11)
    images = []
    for i in range(5):
        mask = None
        label = "clean"
        if i % 2 == 0:
            mask = np.zeros((64, 64), dtype=bool)
            mask[10 : 20, 30 : 40] = True
            label = "defective"
        images.append(CScanImage(
            pixels=rng.random((64, 64), dtype=np.float32),
            depth_gate=(5 * i, 5 * i + 5),
            label=label,
            defect_mask=mask,
            meta={"depth_mm": 1.5 * i},
        ))
    return Dataset(images=images, provenance="simulated", seed=11)


def test_dataset_round_trip(tmp_path):
    ds = sample_dataset()
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.provenance == "simulated"
    assert back.seed == 11
    assert len(back) == len(ds)
    for a, b in zip(ds.images, back.images):
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert a.label == b.label
        assert a.depth_gate == b.depth_gate
        assert (a.defect_mask is None) == (b.defect_mask is None)
        if a.defect_mask is not None:
            assert np.array_equal(a.defect_mask, b.defect_mask)
        assert a.meta == b.meta


def test_dataset_manifest_contents(tmp_path):
    ds = sample_dataset()
    save_dataset(ds, tmp_path / "ds")
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["provenance"] == "simulated"
    assert manifest["rng_algorithm"] == "pcg64"
    assert manifest["n_images"] == 5
    assert manifest["images"][0]["label"] == "defective"
    assert manifest["images"][1]["has_mask"] is False


def test_dataset_rejects_unknown_provenance():
    with pytest.raises(ValueError, match="provenance"):
        Dataset(images=[], provenance="mystery", seed=0)


def test_dataset_labels_vector():
    ds = sample_dataset()
    assert ds.labels().tolist() == [True, False, True, False, True]
