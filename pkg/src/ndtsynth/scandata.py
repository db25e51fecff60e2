"""Core data types, deterministic randomness, and bit-exact persistence.

Volumes are raw or processed phased-array acquisitions indexed
[b_scan][element][time]; images are 64x64 gated C-scans. Files use a fixed
64-byte binary header with a CRC32 over the little-endian f32 payload plus a
JSON sidecar, so round trips are checkable bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

ELEMENT_COUNT = 64
IMAGE_SIZE = 64

# One generator algorithm for the whole artifact; recorded in every manifest.
RNG_ALGORITHM = "pcg64"

PROVENANCES = (
    "experimental-analog",
    "simulated",
    "gan",
    "real-noise",
    "cscan-noise",
    "ascan-noise",
)

_MAGIC = b"UTVS"
_FORMAT_VERSION = 1
_HEADER_LEN = 64
# magic, version, flags, dim0..dim2, sample_rate, pitch, step, time_offset, crc32
_HEADER = struct.Struct("<4sHHIIIfffII")

_FLAG_NORMALIZED = 0x1
_FLAG_IMAGE_STACK = 0x2


class VolumeFormatError(ValueError):
    """Raised when a volume file fails structural decoding.

    `reason` is one of: magic, version, header, dims, checksum, payload.
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for a given seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent child generators derived from one seed.

    Children are reproducible across platforms and never overlap the parent
    stream.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


@dataclass(frozen=True)
class RngSpec:
    """Seed plus the artifact-wide generator algorithm, as stored in manifests."""

    seed: int
    algorithm: str = RNG_ALGORITHM

    def generator(self) -> np.random.Generator:
        if self.algorithm != RNG_ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}")
        return make_rng(self.seed)


@dataclass(eq=False)
class VolumeScan:
    """One acquisition volume: samples[b_scan][element][time], f32.

    `time_offset` records how many leading time samples were removed by wall
    truncation so depth gates can still be reported in absolute indices.
    """

    samples: np.ndarray
    sample_rate_hz: float = 1e8
    element_pitch_mm: float = 0.8
    scan_step_mm: float = 0.8
    normalized: bool = False
    time_offset: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 3:
            raise ValueError(f"expected 3-D samples, got {self.samples.ndim}-D")
        n_el = self.samples.shape[1]
        if n_el != ELEMENT_COUNT:
            raise ValueError(
                f"element dimension mismatch: expected {ELEMENT_COUNT}, actual {n_el}"
            )
        if self.normalized and self.samples.size:
            lo = float(self.samples.min())
            hi = float(self.samples.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(
                    f"normalized volume has samples outside [0, 1]: [{lo}, {hi}]"
                )

    @property
    def n_bscans(self) -> int:
        return self.samples.shape[0]

    @property
    def n_time(self) -> int:
        return self.samples.shape[2]


@dataclass(eq=False)
class CScanImage:
    """Gated 64x64 C-scan image with label and optional defect footprint mask.

    `depth_gate` is (start_sample, end_sample) in absolute time indices.
    `meta` carries JSON-serializable source parameters into manifests.
    """

    pixels: np.ndarray
    depth_gate: tuple[int, int]
    label: str
    defect_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(
                f"expected {IMAGE_SIZE}x{IMAGE_SIZE} pixels, got {self.pixels.shape}"
            )
        lo = float(self.pixels.min())
        hi = float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixels outside [0, 1]: [{lo}, {hi}]")
        if self.label not in ("defective", "clean"):
            raise ValueError(f"label must be 'defective' or 'clean', got {self.label!r}")
        self.depth_gate = (int(self.depth_gate[0]), int(self.depth_gate[1]))
        if self.defect_mask is not None:
            self.defect_mask = np.asarray(self.defect_mask, dtype=bool)
            if self.defect_mask.shape != (IMAGE_SIZE, IMAGE_SIZE):
                raise ValueError(
                    f"defect mask shape {self.defect_mask.shape} != image shape"
                )


@dataclass(eq=False)
class Dataset:
    """A labelled image collection from a single source method."""

    images: list[CScanImage]
    provenance: str
    seed: int

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(
                f"provenance must be one of {PROVENANCES}, got {self.provenance!r}"
            )
        self.seed = int(self.seed)

    def __len__(self) -> int:
        return len(self.images)

    def labels(self) -> np.ndarray:
        return np.array([img.label == "defective" for img in self.images], dtype=bool)


def _write_array(path: Path, arr: np.ndarray, *, sample_rate_hz: float,
                 pitch_mm: float, step_mm: float, flags: int, time_offset: int) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    payload = arr.tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    header = _HEADER.pack(
        _MAGIC, _FORMAT_VERSION, flags,
        arr.shape[0], arr.shape[1], arr.shape[2],
        sample_rate_hz, pitch_mm, step_mm,
        time_offset, crc,
    )
    header = header.ljust(_HEADER_LEN, b"\x00")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _read_array(path: Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_LEN:
        raise VolumeFormatError("header", f"file shorter than {_HEADER_LEN}-byte header")
    try:
        magic, version, flags, d0, d1, d2, rate, pitch, step, t_off, crc = \
            _HEADER.unpack(raw[:_HEADER.size])
    except struct.error as exc:
        raise VolumeFormatError("header", f"header unpack failed: {exc}") from exc
    if magic != _MAGIC:
        raise VolumeFormatError("magic", f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _FORMAT_VERSION:
        raise VolumeFormatError(
            "version", f"unsupported format version {version}, expected {_FORMAT_VERSION}"
        )
    payload = raw[_HEADER_LEN:]
    expected_bytes = d0 * d1 * d2 * 4
    if len(payload) != expected_bytes:
        raise VolumeFormatError(
            "payload", f"payload length {len(payload)} != expected {expected_bytes}"
        )
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if actual_crc != crc:
        raise VolumeFormatError(
            "checksum", f"payload CRC32 {actual_crc:#010x} != stored {crc:#010x}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(d0, d1, d2)
    meta = {
        "flags": flags,
        "sample_rate_hz": float(rate),
        "element_pitch_mm": float(pitch),
        "scan_step_mm": float(step),
        "time_offset": int(t_off),
    }
    return arr, meta


def save_volume(v: VolumeScan, path) -> None:
    """Write a volume plus a JSON sidecar; payload is little-endian f32 + CRC32."""
    path = Path(path)
    flags = _FLAG_NORMALIZED if v.normalized else 0
    _write_array(
        path, v.samples,
        sample_rate_hz=v.sample_rate_hz, pitch_mm=v.element_pitch_mm,
        step_mm=v.scan_step_mm, flags=flags, time_offset=v.time_offset,
    )
    sidecar = {
        "dims": list(v.samples.shape),
        "sample_rate_hz": v.sample_rate_hz,
        "element_pitch_mm": v.element_pitch_mm,
        "scan_step_mm": v.scan_step_mm,
        "normalized": v.normalized,
        "time_offset": v.time_offset,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )


def load_volume(path) -> VolumeScan:
    arr, meta = _read_array(Path(path))
    if arr.shape[1] != ELEMENT_COUNT:
        raise ValueError(
            f"element dimension mismatch: expected {ELEMENT_COUNT}, actual {arr.shape[1]}"
        )
    return VolumeScan(
        samples=arr.copy(),
        sample_rate_hz=meta["sample_rate_hz"],
        element_pitch_mm=meta["element_pitch_mm"],
        scan_step_mm=meta["scan_step_mm"],
        normalized=bool(meta["flags"] & _FLAG_NORMALIZED),
        time_offset=meta["time_offset"],
    )


def export_png(img: CScanImage, path) -> None:
    """8-bit grayscale export, gray level = round(pixel * 255), half rounded up.

    Out-of-range pixels are an error here, never clipped; clipping belongs to
    the synthesis steps that own it.
    """
    px = np.asarray(img.pixels, dtype=np.float64)
    lo = float(px.min())
    hi = float(px.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixels outside [0, 1]: [{lo}, {hi}]; refusing to clip")
    levels = np.floor(px * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(levels, mode="L").save(Path(path), format="PNG")


def save_dataset(ds: Dataset, out_dir) -> None:
    """Persist a dataset as manifest.json + images.bin (+ masks.bin).

    The .bin files reuse the volume binary format with dims
    (n_images, 64, 64); masks are stored as 0/1 f32.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(ds.images)
    stack = np.stack([img.pixels for img in ds.images]) if n else \
        np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    _write_array(out_dir / "images.bin", stack, sample_rate_hz=0.0, pitch_mm=0.0,
                 step_mm=0.0, flags=_FLAG_IMAGE_STACK, time_offset=0)
    any_mask = any(img.defect_mask is not None for img in ds.images)
    if any_mask:
        masks = np.stack([
            img.defect_mask.astype(np.float32) if img.defect_mask is not None
            else np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
            for img in ds.images
        ])
        _write_array(out_dir / "masks.bin", masks, sample_rate_hz=0.0, pitch_mm=0.0,
                     step_mm=0.0, flags=_FLAG_IMAGE_STACK, time_offset=0)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "provenance": ds.provenance,
        "seed": ds.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "n_images": n,
        "has_masks": any_mask,
        "images": [
            {
                "index": i,
                "label": img.label,
                "depth_gate": list(img.depth_gate),
                "has_mask": img.defect_mask is not None,
                "meta": img.meta,
            }
            for i, img in enumerate(ds.images)
        ],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    stack, _ = _read_array(in_dir / "images.bin")
    masks = None
    if manifest.get("has_masks"):
        masks, _ = _read_array(in_dir / "masks.bin")
    images = []
    for entry in manifest["images"]:
        i = entry["index"]
        mask = None
        if entry.get("has_mask") and masks is not None:
            mask = masks[i] > 0.5
        images.append(CScanImage(
            pixels=stack[i].copy(),
            depth_gate=tuple(entry["depth_gate"]),
            label=entry["label"],
            defect_mask=mask,
            meta=entry.get("meta", {}),
        ))
    return Dataset(images=images, provenance=manifest["provenance"],
                   seed=manifest["seed"])
