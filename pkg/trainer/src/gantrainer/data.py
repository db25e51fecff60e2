"""Dataset I/O in the companion toolkit's on-disk format.

A dataset directory holds manifest.json plus images.bin (and masks.bin
when any image carries a defect mask). The .bin container is a 64-byte
little-endian header (magic "UTVS", version, flags, three dims, three
geometry floats, time offset, CRC32 of the payload) followed by f32
pixel data with dims (n_images, 64, 64). This module implements that
contract independently; the two packages share only the bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UTVS"
FORMAT_VERSION = 1
HEADER_LEN = 64
HEADER = struct.Struct("<4sHHIIIfffII")
FLAG_IMAGE_STACK = 0x2
IMAGE_SIZE = 64
LABELS = ("defective", "clean")


class DatasetFormatError(ValueError):
    pass


@dataclass
class ImageRecord:
    pixels: np.ndarray
    label: str
    depth_gate: tuple[int, int] = (0, 0)
    mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise DatasetFormatError(
                f"image shape {self.pixels.shape} != ({IMAGE_SIZE}, {IMAGE_SIZE})")
        if self.label not in LABELS:
            raise DatasetFormatError(f"label must be one of {LABELS}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.pixels.shape:
                raise DatasetFormatError("mask shape differs from image shape")


@dataclass
class ImageSet:
    records: list[ImageRecord]
    provenance: str
    seed: int

    def __len__(self) -> int:
        return len(self.records)

    def pixel_stack(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
        return np.stack([r.pixels for r in self.records])


def read_stack(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_LEN:
        raise DatasetFormatError("file shorter than the fixed header")
    magic, version, flags, d0, d1, d2, _, _, _, _, crc = \
        HEADER.unpack(raw[:HEADER.size])
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    payload = raw[HEADER_LEN:]
    if len(payload) != d0 * d1 * d2 * 4:
        raise DatasetFormatError("payload length does not match header dims")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DatasetFormatError("payload CRC mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(d0, d1, d2)


def write_stack(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise DatasetFormatError("image stack must be 3-D")
    payload = arr.tobytes()
    header = HEADER.pack(
        MAGIC, FORMAT_VERSION, FLAG_IMAGE_STACK,
        arr.shape[0], arr.shape[1], arr.shape[2],
        0.0, 0.0, 0.0, 0, zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(header.ljust(HEADER_LEN, b"\x00") + payload)


def load_image_set(in_dir) -> ImageSet:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    stack = read_stack(in_dir / "images.bin")
    masks = read_stack(in_dir / "masks.bin") if manifest.get("has_masks") else None
    records = []
    for entry in manifest["images"]:
        i = entry["index"]
        mask = masks[i] > 0.5 if entry.get("has_mask") and masks is not None else None
        records.append(ImageRecord(
            pixels=stack[i].copy(), label=entry["label"],
            depth_gate=tuple(entry["depth_gate"]), mask=mask,
            meta=entry.get("meta", {})))
    return ImageSet(records=records, provenance=manifest["provenance"],
                    seed=int(manifest["seed"]))


def save_image_set(s: ImageSet, out_dir, rng_algorithm: str = "torch") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_stack(out_dir / "images.bin", s.pixel_stack())
    any_mask = any(r.mask is not None for r in s.records)
    if any_mask:
        write_stack(out_dir / "masks.bin", np.stack([
            r.mask.astype(np.float32) if r.mask is not None
            else np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
            for r in s.records]))
    manifest = {
        "format_version": FORMAT_VERSION,
        "provenance": s.provenance,
        "seed": int(s.seed),
        "rng_algorithm": rng_algorithm,
        "n_images": len(s.records),
        "has_masks": any_mask,
        "images": [
            {
                "index": i,
                "label": r.label,
                "depth_gate": [int(r.depth_gate[0]), int(r.depth_gate[1])],
                "has_mask": r.mask is not None,
                "meta": r.meta,
            }
            for i, r in enumerate(s.records)
        ],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
