import numpy as np
import pytest

from gantrainer import ImageRecord, ImageSet, save_image_set


def blob_image(rng, bright, bg_sigma, bg_mean):
    img = np.clip(rng.normal(bg_mean, bg_sigma, (64, 64)), 0.0, 1.0)
    img = img.astype(np.float32)
    r, c = rng.integers(8, 50, 2)
    h, w = rng.integers(6, 12, 2)
    mask = np.zeros((64, 64), dtype=bool)
    mask[r:r + h, c:c + w] = True
    img[mask] = np.clip(bright + rng.normal(0.0, 0.03, mask.sum()), 0.0, 1.0)
    return img, mask


def make_blob_set(seed, n, bright, bg_sigma, bg_mean, provenance) -> ImageSet:
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    for _ in range(n):
        img, mask = blob_image(rng, bright, bg_sigma, bg_mean)
        records.append(ImageRecord(pixels=img, label="defective", mask=mask,
                                   meta={"kind": "blob"}))
    return ImageSet(records=records, provenance=provenance, seed=seed)


@pytest.fixture(scope="session")
def domain_dirs(tmp_path_factory):
    """32 images per side: dark clean-sim style blobs vs textured ones."""
    root = tmp_path_factory.mktemp("domains")
    save_image_set(make_blob_set(1, 32, 0.9, 0.005, 0.01, "simulated"),
                   root / "sim")
    save_image_set(
        make_blob_set(2, 32, 0.7, 0.05, 0.15, "experimental-analog"),
        root / "exp")
    return root / "sim", root / "exp"
