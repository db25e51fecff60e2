"""Statistical noise synthesis for clean simulated responses.

Three methods produce experimentally-plausible datasets from clean defect
responses: superposition of measured (or analog) clean images, per-pixel
inverse-Gaussian C-scan noise, and per-B-scan structural + random A-scan
noise. Fitting routines recover the model parameters from clean noisy data,
and a peak-based rejection rule removes images whose background outshines the
defect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .scandata import (
    IMAGE_SIZE,
    CScanImage,
    Dataset,
    RngSpec,
    VolumeScan,
    spawn_rngs,
)
from .sigproc import GateSpec, extract_cscans


# ---------------------------------------------------------------------------
# model types


@dataclass(frozen=True)
class InvGaussParams:
    """Shape / location / scale of the shifted inverse-Gaussian pixel model."""

    mu: float
    loc: float
    scale: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    def to_json(self) -> dict:
        return {"mu": self.mu, "loc": self.loc, "scale": self.scale}

    @classmethod
    def from_json(cls, d: dict) -> "InvGaussParams":
        return cls(mu=float(d["mu"]), loc=float(d["loc"]), scale=float(d["scale"]))


@dataclass(eq=False)
class AScanNoiseModel:
    """Structural + random A-scan noise model over a gated time axis.

    mean_structural is the across-B-scan mean of per-B-scan structural
    profiles; structural_dev_sigma spreads fresh profiles around that mean;
    random_sigma is the per-sample white component. `savgol` smooths newly
    drawn structural profiles and may be None to disable smoothing.
    """

    mean_structural: np.ndarray
    structural_dev_sigma: float
    random_sigma: float
    savgol: tuple[int, int] | None = (11, 3)

    def __post_init__(self):
        self.mean_structural = np.asarray(self.mean_structural, dtype=np.float64)
        if self.mean_structural.ndim != 1:
            raise ValueError("mean_structural must be 1-D")
        if self.structural_dev_sigma < 0 or self.random_sigma < 0:
            raise ValueError("sigmas must be >= 0")
        if self.savgol is not None:
            w, o = self.savgol
            if w % 2 == 0 or w <= o:
                raise ValueError(
                    f"savgol window must be odd and > order, got ({w}, {o})"
                )
            self.savgol = (int(w), int(o))

    def to_json(self) -> dict:
        return {
            "mean_structural": [float(x) for x in self.mean_structural],
            "sigma_s": self.structural_dev_sigma,
            "sigma_r": self.random_sigma,
            "savgol": None if self.savgol is None else list(self.savgol),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AScanNoiseModel":
        sg = d.get("savgol")
        return cls(
            mean_structural=np.asarray(d["mean_structural"], dtype=np.float64),
            structural_dev_sigma=float(d["sigma_s"]),
            random_sigma=float(d["sigma_r"]),
            savgol=None if sg is None else (int(sg[0]), int(sg[1])),
        )


@dataclass(frozen=True)
class RejectionPolicy:
    """Reject an image when its background peak reaches the defect peak."""

    mode: str = "peak-in-mask-vs-peak-outside"
    margin: float = 1.0

    def __post_init__(self):
        if self.mode != "peak-in-mask-vs-peak-outside":
            raise ValueError(f"unknown rejection mode {self.mode!r}")
        if self.margin < 1.0:
            raise ValueError(f"margin must be >= 1, got {self.margin}")


# ---------------------------------------------------------------------------
# image-level ops


def superpose_clip(defect: CScanImage, noise: CScanImage) -> CScanImage:
    """Pixelwise sum clipped at 1; label, mask, and gate carried from the defect."""
    if defect.pixels.shape != noise.pixels.shape:
        raise ValueError(
            f"image dims differ: {defect.pixels.shape} vs {noise.pixels.shape}"
        )
    summed = np.minimum(
        defect.pixels.astype(np.float64) + noise.pixels.astype(np.float64), 1.0
    )
    return CScanImage(
        pixels=summed,
        depth_gate=defect.depth_gate,
        label=defect.label,
        defect_mask=None if defect.defect_mask is None else defect.defect_mask.copy(),
        meta=dict(defect.meta),
    )


def reject(img: CScanImage, policy: RejectionPolicy = RejectionPolicy()) -> bool:
    """True when the background peak (times margin) reaches the in-mask peak."""
    if img.defect_mask is None:
        raise ValueError("rejection needs a defect mask")
    mask = img.defect_mask
    if not mask.any():
        raise ValueError("rejection needs a non-empty defect mask")
    inside = float(img.pixels[mask].max())
    outside_px = img.pixels[~mask]
    outside = float(outside_px.max()) if outside_px.size else 0.0
    return outside * policy.margin >= inside


# ---------------------------------------------------------------------------
# inverse-Gaussian pixel noise


def invgauss_pdf(x, p: InvGaussParams) -> np.ndarray:
    """Density of the shifted/scaled inverse Gaussian; 0 outside the support."""
    x = np.asarray(x, dtype=np.float64)
    y = (x - p.loc) / p.scale
    out = np.zeros_like(y)
    pos = y > 0
    yp = y[pos]
    out[pos] = (
        1.0 / np.sqrt(2.0 * np.pi * yp ** 3)
        * np.exp(-((yp - p.mu) ** 2) / (2.0 * yp * p.mu ** 2))
    ) / p.scale
    if out.ndim == 0:
        return float(out)
    return out


def sample_invgauss(p: InvGaussParams, size, rng: np.random.Generator) -> np.ndarray:
    """Raw draws loc + scale * Y with Y inverse-Gaussian(mu), unclamped.

    Uses the transform-with-uniform-correction scheme: a squared normal is
    mapped through the smaller quadratic root and a uniform draw picks
    between the root and its reciprocal pair.
    """
    mu = p.mu
    nu = rng.standard_normal(size)
    y = nu * nu
    x = mu + 0.5 * mu * mu * y - 0.5 * mu * np.sqrt(4.0 * mu * y + (mu * y) ** 2)
    u = rng.uniform(size=np.shape(x))
    out = np.where(u <= mu / (mu + x), x, mu * mu / x)
    return p.loc + p.scale * out


def sample_invgauss_image(
    p: InvGaussParams,
    rng: np.random.Generator,
    dims: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE),
) -> CScanImage:
    """I.i.d. inverse-Gaussian pixel noise as a clean-labelled image.

    Draws below 0 are clamped to 0 (envelope amplitudes cannot be negative);
    the rare draw above 1 is clipped to keep the image type's range.
    """
    raw = sample_invgauss(p, dims, rng)
    return CScanImage(
        pixels=np.clip(raw, 0.0, 1.0),
        depth_gate=(0, 0),
        label="clean",
        meta={"noise": "cscan-invgauss"},
    )


def _invgauss_mle_at_loc(x: np.ndarray, loc: float) -> tuple[float, float]:
    # closed-form MLE of (mu, scale) for fixed loc: the shifted data is
    # scale * IG(mu, 1) = IG(scale*mu, scale), whose MLE uses the sample
    # mean and mean reciprocal.
    z = x - loc
    m = z.mean()
    lam = 1.0 / ((1.0 / z).mean() - 1.0 / m)
    scale = lam
    mu = m / lam
    return mu, scale


def _invgauss_loglik(x: np.ndarray, loc: float) -> float:
    z = x - loc
    if z.min() <= 0:
        return -np.inf
    mu, scale = _invgauss_mle_at_loc(x, loc)
    y = z / scale
    ll = (
        -0.5 * np.log(2.0 * np.pi * y ** 3)
        - (y - mu) ** 2 / (2.0 * y * mu ** 2)
        - np.log(scale)
    )
    return float(ll.sum())


def fit_invgauss(samples: np.ndarray) -> InvGaussParams:
    """Maximum-likelihood (mu, loc, scale) via profile search over loc.

    For each candidate loc the (mu, scale) pair is closed-form; loc itself is
    found by a bounded scalar search strictly below min(samples).
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 1000:
        raise ValueError(f"need >= 1000 samples to fit, got {x.size}")
    if not np.isfinite(x).all():
        raise ValueError("samples must all be finite")
    span = float(x.max() - x.min())
    if span == 0.0:
        raise ValueError("degenerate (constant) samples")
    lo = float(x.min()) - span
    hi = float(x.min()) - 1e-9 * span
    res = minimize_scalar(
        lambda loc: -_invgauss_loglik(x, loc),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-10 * span},
    )
    loc = float(res.x)
    mu, scale = _invgauss_mle_at_loc(x, loc)
    return InvGaussParams(mu=float(mu), loc=loc, scale=float(scale))


# ---------------------------------------------------------------------------
# Savitzky-Golay smoothing


def _savgol_center_coeffs(window: int, order: int) -> np.ndarray:
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    a = np.vander(offsets, order + 1, increasing=True)
    # value of the LS fit at offset 0 = first row of the pseudo-inverse
    return np.linalg.pinv(a)[0]


def savgol_filter(signal: np.ndarray, window: int, order: int) -> np.ndarray:
    """Least-squares local polynomial smoothing.

    Interior samples use the classic fixed convolution weights; each edge
    sample is fit on its truncated window, so polynomials up to `order` are
    reproduced exactly everywhere.
    """
    y = np.asarray(signal, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("signal must be 1-D")
    n = y.size
    if window % 2 == 0 or window <= order or window > n:
        raise ValueError(
            f"window must be odd, > order, and <= signal length; "
            f"got window={window}, order={order}, len={n}"
        )
    half = window // 2
    coeffs = _savgol_center_coeffs(window, order)
    out = np.empty_like(y)
    interior = np.convolve(y, coeffs[::-1], mode="valid")
    out[half : n - half] = interior
    for i in range(half):
        w = y[: i + half + 1]
        offs = np.arange(w.size, dtype=np.float64) - i
        fit = np.linalg.lstsq(np.vander(offs, order + 1, increasing=True), w,
                              rcond=None)[0]
        out[i] = fit[0]
        w = y[n - 1 - i - half :]
        offs = np.arange(w.size, dtype=np.float64) - half
        fit = np.linalg.lstsq(np.vander(offs, order + 1, increasing=True), w,
                              rcond=None)[0]
        out[n - 1 - i] = fit[0]
    return out


# ---------------------------------------------------------------------------
# A-scan structural + random noise


def decompose_bscan(bscan: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a B-scan [element][time] into its mean profile and residuals.

    structural[t] is the across-element mean; residuals reconstruct the
    input exactly when added back and sum to zero at every t.
    """
    b = np.asarray(bscan, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] < 2:
        raise ValueError("bscan must be 2-D with >= 2 A-scans")
    structural = b.mean(axis=0)
    residuals = b - structural[None, :]
    return structural, residuals


def fit_ascan_model(
    volumes: list[VolumeScan],
    savgol: tuple[int, int] | None = (11, 3),
) -> AScanNoiseModel:
    """Fit the structural + random noise model from clean gated volumes.

    Pools per-B-scan structural profiles and residuals across all volumes.
    Small-sample corrections remove the bias the across-element mean leaks
    into both estimates (residual variance shrinks by 1/E; structural
    deviations inherit sigma_r^2 / E).
    """
    if not volumes:
        raise ValueError("need at least one volume")
    n_time = volumes[0].n_time
    profiles = []
    residual_blocks = []
    for v in volumes:
        if v.n_time != n_time:
            raise ValueError("all volumes must share the gated time length")
        for b in range(v.n_bscans):
            structural, residuals = decompose_bscan(v.samples[b])
            profiles.append(structural)
            residual_blocks.append(residuals)
    n_b = len(profiles)
    if n_b < 2:
        raise ValueError("need >= 2 B-scans to separate structural deviation")
    n_el = volumes[0].samples.shape[1]

    pooled_resid = np.concatenate([r.ravel() for r in residual_blocks])
    resid_var = float(np.mean(pooled_resid ** 2))
    sigma_r = float(np.sqrt(resid_var * n_el / (n_el - 1)))

    profiles = np.asarray(profiles)
    mean_structural = profiles.mean(axis=0)
    dev = profiles - mean_structural[None, :]
    dev_var = float(np.mean(dev ** 2)) * n_b / (n_b - 1)
    sigma_s_sq = dev_var - sigma_r ** 2 / n_el
    sigma_s = float(np.sqrt(max(sigma_s_sq, 0.0)))

    return AScanNoiseModel(
        mean_structural=mean_structural,
        structural_dev_sigma=sigma_s,
        random_sigma=sigma_r,
        savgol=savgol,
    )


def synth_structural_profile(m: AScanNoiseModel,
                             rng: np.random.Generator) -> np.ndarray:
    """Fresh structural profile: mean + per-sample normal deviation, smoothed."""
    profile = m.mean_structural + rng.normal(
        0.0, m.structural_dev_sigma, size=m.mean_structural.size
    )
    if m.savgol is not None:
        profile = savgol_filter(profile, m.savgol[0], m.savgol[1])
    return np.maximum(profile, 0.0)


def synth_ascan_noise_volume(
    m: AScanNoiseModel,
    dims: tuple[int, int],
    rng: np.random.Generator,
    time_offset: int = 0,
) -> VolumeScan:
    """Noise-only volume: one structural profile per B-scan, white noise per A-scan."""
    n_bscans, n_elements = dims
    n_time = m.mean_structural.size
    vol = np.empty((n_bscans, n_elements, n_time), dtype=np.float64)
    for b in range(n_bscans):
        profile = synth_structural_profile(m, rng)
        white = rng.normal(0.0, m.random_sigma, size=(n_elements, n_time))
        vol[b] = profile[None, :] + white
    np.maximum(vol, 0.0, out=vol)
    return VolumeScan(
        samples=vol.astype(np.float32),
        normalized=False,
        time_offset=time_offset,
    )


# ---------------------------------------------------------------------------
# dataset assembly

NOISE_METHODS = ("real-noise", "cscan-noise", "ascan-noise")


def make_dataset(
    method: str,
    defects,
    noise_source,
    policy: RejectionPolicy,
    rng_spec: RngSpec,
    gate: GateSpec | None = None,
) -> tuple[Dataset, dict]:
    """Assemble a noised dataset from clean defect inputs.

    Image-level methods take defect CScanImages:
      real-noise: `noise_source` is a list of clean noisy images, one drawn
        (with replacement) per defect image.
      cscan-noise: `noise_source` is InvGaussParams; a fresh noise image is
        sampled per defect image.
    The volume-level method takes (VolumeScan, mask, window_indices) tuples:
      ascan-noise: `noise_source` is an AScanNoiseModel; the noise volume is
        added per sample and clipped at 1 before C-scan extraction, and only
        the listed defect-representing windows become images.

    Returns the kept dataset plus a stats dict with kept/rejected counts.
    """
    if method not in NOISE_METHODS:
        raise ValueError(f"method must be one of {NOISE_METHODS}, got {method!r}")
    kept: list[CScanImage] = []
    rejected = 0

    if method in ("real-noise", "cscan-noise"):
        rngs = spawn_rngs(rng_spec.seed, len(defects))
        for defect, rng in zip(defects, rngs):
            if method == "real-noise":
                idx = int(rng.integers(len(noise_source)))
                noise_img = noise_source[idx]
            else:
                noise_img = sample_invgauss_image(noise_source, rng)
            combined = superpose_clip(defect, noise_img)
            if reject(combined, policy):
                rejected += 1
            else:
                kept.append(combined)
    else:
        if gate is None:
            raise ValueError("ascan-noise needs the GateSpec used for extraction")
        rngs = spawn_rngs(rng_spec.seed, len(defects))
        for (volume, mask, window_indices), rng in zip(defects, rngs):
            noise = synth_ascan_noise_volume(
                noise_source, (volume.n_bscans, volume.samples.shape[1]), rng,
                time_offset=volume.time_offset,
            )
            combined = np.clip(
                volume.samples.astype(np.float64) + noise.samples.astype(np.float64),
                0.0, 1.0,
            )
            noised = VolumeScan(
                samples=combined.astype(np.float32),
                sample_rate_hz=volume.sample_rate_hz,
                element_pitch_mm=volume.element_pitch_mm,
                scan_step_mm=volume.scan_step_mm,
                normalized=True,
                time_offset=volume.time_offset,
            )
            images = extract_cscans(noised, gate, label="defective",
                                    defect_mask=mask)
            for w in window_indices:
                img = images[w]
                if reject(img, policy):
                    rejected += 1
                else:
                    kept.append(img)

    ds = Dataset(images=kept, provenance=method, seed=rng_spec.seed)
    stats = {
        "method": method,
        "kept": len(kept),
        "rejected": rejected,
        "rng_algorithm": rng_spec.algorithm,
        "seed": rng_spec.seed,
        "margin": policy.margin,
    }
    return ds, stats


def save_noise_params(params, path) -> None:
    """Serialize InvGaussParams or AScanNoiseModel to JSON."""
    Path(path).write_text(json.dumps(params.to_json(), indent=2, sort_keys=True) + "\n")


def load_invgauss_params(path) -> InvGaussParams:
    return InvGaussParams.from_json(json.loads(Path(path).read_text()))


def load_ascan_model(path) -> AScanNoiseModel:
    return AScanNoiseModel.from_json(json.loads(Path(path).read_text()))
