"""Analytical flat-bottom-hole pulse-echo simulator.

Produces clean, high-SNR defect volumes: front and back wall echoes on every
A-scan plus a Gaussian-windowed toneburst echo over the hole footprint, with
exponential depth attenuation and a Gaussian lateral taper. No structural
noise of any kind; randomness enters only through sub-pixel center jitter in
the parametric study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scandata import ELEMENT_COUNT, IMAGE_SIZE, VolumeScan

FBH_DIAMETERS_MM = (3.0, 4.0, 6.0, 7.0, 9.0)
FBH_DEPTHS_MM = (1.5, 3.0, 4.5, 6.0, 7.5)


@dataclass(frozen=True)
class FbhSpec:
    """One flat-bottom hole: lateral footprint plus its depth below the surface.

    `center` is (element_idx, bscan_idx) and may be fractional — the study
    jitters centers at sub-pixel scale.
    """

    diameter_mm: float
    depth_mm: float
    center: tuple[float, float] = (31.5, 31.5)

    def __post_init__(self):
        if self.diameter_mm not in FBH_DIAMETERS_MM:
            raise ValueError(
                f"diameter_mm must be one of {FBH_DIAMETERS_MM}, got {self.diameter_mm}"
            )
        if self.depth_mm not in FBH_DEPTHS_MM:
            raise ValueError(
                f"depth_mm must be one of {FBH_DEPTHS_MM}, got {self.depth_mm}"
            )


@dataclass(frozen=True)
class PulseSpec:
    """Probe pulse and propagation constants used by the response model."""

    center_freq_hz: float = 5e6
    cycles: int = 3
    envelope_sigma_samples: float = 10.0
    attenuation_db_per_mm: float = 0.8
    velocity_mm_per_us: float = 3.0

    def __post_init__(self):
        if not (0 < self.center_freq_hz < 5e7):
            raise ValueError(
                f"center frequency must sit below the 50 MHz Nyquist limit, "
                f"got {self.center_freq_hz}"
            )
        if self.attenuation_db_per_mm < 0:
            raise ValueError("attenuation must be >= 0")
        if self.velocity_mm_per_us <= 0:
            raise ValueError("velocity must be > 0")
        if self.envelope_sigma_samples <= 0:
            raise ValueError("envelope sigma must be > 0")


@dataclass(frozen=True)
class ScanDims:
    """Acquisition geometry for simulated volumes."""

    n_bscans: int = 64
    n_elements: int = ELEMENT_COUNT
    n_time: int = 704
    front_wall_sample: int = 64
    thickness_mm: float = 8.6
    element_pitch_mm: float = 0.8
    scan_step_mm: float = 0.8
    sample_rate_hz: float = 1e8

    def __post_init__(self):
        if self.n_time < 64:
            raise ValueError(f"time dimension must be >= 64, got {self.n_time}")
        if self.thickness_mm <= 0:
            raise ValueError("thickness must be > 0")

    def samples_per_mm(self, velocity_mm_per_us: float) -> float:
        # pulse-echo: sound travels down and back, so 2 passes per mm
        return 2.0 / velocity_mm_per_us * self.sample_rate_hz * 1e-6

    def echo_sample(self, depth_mm: float, velocity_mm_per_us: float) -> float:
        return self.front_wall_sample + depth_mm * self.samples_per_mm(velocity_mm_per_us)

    def back_wall_sample(self, velocity_mm_per_us: float) -> float:
        return self.echo_sample(self.thickness_mm, velocity_mm_per_us)


def _toneburst(n_time: int, t0: float, amplitude: float, pulse: PulseSpec,
               sample_rate_hz: float) -> np.ndarray:
    t = np.arange(n_time, dtype=np.float64) - t0
    carrier = np.sin(2.0 * math.pi * pulse.center_freq_hz / sample_rate_hz * t)
    window = np.exp(-(t * t) / (2.0 * pulse.envelope_sigma_samples ** 2))
    return amplitude * window * carrier


def depth_attenuation(pulse: PulseSpec, depth_mm: float) -> float:
    return 10.0 ** (-pulse.attenuation_db_per_mm * depth_mm / 20.0)


def defect_mask(spec: FbhSpec, dims: ScanDims = ScanDims()) -> np.ndarray:
    """Boolean 64x64 footprint: pixels within the hole radius of the center.

    Row index follows the element axis and column index the scan axis,
    matching C-scan image orientation.
    """
    radius_mm = spec.diameter_mm / 2.0
    ce, cb = spec.center
    e = (np.arange(IMAGE_SIZE, dtype=np.float64) - ce) * dims.element_pitch_mm
    b = (np.arange(IMAGE_SIZE, dtype=np.float64) - cb) * dims.scan_step_mm
    r2 = e[:, None] ** 2 + b[None, :] ** 2
    return r2 <= radius_mm ** 2


def _check_footprint(spec: FbhSpec, dims: ScanDims) -> None:
    radius_px_e = spec.diameter_mm / 2.0 / dims.element_pitch_mm
    radius_px_b = spec.diameter_mm / 2.0 / dims.scan_step_mm
    ce, cb = spec.center
    if (ce - radius_px_e < 0 or ce + radius_px_e > IMAGE_SIZE - 1
            or cb - radius_px_b < 0 or cb + radius_px_b > IMAGE_SIZE - 1):
        raise ValueError(
            f"defect footprint (center {spec.center}, diameter {spec.diameter_mm} mm) "
            f"overflows the {IMAGE_SIZE}x{IMAGE_SIZE} scan area"
        )


def simulate_fbh_volume(spec: FbhSpec, pulse: PulseSpec,
                        dims: ScanDims = ScanDims()) -> VolumeScan:
    """Deterministic raw RF volume for one flat-bottom hole.

    The defect echo rides on every A-scan whose lateral distance r from the
    hole center satisfies r <= radius, with amplitude
    exp(-(r/radius)^2 * 2) * 10^(-attenuation * depth / 20).
    """
    _check_footprint(spec, dims)
    if spec.depth_mm >= dims.thickness_mm:
        raise ValueError(
            f"depth {spec.depth_mm} mm does not sit above the back wall "
            f"({dims.thickness_mm} mm)"
        )
    t_defect = dims.echo_sample(spec.depth_mm, pulse.velocity_mm_per_us)
    if t_defect + 2.0 * pulse.envelope_sigma_samples > dims.n_time:
        raise ValueError(
            f"defect echo at sample {t_defect:.0f} falls beyond the "
            f"{dims.n_time}-sample time axis"
        )

    vol = np.zeros((dims.n_bscans, dims.n_elements, dims.n_time), dtype=np.float64)
    front = _toneburst(dims.n_time, dims.front_wall_sample, 1.0, pulse,
                       dims.sample_rate_hz)
    t_back = dims.back_wall_sample(pulse.velocity_mm_per_us)
    back = _toneburst(dims.n_time, t_back,
                      depth_attenuation(pulse, dims.thickness_mm), pulse,
                      dims.sample_rate_hz)
    vol += front + back

    radius_mm = spec.diameter_mm / 2.0
    ce, cb = spec.center
    e_mm = (np.arange(dims.n_elements, dtype=np.float64) - ce) * dims.element_pitch_mm
    b_mm = (np.arange(dims.n_bscans, dtype=np.float64) - cb) * dims.scan_step_mm
    r2 = b_mm[:, None] ** 2 + e_mm[None, :] ** 2
    taper = np.exp(-(r2 / radius_mm ** 2) * 2.0)
    taper[r2 > radius_mm ** 2] = 0.0
    amp = taper * depth_attenuation(pulse, spec.depth_mm)
    burst = _toneburst(dims.n_time, t_defect, 1.0, pulse, dims.sample_rate_hz)
    vol += amp[:, :, None] * burst[None, None, :]

    return VolumeScan(
        samples=vol.astype(np.float32),
        sample_rate_hz=dims.sample_rate_hz,
        element_pitch_mm=dims.element_pitch_mm,
        scan_step_mm=dims.scan_step_mm,
        normalized=False,
    )


def clean_volume(pulse: PulseSpec, dims: ScanDims = ScanDims()) -> VolumeScan:
    """Walls-only volume: the defect-free reference geometry."""
    vol = np.zeros((dims.n_bscans, dims.n_elements, dims.n_time), dtype=np.float64)
    vol += _toneburst(dims.n_time, dims.front_wall_sample, 1.0, pulse,
                      dims.sample_rate_hz)
    vol += _toneburst(dims.n_time, dims.back_wall_sample(pulse.velocity_mm_per_us),
                      depth_attenuation(pulse, dims.thickness_mm), pulse,
                      dims.sample_rate_hz)
    return VolumeScan(
        samples=vol.astype(np.float32),
        sample_rate_hz=dims.sample_rate_hz,
        element_pitch_mm=dims.element_pitch_mm,
        scan_step_mm=dims.scan_step_mm,
        normalized=False,
    )


def parametric_study(
    diameters_mm,
    depths_mm,
    pulse: PulseSpec,
    rng: np.random.Generator,
    dims: ScanDims = ScanDims(),
    base_center: tuple[float, float] = (31.5, 31.5),
    jitter_px: float = 0.5,
) -> list[tuple[VolumeScan, FbhSpec]]:
    """One clean volume per (diameter, depth) grid cell.

    Centers get sub-pixel uniform jitter from `rng` so repeated cells do not
    produce pixel-identical footprints.
    """
    out = []
    for d in diameters_mm:
        for z in depths_mm:
            je = rng.uniform(-jitter_px, jitter_px)
            jb = rng.uniform(-jitter_px, jitter_px)
            spec = FbhSpec(
                diameter_mm=float(d),
                depth_mm=float(z),
                center=(base_center[0] + je, base_center[1] + jb),
            )
            out.append((simulate_fbh_volume(spec, pulse, dims), spec))
    return out
