"""Signal chain turning raw A-scan volumes into normalized, gated C-scan images.

Order of operations: zero-center each trace, take the envelope, normalize the
whole dataset by its global max, truncate the wall echoes, then tile the gated
region into fixed-depth windows whose per-pixel max produces one C-scan image
per window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scandata import IMAGE_SIZE, CScanImage, VolumeScan


@dataclass(frozen=True)
class GateSpec:
    """Wall-truncation indices and the depth-window length, in time samples."""

    front_wall_end: int
    back_wall_start: int
    window_len: int = 5

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError(f"window_len must be >= 1, got {self.window_len}")
        if self.front_wall_end < 0:
            raise ValueError(f"front_wall_end must be >= 0, got {self.front_wall_end}")
        if self.front_wall_end >= self.back_wall_start:
            raise ValueError(
                f"gate requires front_wall_end < back_wall_start, got "
                f"({self.front_wall_end}, {self.back_wall_start})"
            )


def zero_center(trace: np.ndarray) -> np.ndarray:
    """Subtract the mean so the trace is centred on zero (f64)."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size < 1:
        raise ValueError("trace must have length >= 1")
    return trace - trace.mean()


def _analytic_weights(n: int) -> np.ndarray:
    # DC (and Nyquist for even n) kept single, positive bins doubled,
    # negative bins zeroed.
    h = np.zeros(n, dtype=np.float64)
    h[0] = 1.0
    if n % 2 == 0:
        h[1 : n // 2] = 2.0
        h[n // 2] = 1.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return h


def hilbert_envelope(trace: np.ndarray) -> np.ndarray:
    """Envelope of a real trace via the discrete analytic signal.

    Parameters
    ----------
    trace : array_like
        Zero-centred real signal, length >= 4. May be N-D; the transform runs
        along the last axis. Any length is accepted (mixed-radix FFT).

    Returns
    -------
    ndarray
        |analytic signal|, non-negative, same shape as the input. Dominates
        the rectified input: env[i] + 1e-9 >= |trace[i]|.
    """
    x = np.asarray(trace, dtype=np.float64)
    n = x.shape[-1]
    if n < 4:
        raise ValueError(f"trace length must be >= 4, got {n}")
    spectrum = np.fft.fft(x, axis=-1)
    analytic = np.fft.ifft(spectrum * _analytic_weights(n), axis=-1)
    return np.abs(analytic)


def envelope_volume(v: VolumeScan) -> VolumeScan:
    """Zero-center and envelope every A-scan of a volume."""
    traces = np.asarray(v.samples, dtype=np.float64)
    centred = traces - traces.mean(axis=2, keepdims=True)
    env = hilbert_envelope(centred)
    return VolumeScan(
        samples=env.astype(np.float32),
        sample_rate_hz=v.sample_rate_hz,
        element_pitch_mm=v.element_pitch_mm,
        scan_step_mm=v.scan_step_mm,
        normalized=False,
        time_offset=v.time_offset,
    )


def normalize(volumes: list[VolumeScan], scope: str = "per-dataset") -> list[VolumeScan]:
    """Scale a whole dataset of envelope volumes into [0, 1] by its global max.

    The same divisor is applied to every volume so amplitudes stay mutually
    comparable across the dataset. Idempotent: a second call divides by 1.
    """
    if scope != "per-dataset":
        raise ValueError(f"unsupported normalization scope {scope!r}")
    if not volumes:
        raise ValueError("cannot normalize an empty dataset")
    global_min = min(float(v.samples.min()) for v in volumes)
    if global_min < 0.0:
        raise ValueError("normalize expects non-negative envelope volumes")
    global_max = max(float(v.samples.max()) for v in volumes)
    if global_max == 0.0:
        raise ValueError("all-zero dataset: normalization would divide by zero")
    out = []
    for v in volumes:
        out.append(VolumeScan(
            samples=(v.samples / np.float32(global_max)).astype(np.float32),
            sample_rate_hz=v.sample_rate_hz,
            element_pitch_mm=v.element_pitch_mm,
            scan_step_mm=v.scan_step_mm,
            normalized=True,
            time_offset=v.time_offset,
        ))
    return out


def truncate_walls(v: VolumeScan, g: GateSpec) -> VolumeScan:
    """Drop the front and back wall echo regions from the time axis.

    The removed front offset accumulates into `time_offset` so later depth
    gates stay reportable in absolute sample indices.
    """
    if g.back_wall_start > v.n_time:
        raise ValueError(
            f"gate ({g.front_wall_end}, {g.back_wall_start}) exceeds time "
            f"dimension {v.n_time}"
        )
    sliced = v.samples[:, :, g.front_wall_end : g.back_wall_start]
    return VolumeScan(
        samples=sliced.copy(),
        sample_rate_hz=v.sample_rate_hz,
        element_pitch_mm=v.element_pitch_mm,
        scan_step_mm=v.scan_step_mm,
        normalized=v.normalized,
        time_offset=v.time_offset + g.front_wall_end,
    )


def extract_cscans(
    v: VolumeScan,
    g: GateSpec,
    label: str = "clean",
    defect_mask: np.ndarray | None = None,
    meta: dict | None = None,
) -> list[CScanImage]:
    """Tile the gated time axis into windows and take per-pixel maxima.

    Pixel (i, j) of each image is the max over the window of
    samples[j][i][t]: rows follow the element axis, columns the scan axis.
    A trailing window shorter than window_len is dropped. Label, mask, and
    meta are stamped onto every produced image.
    """
    if not v.normalized:
        raise ValueError("extract_cscans expects a normalized volume")
    if v.n_bscans < IMAGE_SIZE:
        raise ValueError(
            f"need >= {IMAGE_SIZE} b-scans for a C-scan image, got {v.n_bscans}"
        )
    if v.n_time < g.window_len:
        raise ValueError(
            f"gated length {v.n_time} shorter than window_len {g.window_len}"
        )
    n_windows = v.n_time // g.window_len
    block = v.samples[:IMAGE_SIZE, :IMAGE_SIZE, :]
    images = []
    for w in range(n_windows):
        t0 = w * g.window_len
        window = block[:, :, t0 : t0 + g.window_len]
        pixels = window.max(axis=2).T
        images.append(CScanImage(
            pixels=pixels.copy(),
            depth_gate=(v.time_offset + t0, v.time_offset + t0 + g.window_len),
            label=label,
            defect_mask=None if defect_mask is None else defect_mask.copy(),
            meta=dict(meta or {}),
        ))
    return images
