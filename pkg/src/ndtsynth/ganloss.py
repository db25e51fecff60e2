"""Activation-guided generator loss for image translation.

The activation-map loss concentrates the reconstruction penalty on pixels
where the clean simulated image actually responds, scaled so the result is
indifferent to how many pixels a defect covers. The combined generator loss
applies fixed relative weights to the adversarial, cycle, and activation
terms. Both are pure functions; golden vectors of randomized cases are
emitted to JSON so a coupled trainer in another process can verify loss
parity without importing this package.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scandata import CScanImage

__all__ = [
    "ActivationMap",
    "LossParts",
    "LossWeights",
    "activation_map",
    "activmap_loss",
    "batch_activmap_loss",
    "emit_golden_vectors",
    "load_golden_vectors",
    "total_generator_loss",
]


def _as_pixels(img) -> np.ndarray:
    if isinstance(img, CScanImage):
        return np.asarray(img.pixels, dtype=np.float64)
    return np.asarray(img, dtype=np.float64)


@dataclass(frozen=True)
class ActivationMap:
    """Normalized response map plus the fraction of active pixels."""

    values: np.ndarray
    scale_factor: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("activation map values must lie in [0, 1]")
        if not 0.0 <= self.scale_factor <= 1.0:
            raise ValueError("scale_factor must lie in [0, 1]")
        if self.scale_factor == 0.0 and values.max() > 0.0:
            raise ValueError("scale_factor 0 implies an all-zero map")
        object.__setattr__(self, "values", values)


def activation_map(sim, threshold: float = 0.0) -> ActivationMap:
    """Normalize an image by its peak and count the active fraction.

    Pixels at or below ``threshold`` (after normalization) are treated as
    background: zeroed in the map and excluded from the active fraction.
    The default threshold of exactly zero suits simulated responses whose
    background is identically zero.
    """
    pixels = _as_pixels(sim)
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("input image must lie in [0, 1]")
    peak = pixels.max()
    if peak == 0.0:
        return ActivationMap(values=np.zeros_like(pixels), scale_factor=0.0)
    values = pixels / peak
    if threshold > 0.0:
        values = np.where(values > threshold, values, 0.0)
    active = np.count_nonzero(values > 0.0)
    return ActivationMap(values=values, scale_factor=active / values.size)


def activmap_loss(gen_out, sim, threshold: float = 0.0) -> float:
    """Mean of |gen_out - sim| weighted by the activation map, over K.

    Reduction order: elementwise absolute difference, multiply by the map,
    divide by the scalar active fraction, then mean over all pixels.
    """
    gen = _as_pixels(gen_out)
    ref = _as_pixels(sim)
    if gen.shape != ref.shape:
        raise ValueError("gen_out and sim must have identical shapes")
    amap = activation_map(ref, threshold=threshold)
    if amap.scale_factor == 0.0:
        raise ValueError("activation loss undefined for an all-zero image")
    weighted = np.abs(gen - ref) * amap.values / amap.scale_factor
    return float(weighted.mean())


def batch_activmap_loss(gen_stack, sim_stack, threshold: float = 0.0) -> np.ndarray:
    """Per-image activation losses for equally shaped stacks of images."""
    gen = np.asarray(gen_stack, dtype=np.float64)
    ref = np.asarray(sim_stack, dtype=np.float64)
    if gen.shape != ref.shape:
        raise ValueError("stacks must have identical shapes")
    if gen.ndim < 3:
        raise ValueError("expected a stack of 2-D images")
    return np.array([activmap_loss(g, s, threshold=threshold)
                     for g, s in zip(gen, ref)])


@dataclass(frozen=True)
class LossParts:
    """Raw (unweighted) per-term loss values from one generator step."""

    gan_exp: float
    gan_sim: float
    cyc_sim: float
    cyc_exp: float
    activ: float

    def __post_init__(self):
        for name in ("gan_exp", "gan_sim", "cyc_sim", "cyc_exp", "activ"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"loss part {name} must be >= 0")

    def to_dict(self) -> dict:
        return {"gan_exp": self.gan_exp, "gan_sim": self.gan_sim,
                "cyc_sim": self.cyc_sim, "cyc_exp": self.cyc_exp,
                "activ": self.activ}

    @classmethod
    def from_dict(cls, d: dict) -> "LossParts":
        return cls(gan_exp=float(d["gan_exp"]), gan_sim=float(d["gan_sim"]),
                   cyc_sim=float(d["cyc_sim"]), cyc_exp=float(d["cyc_exp"]),
                   activ=float(d["activ"]))


@dataclass(frozen=True)
class LossWeights:
    """Relative weighting of the generator loss terms.

    The adversarial term for experimental-looking output counts double its
    simulated counterpart, the cycle terms are weighted the same way under
    a shared coefficient, and the activation term defaults to twice the
    cycle coefficient.
    """

    cycle_coeff: float = 100.0
    gan_exp: float = 2.0 / 3.0
    gan_sim: float = 1.0 / 3.0
    cyc_sim: float = 2.0 / 3.0
    cyc_exp: float = 1.0 / 3.0
    activ: float | None = None

    def __post_init__(self):
        if self.activ is None:
            object.__setattr__(self, "activ", 2.0 * self.cycle_coeff)
        for name in ("cycle_coeff", "gan_exp", "gan_sim", "cyc_sim",
                     "cyc_exp", "activ"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"weight {name} must be >= 0")

    def to_dict(self) -> dict:
        return {"cycle_coeff": self.cycle_coeff, "gan_exp": self.gan_exp,
                "gan_sim": self.gan_sim, "cyc_sim": self.cyc_sim,
                "cyc_exp": self.cyc_exp, "activ": self.activ}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(cycle_coeff=float(d["cycle_coeff"]),
                   gan_exp=float(d["gan_exp"]), gan_sim=float(d["gan_sim"]),
                   cyc_sim=float(d["cyc_sim"]), cyc_exp=float(d["cyc_exp"]),
                   activ=float(d["activ"]))


def total_generator_loss(parts: LossParts, weights: LossWeights) -> float:
    cycle = weights.cyc_sim * parts.cyc_sim + weights.cyc_exp * parts.cyc_exp
    return (weights.gan_exp * parts.gan_exp
            + weights.gan_sim * parts.gan_sim
            + weights.cycle_coeff * cycle
            + weights.activ * parts.activ)


def _round12(values) -> list:
    return [round(float(v), 12) for v in np.asarray(values).ravel()]


def _hand_case(n_defect: int) -> tuple[np.ndarray, np.ndarray]:
    # square image, first n_defect pixels carry a unit response, the
    # generated copy halves exactly those pixels
    sim = np.zeros(16)
    sim[:n_defect] = 1.0
    gen = sim.copy()
    gen[:n_defect] = 0.5
    return sim.reshape(4, 4), gen.reshape(4, 4)


def emit_golden_vectors(path, n_cases: int, rng: np.random.Generator) -> None:
    """Write loss parity cases (two fixed plus n_cases random) to JSON."""
    if n_cases < 0:
        raise ValueError("n_cases must be >= 0")
    weights = LossWeights()
    cases = []

    def add_case(sim, gen, parts):
        # store at 12 decimals and recompute from the rounded values so a
        # consumer parsing the file reproduces the losses exactly
        sim12 = np.array(_round12(sim)).reshape(np.shape(sim))
        gen12 = np.array(_round12(gen)).reshape(np.shape(gen))
        activ = activmap_loss(gen12, sim12)
        parts = LossParts(**{**parts.to_dict(), "activ": activ})
        cases.append({
            "shape": list(np.shape(sim)),
            "sim": _round12(sim12),
            "gen_out": _round12(gen12),
            "expected_activ_loss": round(activ, 12),
            "parts": {k: round(v, 12) for k, v in parts.to_dict().items()},
            "weights": weights.to_dict(),
            "expected_total": round(total_generator_loss(parts, weights), 12),
        })

    for n_defect in (4, 8):
        sim, gen = _hand_case(n_defect)
        add_case(sim, gen, LossParts(gan_exp=1.0, gan_sim=1.0, cyc_sim=1.0,
                                     cyc_exp=1.0, activ=0.0))
    for _ in range(n_cases):
        side = int(rng.integers(4, 17))
        sim = rng.random((side, side))
        sim[rng.random((side, side)) < 0.5] = 0.0
        if sim.max() == 0.0:
            sim[0, 0] = 1.0
        gen = rng.random((side, side))
        parts = LossParts(gan_exp=float(rng.random()),
                          gan_sim=float(rng.random()),
                          cyc_sim=float(rng.random()),
                          cyc_exp=float(rng.random()), activ=0.0)
        add_case(sim, gen, parts)

    payload = {"format_version": 1, "n_cases": len(cases), "cases": cases}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_golden_vectors(path) -> list[dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != 1:
        raise ValueError("unsupported golden vector format")
    return payload["cases"]
