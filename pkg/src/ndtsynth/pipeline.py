"""Declarative run pipeline: each command maps (config, inputs, seed) to a
run directory whose contents are byte-identical across reruns.

Run directories are stamped with a digest of (command, resolved config,
seed) instead of a timestamp, so repeating a command with the same inputs
lands in the same directory and rewrites the same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scandata import (
    PROVENANCES,
    CScanImage,
    Dataset,
    RngSpec,
    VolumeScan,
    load_dataset,
    load_volume,
    make_rng,
    save_dataset,
    save_volume,
    spawn_rngs,
)
from .sigproc import GateSpec, envelope_volume, extract_cscans, normalize, truncate_walls
from .phantom import (
    FBH_DIAMETERS_MM,
    FBH_DEPTHS_MM,
    FbhSpec,
    PulseSpec,
    ScanDims,
    clean_volume,
    defect_mask,
    parametric_study,
)
from . import noise as noisemod
from .noise import (
    AScanNoiseModel,
    InvGaussParams,
    RejectionPolicy,
    fit_ascan_model,
    fit_invgauss,
    invgauss_pdf,
    load_ascan_model,
    load_invgauss_params,
    make_dataset,
    reject,
    save_noise_params,
    synth_ascan_noise_volume,
)
from . import tinynn
from .tinynn import CnnConfig, build_model, forward, guided_gradcam, render_explanation
from . import metrics as metricsmod
from . import evohpo
from . import ganloss


class PipelineError(Exception):
    """Base for failures that map onto a process exit code."""

    exit_code = 1


class ConfigError(PipelineError):
    """The configuration is missing, malformed, or inconsistent."""

    exit_code = 2


class DataError(PipelineError):
    """A referenced input file or dataset is missing or unreadable."""

    exit_code = 3


class NumericError(PipelineError):
    """A numeric procedure produced non-finite or divergent results."""

    exit_code = 4


# ---------------------------------------------------------------------------
# configuration


def _parse_toml_text(text: str) -> dict:
    try:
        import tomllib as toml
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as toml
    try:
        return toml.loads(text)
    except toml.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from e


@dataclass
class PipelineConfig:
    """Parsed configuration plus typed, path-aware accessors.

    Keys are addressed with dotted paths ("synth.margin"). Every accessor
    failure carries the dotted key so CLI errors state what to fix.
    """

    data: dict = field(default_factory=dict)
    source: str = "<inline>"

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls(data=_parse_toml_text(p.read_text()), source=str(p))

    def set(self, dotted: str, value) -> None:
        parts = dotted.split(".")
        node = self.data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {part} is not a table")
        node[parts[-1]] = value

    def get(self, dotted: str, default=None):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def require(self, dotted: str):
        sentinel = object()
        value = self.get(dotted, sentinel)
        if value is sentinel:
            raise ConfigError(f"missing required config key: {dotted}")
        return value

    def _int(self, dotted: str, default=None, minimum=None) -> int:
        value = self.require(dotted) if default is None else self.get(dotted, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted} must be an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise ConfigError(f"{dotted} must be >= {minimum}, got {value}")
        return value

    def _float(self, dotted: str, default=None) -> float:
        value = self.require(dotted) if default is None else self.get(dotted, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted} must be a number, got {value!r}")
        return float(value)

    def _str(self, dotted: str, default=None) -> str:
        value = self.require(dotted) if default is None else self.get(dotted, default)
        if not isinstance(value, str):
            raise ConfigError(f"{dotted} must be a string, got {value!r}")
        return value

    def _list(self, dotted: str, default=None) -> list:
        value = self.require(dotted) if default is None else self.get(dotted, default)
        if not isinstance(value, list):
            raise ConfigError(f"{dotted} must be a list, got {value!r}")
        return value

    @property
    def seed(self) -> int:
        value = self.get("seed")
        if value is None:
            raise ConfigError("config must declare an integer seed")
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {value!r}")
        return value

    @property
    def workdir(self) -> Path:
        return Path(self._str("workdir", "runs"))


def run_dir_for(cfg: PipelineConfig, command: str) -> Path:
    """Deterministic run directory: workdir/<command>-<config digest>."""
    canon = json.dumps(
        {"command": command, "config": cfg.data, "seed": cfg.seed},
        sort_keys=True, separators=(",", ":"),
    )
    digest = hashlib.sha256(canon.encode()).hexdigest()[:12]
    return cfg.workdir / f"{command}-{digest}"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _manifest(run_dir: Path, command: str, cfg: PipelineConfig,
              inputs: dict, outputs: dict, results: dict) -> Path:
    payload = {
        "format_version": 1,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.data,
        "inputs": inputs,
        "outputs": outputs,
        "results": results,
    }
    path = run_dir / "manifest.json"
    _write_json(path, payload)
    return path


def _input_stamp(path: Path) -> dict:
    """Provenance link for a consumed file: path plus content digest."""
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return {"path": str(path), "sha256": digest}


def _check_finite(values: dict, context: str) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise NumericError(f"{context}: {name} is not finite ({value})")


# ---------------------------------------------------------------------------
# shared section parsers


def _pulse_from(cfg: PipelineConfig) -> PulseSpec:
    base = PulseSpec()
    try:
        return PulseSpec(
            center_freq_hz=cfg._float("phantom.pulse.center_freq_hz",
                                      base.center_freq_hz),
            cycles=cfg._int("phantom.pulse.cycles", base.cycles, minimum=1),
            envelope_sigma_samples=cfg._float(
                "phantom.pulse.envelope_sigma_samples",
                base.envelope_sigma_samples),
            attenuation_db_per_mm=cfg._float(
                "phantom.pulse.attenuation_db_per_mm",
                base.attenuation_db_per_mm),
            velocity_mm_per_us=cfg._float("phantom.pulse.velocity_mm_per_us",
                                          base.velocity_mm_per_us),
        )
    except ValueError as e:
        raise ConfigError(f"phantom.pulse: {e}") from e


def _dims_from(cfg: PipelineConfig) -> ScanDims:
    base = ScanDims()
    try:
        return ScanDims(
            n_bscans=cfg._int("phantom.dims.n_bscans", base.n_bscans, minimum=1),
            n_elements=cfg._int("phantom.dims.n_elements", base.n_elements,
                                minimum=1),
            n_time=cfg._int("phantom.dims.n_time", base.n_time, minimum=64),
            front_wall_sample=cfg._int("phantom.dims.front_wall_sample",
                                       base.front_wall_sample, minimum=0),
            thickness_mm=cfg._float("phantom.dims.thickness_mm",
                                    base.thickness_mm),
            element_pitch_mm=cfg._float("phantom.dims.element_pitch_mm",
                                        base.element_pitch_mm),
            scan_step_mm=cfg._float("phantom.dims.scan_step_mm",
                                    base.scan_step_mm),
            sample_rate_hz=cfg._float("phantom.dims.sample_rate_hz",
                                      base.sample_rate_hz),
        )
    except ValueError as e:
        raise ConfigError(f"phantom.dims: {e}") from e


def _gate_from(cfg: PipelineConfig, pulse: PulseSpec, dims: ScanDims) -> GateSpec:
    front_margin = cfg._int("gate.front_wall_margin", 25, minimum=0)
    back_margin = cfg._int("gate.back_wall_margin", 25, minimum=0)
    window_len = cfg._int("gate.window_len", 5, minimum=1)
    back_sample = int(round(dims.back_wall_sample(pulse.velocity_mm_per_us)))
    try:
        return GateSpec(
            front_wall_end=dims.front_wall_sample + front_margin,
            back_wall_start=min(back_sample - back_margin, dims.n_time),
            window_len=window_len,
        )
    except ValueError as e:
        raise ConfigError(f"gate: {e}") from e


def _policy_from(cfg: PipelineConfig, section: str) -> RejectionPolicy:
    try:
        return RejectionPolicy(margin=cfg._float(f"{section}.margin", 1.0))
    except ValueError as e:
        raise ConfigError(f"{section}.margin: {e}") from e


def _cnn_from(cfg: PipelineConfig) -> CnnConfig:
    best_path = cfg.get("train_eval.best_config")
    if best_path:
        p = Path(str(best_path))
        if not p.is_file():
            raise DataError(f"best_config file not found: {p}")
        payload = json.loads(p.read_text())
        raw = payload.get("config", payload)
    else:
        raw = cfg.get("cnn", {})
        if not isinstance(raw, dict):
            raise ConfigError("cnn must be a table of hyperparameters")
    base = CnnConfig()
    merged = {**base.to_dict(), **raw}
    try:
        return CnnConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"cnn config: {e}") from e


def _load_dataset_dir(path_str: str, key: str) -> Dataset:
    p = Path(path_str)
    if not (p / "manifest.json").is_file():
        raise DataError(f"{key}: no dataset at {p}")
    try:
        return load_dataset(p)
    except (ValueError, OSError, KeyError) as e:
        raise DataError(f"{key}: failed to load dataset at {p}: {e}") from e


def _dataset_stamp(path_str: str) -> dict:
    stamp = _input_stamp(Path(path_str) / "manifest.json")
    manifest = json.loads(Path(stamp["path"]).read_text())
    stamp["provenance"] = manifest.get("provenance")
    stamp["seed"] = manifest.get("seed")
    return stamp


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: PipelineConfig) -> Path:
    """Simulate the phantom grid and emit a clean C-scan dataset.

    Rejection here runs against the simulation's own leakage floor, so a
    window is kept only while the defect tail still tops every background
    pixel. min_peak additionally drops kept windows whose in-mask peak falls
    under an absolute response floor, standing in for the detection
    threshold a physical system's noise floor would impose.
    """
    seed = cfg.seed
    pulse = _pulse_from(cfg)
    dims = _dims_from(cfg)
    gate = _gate_from(cfg, pulse, dims)
    policy = _policy_from(cfg, "generate")
    min_peak = cfg._float("generate.min_peak", 0.0)
    n_clean_images = cfg._int("generate.n_clean_images", 0, minimum=0)
    diameters = [float(d) for d in cfg._list("phantom.diameters_mm",
                                             list(FBH_DIAMETERS_MM))]
    depths = [float(z) for z in cfg._list("phantom.depths_mm",
                                          list(FBH_DEPTHS_MM))]
    jitter = cfg._float("phantom.jitter_px", 0.5)

    rng = make_rng(seed)
    try:
        study = parametric_study(diameters, depths, pulse, rng, dims,
                                 jitter_px=jitter)
    except ValueError as e:
        raise ConfigError(f"phantom grid: {e}") from e
    clean = clean_volume(pulse, dims)

    envelopes = [envelope_volume(v) for v, _ in study]
    envelopes.append(envelope_volume(clean))
    envelopes = normalize(envelopes)
    gated = [truncate_walls(v, gate) for v in envelopes]
    clean_gated = gated.pop()

    kept: list[CScanImage] = []
    rejected = 0
    floor_dropped = 0
    spec_rows = []
    for i, (_, spec) in enumerate(study):
        mask = defect_mask(spec, dims)
        meta = {
            "volume": i,
            "diameter_mm": spec.diameter_mm,
            "depth_mm": spec.depth_mm,
            "center": [spec.center[0], spec.center[1]],
        }
        images = extract_cscans(gated[i], gate, label="defective",
                                defect_mask=mask, meta=meta)
        kept_windows = []
        for w, img in enumerate(images):
            img.meta["window"] = w
            if reject(img, policy):
                rejected += 1
            elif float(img.pixels[mask].max()) < min_peak:
                floor_dropped += 1
            else:
                kept.append(img)
                kept_windows.append(w)
        spec_rows.append({
            "volume": i,
            "diameter_mm": spec.diameter_mm,
            "depth_mm": spec.depth_mm,
            "center": [spec.center[0], spec.center[1]],
            "kept_windows": kept_windows,
        })
    n_candidates = len(study) * (gated[0].n_time // gate.window_len)

    clean_images = extract_cscans(clean_gated, gate, label="clean",
                                  meta={"volume": "clean"})
    for w, img in enumerate(clean_images):
        img.meta["window"] = w
    if n_clean_images and n_clean_images < len(clean_images):
        picks = sorted(rng.choice(len(clean_images), n_clean_images,
                                  replace=False).tolist())
        clean_images = [clean_images[k] for k in picks]

    run = run_dir_for(cfg, "generate")
    (run / "volumes").mkdir(parents=True, exist_ok=True)
    for i, vol in enumerate(gated):
        save_volume(vol, run / "volumes" / f"defect_{i:03d}.bin")
    save_volume(clean_gated, run / "volumes" / "clean.bin")
    _write_json(run / "fbh_specs.json", {
        "format_version": 1,
        "n_volumes": len(study),
        "gate": {"front_wall_end": gate.front_wall_end,
                 "back_wall_start": gate.back_wall_start,
                 "window_len": gate.window_len},
        "volumes": spec_rows,
    })

    ds = Dataset(images=kept + clean_images, provenance="simulated", seed=seed)
    save_dataset(ds, run / "dataset")

    _manifest(run, "generate", cfg, inputs={}, outputs={
        "dataset": "dataset",
        "volumes": "volumes",
        "fbh_specs": "fbh_specs.json",
    }, results={
        "n_volumes": len(study),
        "n_windows_per_volume": gated[0].n_time // gate.window_len,
        "candidates": n_candidates,
        "kept_defective": len(kept),
        "rejected": rejected,
        "floor_dropped": floor_dropped,
        "n_clean": len(clean_images),
        "gate": {"front_wall_end": gate.front_wall_end,
                 "back_wall_start": gate.back_wall_start,
                 "window_len": gate.window_len},
        "normalization": "per-dataset",
    })
    return run


# ---------------------------------------------------------------------------
# fit-noise


def _render_invgauss_fit(samples: np.ndarray, params: InvGaussParams,
                         path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(samples, bins=80, density=True, alpha=0.6, label="pixel amplitudes")
    grid = np.linspace(float(samples.min()), float(samples.max()), 400)
    ax.plot(grid, invgauss_pdf(grid, params), "r-", label="fitted density")
    ax.set_xlabel("amplitude")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _render_ascan_fit(model: AScanNoiseModel, volumes: list[VolumeScan],
                      path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(model.mean_structural)
    axes[0].set_title("mean structural profile")
    axes[0].set_xlabel("gated time sample")
    residuals = []
    for v in volumes:
        for b in range(v.n_bscans):
            _, resid = noisemod.decompose_bscan(v.samples[b])
            residuals.append(resid.ravel())
    axes[1].hist(np.concatenate(residuals), bins=80, density=True)
    axes[1].set_title(f"residuals (sigma_r={model.random_sigma:.4f})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_fit_noise(cfg: PipelineConfig) -> Path:
    """Fit a noise model from measured inputs and persist it with a plot."""
    seed = cfg.seed  # validated for the run stamp; fitting is deterministic
    method = cfg._str("fit_noise.method")
    input_path = cfg._str("fit_noise.input")
    run = run_dir_for(cfg, "fit-noise")

    if method == "invgauss":
        ds = _load_dataset_dir(input_path, "fit_noise.input")
        if not ds.images:
            raise DataError("fit_noise.input: dataset holds no images")
        samples = np.concatenate([img.pixels.ravel() for img in ds.images])
        try:
            params = fit_invgauss(samples)
        except ValueError as e:
            raise DataError(f"inverse-Gaussian fit failed: {e}") from e
        _check_finite({"mu": params.mu, "loc": params.loc,
                       "scale": params.scale}, "inverse-Gaussian fit")
        run.mkdir(parents=True, exist_ok=True)
        save_noise_params(params, run / "params.json")
        _render_invgauss_fit(samples, params, run / "fit.png")
        inputs = {"dataset": _dataset_stamp(input_path)}
        results = {"method": method, "n_samples": int(samples.size),
                   "params": params.to_json()}
        outputs = {"params": "params.json", "plot": "fit.png"}
    elif method == "ascan":
        vol_dir = Path(input_path)
        if not vol_dir.is_dir():
            raise DataError(f"fit_noise.input: no volume directory at {vol_dir}")
        paths = sorted(vol_dir.glob("*.bin"))
        if not paths:
            raise DataError(f"fit_noise.input: no .bin volumes in {vol_dir}")
        try:
            volumes = [load_volume(p) for p in paths]
        except ValueError as e:
            raise DataError(f"fit_noise.input: {e}") from e
        savgol_cfg = cfg.get("fit_noise.savgol", [11, 3])
        if savgol_cfg in (False, []):
            savgol = None
        elif (isinstance(savgol_cfg, list) and len(savgol_cfg) == 2
              and all(isinstance(v, int) for v in savgol_cfg)):
            savgol = (savgol_cfg[0], savgol_cfg[1])
        else:
            raise ConfigError("fit_noise.savgol must be [window, order] or false")
        try:
            model = fit_ascan_model(volumes, savgol=savgol)
        except ValueError as e:
            raise DataError(f"A-scan noise fit failed: {e}") from e
        _check_finite({"sigma_s": model.structural_dev_sigma,
                       "sigma_r": model.random_sigma,
                       "mean_level": float(model.mean_structural.mean())},
                      "A-scan noise fit")
        run.mkdir(parents=True, exist_ok=True)
        save_noise_params(model, run / "model.json")
        _render_ascan_fit(model, volumes, run / "fit.png")
        inputs = {"volumes": [_input_stamp(p) for p in paths]}
        results = {"method": method, "n_volumes": len(volumes),
                   "sigma_s": model.structural_dev_sigma,
                   "sigma_r": model.random_sigma,
                   "savgol": list(savgol) if savgol else None}
        outputs = {"model": "model.json", "plot": "fit.png"}
    else:
        raise ConfigError(
            f"fit_noise.method must be 'invgauss' or 'ascan', got {method!r}")

    _manifest(run, "fit-noise", cfg, inputs=inputs, outputs=outputs,
              results=results)
    return run


# ---------------------------------------------------------------------------
# synth


def _generate_run_inputs(cfg: PipelineConfig) -> tuple[Path, dict, dict]:
    run_path = Path(cfg._str("synth.input_run"))
    manifest_path = run_path / "manifest.json"
    specs_path = run_path / "fbh_specs.json"
    if not manifest_path.is_file() or not specs_path.is_file():
        raise DataError(f"synth.input_run: {run_path} is not a generate run")
    manifest = json.loads(manifest_path.read_text())
    specs = json.loads(specs_path.read_text())
    return run_path, manifest, specs


def _defect_tuples(run_path: Path, specs: dict, dims: ScanDims):
    tuples = []
    for row in specs["volumes"]:
        if not row["kept_windows"]:
            continue
        vol = load_volume(run_path / "volumes" / f"defect_{row['volume']:03d}.bin")
        spec = FbhSpec(diameter_mm=row["diameter_mm"], depth_mm=row["depth_mm"],
                       center=tuple(row["center"]))
        tuples.append((vol, defect_mask(spec, dims), row["kept_windows"]))
    return tuples


def cmd_synth(cfg: PipelineConfig) -> Path:
    """Apply a noise method to a generate run, yielding a training dataset.

    The defective class re-noises the windows the clean pass kept; the clean
    class is built from noise alone (pixel methods) or from noised copies of
    the defect-free volume (the A-scan method).
    """
    seed = cfg.seed
    method = cfg._str("synth.method")
    if method not in noisemod.NOISE_METHODS:
        raise ConfigError(
            f"synth.method must be one of {noisemod.NOISE_METHODS}, got {method!r}")
    policy = _policy_from(cfg, "synth")
    provenance = cfg._str("synth.provenance", method)
    if provenance not in PROVENANCES:
        raise ConfigError(
            f"synth.provenance must be one of {PROVENANCES}, got {provenance!r}")

    run_path, gen_manifest, specs = _generate_run_inputs(cfg)
    dims = _dims_from(cfg)
    inputs = {"generate_run": _input_stamp(run_path / "manifest.json")}

    if method == "ascan-noise":
        params_file = cfg.get("synth.params_file")
        if not params_file:
            raise DataError("ascan-noise needs synth.params_file with a "
                            "fitted A-scan noise model")
        params_path = Path(str(params_file))
        if not params_path.is_file():
            raise DataError(f"synth.params_file not found: {params_path}")
        model = load_ascan_model(params_path)
        inputs["noise_model"] = _input_stamp(params_path)

        gate_row = specs["gate"]
        gate = GateSpec(front_wall_end=gate_row["front_wall_end"],
                        back_wall_start=gate_row["back_wall_start"],
                        window_len=gate_row["window_len"])
        tuples = _defect_tuples(run_path, specs, dims)
        clean_vol = load_volume(run_path / "volumes" / "clean.bin")
        if model.mean_structural.size != clean_vol.n_time:
            raise DataError(
                f"noise model covers {model.mean_structural.size} gated "
                f"samples but volumes have {clean_vol.n_time}")
        ds, stats = make_dataset("ascan-noise", tuples, model, policy,
                                 RngSpec(seed=seed), gate=gate)

        n_clean_volumes = cfg._int("synth.n_clean_volumes", 3, minimum=0)
        clean_rngs = spawn_rngs(seed, len(tuples) + n_clean_volumes)[len(tuples):]
        clean_images: list[CScanImage] = []
        for k, crng in enumerate(clean_rngs):
            noise_vol = synth_ascan_noise_volume(
                model, (clean_vol.n_bscans, clean_vol.samples.shape[1]), crng,
                time_offset=clean_vol.time_offset)
            combined = np.clip(
                clean_vol.samples.astype(np.float64)
                + noise_vol.samples.astype(np.float64), 0.0, 1.0)
            noisy = VolumeScan(samples=combined.astype(np.float32),
                               sample_rate_hz=clean_vol.sample_rate_hz,
                               element_pitch_mm=clean_vol.element_pitch_mm,
                               scan_step_mm=clean_vol.scan_step_mm,
                               normalized=True,
                               time_offset=clean_vol.time_offset)
            images = extract_cscans(noisy, gate, label="clean",
                                    meta={"volume": f"clean-{k}"})
            for w, img in enumerate(images):
                img.meta["window"] = w
            clean_images.extend(images)
        noise_desc = {"sigma_s": model.structural_dev_sigma,
                      "sigma_r": model.random_sigma,
                      "savgol": list(model.savgol) if model.savgol else None,
                      "mean_level": float(model.mean_structural.mean())}
    else:
        gen_ds = _load_dataset_dir(str(run_path / "dataset"), "synth.input_run")
        defects = [img for img in gen_ds.images if img.label == "defective"]
        if not defects:
            raise DataError("generate run kept no defective images")
        n_clean_images = cfg._int("synth.n_clean_images", len(defects), minimum=0)

        if method == "cscan-noise":
            params_file = cfg.get("synth.params_file")
            if params_file:
                params_path = Path(str(params_file))
                if not params_path.is_file():
                    raise DataError(f"synth.params_file not found: {params_path}")
                params = load_invgauss_params(params_path)
                inputs["noise_model"] = _input_stamp(params_path)
            else:
                try:
                    params = InvGaussParams(
                        mu=cfg._float("synth.invgauss.mu"),
                        loc=cfg._float("synth.invgauss.loc"),
                        scale=cfg._float("synth.invgauss.scale"))
                except ValueError as e:
                    raise ConfigError(f"synth.invgauss: {e}") from e
            ds, stats = make_dataset("cscan-noise", defects, params, policy,
                                     RngSpec(seed=seed))
            clean_rngs = spawn_rngs(seed, len(defects) + n_clean_images)
            clean_images = [
                noisemod.sample_invgauss_image(params, crng)
                for crng in clean_rngs[len(defects):]
            ]
            noise_desc = params.to_json()
        else:  # real-noise
            noise_dir = cfg._str("synth.noise_dataset")
            noise_ds = _load_dataset_dir(noise_dir, "synth.noise_dataset")
            if not noise_ds.images:
                raise DataError("synth.noise_dataset holds no images")
            inputs["noise_dataset"] = _dataset_stamp(noise_dir)
            ds, stats = make_dataset("real-noise", defects, noise_ds.images,
                                     policy, RngSpec(seed=seed))
            picks = range(min(n_clean_images, len(noise_ds.images)))
            clean_images = [
                CScanImage(pixels=noise_ds.images[k].pixels.copy(),
                           depth_gate=noise_ds.images[k].depth_gate,
                           label="clean",
                           meta=dict(noise_ds.images[k].meta))
                for k in picks
            ]
            noise_desc = {"n_noise_images": len(noise_ds.images)}

    out = Dataset(images=list(ds.images) + clean_images,
                  provenance=provenance, seed=seed)
    run = run_dir_for(cfg, "synth")
    run.mkdir(parents=True, exist_ok=True)
    save_dataset(out, run / "dataset")

    _manifest(run, "synth", cfg, inputs=inputs,
              outputs={"dataset": "dataset"},
              results={
                  "method": method,
                  "provenance": provenance,
                  "kept_defective": stats["kept"],
                  "rejected": stats["rejected"],
                  "n_clean": len(clean_images),
                  "margin": policy.margin,
                  "noise_model": noise_desc,
              })
    return run


# ---------------------------------------------------------------------------
# hpo


def cmd_hpo(cfg: PipelineConfig) -> Path:
    """Search CNN hyperparameters with aging evolution on a dataset."""
    seed = cfg.seed
    ds = _load_dataset_dir(cfg._str("hpo.dataset"), "hpo.dataset")
    population = cfg._int("hpo.population", 16, minimum=2)
    sample_size = cfg._int("hpo.sample_size", 3, minimum=2)
    iterations = cfg._int("hpo.iterations", 64, minimum=0)
    k_splits = cfg._int("hpo.k_splits", 1, minimum=1)
    max_epochs = cfg._int("hpo.max_epochs", 0, minimum=0) or None

    labels = {img.label for img in ds.images}
    if labels != {"clean", "defective"}:
        raise DataError(
            f"hpo.dataset must hold both classes, found labels {sorted(labels)}")

    space = evohpo.default_space()

    def eval_fn(candidate: CnnConfig, rng: np.random.Generator) -> float:
        return evohpo.evaluate_config(candidate, ds, k_splits, rng,
                                      max_epochs=max_epochs)

    try:
        best, history = evohpo.regularized_evolution(
            space, eval_fn, population, sample_size, iterations, make_rng(seed))
    except ValueError as e:
        raise ConfigError(f"hpo: {e}") from e
    if not math.isfinite(best.fitness):
        raise NumericError("hpo: best fitness is not finite")

    run = run_dir_for(cfg, "hpo")
    run.mkdir(parents=True, exist_ok=True)
    evohpo.write_audit_csv(history, run / "audit.csv")
    evohpo.save_best_config(best, run / "best_config.json")

    _manifest(run, "hpo", cfg,
              inputs={"dataset": _dataset_stamp(cfg._str("hpo.dataset"))},
              outputs={"audit": "audit.csv", "best_config": "best_config.json"},
              results={
                  "evaluations": len(history),
                  "population": population,
                  "sample_size": sample_size,
                  "iterations": iterations,
                  "best_fitness": best.fitness,
                  "best_config": best.config.to_dict(),
              })
    return run


# ---------------------------------------------------------------------------
# train-eval


def _render_metric_bars(report, name: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = ["accuracy", "F1", "precision", "recall"]
    means = [report.mean_accuracy, report.mean_f1, report.mean_precision,
             report.mean_recall]
    stds = [report.std_accuracy, report.std_f1, report.std_precision,
            report.std_recall]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, means, yerr=stds, capsize=4, color="#4878d0")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"{name} (n_runs={report.n_runs})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_train_eval(cfg: PipelineConfig) -> Path:
    """Repeated train/test evaluation plus one saved reference model."""
    seed = cfg.seed
    train_path = cfg._str("train_eval.train_dataset")
    test_path = cfg._str("train_eval.test_dataset")
    train_ds = _load_dataset_dir(train_path, "train_eval.train_dataset")
    test_ds = _load_dataset_dir(test_path, "train_eval.test_dataset")
    n_runs = cfg._int("train_eval.n_runs", 2, minimum=1)
    max_epochs = cfg._int("train_eval.max_epochs", 0, minimum=0) or None
    name = cfg._str("train_eval.dataset_name", "train")
    cnn_cfg = _cnn_from(cfg)

    rng = make_rng(seed)
    try:
        report = metricsmod.repeated_eval(train_ds, test_ds, cnn_cfg, n_runs,
                                          rng, max_epochs=max_epochs)
    except (ValueError, FloatingPointError) as e:
        raise DataError(f"evaluation failed: {e}") from e
    _check_finite({"mean_f1": report.mean_f1,
                   "mean_accuracy": report.mean_accuracy},
                  "train-eval")

    model = build_model(cnn_cfg, rng)
    train_report = tinynn.train(model, train_ds, cnn_cfg, rng,
                                max_epochs=max_epochs, seed=seed)

    run = run_dir_for(cfg, "train-eval")
    run.mkdir(parents=True, exist_ok=True)
    report.save(run / "report.json")
    table = metricsmod.format_report_table({name: report})
    (run / "report.txt").write_text(table + "\n")
    _render_metric_bars(report, name, run / "metrics.png")
    tinynn.save_checkpoint(model, run / "model.ckpt", seed=seed)

    _manifest(run, "train-eval", cfg,
              inputs={"train_dataset": _dataset_stamp(train_path),
                      "test_dataset": _dataset_stamp(test_path)},
              outputs={"report": "report.json", "table": "report.txt",
                       "plot": "metrics.png", "checkpoint": "model.ckpt"},
              results={
                  "dataset_name": name,
                  "cnn_config": cnn_cfg.to_dict(),
                  "n_runs": n_runs,
                  "max_epochs": max_epochs,
                  "report": report.to_dict(),
                  "reference_model_stopped_epoch": train_report.stopped_epoch,
              })
    return run


# ---------------------------------------------------------------------------
# explain


def cmd_explain(cfg: PipelineConfig) -> Path:
    """Guided Grad-CAM triptychs plus mask-coverage statistics per image."""
    seed = cfg.seed
    ckpt_path = Path(cfg._str("explain.checkpoint"))
    if not ckpt_path.is_file():
        raise DataError(f"explain.checkpoint not found: {ckpt_path}")
    try:
        model, _ = tinynn.load_checkpoint(ckpt_path)
    except ValueError as e:
        raise DataError(f"explain.checkpoint: {e}") from e
    ds = _load_dataset_dir(cfg._str("explain.dataset"), "explain.dataset")
    if not ds.images:
        raise DataError("explain.dataset holds no images")
    n_images = cfg._int("explain.n_images", 0, minimum=0) or len(ds.images)
    layer_cfg = cfg._int("explain.conv_layer", -1)
    layer = None if layer_cfg < 0 else layer_cfg
    if layer is not None and layer >= len(model.conv_relu_indices):
        raise ConfigError(
            f"explain.conv_layer {layer} out of range for "
            f"{len(model.conv_relu_indices)} conv layers")

    run = run_dir_for(cfg, "explain")
    run.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, img in enumerate(ds.images[:n_images]):
        explanation = guided_gradcam(model, img, conv_layer_index=layer)
        png = run / f"explain_{i:03d}.png"
        render_explanation(img, explanation, png)
        prob = float(forward(model, img.pixels[None, :, :])[0])
        heat = explanation.heatmap
        total = float(heat.sum())
        row = {"index": i, "label": img.label, "prob_defective": prob,
               "png": png.name}
        if img.defect_mask is not None and img.defect_mask.any():
            inside = float(heat[img.defect_mask].sum())
            peak = np.unravel_index(int(heat.argmax()), heat.shape)
            row["mask_coverage"] = inside / total if total > 0 else 0.0
            row["peak_in_mask"] = bool(img.defect_mask[peak])
        rows.append(row)
    _write_json(run / "stats.json", {"format_version": 1, "images": rows})

    _manifest(run, "explain", cfg,
              inputs={"checkpoint": _input_stamp(ckpt_path),
                      "dataset": _dataset_stamp(cfg._str("explain.dataset"))},
              outputs={"stats": "stats.json", "triptychs": len(rows)},
              results={"n_images": len(rows),
                       "conv_layer": "last" if layer is None else layer})
    return run


# ---------------------------------------------------------------------------
# golden


def cmd_golden(cfg: PipelineConfig) -> Path:
    """Emit adversarial-loss parity vectors for external trainers."""
    seed = cfg.seed
    n_cases = cfg._int("golden.n_cases", 8, minimum=0)
    run = run_dir_for(cfg, "golden")
    run.mkdir(parents=True, exist_ok=True)
    ganloss.emit_golden_vectors(run / "golden_vectors.json", n_cases,
                                make_rng(seed))
    _manifest(run, "golden", cfg, inputs={},
              outputs={"vectors": "golden_vectors.json"},
              results={"n_cases": n_cases + 2})
    return run


COMMANDS = {
    "generate": cmd_generate,
    "fit-noise": cmd_fit_noise,
    "synth": cmd_synth,
    "hpo": cmd_hpo,
    "train-eval": cmd_train_eval,
    "explain": cmd_explain,
    "golden": cmd_golden,
}
