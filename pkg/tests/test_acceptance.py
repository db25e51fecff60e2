"""Acceptance suite: one test per shipped guarantee, run with pytest -v.

Each test is numbered and self-contained; the -v report gives the
one-line pass/fail verdict per requirement.
"""

import hashlib
import json
import shutil
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from ndtsynth.evohpo import default_space, random_config, regularized_evolution
from ndtsynth.ganloss import LossParts, LossWeights, activmap_loss, total_generator_loss
from ndtsynth.metrics import ConfusionMatrix, accuracy
from ndtsynth.noise import (
    AScanNoiseModel,
    InvGaussParams,
    fit_ascan_model,
    fit_invgauss,
    sample_invgauss,
    save_noise_params,
    savgol_filter,
    synth_ascan_noise_volume,
)
from ndtsynth.pipeline import PipelineConfig, cmd_generate, cmd_synth, cmd_train_eval
from ndtsynth.scandata import make_rng
from ndtsynth.sigproc import hilbert_envelope
from ndtsynth.tinynn import backward, bce_loss, build_model


# ---------------------------------------------------------------------------
# 1. backprop gradients match finite differences on random architectures


def _fd_gradient(model, x, y, h=1e-5):
    base = model.param_vector()
    grad = np.zeros_like(base)
    for i in range(base.size):
        stepped = base.copy()
        stepped[i] = base[i] + h
        model.set_param_vector(stepped)
        up = bce_loss(model, x, y)
        stepped[i] = base[i] - h
        model.set_param_vector(stepped)
        down = bce_loss(model, x, y)
        grad[i] = (up - down) / (2.0 * h)
    model.set_param_vector(base)
    return grad


def test_01_gradients_match_finite_differences_on_random_configs():
    started = time.perf_counter()
    space = default_space()
    rng = make_rng(20260815)
    input_size = 8  # keeps parameter counts small enough to difference fully
    checked = 0
    while checked < 10:
        cfg = random_config(space, rng)
        if cfg.n_conv_layers > 3:
            continue  # an 8 px image supports at most three pooling halvings
        model = build_model(cfg, make_rng(1000 + checked), input_size=input_size)
        x = rng.uniform(0.0, 1.0, (2, input_size, input_size))
        y = np.array([1.0, 0.0])
        analytic = np.concatenate([
            backward(model, x, y)[name].ravel()
            for name, _ in model.param_items()])
        numeric = _fd_gradient(model, x, y)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-4
        checked += 1
    assert time.perf_counter() - started < 60.0


# ---------------------------------------------------------------------------
# 2. activation-map loss golden values


def _footprint_case(n_defect: int, side: int = 4):
    sim = np.zeros(side * side)
    sim[:n_defect] = 1.0
    gen = sim.copy()
    gen[:n_defect] = 0.5
    return sim.reshape(side, side), gen.reshape(side, side)


def test_02_activation_map_loss_hand_case_and_invariances():
    sim, gen = _footprint_case(4)
    assert activmap_loss(gen, sim) == pytest.approx(0.5, abs=1e-12)

    # same per-pixel discrepancy, growing footprint: loss must not move
    losses = [activmap_loss(*_footprint_case(n)[::-1])
              for n in (4, 8, 16)]
    assert max(losses) - min(losses) < 1e-12
    assert losses[0] == pytest.approx(0.5, abs=1e-12)

    # background pixels carry zero weight: perturbing them changes nothing
    sim, gen = _footprint_case(4)
    before = activmap_loss(gen, sim)
    noisy = gen.copy()
    noisy.ravel()[4:] = 0.77
    assert activmap_loss(noisy, sim) - before == 0.0


def test_03_total_generator_loss_arithmetic():
    weights = LossWeights(cycle_coeff=100.0)
    ones = LossParts(gan_exp=1.0, gan_sim=1.0, cyc_sim=1.0, cyc_exp=1.0,
                     activ=1.0)
    assert total_generator_loss(ones, weights) == pytest.approx(301.0,
                                                                abs=1e-12)
    # each term enters linearly with its fixed coefficient
    coeffs = {"gan_exp": 2.0 / 3.0, "gan_sim": 1.0 / 3.0,
              "cyc_sim": 100.0 * 2.0 / 3.0, "cyc_exp": 100.0 / 3.0,
              "activ": 200.0}
    zero = LossParts(gan_exp=0.0, gan_sim=0.0, cyc_sim=0.0, cyc_exp=0.0,
                     activ=0.0)
    assert total_generator_loss(zero, weights) == 0.0
    for name, coeff in coeffs.items():
        for value in (1.0, 3.5):
            parts = replace(zero, **{name: value})
            assert total_generator_loss(parts, weights) == pytest.approx(
                coeff * value, abs=1e-12)


# ---------------------------------------------------------------------------
# 4. inverse-Gaussian sampler and fitter agree


def test_04_invgauss_round_trip_and_ks():
    truth = InvGaussParams(mu=0.410, loc=-0.003, scale=0.066)
    samples = sample_invgauss(truth, 100_000, make_rng(44))
    fitted = fit_invgauss(samples)
    assert abs(fitted.mu - truth.mu) / truth.mu < 0.05
    assert abs(fitted.scale - truth.scale) / truth.scale < 0.05
    assert abs(fitted.loc - truth.loc) < 0.005
    ks = stats.kstest(
        samples,
        lambda x: stats.invgauss.cdf(x, truth.mu, loc=truth.loc,
                                     scale=truth.scale)).statistic
    assert ks < 0.01


def test_05_ascan_noise_round_trip():
    truth = AScanNoiseModel(
        mean_structural=0.05 + 0.01 * np.sin(np.linspace(0, 6.0, 600)),
        structural_dev_sigma=0.003, random_sigma=0.013, savgol=None)
    rng = make_rng(55)
    volumes = [synth_ascan_noise_volume(truth, (64, 64), rng)
               for _ in range(4)]
    fitted = fit_ascan_model(volumes, savgol=None)
    assert fitted.random_sigma == pytest.approx(0.013, rel=0.05)
    assert fitted.structural_dev_sigma == pytest.approx(0.003, rel=0.05)


def test_06_savgol_reproduces_cubic_exactly():
    x = np.linspace(-2.0, 2.0, 97)
    poly = 0.3 * x**3 - 1.1 * x**2 + 0.25 * x + 0.7
    smoothed = savgol_filter(poly, window=11, order=3)
    assert np.max(np.abs(smoothed - poly)) < 1e-10


def test_07_hilbert_envelope_of_cosine_and_dominance():
    n = 512
    t = np.arange(n)
    signal = np.cos(2.0 * np.pi * 8.0 * t / n)  # eight full cycles
    env = hilbert_envelope(signal)
    interior = env[n // 8: -n // 8]
    assert np.max(np.abs(interior - 1.0)) < 1e-2

    rng = make_rng(77)
    for _ in range(100):
        sig = rng.normal(0.0, 1.0, int(rng.integers(64, 512)))
        sig -= sig.mean()
        env = hilbert_envelope(sig)
        assert np.all(env >= np.abs(sig) - 1e-9)


def test_08_accuracy_anchor_is_orientation_invariant():
    cm = ConfusionMatrix(tp=29.95, fp=0.98, fn=5.14, tn=23.93)
    swapped = ConfusionMatrix(tp=29.95, fp=5.14, fn=0.98, tn=23.93)
    assert accuracy(cm) == pytest.approx(0.898, abs=1e-12)
    assert accuracy(swapped) == pytest.approx(0.898, abs=1e-12)


# ---------------------------------------------------------------------------
# 9. evolutionary search beats random sampling on the analytic surface


def _surface_raw(cfg) -> float:
    # peaked at learning_rate=1e-2, momentum=0.5
    return (-(np.log10(cfg.learning_rate) + 2.0) ** 2
            - (cfg.momentum - 0.5) ** 2)


def test_09_regularized_evolution_beats_random_baseline():
    started = time.perf_counter()
    space = default_space()
    rng = make_rng(1000)
    baseline = np.array([_surface_raw(random_config(space, rng))
                         for _ in range(10_000)])
    threshold = np.quantile(baseline, 0.95)

    def eval_fn(cfg, eval_rng):
        return float(np.exp(_surface_raw(cfg)))

    wins = 0
    for seed in range(10):
        best, _ = regularized_evolution(space, eval_fn, 16, 3, 64,
                                        make_rng(seed))
        wins += _surface_raw(best.config) >= threshold
    assert wins >= 9
    assert time.perf_counter() - started < 10.0


# ---------------------------------------------------------------------------
# 10. end-to-end: noise-matched training data must beat clean training data


def test_10_noise_trained_model_outperforms_clean_trained(tmp_path):
    started = time.perf_counter()
    work = tmp_path / "e2e"
    work.mkdir()
    base = {
        "workdir": str(work),
        "phantom": {
            "diameters_mm": [4.0, 6.0, 7.0, 9.0],
            "depths_mm": [1.5, 3.0, 4.5, 6.0, 7.5],
            "jitter_px": 0.5,
            "pulse": {"attenuation_db_per_mm": 2.5},
        },
        "gate": {"front_wall_margin": 20, "back_wall_margin": 20,
                 "window_len": 5},
        "generate": {"margin": 1.0, "min_peak": 0.05},
    }

    def cfg(seed, **sections):
        data = json.loads(json.dumps(base))
        data["seed"] = seed
        for key, value in sections.items():
            data[key] = value
        return PipelineConfig(data=data)

    run_train = cmd_generate(cfg(101))
    run_heldout = cmd_generate(cfg(202))

    # measured-noise stand-in: structural level above the deepest echoes
    model = AScanNoiseModel(mean_structural=np.full(533, 0.12),
                            structural_dev_sigma=0.005, random_sigma=0.015,
                            savgol=(11, 3))
    save_noise_params(model, work / "noise_model.json")

    def synth(input_run, seed, provenance):
        return cmd_synth(cfg(seed, synth={
            "method": "ascan-noise", "input_run": str(input_run),
            "params_file": str(work / "noise_model.json"), "margin": 1.0,
            "n_clean_volumes": 1, "provenance": provenance}))

    run_noised = synth(run_train, 303, "ascan-noise")
    run_test = synth(run_heldout, 404, "experimental-analog")

    def train_eval(train_dir, name):
        run = cmd_train_eval(cfg(505, train_eval={
            "train_dataset": str(train_dir),
            "test_dataset": str(run_test / "dataset"),
            "n_runs": 10, "max_epochs": 60, "dataset_name": name}))
        return json.loads((run / "report.json").read_text())

    clean_report = train_eval(run_train / "dataset", "clean-sim")
    noised_report = train_eval(run_noised / "dataset", "noise-matched")

    recall_gain = noised_report["recall"]["mean"] - clean_report["recall"]["mean"]
    f1_gain = noised_report["f1"]["mean"] - clean_report["f1"]["mean"]
    elapsed = time.perf_counter() - started
    assert recall_gain >= 0.2, (clean_report, noised_report)
    assert f1_gain > 0.0, (clean_report, noised_report)
    assert elapsed < 1800.0


# ---------------------------------------------------------------------------
# 11. CLI determinism: every command re-run with its seed is byte-identical


CLI_CFG = """
seed = 7

[phantom]
diameters_mm = [4.0, 9.0]
depths_mm = [1.5]
jitter_px = 0.5

[phantom.dims]
n_time = 256
thickness_mm = 2.0

[gate]
front_wall_margin = 20
back_wall_margin = 20
window_len = 5

[generate]
margin = 1.0
min_peak = 0.05
"""


def _cli(args, workdir):
    exe = shutil.which("ndtsynth")
    cmd = [exe] if exe else [sys.executable, "-m", "ndtsynth.cli"]
    proc = subprocess.run(cmd + args, capture_output=True, text=True,
                          timeout=600)
    assert proc.returncode == 0, proc.stderr
    run = Path(proc.stdout.strip().splitlines()[-1])
    assert run.is_dir() and str(run).startswith(str(workdir))
    return run


def _tree_hashes(run: Path) -> dict:
    return {
        str(p.relative_to(run)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(run.rglob("*")) if p.is_file()
    }


def test_11_every_cli_command_reruns_byte_identical(tmp_path):
    config = tmp_path / "cfg.toml"
    config.write_text(CLI_CFG)
    workdir = tmp_path / "runs"

    def run_twice(command, sets):
        args = [command, "--config", str(config), "--workdir", str(workdir)]
        for pair in sets:
            args += ["--set", pair]
        first = _cli(args, workdir)
        before = _tree_hashes(first)
        second = _cli(args, workdir)
        assert second == first
        after = _tree_hashes(second)
        assert after == before, f"{command} rerun differs"
        return first

    gen = run_twice("generate", [])
    fit = run_twice("fit-noise", ["fit_noise.method=ascan",
                                  f"fit_noise.input={gen / 'volumes'}"])
    synth = run_twice("synth", ["synth.method=ascan-noise",
                                f"synth.input_run={gen}",
                                f"synth.params_file={fit / 'model.json'}",
                                "synth.n_clean_volumes=1"])
    hpo = run_twice("hpo", [f"hpo.dataset={gen / 'dataset'}",
                            "hpo.population=2", "hpo.sample_size=2",
                            "hpo.iterations=0", "hpo.max_epochs=1"])
    te = run_twice("train-eval", [
        f"train_eval.train_dataset={gen / 'dataset'}",
        f"train_eval.test_dataset={synth / 'dataset'}",
        f"train_eval.best_config={hpo / 'best_config.json'}",
        "train_eval.n_runs=1", "train_eval.max_epochs=1"])
    run_twice("explain", [f"explain.checkpoint={te / 'model.ckpt'}",
                          f"explain.dataset={synth / 'dataset'}",
                          "explain.n_images=2"])
    run_twice("golden", ["golden.n_cases=2"])
