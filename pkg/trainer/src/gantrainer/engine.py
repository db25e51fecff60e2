"""Losses, parity checking, the training loop, and dataset translation."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ImageRecord, ImageSet, load_image_set, save_image_set
from .models import GanTrainConfig, build_models


def activation_map_loss(gen: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
    """Per-image defect-weighted L1, averaged over the batch.

    The reference image is normalized by its peak to form the weight map;
    the weighted absolute difference is scaled by the active-pixel
    fraction so the value is invariant to defect footprint size. Inputs
    are (N, 1, H, W) or (N, H, W); gradients flow through `gen` only.
    """
    if gen.shape != sim.shape:
        raise ValueError("gen and sim must have identical shapes")
    if gen.dim() == 3:
        gen = gen.unsqueeze(1)
        sim = sim.unsqueeze(1)
    sim = sim.detach()
    flat = sim.flatten(1)
    peaks = flat.max(dim=1).values
    if (peaks == 0).any():
        raise ValueError("activation loss undefined for an all-zero image")
    peaks = peaks.view(-1, 1, 1, 1)
    amap = sim / peaks
    active = (amap > 0).flatten(1).to(sim.dtype).mean(dim=1)
    weighted = (gen - sim).abs() * amap
    per_image = weighted.flatten(1).mean(dim=1) / active
    return per_image.mean()


def _total_from_parts(parts: dict, weights: dict) -> float:
    cycle = (weights["cyc_sim"] * parts["cyc_sim"]
             + weights["cyc_exp"] * parts["cyc_exp"])
    return (weights["gan_exp"] * parts["gan_exp"]
            + weights["gan_sim"] * parts["gan_sim"]
            + weights["cycle_coeff"] * cycle
            + weights["activ"] * parts["activ"])


def loss_parity_check(golden_path) -> dict:
    """Recompute every golden case in f64 and report the worst deviation."""
    golden_path = Path(golden_path)
    if not golden_path.is_file():
        raise FileNotFoundError(f"no golden vector file at {golden_path}")
    payload = json.loads(golden_path.read_text())
    cases = payload.get("cases", [])
    if not cases:
        raise ValueError(f"golden vector file {golden_path} holds no cases")
    max_activ_dev = 0.0
    max_total_dev = 0.0
    for case in cases:
        shape = tuple(case["shape"])
        sim = torch.tensor(case["sim"], dtype=torch.float64).reshape(1, *shape)
        gen = torch.tensor(case["gen_out"], dtype=torch.float64).reshape(1, *shape)
        activ = float(activation_map_loss(gen, sim))
        max_activ_dev = max(max_activ_dev,
                            abs(activ - case["expected_activ_loss"]))
        total = _total_from_parts(case["parts"], case["weights"])
        max_total_dev = max(max_total_dev,
                            abs(total - case["expected_total"]))
    return {
        "n_cases": len(cases),
        "max_activ_deviation": max_activ_dev,
        "max_total_deviation": max_total_dev,
        "max_abs_deviation": max(max_activ_dev, max_total_dev),
    }


def _to_tensor(s: ImageSet) -> torch.Tensor:
    return torch.from_numpy(s.pixel_stack()).unsqueeze(1)


def _epoch_batches(n_sim: int, n_exp: int, batch: int,
                   rng: np.random.Generator):
    """Unpaired batching: independent shuffles, truncated to full batches."""
    sim_order = rng.permutation(n_sim)
    exp_order = rng.permutation(n_exp)
    n_batches = min(n_sim, n_exp) // batch
    for b in range(n_batches):
        yield (sim_order[b * batch:(b + 1) * batch],
               exp_order[b * batch:(b + 1) * batch])


def train(cfg: GanTrainConfig, sim_dir, exp_dir, out_dir, seed: int) -> Path:
    """Adversarial training of both mappings; the defect-weighted term is
    applied mid-cycle on the simulated-to-experimental direction only.

    Writes losses.csv (one row per epoch) and checkpoint.pt into out_dir.
    """
    sim_set = load_image_set(sim_dir)
    exp_set = load_image_set(exp_dir)
    if len(sim_set) == 0 or len(exp_set) == 0:
        raise ValueError("both training domains must be non-empty")
    if cfg.batch_size > min(len(sim_set), len(exp_set)):
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds the smaller dataset "
            f"({min(len(sim_set), len(exp_set))} images)")

    torch.manual_seed(seed)
    g_exp, g_sim, d_exp, d_sim = build_models(cfg)
    opt_g = torch.optim.Adam(
        list(g_exp.parameters()) + list(g_sim.parameters()),
        lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(
        list(d_exp.parameters()) + list(d_sim.parameters()),
        lr=cfg.lr, betas=(0.5, 0.999))
    sched_g = torch.optim.lr_scheduler.LambdaLR(
        opt_g, lambda e: cfg.lr_factor(e + 1))
    sched_d = torch.optim.lr_scheduler.LambdaLR(
        opt_d, lambda e: cfg.lr_factor(e + 1))
    adv = nn.MSELoss()
    l1 = nn.L1Loss()

    sim_x = _to_tensor(sim_set)
    exp_x = _to_tensor(exp_set)
    batch_rng = np.random.Generator(np.random.PCG64(seed))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["epoch", "lr", "d_exp", "d_sim", "gan_exp", "gan_sim",
               "cyc_sim", "cyc_exp", "activ", "identity", "g_total"]
    rows = []

    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(columns[2:], 0.0)
        n_batches = 0
        for sim_idx, exp_idx in _epoch_batches(
                len(sim_set), len(exp_set), cfg.batch_size, batch_rng):
            sim_b = sim_x[sim_idx]
            exp_b = exp_x[exp_idx]

            # generators
            opt_g.zero_grad()
            fake_exp = g_exp(sim_b)
            fake_sim = g_sim(exp_b)
            pred_fake_exp = d_exp(fake_exp)
            pred_fake_sim = d_sim(fake_sim)
            gan_exp = adv(pred_fake_exp, torch.ones_like(pred_fake_exp))
            gan_sim = adv(pred_fake_sim, torch.ones_like(pred_fake_sim))
            cyc_sim = l1(g_sim(fake_exp), sim_b)
            cyc_exp = l1(g_exp(fake_sim), exp_b)
            activ = activation_map_loss(fake_exp, sim_b)
            g_total = (cfg.gan_exp_weight * gan_exp
                       + cfg.gan_sim_weight * gan_sim
                       + cfg.cycle_coeff * (cfg.cyc_sim_weight * cyc_sim
                                            + cfg.cyc_exp_weight * cyc_exp)
                       + cfg.activ_coeff * activ)
            identity = torch.zeros(())
            if cfg.use_identity:
                identity = l1(g_exp(exp_b), exp_b) + l1(g_sim(sim_b), sim_b)
                g_total = g_total + cfg.identity_weight * identity
            g_total.backward()
            opt_g.step()

            # discriminators
            opt_d.zero_grad()
            real_exp = d_exp(exp_b)
            fake_exp_pred = d_exp(fake_exp.detach())
            d_exp_loss = 0.5 * (adv(real_exp, torch.ones_like(real_exp))
                                + adv(fake_exp_pred,
                                      torch.zeros_like(fake_exp_pred)))
            real_sim = d_sim(sim_b)
            fake_sim_pred = d_sim(fake_sim.detach())
            d_sim_loss = 0.5 * (adv(real_sim, torch.ones_like(real_sim))
                                + adv(fake_sim_pred,
                                      torch.zeros_like(fake_sim_pred)))
            (d_exp_loss + d_sim_loss).backward()
            opt_d.step()

            for name, value in (
                    ("d_exp", d_exp_loss), ("d_sim", d_sim_loss),
                    ("gan_exp", gan_exp), ("gan_sim", gan_sim),
                    ("cyc_sim", cyc_sim), ("cyc_exp", cyc_exp),
                    ("activ", activ), ("identity", identity),
                    ("g_total", g_total)):
                sums[name] += float(value.detach())
            n_batches += 1

        if n_batches == 0:
            raise ValueError("datasets yield no full batch at this batch_size")
        row = {"epoch": epoch, "lr": opt_g.param_groups[0]["lr"]}
        row.update({k: sums[k] / n_batches for k in sums})
        rows.append(row)
        sched_g.step()
        sched_d.step()

    with open(out_dir / "losses.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)

    torch.save({
        "format_version": 1,
        "config": cfg.to_dict(),
        "seed": seed,
        "epochs_run": cfg.epochs,
        "g_exp": g_exp.state_dict(),
        "g_sim": g_sim.state_dict(),
        "d_exp": d_exp.state_dict(),
        "d_sim": d_sim.state_dict(),
    }, out_dir / "checkpoint.pt")
    return out_dir


def load_trained(checkpoint_path) -> tuple[GanTrainConfig, dict]:
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {checkpoint_path}")
    payload = torch.load(checkpoint_path, map_location="cpu",
                         weights_only=True)
    cfg = GanTrainConfig(**payload["config"])
    return cfg, payload


def translate(checkpoint_path, sim_dir, out_dir) -> Path:
    """Map a simulated dataset through the trained generator.

    Labels, masks, gates, and meta are carried over; provenance becomes
    "gan" and a per-image defect-weighted loss is logged alongside.
    """
    cfg, payload = load_trained(checkpoint_path)
    g_exp = build_models(cfg)[0]
    g_exp.load_state_dict(payload["g_exp"])
    g_exp.eval()

    sim_set = load_image_set(sim_dir)
    if len(sim_set) == 0:
        raise ValueError("nothing to translate: empty input dataset")
    with torch.no_grad():
        translated = g_exp(_to_tensor(sim_set)).squeeze(1).numpy()
    translated = np.clip(translated, 0.0, 1.0)

    records = []
    log_rows = []
    for i, (rec, pixels) in enumerate(zip(sim_set.records, translated)):
        records.append(ImageRecord(
            pixels=pixels, label=rec.label, depth_gate=rec.depth_gate,
            mask=rec.mask, meta=dict(rec.meta)))
        if rec.pixels.max() > 0.0:
            activ = float(activation_map_loss(
                torch.tensor(pixels, dtype=torch.float64)
                .reshape(1, 1, 64, 64),
                torch.tensor(rec.pixels, dtype=torch.float64)
                .reshape(1, 1, 64, 64)))
        else:
            activ = 0.0  # blank reference carries nothing to preserve
        log_rows.append({"index": i, "label": rec.label, "activ_loss": activ})

    out_dir = Path(out_dir)
    out = ImageSet(records=records, provenance="gan", seed=payload["seed"])
    save_image_set(out, out_dir)
    with open(out_dir / "activ_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index", "label", "activ_loss"])
        writer.writeheader()
        writer.writerows(log_rows)
    return out_dir
