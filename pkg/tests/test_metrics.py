import numpy as np
import pytest

from ndtsynth.metrics import (
    ConfusionMatrix,
    EvalReport,
    accuracy,
    confusion_from_predictions,
    f1,
    format_report_table,
    precision,
    recall,
    repeated_eval,
    snr,
)
from ndtsynth.scandata import CScanImage, make_rng
from ndtsynth.tinynn import CnnConfig


def cm(tp=0.0, fp=0.0, fn=0.0, tn=0.0):
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)


# ------------------------------------------------------------ scalar metrics

def test_perfect_single_positive():
    m = cm(tp=1)
    assert precision(m) == 1.0
    assert recall(m) == 1.0
    assert f1(m) == 1.0


def test_no_true_positives_zero_f1():
    assert f1(cm(fp=3, fn=2, tn=5)) == 0.0
    assert precision(cm(fn=2, tn=5)) == 0.0
    assert recall(cm(fp=3, tn=5)) == 0.0


def test_f1_of_averaged_counts_differs_from_mean_f1():
    # precision 1.0 and recall 0.252 on pooled counts give 0.4026, which is
    # not the mean of per-run F1 values reported elsewhere
    m = cm(tp=150, fp=0, fn=150 * (1 - 0.252) / 0.252)
    assert precision(m) == 1.0
    assert recall(m) == pytest.approx(0.252)
    assert f1(m) == pytest.approx(2 * 0.252 / 1.252, abs=1e-12)
    assert f1(m) == pytest.approx(0.4026, abs=5e-5)


def test_accuracy_reference_matrix():
    # averaged matrix over repeated retrains on a 60-image test set
    m = cm(tp=29.95, fp=0.98, fn=5.14, tn=23.93)
    assert m.total == pytest.approx(60.0)
    assert accuracy(m) == pytest.approx(0.898, abs=1e-12)


def test_accuracy_all_correct_and_empty():
    assert accuracy(cm(tp=10, tn=14)) == 1.0
    with pytest.raises(ValueError, match="empty"):
        accuracy(cm())


def test_accuracy_swap_invariance():
    rng = make_rng(1)
    for _ in range(20):
        tp, fp, fn, tn = rng.random(4) * 50
        assert accuracy(cm(tp, fp, fn, tn)) == pytest.approx(
            accuracy(cm(tn, fn, fp, tp)))


def test_f1_harmonic_mean_identity_and_bound():
    rng = make_rng(2)
    for _ in range(50):
        tp, fp, fn, tn = rng.random(4) * 50
        m = cm(tp, fp, fn, tn)
        p, r = precision(m), recall(m)
        if p + r > 0:
            assert f1(m) == pytest.approx(2 * p * r / (p + r), abs=1e-12)
        assert f1(m) <= 1.0 + 1e-12
        assert f1(m) <= min(p, r) * 2 / max(p + r, 1e-12) + 1e-9


def test_counts_must_be_non_negative():
    with pytest.raises(ValueError, match="fp"):
        cm(fp=-1)


def test_confusion_from_predictions_counts():
    truth = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
    pred = np.array([1, 0, 1, 1, 0, 0], dtype=bool)
    m = confusion_from_predictions(truth, pred)
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 2)
    assert m.total == 6
    with pytest.raises(ValueError, match="lengths"):
        confusion_from_predictions(truth, pred[:-1])


# ------------------------------------------------------------- repeated eval

def toy_dataset(rng, n=16, size=16, separable=True):
    x = rng.uniform(0.0, 0.05, (n, size, size))
    y = np.zeros(n)
    if separable:
        x[: n // 2, 4:10, 4:10] += 0.9
    y[: n // 2] = 1.0
    return np.clip(x, 0, 1), y


def fast_cfg(**kw):
    base = dict(n_fc_layers=1, n_conv_layers=2, channel_ratio=2,
                batch_size=16, early_stop=0, learning_rate=0.014,
                momentum=0.176, epochs=100)
    base.update(kw)
    return CnnConfig(**base)


def patched_image_size(monkeypatch, size):
    # repeated_eval builds models at the library image size; shrink it so
    # these tests stay fast
    import ndtsynth.tinynn as tinynn
    original = tinynn.build_model

    def build_small(cfg, rng, input_size=size):
        return original(cfg, rng, input_size=size)

    monkeypatch.setattr(tinynn, "build_model", build_small)


def test_repeated_eval_single_run_matches_components(monkeypatch):
    patched_image_size(monkeypatch, 16)
    rng = make_rng(3)
    train_set = toy_dataset(rng)
    test_set = toy_dataset(rng, n=8)
    report = repeated_eval(train_set, test_set, fast_cfg(), 1, make_rng(4),
                           max_epochs=30)
    assert report.n_runs == 1
    assert report.std_accuracy == 0.0
    m = report.mean_confusion
    assert m.total == 8
    assert accuracy(m) == pytest.approx(report.mean_accuracy)
    assert f1(m) == pytest.approx(report.mean_f1)


def test_repeated_eval_deterministic(monkeypatch):
    patched_image_size(monkeypatch, 16)
    rng = make_rng(5)
    train_set = toy_dataset(rng)
    test_set = toy_dataset(rng, n=8)
    a = repeated_eval(train_set, test_set, fast_cfg(), 3, make_rng(6),
                      max_epochs=10)
    b = repeated_eval(train_set, test_set, fast_cfg(), 3, make_rng(6),
                      max_epochs=10)
    assert a == b


def test_repeated_eval_separable_data_high_scores(monkeypatch):
    patched_image_size(monkeypatch, 16)
    rng = make_rng(7)
    train_set = toy_dataset(rng, n=16)
    test_set = toy_dataset(rng, n=8)
    report = repeated_eval(train_set, test_set, fast_cfg(), 3, make_rng(8),
                           max_epochs=50)
    assert report.mean_accuracy == 1.0
    assert report.mean_f1 == 1.0


def test_repeated_eval_validates_n_runs():
    with pytest.raises(ValueError, match="n_runs"):
        repeated_eval((np.zeros((2, 16, 16)), np.array([0.0, 1.0])),
                      (np.zeros((2, 16, 16)), np.array([0.0, 1.0])),
                      fast_cfg(), 0, make_rng(9))


def test_report_validation_and_table():
    m = cm(tp=29.95, fp=0.98, fn=5.14, tn=23.93)
    report = EvalReport(n_runs=100, mean_accuracy=0.898, std_accuracy=0.01,
                        mean_precision=0.97, std_precision=0.01,
                        mean_recall=0.85, std_recall=0.02, mean_f1=0.9,
                        std_f1=0.02, mean_confusion=m)
    table = format_report_table({"experimental": report})
    lines = table.splitlines()
    assert "Accuracy" in lines[0] and "Recall" in lines[0]
    assert "experimental" in lines[2]
    assert "0.898" in lines[2]
    with pytest.raises(ValueError, match="mean_accuracy"):
        EvalReport(n_runs=1, mean_accuracy=1.2, std_accuracy=0.0,
                   mean_precision=1.0, std_precision=0.0, mean_recall=1.0,
                   std_recall=0.0, mean_f1=1.0, std_f1=0.0, mean_confusion=m)


def test_report_json_round_trip(tmp_path):
    import json
    m = cm(tp=10, tn=10)
    report = EvalReport(n_runs=5, mean_accuracy=1.0, std_accuracy=0.0,
                        mean_precision=1.0, std_precision=0.0,
                        mean_recall=1.0, std_recall=0.0, mean_f1=1.0,
                        std_f1=0.0, mean_confusion=m)
    path = tmp_path / "report.json"
    report.save(path)
    data = json.loads(path.read_text())
    assert data["n_runs"] == 5
    assert data["confusion"]["tp"] == 10
    assert data["accuracy"]["mean"] == 1.0


# ----------------------------------------------------------------------- snr

def make_image(pixels, mask):
    return CScanImage(pixels=np.asarray(pixels, dtype=np.float64),
                      depth_gate=(0, 5), label="defective", defect_mask=mask)


def test_snr_uniform_image_is_one():
    mask = np.zeros((64, 64), dtype=bool)
    mask[10:20, 10:20] = True
    assert snr(make_image(np.full((64, 64), 0.4), mask)) == 1.0


def test_snr_clean_background_is_infinite():
    mask = np.zeros((64, 64), dtype=bool)
    mask[30:34, 30:34] = True
    px = np.zeros((64, 64))
    px[31, 31] = 0.9
    assert snr(make_image(px, mask)) == float("inf")


def test_snr_hand_value():
    mask = np.zeros((64, 64), dtype=bool)
    mask[0:2, 0:2] = True
    px = np.full((64, 64), 0.01)
    px[0, 0] = 0.8
    assert snr(make_image(px, mask)) == pytest.approx(80.0)


def test_snr_drops_with_noise():
    rng = make_rng(10)
    mask = np.zeros((64, 64), dtype=bool)
    mask[28:36, 28:36] = True
    clean = np.full((64, 64), 1e-4)
    clean[30:34, 30:34] = 0.9
    noisy = np.clip(clean + rng.uniform(0.0, 0.1, (64, 64)), 0, 1)
    assert snr(make_image(clean, mask)) > 10 * snr(make_image(noisy, mask))


def test_snr_requires_usable_mask():
    with pytest.raises(ValueError, match="mask"):
        snr(CScanImage(pixels=np.zeros((64, 64)), depth_gate=(0, 5),
                       label="defective"))
    empty = np.zeros((64, 64), dtype=bool)
    with pytest.raises(ValueError, match="non-empty"):
        snr(make_image(np.zeros((64, 64)), empty))
    with pytest.raises(ValueError, match="background"):
        snr(make_image(np.zeros((64, 64)), ~empty))
