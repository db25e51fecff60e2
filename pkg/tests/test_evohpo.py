import numpy as np
import pytest

from ndtsynth.evohpo import (
    CONFIG_FIELDS,
    Categorical,
    FloatRange,
    IntRange,
    PopulationEntry,
    SearchSpace,
    default_space,
    evaluate_config,
    mutate,
    random_config,
    regularized_evolution,
    save_best_config,
    write_audit_csv,
)
from ndtsynth.scandata import make_rng
from ndtsynth.tinynn import BATCH_SIZES, CnnConfig


def surrogate_raw(cfg):
    # analytic fitness surface peaked at lr=1e-2, momentum=0.5
    return (-(np.log10(cfg.learning_rate) + 2.0) ** 2
            - (cfg.momentum - 0.5) ** 2)


def surrogate_eval(cfg, rng):
    return float(np.exp(surrogate_raw(cfg)))


def config_distance(a, b):
    return sum(getattr(a, f) != getattr(b, f) for f in CONFIG_FIELDS)


# --------------------------------------------------------------- search space

def test_default_space_covers_every_field():
    space = default_space()
    assert set(space.domains) == set(CONFIG_FIELDS)
    assert space.domains["batch_size"].values == BATCH_SIZES
    assert space.domains["learning_rate"].scale == "log"


def test_space_rejects_partial_coverage():
    domains = default_space().domains.copy()
    del domains["momentum"]
    with pytest.raises(ValueError, match="every config field"):
        SearchSpace(domains=domains)


def test_domain_validation():
    with pytest.raises(ValueError, match="scale"):
        FloatRange(0.0, 1.0, scale="cubic")
    with pytest.raises(ValueError, match="positive"):
        FloatRange(0.0, 1.0, scale="log")


# -------------------------------------------------------------- random_config

def test_random_configs_always_valid():
    space = default_space()
    rng = make_rng(1)
    for _ in range(300):
        cfg = random_config(space, rng)
        assert isinstance(cfg, CnnConfig)


def test_random_configs_hit_every_batch_size():
    space = default_space()
    rng = make_rng(2)
    seen = {random_config(space, rng).batch_size for _ in range(2000)}
    assert seen == set(BATCH_SIZES)


def test_learning_rate_uniform_in_log_space():
    space = default_space()
    rng = make_rng(3)
    logs = np.log10([random_config(space, rng).learning_rate
                     for _ in range(10_000)])
    # geometric midpoint of the bounds 1e-5 .. 0.5 is 10^-2.65
    assert np.median(logs) == pytest.approx(-2.65, abs=0.2)
    assert logs.min() >= -5.0 and logs.max() <= np.log10(0.5)


# --------------------------------------------------------------------- mutate

def test_mutation_changes_exactly_one_field():
    space = default_space()
    rng = make_rng(4)
    parent = random_config(space, rng)
    for _ in range(300):
        child = mutate(parent, space, rng)
        assert config_distance(parent, child) == 1


def test_mutation_field_choice_is_uniform():
    space = default_space()
    rng = make_rng(5)
    parent = random_config(space, rng)
    counts = dict.fromkeys(CONFIG_FIELDS, 0)
    n = 1000
    for _ in range(n):
        child = mutate(parent, space, rng)
        for f in CONFIG_FIELDS:
            if getattr(child, f) != getattr(parent, f):
                counts[f] += 1
    sigma = np.sqrt(n * (1 / 8) * (7 / 8))
    for f, c in counts.items():
        assert abs(c - n / 8) <= 3 * sigma, f"{f} mutated {c} times"


def test_mutated_values_stay_in_domain():
    space = default_space()
    rng = make_rng(6)
    parent = random_config(space, rng)
    for _ in range(200):
        child = mutate(parent, space, rng)   # CnnConfig validates ranges
        assert 100 <= child.epochs <= 500


# ------------------------------------------------------------ evaluate_config

def toy_dataset(rng, n=20, size=16):
    x = rng.uniform(0.0, 0.05, (n, size, size))
    y = np.zeros(n)
    x[: n // 2, 4:10, 4:10] += 0.9
    y[: n // 2] = 1.0
    return np.clip(x, 0, 1), y


def fast_cfg(**kw):
    base = dict(n_fc_layers=1, n_conv_layers=2, channel_ratio=2,
                batch_size=16, early_stop=0, learning_rate=0.014,
                momentum=0.176, epochs=100)
    base.update(kw)
    return CnnConfig(**base)


def shrink_models(monkeypatch, size=16):
    import ndtsynth.tinynn as tinynn
    original = tinynn.build_model

    def build_small(cfg, rng, input_size=size):
        return original(cfg, rng, input_size=size)

    monkeypatch.setattr(tinynn, "build_model", build_small)


def test_evaluate_separable_data_scores_one(monkeypatch):
    shrink_models(monkeypatch)
    data = toy_dataset(make_rng(7))
    fitness = evaluate_config(fast_cfg(), data, 2, make_rng(8), max_epochs=40)
    assert fitness == 1.0


def test_evaluate_is_seed_deterministic(monkeypatch):
    shrink_models(monkeypatch)
    data = toy_dataset(make_rng(9))
    a = evaluate_config(fast_cfg(), data, 2, make_rng(10), max_epochs=10)
    b = evaluate_config(fast_cfg(), data, 2, make_rng(10), max_epochs=10)
    assert a == b


def test_evaluate_failure_scores_zero(monkeypatch, caplog):
    shrink_models(monkeypatch)
    # two images total: the 80/20 split leaves an empty training set, the
    # failure is logged and scored 0 rather than raised
    x = np.zeros((2, 16, 16))
    x[0, 4:10, 4:10] = 0.9
    y = np.array([1.0, 0.0])
    with caplog.at_level("WARNING"):
        fitness = evaluate_config(fast_cfg(), (x, y), 1, make_rng(11))
    assert fitness == 0.0
    assert any("scoring 0" in rec.message for rec in caplog.records)


def test_evaluate_rejects_single_class():
    x = np.zeros((4, 16, 16))
    with pytest.raises(ValueError, match="both classes"):
        evaluate_config(fast_cfg(), (x, np.ones(4)), 1, make_rng(12))


def test_evaluate_rejects_bad_k():
    x = np.zeros((4, 16, 16))
    y = np.array([0.0, 1.0, 0.0, 1.0])
    with pytest.raises(ValueError, match="k_splits"):
        evaluate_config(fast_cfg(), (x, y), 0, make_rng(13))


# ------------------------------------------------------- regularized evolution

def test_population_entry_fitness_bounds():
    with pytest.raises(ValueError, match="fitness"):
        PopulationEntry(config=fast_cfg(), fitness=1.5, age=0)


def test_parameter_validation():
    space = default_space()
    with pytest.raises(ValueError, match="sample_size"):
        regularized_evolution(space, surrogate_eval, 4, 5, 10, make_rng(14))
    with pytest.raises(ValueError, match="sample_size"):
        regularized_evolution(space, surrogate_eval, 4, 1, 10, make_rng(14))
    with pytest.raises(ValueError, match="iterations"):
        regularized_evolution(space, surrogate_eval, 4, 2, -1, make_rng(14))


def test_zero_iterations_returns_best_initial():
    space = default_space()
    best, history = regularized_evolution(space, surrogate_eval, 8, 3, 0,
                                          make_rng(15))
    assert len(history) == 8
    assert all(row["origin"] == "init" for row in history)
    assert best.fitness == max(row["fitness"] for row in history)


def test_audit_history_properties():
    space = default_space()
    best, history = regularized_evolution(space, surrogate_eval, 10, 3, 40,
                                          make_rng(16))
    assert len(history) == 50
    # best-ever fitness never decreases along the log
    bests = [row["best_fitness"] for row in history]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))
    assert best.fitness == bests[-1]
    # each child differs from its recorded parent in exactly one field
    by_age = {row["age"]: row for row in history}
    for row in history:
        if row["origin"] == "mutation":
            parent = by_age[row["parent_age"]]
            diffs = sum(parent[f] != row[f] for f in CONFIG_FIELDS)
            assert diffs == 1
    # ages are the insertion counter
    assert [row["age"] for row in history] == list(range(50))


def test_paper_scale_parameters_accepted():
    space = default_space()
    best, history = regularized_evolution(space, surrogate_eval, 128, 5, 512,
                                          make_rng(17))
    assert len(history) == 128 + 512
    assert 0.0 <= best.fitness <= 1.0


def test_desk_scale_search_beats_random_baseline():
    space = default_space()
    rng = make_rng(1000)
    baseline = np.array([surrogate_raw(random_config(space, rng))
                         for _ in range(10_000)])
    threshold = np.quantile(baseline, 0.95)
    wins = 0
    for seed in range(10):
        best, _ = regularized_evolution(space, surrogate_eval, 16, 3, 64,
                                        make_rng(seed))
        wins += surrogate_raw(best.config) >= threshold
    assert wins >= 9


def test_audit_csv_round_trip(tmp_path):
    import csv
    space = default_space()
    _, history = regularized_evolution(space, surrogate_eval, 6, 2, 10,
                                       make_rng(18))
    path = tmp_path / "audit.csv"
    write_audit_csv(history, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16
    assert rows[0]["origin"] == "init"
    assert float(rows[-1]["best_fitness"]) == history[-1]["best_fitness"]
    with pytest.raises(ValueError, match="empty"):
        write_audit_csv([], tmp_path / "never.csv")


def test_best_config_json(tmp_path):
    import json
    entry = PopulationEntry(config=fast_cfg(), fitness=0.9, age=3)
    path = tmp_path / "best.json"
    save_best_config(entry, path)
    data = json.loads(path.read_text())
    assert data["fitness"] == 0.9
    assert data["config"]["learning_rate"] == 0.014
    assert set(data["config"]) == set(CONFIG_FIELDS)
