import math

import numpy as np
import pytest

from csta.data import AugmentConfig, make_synthetic_dataset
from csta.model import init_params
from csta.tensor import ContractError
from csta.train import (
    ABLATION_HEADER,
    HISTORY_HEADER,
    DivergedTrainingError,
    TrainConfig,
    ablation_csv,
    ablation_suite,
    batch_loss,
    confusion_csv,
    evaluate,
    history_csv,
    optimizer_step,
    report_from_logits,
    report_from_predictions,
    train,
    training_samples,
)

from helpers import random_batch, tiny_config


@pytest.fixture(scope="module")
def toy():
    ds = make_synthetic_dataset(n_per_class=4, n_test_per_class=1, frame_range=(10, 14), seed=3)
    return ds.subset("train", "default"), ds.subset("test", "default")


def quick(**kw):
    base = dict(epochs=2, batch_size=4, seed=1, augment=AugmentConfig(1, 1, (0.5, 1.0), frames=6))
    base.update(kw)
    return TrainConfig(**base)


def test_vanilla_sgd_step():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -1.0])}
    out, _ = optimizer_step(p, g, {}, TrainConfig(optimizer="sgd_momentum", lr=0.1, momentum=0.0))
    np.testing.assert_allclose(out["w"], [0.95, 2.1], atol=1e-15)
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_sgd_momentum_accumulates():
    cfg = TrainConfig(optimizer="sgd_momentum", lr=0.1, momentum=0.9)
    p, state = {"w": np.array([0.0])}, {}
    p, state = optimizer_step(p, {"w": np.array([1.0])}, state, cfg)
    p, state = optimizer_step(p, {"w": np.array([1.0])}, state, cfg)
    # v1 = 1, v2 = 1.9
    np.testing.assert_allclose(p["w"], [-0.29], atol=1e-15)


def test_adam_first_step_has_lr_magnitude(rng):
    g = rng.normal(size=50)
    p, _ = optimizer_step({"w": np.zeros(50)}, {"w": g}, {}, TrainConfig(lr=1e-3))
    np.testing.assert_allclose(np.abs(p["w"]), 1e-3, rtol=1e-4)
    assert np.all(np.sign(p["w"]) == -np.sign(g))


def test_adam_matches_textbook(rng):
    cfg = TrainConfig(lr=0.01, weight_decay=0.1)
    p = rng.normal(size=5)
    ref, m, v = p.copy(), np.zeros(5), np.zeros(5)
    params, state = {"w": p.copy()}, {}
    for t in range(1, 6):
        g = rng.normal(size=5)
        params, state = optimizer_step(params, {"w": g}, state, cfg)
        ge = g + 0.1 * ref
        m = 0.9 * m + 0.1 * ge
        v = 0.999 * v + 0.001 * ge**2
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("opt", ["adam", "sgd_momentum"])
def test_zero_gradient_is_fixed_point(opt):
    p = {"w": np.array([1.0, -2.0])}
    out, _ = optimizer_step(p, {"w": np.zeros(2)}, {}, TrainConfig(optimizer=opt))
    np.testing.assert_array_equal(out["w"], p["w"])


def test_non_finite_gradient_raises():
    with pytest.raises(DivergedTrainingError):
        optimizer_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, {}, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_training_sample_count(toy):
    train_set, _ = toy
    assert len(training_samples(train_set, quick())) == 2 * len(train_set)
    plain = quick(augment=AugmentConfig(0, 0, frames=6))
    assert len(training_samples(train_set, plain)) == len(train_set)


def test_zero_learning_rate_leaves_params(toy):
    train_set, _ = toy
    cfg = tiny_config()
    params, history = train(train_set, cfg, quick(lr=0.0))
    assert params.equal(init_params(cfg, 1))
    assert len(history) == 2


def test_training_is_deterministic(toy):
    train_set, _ = toy
    a, ha = train(train_set, tiny_config(), quick())
    b, hb = train(train_set, tiny_config(), quick())
    assert a.equal(b)
    assert history_csv(ha) == history_csv(hb)
    c, _ = train(train_set, tiny_config(), quick(seed=2))
    assert not a.equal(c)


def test_training_reduces_loss(toy):
    train_set, _ = toy
    _, history = train(train_set, tiny_config(), quick(epochs=15, lr=3e-3))
    assert history[-1].loss < history[0].loss


def test_first_loss_near_uniform(rng):
    cfg = tiny_config(num_classes=5)
    params = init_params(cfg, 0)
    pos, mot, labels = random_batch(rng, cfg, batch=16)
    loss, _, _ = batch_loss(params, pos, mot, labels)
    assert abs(loss.item() - math.log(5)) < 0.2 * math.log(5)


def test_class_count_mismatch(toy):
    with pytest.raises(ContractError):
        train(toy[0], tiny_config(num_classes=4), quick())
    with pytest.raises(ContractError):
        evaluate(toy[1], init_params(tiny_config(num_classes=4), 0))


def test_report_perfect():
    r = report_from_predictions(np.array([0, 1, 2, 1]), np.array([0, 1, 2, 1]), 3)
    assert r.accuracy == 1.0
    np.testing.assert_array_equal(r.confusion, np.diag([1, 2, 1]))
    np.testing.assert_array_equal(r.per_class_accuracy, [1, 1, 1])


def test_report_constant_logits_chance():
    labels = np.repeat(np.arange(4), 5)
    r = report_from_logits(np.zeros((20, 4)), labels, 4)
    assert r.accuracy == pytest.approx(0.25)
    assert np.all(r.confusion[:, 0] == 5)
    np.testing.assert_array_equal(r.confusion.sum(axis=1), [5, 5, 5, 5])


def test_report_missing_class_is_nan():
    r = report_from_predictions(np.array([0, 0]), np.array([0, 1]), 3)
    assert math.isnan(r.per_class_accuracy[2])
    assert r.to_dict()["per_class_accuracy"] == [1.0, 0.0, None]


def test_report_empty():
    with pytest.raises(ContractError):
        report_from_predictions(np.array([], int), np.array([], int), 3)


def test_evaluate_and_confusion_csv(toy):
    train_set, test_set = toy
    params, _ = train(train_set, tiny_config(), quick())
    r = evaluate(test_set, params)
    assert r.count == len(test_set) == 3
    assert r.confusion.sum() == 3
    lines = confusion_csv(r, test_set.class_names).splitlines()
    assert lines[0].split(",")[0] == "true\\pred"
    assert len(lines) == 4


def test_history_csv_schema(toy):
    _, history = train(toy[0], tiny_config(), quick())
    lines = history_csv(history).splitlines()
    assert lines[0] == ",".join(HISTORY_HEADER)
    assert [int(l.split(",")[0]) for l in lines[1:]] == [1, 2]


def test_ablation_suite(toy):
    train_set, test_set = toy
    rows = ablation_suite(train_set, test_set, tiny_config(), quick(epochs=1))
    assert list(rows) == ["full", "without_S", "without_T", "without_ST"]
    assert all(r.error is None for r in rows.values())
    text = ablation_csv(rows).splitlines()
    assert text[0] == ",".join(ABLATION_HEADER)
    assert [l.split(",")[0] for l in text[1:]] == list(rows)


def test_ablation_isolates_failures(toy):
    train_set, test_set = toy
    bad_test = make_synthetic_dataset(n_per_class=2, n_test_per_class=1, frame_range=(10, 12)).subset("test", "default")
    bad_test.class_names.append("extra")
    rows = ablation_suite(train_set, bad_test, tiny_config(), quick(epochs=1), modes=["full", "without_ST"])
    assert all(r.error and "ContractError" in r.error for r in rows.values())
    assert "error" in ablation_csv(rows)
