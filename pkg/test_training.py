import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import training
from conftest import make_config
from archgen import build_graph
from dataio import DatasetSplits, split
from errors import DatasetError, NumericDivergenceError, ShapeMismatchError
from tensorops import init_params
from training import (
    HISTORY_COLUMNS,
    AdamState,
    TrainConfig,
    TverskyParams,
    focal_tversky_from_counts,
    focal_tversky_loss,
    optimizer_step,
    plot_history,
    soft_counts,
    train,
    trainable_arrays,
)


def random_case(seed, n=2, size=6, low=0.02, high=0.98):
    rng = np.random.default_rng(seed)
    probs = rng.uniform(low, high, size=(n, size, size, 1))
    mask = (rng.uniform(size=(n, size, size, 1)) < 0.3).astype(np.uint8)
    return probs, mask


def test_unit_counts_give_half_tversky_index():
    tversky = TverskyParams(epsilon=1e-12)
    assert focal_tversky_from_counts(1.0, 1.0, 1.0, tversky) == pytest.approx(0.5 ** (4 / 3), abs=1e-9)


def test_perfect_prediction_costs_only_epsilon():
    _, mask = random_case(0, size=16)
    probs = np.where(mask == 1, 1 - 1e-7, 1e-7)
    loss, _ = focal_tversky_loss(probs, mask)
    assert loss <= 1e-5


def test_fully_wrong_prediction_costs_one():
    _, mask = random_case(0, size=16)
    probs = np.where(mask == 1, 1e-7, 1 - 1e-7)
    loss, _ = focal_tversky_loss(probs, mask)
    assert loss >= 1 - 1e-5


def test_soft_counts_sum_per_sample():
    probs = np.full((2, 2, 2, 1), 0.25)
    mask = np.zeros((2, 2, 2, 1), dtype=np.uint8)
    mask[0, 0, 0, 0] = 1
    tp, fp, fn = soft_counts(probs, mask)
    np.testing.assert_allclose(tp, [0.25, 0.0])
    np.testing.assert_allclose(fp, [0.75, 1.0])
    np.testing.assert_allclose(fn, [0.75, 0.0])


def test_loss_gradient_matches_finite_differences():
    probs, mask = random_case(3)
    tversky = TverskyParams()
    _, grad = focal_tversky_loss(probs, mask, tversky)
    numeric = np.zeros_like(probs)
    flat, out = probs.reshape(-1), numeric.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + 1e-6
        plus, _ = focal_tversky_loss(probs, mask, tversky)
        flat[k] = old - 1e-6
        minus, _ = focal_tversky_loss(probs, mask, tversky)
        flat[k] = old
        out[k] = (plus - minus) / 2e-6
    err = np.linalg.norm(grad - numeric) / (np.linalg.norm(grad) + np.linalg.norm(numeric))
    assert err < 1e-6


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    alpha=st.floats(0.05, 2.0),
    beta=st.floats(0.05, 2.0),
    gamma=st.floats(0.5, 3.0),
)
def test_loss_stays_in_unit_interval(seed, alpha, beta, gamma):
    probs, mask = random_case(seed, low=1e-6, high=1 - 1e-6)
    loss, grad = focal_tversky_loss(probs, mask, TverskyParams(alpha=alpha, beta=beta, gamma=gamma))
    assert 0.0 <= loss <= 1.0
    assert np.all(np.isfinite(grad))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_half_half_tversky_is_soft_dice(seed):
    probs, mask = random_case(seed, n=1)
    eps = 1e-6
    loss, _ = focal_tversky_loss(probs, mask, TverskyParams(alpha=0.5, beta=0.5, gamma=1.0, epsilon=eps))
    p, g = probs.ravel(), mask.ravel().astype(np.float64)
    dice = (2 * (p * g).sum() + 2 * eps) / (p.sum() + g.sum() + 2 * eps)
    assert loss == pytest.approx(1 - dice, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_ignores_pixel_order(seed):
    probs, mask = random_case(seed, n=1)
    order = np.random.default_rng(seed).permutation(probs.size)
    shuffled_p = probs.ravel()[order].reshape(probs.shape)
    shuffled_m = mask.ravel()[order].reshape(mask.shape)
    assert focal_tversky_loss(shuffled_p, shuffled_m)[0] == pytest.approx(focal_tversky_loss(probs, mask)[0], abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), step=st.floats(0.01, 0.5))
def test_raising_crack_probabilities_never_raises_loss(seed, step):
    probs, mask = random_case(seed, n=1)
    better = np.where(mask == 1, np.minimum(probs + step, 0.999), probs)
    assert focal_tversky_loss(better, mask)[0] <= focal_tversky_loss(probs, mask)[0] + 1e-12


def test_loss_rejects_bad_masks():
    probs, mask = random_case(1)
    with pytest.raises(ValueError):
        focal_tversky_loss(probs, mask * 2)
    with pytest.raises(ShapeMismatchError):
        focal_tversky_loss(probs[:, :5], mask)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_zero_gradient_leaves_params_unchanged():
    p = [np.array([1.5, -2.0])]
    new, state = optimizer_step(p, [np.zeros(2)], AdamState(), TrainConfig())
    np.testing.assert_array_equal(new[0], p[0])
    assert state.step == 1


def test_first_step_moves_by_learning_rate():
    config = TrainConfig(learning_rate=1e-3)
    new, _ = optimizer_step([np.array([2.0])], [np.array([1.0])], AdamState(), config)
    assert new[0][0] == pytest.approx(2.0 - 1e-3, rel=1e-9)


def test_ten_step_trace_matches_reference_adam():
    config = TrainConfig(learning_rate=0.05)
    curvature = np.array([1.0, 4.0, 0.25])
    params, state = [np.array([1.0, -2.0, 3.0])], AdamState()

    ref = [1.0, -2.0, 3.0]
    m, v = [0.0] * 3, [0.0] * 3
    for t in range(1, 11):
        params, state = optimizer_step(params, [curvature * params[0]], state, config)
        for i in range(3):
            g = curvature[i] * ref[i]
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            m_hat = m[i] / (1 - 0.9 ** t)
            v_hat = v[i] / (1 - 0.999 ** t)
            ref[i] -= 0.05 * m_hat / (v_hat ** 0.5 + 1e-7)
    np.testing.assert_allclose(params[0], ref, rtol=0, atol=1e-12)
    assert state.step == 10


def test_optimizer_rejects_mismatched_gradients():
    with pytest.raises(ShapeMismatchError):
        optimizer_step([np.zeros(3)], [np.zeros(2)], AdamState(), TrainConfig())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@pytest.fixture
def tiny16():
    return build_graph(make_config(size=16))


@pytest.fixture
def small_splits(small_samples):
    return split(small_samples, seed=0)


def fast(**kwargs):
    return TrainConfig(progress=False, epochs=2, threads=1, **kwargs)


def test_training_is_deterministic(tiny16, small_splits):
    a = train(tiny16, small_splits, fast(seed=3))
    b = train(tiny16, small_splits, fast(seed=3))
    pd.testing.assert_frame_equal(a.history, b.history)
    for x, y in zip(trainable_arrays(a.params), trainable_arrays(b.params)):
        np.testing.assert_array_equal(x, y)


def test_history_has_one_row_per_epoch(tiny16, small_splits):
    result = train(tiny16, small_splits, fast())
    assert list(result.history.columns) == HISTORY_COLUMNS
    assert list(result.history["epoch"]) == [1, 2]
    assert 1 <= result.best_epoch <= 2
    assert result.best_model(tiny16).graph is tiny16


def test_zero_learning_rate_keeps_initial_weights(tiny16, small_splits):
    result = train(tiny16, small_splits, fast(learning_rate=0.0, seed=1))
    for x, y in zip(trainable_arrays(result.params), trainable_arrays(init_params(tiny16, seed=1))):
        np.testing.assert_array_equal(x, y)


def test_empty_validation_split_falls_back_to_train(tiny16, small_splits, caplog):
    splits = DatasetSplits(train=small_splits.train, val=[], test=small_splits.test)
    with caplog.at_level(logging.WARNING):
        result = train(tiny16, splits, fast())
    assert "validation split is empty" in caplog.text
    assert result.history["val_loss"].notna().all()


def test_empty_training_split_is_an_error(tiny16, small_splits):
    with pytest.raises(DatasetError):
        train(tiny16, DatasetSplits(val=small_splits.val), fast())


def test_samples_must_match_graph_input(small_splits):
    with pytest.raises(ShapeMismatchError):
        train(build_graph(make_config(size=8)), small_splits, fast())


def test_nan_weights_stop_training(tiny16, small_splits):
    initial = init_params(tiny16)
    initial[0].weights[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericDivergenceError):
        train(tiny16, small_splits, fast(), initial=initial)


def test_loss_goes_down(tiny16, small_splits):
    result = train(tiny16, small_splits, TrainConfig(progress=False, epochs=8, learning_rate=1e-3, threads=1))
    losses = result.history["train_loss"]
    assert losses.iloc[-1] < losses.iloc[0]


@pytest.mark.parametrize("augment,steps", [(True, 16), (False, 2)])
def test_augmented_epoch_steps_through_every_view(tiny16, small_splits, monkeypatch, augment, steps):
    shapes = []
    forward = training.forward_with_cache

    def counting(graph, params, x, training=True):
        shapes.append(x.shape)
        return forward(graph, params, x, training=training)

    monkeypatch.setattr(training, "forward_with_cache", counting)
    train(tiny16, small_splits, TrainConfig(progress=False, epochs=1, threads=1, augment=augment))
    # 16 training images, batches of 8, eight views of a square image
    assert len(shapes) == steps
    assert all(s == (8, 16, 16, 3) for s in shapes)


def test_plot_history_writes_png(tmp_path):
    history = pd.DataFrame({"epoch": [1, 2], "train_loss": [0.9, 0.8], "val_loss": [0.95, 0.85],
                            "val_f1": [0.1, 0.2], "val_miou": [0.4, 0.5]})
    path = plot_history(history, tmp_path / "history.png", title="tiny")
    assert path.stat().st_size > 0


@pytest.mark.slow
def test_desk_scale_run_learns_cracks(desk_run):
    _, _, result = desk_run
    assert len(result.history) <= 15
    assert result.history["val_f1"].max() >= 0.5
