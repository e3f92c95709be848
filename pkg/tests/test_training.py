"""Schedule rules, optimizer arithmetic, the shared loop, and evaluation."""

import numpy as np
import pytest

from hact.dataset import ClipSet, DataBundle
from hact.errors import ConfigError, DataError, TrainingError, UsageError
from hact.hierarchy import block_hierarchy
from hact.model import StackConfig, build_model
from hact.pruning import pruning_loop, total_pruned
from hact.training import (
    Adam,
    AdamState,
    METRICS_HEADER,
    PruneTrainer,
    TrainConfig,
    adam_step,
    cross_entropy_value,
    evaluate,
    lr_schedule,
    split_validation,
    train_first_pass,
    train_hierarchical,
)

# ---------------------------------------------------------------------------
# fixtures: a two-class brightness problem a tiny model can learn
# ---------------------------------------------------------------------------


def brightness_set(n_per_class=8, t=8, hw=8, seed=0):
    r = np.random.default_rng(seed)
    clips, labels, ids = [], [], []
    for c in range(2):
        for i in range(n_per_class):
            base = 0.25 if c == 0 else 0.75
            clips.append(np.clip(base + r.normal(0, 0.05, (t, hw, hw)), 0, 1))
            labels.append(c)
            ids.append(f"clip{c}_{i}")
    return ClipSet(clips, labels, ids)


def mini_bundle(seed=0):
    return DataBundle(
        train=brightness_set(8, seed=seed),
        val=brightness_set(4, seed=seed + 100),
        test=brightness_set(4, seed=seed + 200),
    )


def mini_cfg(**kw):
    base = dict(
        epochs=3,
        lr=0.02,
        batch_size=4,
        seed=1,
        crop_size=8,
        frames_per_clip=8,
    )
    base.update(kw)
    return TrainConfig(**base)


def mini_model(seed=3):
    cfg = StackConfig(
        base_channels=4,
        bottleneck=False,
        temporal_kernel=1,
        num_classes_per_head=(2, 2, 2, 2),
        in_channels=1,
    )
    return build_model(cfg, seed=seed)


def mini_hierarchy():
    return block_hierarchy(2, (2, 2, 2))


# ---------------------------------------------------------------------------
# config and split
# ---------------------------------------------------------------------------


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.lr_decay) == (20, 2e-3, 10.0)
    assert (cfg.patience, cfg.batch_size, cfg.frames_per_clip) == (2, 8, 8)
    assert cfg.loss_weights == (0.125, 0.25, 0.5, 1.0)
    cfg.validate()


@pytest.mark.parametrize(
    "kw",
    [
        dict(epochs=0),
        dict(lr=0.0),
        dict(lr_decay=1.0),
        dict(patience=0),
        dict(batch_size=0),
        dict(loss_weights=(1.0, 1.0, 1.0)),
        dict(loss_weights=(-0.1, 0.5, 0.5, 1.0)),
        dict(loss_weights=(0.5, 0.5, 0.5, 0.0)),
    ],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_split_sizes_and_partition():
    full = brightness_set(50)  # 100 clips
    val, test = split_validation(full, 0.10, seed=5)
    assert len(val) == 10 and len(test) == 90
    assert set(val.ids) | set(test.ids) == set(full.ids)
    assert set(val.ids) & set(test.ids) == set()


def test_split_is_seeded_and_deterministic():
    full = brightness_set(10)
    a1, b1 = split_validation(full, 0.25, seed=7)
    a2, b2 = split_validation(full, 0.25, seed=7)
    assert a1.ids == a2.ids and b1.ids == b2.ids
    a3, _ = split_validation(full, 0.25, seed=8)
    assert a3.ids != a1.ids


def test_split_guards():
    with pytest.raises(DataError):
        split_validation(ClipSet([], [], []), 0.10)
    with pytest.raises(ConfigError):
        split_validation(brightness_set(2), 1.0)
    val, _ = split_validation(brightness_set(2), 0.05)  # floor would be 0
    assert len(val) == 1


# ---------------------------------------------------------------------------
# learning-rate rule
# ---------------------------------------------------------------------------


def test_lr_steady_improvement_keeps_rate():
    assert lr_schedule([1.0, 0.9, 0.8], 1e-4) == 1e-4


def test_lr_two_bad_epochs_divide_by_ten():
    assert lr_schedule([1.0, 1.1, 1.2], 1e-4) == pytest.approx(1e-5)


def test_lr_improvement_interrupts_streak():
    assert lr_schedule([1.0, 1.1, 0.9], 1e-4) == 1e-4


def test_lr_decay_resets_the_streak():
    assert lr_schedule([1.0, 1.1, 1.2, 1.3], 1e-5) == 1e-5  # streak restarted
    assert lr_schedule([1.0, 1.1, 1.2, 1.3, 1.4], 1e-5) == pytest.approx(1e-6)


def test_lr_tie_counts_as_non_improvement():
    assert lr_schedule([1.0, 1.0, 1.0], 1e-4) == pytest.approx(1e-5)


def test_lr_requires_history():
    with pytest.raises(UsageError):
        lr_schedule([], 1e-4)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    p = np.array([1.5, -2.5])
    state = AdamState(m=[np.zeros(2)], v=[np.zeros(2)])
    adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p, [1.5, -2.5])


def test_adam_none_gradient_skips_entry():
    p, q = np.array([1.0]), np.array([2.0])
    state = AdamState(m=[np.zeros(1), np.zeros(1)], v=[np.zeros(1), np.zeros(1)])
    adam_step([p, q], [None, np.array([1.0])], state, lr=0.1)
    assert p[0] == 1.0 and q[0] != 2.0
    assert state.m[0][0] == 0.0


def test_adam_first_step_matches_hand_formula():
    g = np.array([0.5, -0.25])
    p = np.array([1.0, -2.0])
    state = AdamState(m=[np.zeros(2)], v=[np.zeros(2)])
    adam_step([p], [g], state, lr=0.1)
    # zero state: corrected m = g, corrected v = g^2
    expect = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expect, rtol=1e-12)
    assert state.t == 1


def test_adam_constant_gradient_approaches_signed_rate():
    g = np.array([3.0, -0.02])
    p = np.zeros(2)
    state = AdamState(m=[np.zeros(2)], v=[np.zeros(2)])
    for _ in range(300):
        before = p.copy()
        adam_step([p], [g], state, lr=0.01)
    step = before - p
    np.testing.assert_allclose(step, 0.01 * np.sign(g), rtol=1e-6)


def test_adam_rejects_non_finite_gradient():
    state = AdamState(m=[np.zeros(1)], v=[np.zeros(1)])
    with pytest.raises(TrainingError):
        adam_step([np.zeros(1)], [np.array([np.nan])], state, lr=0.1)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_first_pass_learns_brightness_task():
    data = mini_bundle()
    result = train_first_pass(mini_model(), data, mini_cfg(epochs=5))
    rows = result.metrics.rows
    assert rows[-1].train_loss < np.log(2.0)  # strictly below uniform chance
    assert rows[-1].train_loss < rows[0].train_loss
    assert result.model.is_trained


def test_first_pass_confusion_row_sums_match_class_counts():
    data = mini_bundle()
    result = train_first_pass(mini_model(), data, mini_cfg(epochs=1))
    counts = np.bincount(data.val.labels, minlength=2)
    np.testing.assert_array_equal(result.confusion.sum(axis=1), counts)


def test_seeded_run_repeats_bit_identically():
    data = mini_bundle()
    r1 = train_first_pass(mini_model(seed=9), data, mini_cfg(epochs=2))
    r2 = train_first_pass(mini_model(seed=9), mini_bundle(), mini_cfg(epochs=2))
    assert list(r1.metrics.csv_lines()) == list(r2.metrics.csv_lines())
    p1, p2 = r1.model.named_params(), r2.model.named_params()
    assert all(p1[k].data.tobytes() == p2[k].data.tobytes() for k in p1)


def test_final_only_weights_reproduce_first_pass_trajectory():
    cfg = mini_cfg(epochs=2, loss_weights=(0.0, 0.0, 0.0, 1.0))
    data = mini_bundle()
    r1 = train_first_pass(mini_model(seed=11), data, cfg)
    r2 = train_hierarchical(mini_model(seed=11), data, mini_hierarchy(), cfg)
    p1, p2 = r1.model.named_params(), r2.model.named_params()
    assert all(p1[k].data.tobytes() == p2[k].data.tobytes() for k in p1)
    for a, b in zip(r1.metrics.rows, r2.metrics.rows):
        assert (a.train_loss, a.val_loss, a.val_accuracy, a.lr) == (
            b.train_loss,
            b.val_loss,
            b.val_accuracy,
            b.lr,
        )


def test_total_loss_is_weighted_sum_of_head_losses():
    weights = (0.125, 0.25, 0.5, 1.0)
    data = mini_bundle()
    result = train_hierarchical(
        mini_model(), data, mini_hierarchy(), mini_cfg(loss_weights=weights)
    )
    for row in result.metrics.rows:
        manual = sum(w * h for w, h in zip(weights, row.head_losses))
        assert abs(row.train_loss - manual) <= 1e-10


def test_learning_rate_is_nonincreasing_and_steps_by_factor():
    data = mini_bundle()
    cfg = mini_cfg(epochs=6, patience=1, lr=0.5)  # large rate invites plateaus
    result = train_hierarchical(mini_model(), data, mini_hierarchy(), cfg)
    lrs = [row.lr for row in result.metrics.rows]
    for a, b in zip(lrs, lrs[1:]):
        assert b <= a
        assert b == a or a / b == pytest.approx(cfg.lr_decay)


def test_divergence_reports_epoch():
    model = mini_model()
    model.heads[3].weight.data[...] = np.nan
    with pytest.raises(TrainingError, match="epoch 1"):
        train_first_pass(model, mini_bundle(), mini_cfg())


def test_hierarchy_width_mismatch_is_rejected():
    data = mini_bundle()
    wrong = block_hierarchy(4, (2, 4, 4))  # widths (2,4,4,4) vs heads (2,2,2,2)
    from hact.errors import ShapeError

    with pytest.raises(ShapeError):
        train_hierarchical(mini_model(), data, wrong, mini_cfg())


def test_metrics_csv_header_and_rows():
    data = mini_bundle()
    result = train_first_pass(mini_model(), data, mini_cfg(epochs=2))
    lines = list(result.metrics.csv_lines())
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 3
    assert lines[1].startswith("1,") and lines[2].startswith("2,")
    assert all(len(line.split(",")) == 9 for line in lines[1:])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_evaluate_uniform_model_scores_chance():
    model = mini_model()
    model.heads[3].weight.data[...] = 0.0
    model.heads[3].bias.data[...] = 0.0
    data = mini_bundle()
    result = evaluate(model, data.test, mini_cfg())
    np.testing.assert_allclose(result.probabilities, 0.5)
    assert result.accuracy == 0.5  # balanced two-class set, constant argmax


def test_evaluate_oracle_head_scores_one():
    model = mini_model()
    model.heads[3].weight.data[...] = 0.0
    model.heads[3].bias.data[...] = np.array([10.0, -10.0])
    clips = brightness_set(4)
    zeros = ClipSet(clips.clips, np.zeros(len(clips), dtype=np.int64), clips.ids)
    result = evaluate(model, zeros, mini_cfg())
    assert result.accuracy == 1.0
    np.testing.assert_array_equal(result.confusion[0], [len(clips), 0])


def test_evaluate_mean_of_identical_samplings_is_identity():
    model = mini_model()
    data = mini_bundle()  # clip length == frames_per_clip: sampling collapses
    five = evaluate(model, data.test, mini_cfg(), samplings=5)
    one = evaluate(model, data.test, mini_cfg(), samplings=1)
    np.testing.assert_allclose(five.probabilities, one.probabilities, atol=1e-12)


def test_evaluate_is_side_effect_free():
    model = mini_model()
    data = mini_bundle()
    params = {k: v.data.copy() for k, v in model.named_params().items()}
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}
    evaluate(model, data.test, mini_cfg())
    for k, v in model.named_params().items():
        assert v.data.tobytes() == params[k].tobytes()
    for k, v in model.named_buffers().items():
        assert v.tobytes() == buffers[k].tobytes()
    assert not model.is_trained


def test_evaluate_rejects_labels_beyond_heads():
    model = mini_model()
    clips = brightness_set(2)
    bad = ClipSet(clips.clips, np.full(len(clips), 7), clips.ids)
    with pytest.raises(DataError):
        evaluate(model, bad, mini_cfg())


# ---------------------------------------------------------------------------
# pruning integration
# ---------------------------------------------------------------------------


def test_prune_trainer_drives_pruning_loop():
    data = mini_bundle()
    result = train_first_pass(mini_model(), data, mini_cfg(epochs=2))
    model = result.model
    trainer = PruneTrainer(data, mini_hierarchy(), mini_cfg(epochs=1))
    outcome = pruning_loop(model, trainer, p=0.25, variant="global", max_passes=2)
    assert outcome.passes_run >= 1
    assert total_pruned(outcome.best_masks) == total_pruned(model.masks)
    rescored = evaluate(model, data.val, mini_cfg())
    assert 0.0 <= rescored.accuracy <= 1.0
