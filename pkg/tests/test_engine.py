import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelong_tta.autodiff import Tape, softmax
from lifelong_tta.engine import (
    AdamState,
    AugmentParams,
    NonFiniteLossError,
    PetalConfig,
    adapt_step,
    augment,
    baseline_step,
    ema_update,
    evaluate_model,
    fim_diag,
    fim_mask,
    init_adapt_state,
    petal_loss,
    restore,
    run_lifelong,
    stochastic_mask,
    teacher_pseudo_label,
)
from lifelong_tta.model import MlpClassifier, init_model
from lifelong_tta.streams import (
    CorruptionSpec,
    StreamSchedule,
    build_schedule,
    make_source_dataset,
    stream_batches,
)
from lifelong_tta.swag import SwagDiagEstimator, train_source


@pytest.fixture(scope="module")
def small_bundle():
    """Source model + posterior on a small dataset, shared by engine tests."""
    dataset = make_source_dataset(0, 30)
    model = init_model(0, (64, 32, 8))
    posterior, _ = train_source(
        model,
        dataset.images.reshape(len(dataset), -1),
        dataset.labels,
        epochs=12,
        lr=0.05,
        swag_epochs=5,
        rng=np.random.default_rng(1),
    )
    return dataset, model, posterior


def fast_cfg(**overrides):
    base = dict(method="petal", k_aug=4, alpha=1e-6, restore="fim")
    base.update(overrides)
    return PetalConfig(**base)


def batch_from(dataset, n=16, severity=0, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))[:n]
    images = dataset.images[idx]
    if severity:
        from lifelong_tta.streams import apply_corruption

        images = apply_corruption(images, CorruptionSpec("gaussian_noise", severity), rng)
    return images.reshape(n, -1), dataset.labels[idx]


# ---------------------------------------------------------------------------
# augmentation


def test_augment_identity_config_is_bit_exact():
    rng = np.random.default_rng(0)
    images = rng.random((5, 64))
    out = augment(images, rng, AugmentParams.identity())
    assert np.array_equal(out, images)


def test_augment_is_deterministic_given_rng_state():
    images = np.random.default_rng(1).random((5, 64))
    a = augment(images, np.random.default_rng(7))
    b = augment(images, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_augment_output_range():
    rng = np.random.default_rng(2)
    images = rng.random((200, 64))
    for _ in range(50):  # 10^4 augmented images in total
        out = augment(images, rng)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_preserves_shape_conventions():
    rng = np.random.default_rng(3)
    flat = rng.random((4, 64))
    square = flat.reshape(4, 8, 8)
    assert augment(flat, np.random.default_rng(0)).shape == (4, 64)
    assert augment(square, np.random.default_rng(0)).shape == (4, 8, 8)
    with pytest.raises(ValueError):
        augment(rng.random((4, 63)), rng)


# ---------------------------------------------------------------------------
# pseudo-labels


def test_gate_always_passes_at_tau_zero(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(tau=0.0)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    direct = softmax(state.teacher.forward(images, update_stats=False)).data
    preds = teacher_pseudo_label(state, images, cfg)
    assert np.array_equal(preds, direct)


def test_gate_never_passes_above_one(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(tau=2.0, k_aug=2, augment=AugmentParams.identity())
    state = init_adapt_state(model, posterior, cfg, seed=0)
    direct = softmax(state.teacher.forward(images, update_stats=False)).data
    preds = teacher_pseudo_label(state, images, cfg)
    # identity augmentations make the K-average equal the direct prediction
    # exactly: (p + p) / 2 is exact in binary floating point
    assert np.array_equal(preds, direct)


def test_pseudo_labels_are_distributions(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, severity=5)
    cfg = fast_cfg(tau=0.9)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    preds = teacher_pseudo_label(state, images, cfg)
    assert np.abs(preds.sum(axis=1) - 1.0).max() < 1e-9


def test_augment_parallelism_is_bit_stable(small_bundle, monkeypatch):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, severity=5)
    cfg = fast_cfg(tau=2.0, k_aug=6)
    serial_state = init_adapt_state(model, posterior, cfg, seed=3)
    serial = teacher_pseudo_label(serial_state, images, cfg)
    monkeypatch.setenv("PETAL_THREADS", "3")
    threaded_state = init_adapt_state(model, posterior, cfg, seed=3)
    threaded = teacher_pseudo_label(threaded_state, images, cfg)
    assert np.array_equal(serial, threaded)


# ---------------------------------------------------------------------------
# loss


def test_petal_loss_alpha_zero_is_plain_cross_entropy(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(alpha=0.0)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    pseudo = teacher_pseudo_label(state, images, cfg)
    tape = Tape()
    loss, _, logits = petal_loss(state, images, pseudo, posterior, cfg, tape)
    from lifelong_tta.autodiff import Tensor, soft_cross_entropy

    probs = softmax(logits).data
    reference = soft_cross_entropy(Tensor(pseudo), logits).item()
    assert loss.item() == reference


def test_petal_loss_at_posterior_mode_matches_closed_form(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(alpha=1.0)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    pseudo = teacher_pseudo_label(state, images, cfg)
    # student still sits at the posterior mode, so log q(theta) is the
    # normalizer sum and the loss separates exactly
    tape = Tape()
    loss, _, logits = petal_loss(state, images, pseudo, posterior, cfg, tape)
    from lifelong_tta.autodiff import Tensor, soft_cross_entropy

    ce = soft_cross_entropy(Tensor(pseudo), logits).item()
    log_q = posterior.log_density(state.student.flatten())
    expected = ce - 1.0 * log_q
    assert abs(loss.item() - expected) < 1e-9
    assert abs(log_q - (-0.5 * np.log(2 * np.pi * posterior.sigma2.values).sum())) < 1e-9


def test_petal_loss_self_labels_have_zero_gradient(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(alpha=0.0)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    tape = Tape()
    logits, wrapped = state.student.taped_forward(images, tape, update_stats=False)
    pseudo = softmax(logits).data
    from lifelong_tta.autodiff import Tensor, backward, soft_cross_entropy

    loss = soft_cross_entropy(Tensor(pseudo), logits, tape)
    grads = backward(loss, tape)
    flat = np.concatenate(
        [grads.get(wrapped[n], np.zeros(state.student.params[n].shape)).ravel()
         for n in state.student.param_names]
    )
    assert np.abs(flat).max() < 1e-8


def test_petal_loss_rejects_mismatched_posterior(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    other = init_model(0, (64, 16, 8))
    est = SwagDiagEstimator(other.flatten())
    est.collect(other.flatten())
    wrong = est.finalize()
    cfg = fast_cfg(alpha=1e-3)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    with pytest.raises(ValueError):
        petal_loss(state, images, teacher_pseudo_label(state, images, cfg), wrong, cfg, Tape())


# ---------------------------------------------------------------------------
# EMA


def test_ema_extremes(small_bundle):
    _, model, posterior = small_bundle
    cfg = fast_cfg()
    state = init_adapt_state(model, posterior, cfg, seed=0)
    before = state.teacher.flatten().values.copy()
    state.student.load(state.student.flatten().with_values(before + 1.0))
    ema_update(state.teacher, state.student, pi=1.0)
    assert np.array_equal(state.teacher.flatten().values, before)
    ema_update(state.teacher, state.student, pi=0.0)
    assert np.array_equal(state.teacher.flatten().values, state.student.flatten().values)


def test_ema_arithmetic():
    teacher = init_model(0, (4, 4, 2))
    student = init_model(0, (4, 4, 2))
    ones = teacher.flatten().with_values(np.ones(teacher.flatten().dim))
    zeros = ones.with_values(np.zeros(ones.dim))
    teacher.load(ones)
    student.load(zeros)
    ema_update(teacher, student, pi=0.999)
    assert np.abs(teacher.flatten().values - 0.999).max() < 1e-15


def test_ema_contraction_with_frozen_student():
    # with the student at zero, each update multiplies the gap by pi exactly
    teacher = init_model(1, (4, 4, 2))
    student = init_model(1, (4, 4, 2))
    student.load(student.flatten().with_values(np.zeros(student.flatten().dim)))
    pi = 0.9
    for _ in range(3):
        expected = pi * teacher.flatten().values
        ema_update(teacher, student, pi=pi)
        assert np.array_equal(teacher.flatten().values, expected)


def test_ema_copies_student_stats():
    teacher = init_model(2, (4, 4, 2))
    student = init_model(2, (4, 4, 2))
    student.stats[0].mean[:] = 7.0
    ema_update(teacher, student, pi=0.5)
    assert np.array_equal(teacher.stats[0].mean, student.stats[0].mean)
    student.stats[0].mean[0] = -1.0
    assert teacher.stats[0].mean[0] == 7.0  # a copy, not a view


def test_ema_registry_mismatch():
    with pytest.raises(ValueError):
        ema_update(init_model(0, (4, 4, 2)), init_model(0, (4, 5, 2)), 0.9)


# ---------------------------------------------------------------------------
# restoration primitives


def test_fim_diag_is_elementwise_square():
    grad = np.array([2.0, -3.0, 0.5])
    assert np.array_equal(fim_diag(grad), [4.0, 9.0, 0.25])
    assert np.array_equal(fim_diag(np.zeros(4)), np.zeros(4))
    rng = np.random.default_rng(0)
    g = rng.normal(size=6)
    assert np.abs(fim_diag(g) - np.diag(np.outer(g, g))).max() < 1e-12


def test_fim_mask_extremes_and_sort_oracle():
    values = np.array([0.4, 0.1, 0.3, 0.2])
    assert not fim_mask(values, 0.0).any()
    assert fim_mask(values, 1.0).all()
    assert np.array_equal(fim_mask(values, 0.5), [False, True, False, True])


def test_fim_mask_tie_break_prefers_lower_index():
    values = np.array([1.0, 0.5, 0.5, 0.5])
    mask = fim_mask(values, 0.5)
    assert np.array_equal(mask, [False, True, True, False])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 200), st.floats(0.0, 1.0))
def test_fim_mask_cardinality(seed, dim, delta):
    values = np.random.default_rng(seed).random(dim)
    assert fim_mask(values, delta).sum() == math.floor(delta * dim)


def test_stochastic_mask_extremes():
    rng = np.random.default_rng(0)
    assert not stochastic_mask(100, 0.0, rng).any()
    assert stochastic_mask(100, 1.0, rng).all()


def test_stochastic_mask_binomial_bound():
    rng = np.random.default_rng(5)
    count = int(stochastic_mask(100_000, 0.01, rng).sum())
    assert 700 <= count <= 1300


def test_restore_semantics(small_bundle):
    _, model, _ = small_bundle
    flat = model.flatten()
    theta0 = flat.with_values(np.full(flat.dim, 5.0))
    theta = flat.with_values(np.full(flat.dim, 7.0))
    none = restore(theta, theta0, np.zeros(flat.dim, dtype=bool))
    assert np.array_equal(none.values, theta.values)
    full = restore(theta, theta0, np.ones(flat.dim, dtype=bool))
    assert np.array_equal(full.values, theta0.values)
    mask = np.zeros(flat.dim, dtype=bool)
    mask[0] = True
    mixed = restore(theta, theta0, mask)
    assert mixed.values[0] == 5.0 and mixed.values[1] == 7.0
    with pytest.raises(ValueError):
        restore(theta, theta0, np.zeros(3, dtype=bool))


# ---------------------------------------------------------------------------
# adaptation steps


def test_zero_lr_no_restore_leaves_parameters_fixed(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(eta=0.0, restore="none")
    state = init_adapt_state(model, posterior, cfg, seed=0)
    before = state.student.flatten().values.copy()
    report = adapt_step(state, images, posterior, cfg)
    assert np.array_equal(state.student.flatten().values, before)
    assert report.restored == 0
    assert state.step == 1


def test_online_predictions_precede_the_update(small_bundle):
    # replaying the pseudo-label computation from an identical pre-step state
    # must reproduce the emitted predictions exactly
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, severity=5)
    cfg = fast_cfg()
    state = init_adapt_state(model, posterior, cfg, seed=11)
    replay = init_adapt_state(model, posterior, cfg, seed=11)
    report = adapt_step(state, images, posterior, cfg)
    expected = teacher_pseudo_label(replay, images, cfg)
    assert np.array_equal(report.predictions, expected)


def test_fim_restore_count_is_exact_every_step(small_bundle):
    dataset, model, posterior = small_bundle
    cfg = fast_cfg(restore="fim", delta=0.03)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    dim = state.source.dim
    for seed in range(5):
        images, _ = batch_from(dataset, severity=5, seed=seed)
        report = adapt_step(state, images, posterior, cfg)
        assert report.restored == math.floor(0.03 * dim)


def test_delta_one_resets_student_to_source(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, severity=5)
    cfg = fast_cfg(restore="fim", delta=1.0)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    adapt_step(state, images, posterior, cfg)
    assert np.array_equal(state.student.flatten().values, state.source.values)


def test_reset_optimizer_state_clears_restored_moments(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, severity=5)
    cfg = fast_cfg(restore="fim", delta=1.0, reset_optimizer_state=True)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    adapt_step(state, images, posterior, cfg)
    assert np.array_equal(state.opt.m, np.zeros(state.source.dim))


def test_cotta_equals_petal_with_alpha_zero(small_bundle):
    dataset, model, posterior = small_bundle
    petal_cfg = fast_cfg(method="petal", alpha=0.0, restore="stochastic", rho=0.01)
    cotta_cfg = fast_cfg(method="cotta", alpha=0.0, restore="stochastic", rho=0.01)
    petal_state = init_adapt_state(model, posterior, petal_cfg, seed=4)
    cotta_state = init_adapt_state(model, posterior, cotta_cfg, seed=4)
    for seed in range(10):
        images, _ = batch_from(dataset, severity=5, seed=seed)
        petal_report = adapt_step(petal_state, images, posterior, petal_cfg)
        cotta_report = adapt_step(cotta_state, images, posterior, cotta_cfg)
        assert np.array_equal(
            petal_state.student.flatten().values, cotta_state.student.flatten().values
        )
        assert np.array_equal(
            petal_state.teacher.flatten().values, cotta_state.teacher.flatten().values
        )
        assert np.array_equal(petal_report.predictions, cotta_report.predictions)


def test_non_finite_loss_aborts(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(eta=1e200, restore="none", optimizer="sgd", alpha=1.0)
    state = init_adapt_state(model, posterior, cfg, seed=0)
    with pytest.raises(NonFiniteLossError), np.errstate(over="ignore", invalid="ignore"):
        for seed in range(5):
            adapt_step(state, images, posterior, cfg)


def test_adapt_step_rejects_baseline_methods(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(method="tent")
    state = init_adapt_state(model, posterior, cfg, seed=0)
    with pytest.raises(ValueError):
        adapt_step(state, images, posterior, cfg)


# ---------------------------------------------------------------------------
# baselines


def test_source_baseline_matches_offline_eval(small_bundle):
    dataset, model, posterior = small_bundle
    images, labels = batch_from(dataset, n=32)
    cfg = fast_cfg(method="source")
    state = init_adapt_state(model, posterior, cfg, seed=0)
    report = baseline_step(state, images, cfg)
    probe = model.clone()
    probe.load(posterior.map_params())
    probe.set_bn_mode("eval")
    expected = softmax(probe.forward(images)).data
    assert np.array_equal(report.predictions, expected)
    from lifelong_tta.metrics import error_rate

    offline = evaluate_model(probe, images.reshape(-1, 8, 8), labels)
    assert error_rate(report.predictions, labels) == offline.error


def test_source_baseline_mutates_nothing(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, n=32)
    cfg = fast_cfg(method="source")
    state = init_adapt_state(model, posterior, cfg, seed=0)
    before = state.student.flatten().values.copy()
    stats_before = state.student.stats[0].mean.copy()
    baseline_step(state, images, cfg)
    assert np.array_equal(state.student.flatten().values, before)
    assert np.array_equal(state.student.stats[0].mean, stats_before)


def test_tent_with_zero_lr_equals_bn_adapt(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, n=32, severity=5)
    tent_cfg = fast_cfg(method="tent", eta=0.0)
    bn_cfg = fast_cfg(method="bn_adapt")
    tent_state = init_adapt_state(model, posterior, tent_cfg, seed=0)
    bn_state = init_adapt_state(model, posterior, bn_cfg, seed=0)
    tent_report = baseline_step(tent_state, images, tent_cfg)
    bn_report = baseline_step(bn_state, images, bn_cfg)
    assert np.array_equal(tent_report.predictions, bn_report.predictions)
    assert np.array_equal(
        tent_state.student.flatten().values, bn_state.student.flatten().values
    )


def test_tent_and_pseudo_label_touch_only_bn_affine(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, n=32, severity=5)
    for method in ("tent", "pseudo_label"):
        cfg = fast_cfg(method=method)
        state = init_adapt_state(model, posterior, cfg, seed=0)
        before = state.student.flatten()
        baseline_step(state, images, cfg)
        after = state.student.flatten()
        for name in before.names:
            same = np.array_equal(before.slice(name), after.slice(name))
            if name.endswith(".gamma") or name.endswith(".beta"):
                assert not same, f"{method} should update {name}"
            else:
                assert same, f"{method} must not update {name}"


def test_bn_adapt_refreshes_running_stats(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset, n=32, severity=5)
    cfg = fast_cfg(method="bn_adapt")
    state = init_adapt_state(model, posterior, cfg, seed=0)
    before = state.student.stats[0].mean.copy()
    baseline_step(state, images, cfg)
    assert not np.array_equal(state.student.stats[0].mean, before)


def test_unknown_baseline_method(small_bundle):
    dataset, model, posterior = small_bundle
    images, _ = batch_from(dataset)
    cfg = fast_cfg(method="petal")
    state = init_adapt_state(model, posterior, cfg, seed=0)
    with pytest.raises(ValueError):
        baseline_step(state, images, cfg)


# ---------------------------------------------------------------------------
# full runs


def test_empty_schedule_gives_empty_report(small_bundle):
    dataset, model, posterior = small_bundle
    schedule = StreamSchedule(segments=(), batch_size=8)
    cfg = fast_cfg()
    report, state = run_lifelong(schedule, dataset, posterior, model, cfg, seed=0)
    assert report.segments == [] and report.rows == [] and report.overall is None
    assert state.step == 0
    assert np.array_equal(state.student.flatten().values, state.source.values)


def test_single_batch_run_equals_one_step(small_bundle):
    dataset, model, posterior = small_bundle
    schedule = build_schedule(("gaussian_noise",), "continual5", 1, 8)
    cfg = fast_cfg()
    report, state = run_lifelong(schedule, dataset, posterior, model, cfg, seed=9)
    assert state.step == 1
    assert len(report.rows) == 1
    assert report.overall["count"] == 8
    # replaying the run's seeding by hand reproduces the exact trajectory
    stream_ss, augment_ss, restore_ss = np.random.SeedSequence(9).spawn(3)
    manual = init_adapt_state(
        model,
        posterior,
        cfg,
        rng_augment=np.random.Generator(np.random.PCG64(augment_ss)),
        rng_restore=np.random.Generator(np.random.PCG64(restore_ss)),
    )
    batch, _ = next(
        stream_batches(schedule, dataset, np.random.Generator(np.random.PCG64(stream_ss)))
    )
    manual_report = adapt_step(manual, batch.images, posterior, cfg)
    assert np.array_equal(manual.student.flatten().values, state.student.flatten().values)
    assert np.array_equal(manual.teacher.flatten().values, state.teacher.flatten().values)
    assert manual_report.restored == report.rows[0]["restored"]
    assert manual_report.loss == report.rows[0]["loss"]


def test_run_is_deterministic(small_bundle):
    dataset, model, posterior = small_bundle
    schedule = build_schedule(("gaussian_noise", "contrast"), "continual5", 2, 8)
    cfg = fast_cfg()
    a, _ = run_lifelong(schedule, dataset, posterior, model, cfg, seed=3)
    b, _ = run_lifelong(schedule, dataset, posterior, model, cfg, seed=3)
    assert a.to_json() == b.to_json()
    assert a.rows_to_csv() == b.rows_to_csv()


def test_tent_online_resets_at_segment_boundaries(small_bundle):
    dataset, model, posterior = small_bundle
    schedule = build_schedule(("contrast", "gaussian_noise"), "continual5", 2, 8)
    cfg = fast_cfg(method="tent", tent_online=True, eta=0.05)
    report, state = run_lifelong(schedule, dataset, posterior, model, cfg, seed=0)
    # after the run the optimizer has only seen the final segment's two steps
    assert state.opt.step == 2


def test_run_report_has_config_echo_and_segments(small_bundle):
    dataset, model, posterior = small_bundle
    schedule = build_schedule(("contrast",), "continual5", 2, 8)
    cfg = fast_cfg()
    report, _ = run_lifelong(schedule, dataset, posterior, model, cfg, seed=0)
    assert report.config["alpha"] == cfg.alpha
    assert report.schedule["mode"] == "continual5"
    assert [s.kind for s in report.segments] == ["contrast"]
    csv_text = report.rows_to_csv()
    assert csv_text.splitlines()[0] == "step,segment,error,nll,brier,loss,restored"
    assert len(csv_text.splitlines()) == 3
