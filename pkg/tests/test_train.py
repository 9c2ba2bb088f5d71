"""Optimizer, split/window protocol and training-loop tests."""

import numpy as np
import pytest

from voxelforge import autodiff as ad
from voxelforge.errors import (
    EmptyStore,
    InsufficientTriplets,
    MissingRowTag,
    ShapeMismatch,
    TypeMismatch,
)
from voxelforge.nets import Classifier, ClassifierConfig, SimulatorConfig
from voxelforge.synth import DatasetManifest, GridRecord, GridStore, gen_dataset
from voxelforge.train import (
    AdamState,
    N_WINDOWS,
    TrainPlan,
    WINDOW_SPAN,
    adam_step,
    make_windows,
    one_hot,
    split_rows,
    train_classifier,
    train_simulator,
)

SMALL = DatasetManifest(augmentation_count=2)


# --- Adam ----------------------------------------------------------------------

def adam_oracle(w0, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scripted reference Adam on a single parameter."""
    w = w0.astype(np.float64).copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (np.sqrt(vhat) + eps)
    return w


def test_adam_matches_scripted_oracle_100_steps():
    rng = np.random.default_rng(1)
    w0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(100)]
    p = ad.Tensor(w0.copy(), requires_grad=True)
    state = AdamState.for_params([p])
    for g in grads:
        adam_step([p], [g], state)
    want = adam_oracle(w0, grads)
    assert np.max(np.abs(p.data - want)) < 1e-10
    assert state.step == 100


def test_adam_zero_gradient_still_moves_after_history():
    """After nonzero gradients, momentum keeps moving the weight; from a cold
    start a zero gradient leaves the weight unchanged."""
    p = ad.Tensor(np.ones(3), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(3)], state)
    assert np.array_equal(p.data, np.ones(3))
    adam_step([p], [np.ones(3)], state)
    moved = p.data.copy()
    adam_step([p], [np.zeros(3)], state)
    assert not np.array_equal(p.data, moved)


def test_adam_first_step_size_is_lr_per_sign():
    """With bias correction, step 1 moves each coordinate by ~lr against the
    gradient sign, independent of gradient magnitude."""
    for scale in (1e-3, 1.0, 1e3):
        p = ad.Tensor(np.zeros(2), requires_grad=True)
        state = AdamState.for_params([p], lr=1e-3)
        adam_step([p], [np.array([scale, -scale])], state)
        assert np.allclose(p.data, [-1e-3, 1e-3], rtol=1e-4)


def test_adam_none_gradient_treated_as_zero_and_shape_checked():
    p = ad.Tensor(np.ones(3), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [None], state)
    assert np.array_equal(p.data, np.ones(3))
    with pytest.raises(ShapeMismatch):
        adam_step([p], [np.ones(4)], state)


# --- split / windows -------------------------------------------------------------

def test_split_rows_row3_is_test():
    store = gen_dataset(SMALL, seed=0, types=("A",))
    train, test = split_rows(store)
    assert len(train) == 3 * len(test)
    assert {r.row for r in test.records} == {3}
    assert {r.row for r in train.records} == {1, 2, 4}
    assert len(train) + len(test) == len(store)


def test_split_rows_requires_row_tags():
    store = GridStore(gen_dataset(SMALL, seed=0, types=("A",)).spec)
    store.records.append(GridRecord(np.zeros(8192, dtype=np.uint8), 0, "A", 0, None, 0))
    with pytest.raises(MissingRowTag):
        split_rows(store)


def test_make_windows_counts_and_classes():
    store = gen_dataset(SMALL, seed=0, types=("A",))
    windows = make_windows(store, per_window=7, seed=3)
    assert len(windows) == N_WINDOWS * 7
    assert WINDOW_SPAN == 5
    for i, w in enumerate(windows):
        wnum = i // 7
        assert w.window == wnum
        assert w.target_class == wnum + 4  # classes V..IX only
        assert len(w.input_indices) == 4
        # inputs walk the four consecutive triplets before the target
        for j, idx in enumerate(w.input_indices):
            assert store.records[idx].class_index == wnum + j
        assert store.records[w.target_index].class_index == w.target_class


def test_make_windows_deterministic_and_seed_sensitive():
    store = gen_dataset(SMALL, seed=0, types=("A",))
    w1 = make_windows(store, 5, seed=9)
    w2 = make_windows(store, 5, seed=9)
    w3 = make_windows(store, 5, seed=10)
    assert [(w.input_indices, w.target_index) for w in w1] == \
           [(w.input_indices, w.target_index) for w in w2]
    assert [(w.input_indices, w.target_index) for w in w1] != \
           [(w.input_indices, w.target_index) for w in w3]


def test_make_windows_rejects_mixed_types_and_missing_classes():
    store = gen_dataset(SMALL, seed=0, types=("A", "B"))
    with pytest.raises(TypeMismatch):
        make_windows(store, 5, seed=0)
    only_a = store.filter_type("A")
    partial = only_a.subset([i for i, r in enumerate(only_a.records)
                             if r.class_index != 6])
    with pytest.raises(InsufficientTriplets):
        make_windows(partial, 5, seed=0)


def test_one_hot():
    y = one_hot([0, 4, 8])
    assert y.shape == (3, 9)
    assert np.array_equal(np.argmax(y, axis=1), [0, 4, 8])
    assert np.all(y.sum(axis=1) == 1)


# --- training loops ----------------------------------------------------------------

TINY_CLF = ClassifierConfig(channels=(2, 2, 2, 2, 2), fc_width=4)
TINY_SIM = SimulatorConfig(enc_channels=(1, 1, 1, 1, 2), dec_channels=(2, 2, 2, 1, 1))


def _tiny_store():
    # two augmentations keep each class populated while staying fast
    return gen_dataset(SMALL, seed=5, types=("A",))


def test_train_classifier_is_deterministic_and_logs():
    store = _tiny_store().subset(range(36))
    plan = TrainPlan(epochs=1, batch_size=12, seed=2)
    lines = []
    m1, s1, l1 = train_classifier(store, plan, TINY_CLF, log_fn=lines.append)
    m2, s2, l2 = train_classifier(store, plan, TINY_CLF)
    assert l1 == l2
    for k, v in m1.state_arrays().items():
        assert np.array_equal(v, m2.state_arrays()[k])
    assert len(lines) == 3  # 36 samples / batch 12, one epoch
    for line in lines:
        parts = line.split(", ")
        assert len(parts) == 6  # epoch, step, loss, l2, ce, lr


def test_train_classifier_seed_changes_result():
    store = _tiny_store().subset(range(36))
    _, _, l1 = train_classifier(store, TrainPlan(epochs=1, batch_size=12, seed=2), TINY_CLF)
    _, _, l2 = train_classifier(store, TrainPlan(epochs=1, batch_size=12, seed=3), TINY_CLF)
    assert l1 != l2


def test_train_classifier_rejects_empty_store():
    empty = _tiny_store().subset([])
    with pytest.raises(EmptyStore):
        train_classifier(empty, TrainPlan(epochs=1), TINY_CLF)


def test_train_classifier_loss_decreases():
    store = _tiny_store()
    plan = TrainPlan(epochs=4, batch_size=27, seed=0)
    _, _, losses = train_classifier(store, plan, TINY_CLF)
    assert losses[-1] < losses[0]


def test_train_simulator_freezes_classifier_bit_exact():
    store = _tiny_store()
    clf = Classifier(TINY_CLF, seed=1)
    before = {k: v.tobytes() for k, v in clf.state_arrays().items()}
    requires_before = [p.requires_grad for p in clf.parameters()]
    windows = make_windows(store, 3, seed=0)
    plan = TrainPlan(epochs=1, batch_size=8, seed=0, alpha=0.1)
    model, state, losses = train_simulator(store, windows, clf, plan, TINY_SIM)
    after = {k: v.tobytes() for k, v in clf.state_arrays().items()}
    assert before == after
    assert [p.requires_grad for p in clf.parameters()] == requires_before
    assert state.step == len(losses) == 1 or state.step >= 1


def test_train_simulator_deterministic_and_alpha_sensitive():
    store = _tiny_store()
    clf = Classifier(TINY_CLF, seed=1)
    windows = make_windows(store, 2, seed=0)
    plan = TrainPlan(epochs=1, batch_size=10, seed=0, alpha=0.1)
    m1, _, l1 = train_simulator(store, windows, clf, plan, TINY_SIM)
    m2, _, l2 = train_simulator(store, windows, clf, plan, TINY_SIM)
    assert l1 == l2
    for k, v in m1.state_arrays().items():
        assert np.array_equal(v, m2.state_arrays()[k])
    plan0 = TrainPlan(epochs=1, batch_size=10, seed=0, alpha=0.0)
    cfg0 = SimulatorConfig(enc_channels=TINY_SIM.enc_channels,
                           dec_channels=TINY_SIM.dec_channels, alpha=0.0)
    _, _, l0 = train_simulator(store, windows, clf, plan0, cfg0)
    assert l0 != l1  # the cross-entropy term contributes to the loss


def test_train_simulator_rejects_empty_windows():
    store = _tiny_store()
    clf = Classifier(TINY_CLF, seed=1)
    with pytest.raises(EmptyStore):
        train_simulator(store, [], clf, TrainPlan(epochs=1), TINY_SIM)


def test_trainplan_validation():
    with pytest.raises(ValueError):
        TrainPlan(batch_size=0)
    with pytest.raises(ValueError):
        TrainPlan(alpha=-1.0)
    plan = TrainPlan()
    assert plan.epochs == 20 and plan.batch_size == 64
    assert (plan.lr, plan.beta1, plan.beta2, plan.eps) == (1e-3, 0.9, 0.999, 1e-8)
