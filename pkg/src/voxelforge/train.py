"""Adam optimizer, sample construction and the two training loops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    EmptyStore,
    InsufficientTriplets,
    MissingRowTag,
    ShapeMismatch,
    TypeMismatch,
)
from .nets import Classifier, Simulator, composite_loss
from .synth import NUM_CLASSES, GridStore

N_WINDOWS = 5
WINDOW_SPAN = 5  # four inputs plus the target triplet


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; mutates params and state in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("parameter/gradient/state counts differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        data = p.data if isinstance(p, ad.Tensor) else p
        g = np.zeros_like(data) if g is None else g
        if g.shape != data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} vs parameter {data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class WindowSample:
    """Four consecutive-triplet input grids plus the next-triplet target."""

    input_indices: tuple
    target_index: int
    target_class: int
    window: int


@dataclass
class TrainPlan:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    alpha: float = 0.0
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # Adam consumes the sum-loss gradient divided by the batch size so the
    # learning rate stays batch-size stable; set False for the literal sum.
    mean_reduce: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


def split_rows(store: GridStore):
    """Test set = row 3 of every circuit; rows 1, 2 and 4 train (3:1)."""
    train_idx, test_idx = [], []
    for i, r in enumerate(store.records):
        if r.row is None:
            raise MissingRowTag(f"record {i} has no row tag")
        (test_idx if r.row == 3 else train_idx).append(i)
    return store.subset(train_idx), store.subset(test_idx)


def make_windows(store: GridStore, per_window: int, seed: int):
    """Sliding-window samples over the 9 triplet classes.

    Windows cover classes (0..4), (1..5), ..., (4..8); each of the
    ``per_window`` samples per window draws one uniformly random grid (with
    replacement) per triplet. The store must hold a single placeholder type.
    """
    types = store.types()
    if len(types) > 1:
        raise TypeMismatch(f"windows need a single-type store, got {types}")
    by_class = [[] for _ in range(NUM_CLASSES)]
    for i, r in enumerate(store.records):
        by_class[r.class_index].append(i)
    if any(not lst for lst in by_class):
        missing = [c for c, lst in enumerate(by_class) if not lst]
        raise InsufficientTriplets(f"classes without grids: {missing}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xB11D)))
    samples = []
    for w in range(N_WINDOWS):
        for _ in range(int(per_window)):
            picks = [by_class[c][rng.integers(len(by_class[c]))]
                     for c in range(w, w + WINDOW_SPAN)]
            samples.append(WindowSample(tuple(picks[:-1]), picks[-1],
                                        w + WINDOW_SPAN - 1, w))
    return samples


def one_hot(classes, num_classes=NUM_CLASSES, dtype=np.float64):
    eye = np.eye(num_classes, dtype=dtype)
    return eye[np.asarray(classes, dtype=np.int64)]


def _epoch_order(n, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, epoch)))
    return rng.permutation(n)


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            break  # batch norm needs at least 2 samples
        yield chunk


def train_classifier(store: GridStore, plan: TrainPlan, config=None,
                     dtype=np.float32, log_fn=None, on_epoch=None):
    """Train the 9-class quantity classifier on a labeled store.

    Returns (model, adam_state, per-epoch mean losses). Deterministic for a
    fixed (store, plan, config).
    """
    if len(store) == 0:
        raise EmptyStore("cannot train on an empty store")
    config = config or _default_classifier_config(store)
    model = Classifier(config, seed=plan.seed, dtype=dtype)
    params = model.parameters()
    state = AdamState.for_params(params, lr=plan.lr, beta1=plan.beta1,
                                 beta2=plan.beta2, eps=plan.eps)
    labels = store.labels()
    epoch_losses = []
    step = 0
    for epoch in range(plan.epochs):
        order = _epoch_order(len(store), plan.seed, epoch)
        total, count = 0.0, 0
        for chunk in _batches(order, plan.batch_size):
            x = store.dense_batch(chunk, dtype=dtype)
            y = one_hot(labels[chunk], dtype=dtype)
            model.zero_grad()
            scores = model.forward(ad.Tensor(x), training=True)
            loss = ad.cross_entropy(scores, y, mean=plan.mean_reduce)
            loss.backward()
            adam_step(params, [p.grad for p in params], state)
            step += 1
            val = float(loss.data)
            per_sample = val if plan.mean_reduce else val / len(chunk)
            total += per_sample * len(chunk)
            count += len(chunk)
            if log_fn is not None:
                log_fn(f"{epoch}, {step}, {val:.6f}, 0.000000, {val:.6f}, {state.lr:g}")
        epoch_losses.append(total / max(count, 1))
        if on_epoch is not None:
            on_epoch(model, state, epoch, epoch_losses[-1])
    return model, state, epoch_losses


def _default_classifier_config(store):
    from .nets import ClassifierConfig

    types = store.types()
    ptype = types[0] if len(types) == 1 else None
    return ClassifierConfig(placeholder_type=ptype)


def train_simulator(store: GridStore, windows, classifier: Classifier,
                    plan: TrainPlan, config=None, dtype=np.float32,
                    log_fn=None, on_epoch=None):
    """Train the simulator under L2 + alpha * frozen-classifier cross entropy.

    The classifier is frozen for the duration of the call (parameters are
    bit-identical before and after); gradients flow only to the simulator.
    """
    if not windows:
        raise EmptyStore("no window samples to train on")
    config = config or _default_simulator_config(store, plan.alpha)
    ctype = classifier.config.placeholder_type
    if ctype is not None and config.placeholder_type is not None and ctype != config.placeholder_type:
        raise TypeMismatch(
            f"classifier is for type {ctype}, simulator for {config.placeholder_type}")
    model = Simulator(config, seed=plan.seed, dtype=dtype)
    params = model.parameters()
    state = AdamState.for_params(params, lr=plan.lr, beta1=plan.beta1,
                                 beta2=plan.beta2, eps=plan.eps)
    was_frozen = [p.requires_grad for p in classifier.parameters()]
    classifier.freeze()
    n_in = config.n_inputs
    epoch_losses = []
    step = 0
    try:
        for epoch in range(plan.epochs):
            order = _epoch_order(len(windows), plan.seed, epoch)
            total, count = 0.0, 0
            for chunk in _batches(order, plan.batch_size):
                batch = [windows[i] for i in chunk]
                B = len(batch)
                history = [ad.Tensor(store.dense_batch([w.input_indices[j] for w in batch],
                                                       dtype=dtype))
                           for j in range(n_in)]
                target = store.dense_batch([w.target_index for w in batch], dtype=dtype)
                y = one_hot([w.target_class for w in batch], dtype=dtype)
                model.zero_grad()
                pred = model.forward(history, training=True)
                loss, l2v, cev = composite_loss(pred, target, classifier, y, plan.alpha)
                if plan.mean_reduce:
                    loss = loss * (1.0 / B)
                loss.backward()
                adam_step(params, [p.grad for p in params], state)
                step += 1
                val = float(loss.data)
                per_sample = val if plan.mean_reduce else val / B
                total += per_sample * B
                count += B
                if log_fn is not None:
                    log_fn(f"{epoch}, {step}, {val:.6f}, {l2v / B:.6f}, "
                           f"{cev / B:.6f}, {state.lr:g}")
            epoch_losses.append(total / max(count, 1))
            if on_epoch is not None:
                on_epoch(model, state, epoch, epoch_losses[-1])
    finally:
        for p, rg in zip(classifier.parameters(), was_frozen):
            p.requires_grad = rg
    return model, state, epoch_losses


def _default_simulator_config(store, alpha):
    from .nets import SimulatorConfig

    types = store.types()
    ptype = types[0] if len(types) == 1 else None
    return SimulatorConfig(alpha=alpha, placeholder_type=ptype)
