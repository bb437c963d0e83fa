"""Adam with differential learning rates, SGDR cosine annealing with warm
restarts, an LR range test, and the two-phase training loop.

Training runs in two phases: phase A updates only the last two layer
groups (heads plus the deepest stage); phase B unfreezes everything and
applies differential learning-rate multipliers, smallest on the
input-side backbone groups and 1.0 on the heads. A single SGDR schedule
ticks across both phases, restarting with cycles that grow by ``t_mult``.

Determinism contract: every random decision (batch order, augmentation)
draws from a generator keyed by (seed, epoch[, sample index]), so a
rerun with the same seed reproduces history bit for bit and parallel
minibatch assembly could never change results.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss/gradient or unusable dataset)."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 3e-3                 # eta_max of the SGDR schedule
    lr_min_fraction: float = 0.01    # eta_min = lr * fraction
    t0_epochs: int = 1               # first cycle length, in epochs
    t_mult: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    phase_a_epochs: int = 2
    phase_b_epochs: int = 30
    backbone_multipliers: tuple = (1.0 / 9.0, 1.0 / 3.0)  # deep half, shallow half
    objective: str = "regression"    # regression | classification | joint
    augment: bool = True
    seed: int = 0


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    moments: dict = field(default_factory=dict)  # name -> [m, v]


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    valid_loss: float
    valid_mae: float


def adam_step(model, base_lr, state: AdamState, group_multipliers=None):
    """One bias-corrected Adam update over the model's trainable groups.

    The effective learning rate of a parameter is
    ``base_lr * group_multipliers.get(group, 1.0)``. Parameters without a
    gradient (not part of the current graph) are skipped. The step
    counter increments once per call.
    """
    multipliers = group_multipliers or {}
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, param, group in model.parameters():
        if not model.trainable[group] or param.grad is None:
            continue
        g = param.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}; aborting step")
        if name not in state.moments:
            state.moments[name] = [np.zeros_like(param.data), np.zeros_like(param.data)]
        m, v = state.moments[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        lr_eff = base_lr * multipliers.get(group, 1.0)
        param.data -= lr_eff * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def sgdr_lr(step_in_cycle, cycle_len, eta_min, eta_max):
    """Cosine-annealed LR within one warm-restart cycle.

    eta = eta_min + (eta_max - eta_min) * (1 + cos(pi * step/cycle)) / 2
    """
    if cycle_len == 0:
        raise ValueError("sgdr_lr: cycle_len must be positive")
    if not 0 <= step_in_cycle <= cycle_len:
        raise ValueError(f"sgdr_lr: step {step_in_cycle} outside [0, {cycle_len}]")
    if not 0 <= eta_min < eta_max:
        raise ValueError("sgdr_lr: need 0 <= eta_min < eta_max")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * step_in_cycle / cycle_len))


class SgdrSchedule:
    """Warm-restart bookkeeping: at each restart the counter resets and
    the cycle length multiplies by ``t_mult``."""

    def __init__(self, eta_min, eta_max, t0, t_mult=2):
        if t0 < 1:
            raise ValueError("SgdrSchedule: t0 must be >= 1")
        self.eta_min = eta_min
        self.eta_max = eta_max
        self.cycle_len = t0
        self.t_mult = t_mult
        self.step_in_cycle = 0

    def lr(self):
        return sgdr_lr(self.step_in_cycle, self.cycle_len, self.eta_min, self.eta_max)

    def advance(self):
        self.step_in_cycle += 1
        if self.step_in_cycle >= self.cycle_len:
            self.step_in_cycle = 0
            self.cycle_len *= self.t_mult


def differential_multipliers(model, backbone=(1.0 / 9.0, 1.0 / 3.0)):
    """Map layer groups to LR multipliers: the input-side half of the
    backbone gets the smallest factor, the shallower half the middle one,
    and the heads 1.0."""
    backbone_groups = [g for g in model.group_order if not g.startswith("head")]
    half = (len(backbone_groups) + 1) // 2
    mult = {}
    for i, g in enumerate(backbone_groups):
        mult[g] = backbone[0] if i < half else backbone[1]
    for g in model.group_order:
        if g.startswith("head"):
            mult[g] = 1.0
    return mult


# ---------------------------------------------------------------------------
# batches and losses


def _stack_batch(pairs, indices):
    images = np.stack([pairs[i].image for i in indices])
    targets = np.array([pairs[i].target_um for i in indices])
    labels = np.array([0.0 if pairs[i].abnormal is None else float(pairs[i].abnormal)
                       for i in indices])
    has_labels = all(pairs[i].abnormal is not None for i in indices)
    return images, targets, labels if has_labels else None


def _batch_loss(model, images, targets_um, labels, config, train):
    z = (targets_um - model.target_mean) / model.target_sd
    out = model.forward(Tensor(images), train=train)
    losses = []
    if config.objective in ("regression", "joint"):
        losses.append(nd.mse_loss(out["regression"], Tensor(z[:, None])))
    if config.objective in ("classification", "joint"):
        if labels is None:
            raise TrainingError(
                f"objective {config.objective!r} needs abnormality labels on every sample"
            )
        if "classification" not in out:
            raise TrainingError(f"objective {config.objective!r} needs a classification head")
        losses.append(nd.bce_loss(out["classification"], Tensor(labels[:, None])))
    loss = losses[0]
    for extra in losses[1:]:
        loss = nd.add(loss, extra)
    return loss


def regression_batch_loss(model, batch):
    """Default loss for the LR range test: MSE on z-scored targets."""
    images, targets_um, _ = batch
    z = (targets_um - model.target_mean) / model.target_sd
    out = model.forward(Tensor(images), train=True)
    return nd.mse_loss(out["regression"], Tensor(z[:, None]))


# ---------------------------------------------------------------------------
# LR range test


def lr_range_test(model, batches, lr_lo, lr_hi, n_steps, loss_fn=None):
    """Sweep the learning rate geometrically and watch the smoothed loss.

    A throwaway copy of ``model`` takes one plain SGD step per minibatch
    while the LR grows from ``lr_lo`` to ``lr_hi`` as
    lr_k = lr_lo * (lr_hi/lr_lo)**(k/(n_steps-1)). The loss is smoothed
    exponentially (factor 0.98, bias-corrected) and the sweep stops early
    once the smoothed loss exceeds 4x its best. The suggestion is the LR
    at the steepest negative smoothed-loss slope, divided by 10.

    Returns (records, suggested_lr) where records is a list of
    (lr, smoothed_loss).
    """
    if not lr_lo < lr_hi:
        raise ValueError("lr_range_test: need lr_lo < lr_hi")
    if n_steps < 10:
        raise ValueError("lr_range_test: need n_steps >= 10")
    if not batches:
        raise ValueError("lr_range_test: no batches supplied")
    loss_fn = loss_fn or regression_batch_loss

    probe = model.clone()
    ratio = lr_hi / lr_lo
    records = []
    avg = 0.0
    best = math.inf
    for k in range(n_steps):
        lr = lr_lo * ratio ** (k / (n_steps - 1))
        batch = batches[k % len(batches)]
        probe.zero_grad()
        loss = loss_fn(probe, batch)
        raw = float(loss.data)
        if not math.isfinite(raw):
            if k == 0:
                raise TrainingError(f"loss diverges already at lr_lo = {lr_lo}")
            break
        nd.backward(loss)
        for name, param, group in probe.parameters():
            if probe.trainable[group] and param.grad is not None:
                param.data -= lr * param.grad
        avg = 0.98 * avg + 0.02 * raw
        smoothed = avg / (1.0 - 0.98 ** (k + 1))
        records.append((lr, smoothed))
        best = min(best, smoothed)
        if smoothed > 4.0 * best:
            break

    if len(records) < 2:
        raise TrainingError("lr_range_test: sweep ended before any slope could be measured")
    smoothed_vals = [s for _, s in records]
    slopes = np.diff(smoothed_vals)
    idx = int(np.argmin(slopes))
    if slopes[idx] >= 0:
        idx = 0  # no descending region found; fall back to the low end
    suggested = records[idx][0] / 10.0
    return records, suggested


# ---------------------------------------------------------------------------
# training loop


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def _sample_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, index])


def _evaluate(model, pairs, config):
    """Eval-mode loss and micrometer MAE over a sample list."""
    total_loss = 0.0
    total_abs = 0.0
    n = 0
    with nd.no_grad():
        for start in range(0, len(pairs), config.batch_size):
            idx = range(start, min(start + config.batch_size, len(pairs)))
            images, targets, labels = _stack_batch(pairs, list(idx))
            loss = _batch_loss(model, images, targets, labels, config, train=False)
            total_loss += float(loss.data) * len(images)
            if model.head_regression is not None:
                pred_um = model.predict(images)
                total_abs += float(np.abs(pred_um - targets).sum())
            n += len(images)
    mae = total_abs / n if model.head_regression is not None else float("nan")
    return total_loss / n, mae


def train(model, train_pairs, valid_pairs, config: TrainConfig, augment_fn=None):
    """Two-phase training. Returns (best_model, history).

    Phase A trains only the last two layer groups; phase B unfreezes all
    groups with differential learning rates. The model whose validation
    loss was lowest is returned (the untouched initial model if the epoch
    budget is zero).
    """
    if not train_pairs:
        raise TrainingError("training set is empty")
    if not valid_pairs:
        raise TrainingError("validation set is empty")
    if config.batch_size < 1:
        raise TrainingError("batch_size must be >= 1")
    train_patients = {p.patient_id for p in train_pairs}
    valid_patients = {p.patient_id for p in valid_pairs}
    overlap = train_patients & valid_patients
    if overlap:
        raise TrainingError(f"patient leakage between train and valid: {sorted(overlap)[:5]}")

    targets = np.array([p.target_um for p in train_pairs])
    model.target_mean = float(targets.mean())
    sd = float(targets.std())
    model.target_sd = sd if sd > 0 else 1.0

    steps_per_epoch = max(1, math.ceil(len(train_pairs) / config.batch_size))
    schedule = SgdrSchedule(config.lr * config.lr_min_fraction, config.lr,
                            t0=config.t0_epochs * steps_per_epoch, t_mult=config.t_mult)
    state = AdamState(config.beta1, config.beta2, config.eps)

    history = []
    best_loss = math.inf
    best_state = (model.state_arrays(), dict(model.trainable),
                  model.target_mean, model.target_sd)

    phases = ([("A", config.phase_a_epochs)] if config.phase_a_epochs else []) \
        + ([("B", config.phase_b_epochs)] if config.phase_b_epochs else [])
    epoch = 0
    for phase, n_epochs in phases:
        if phase == "A":
            model.set_trainable(model.last_two_groups())
            multipliers = {g: 1.0 for g in model.group_order}
        else:
            model.set_trainable(set(model.group_order))
            multipliers = differential_multipliers(model, config.backbone_multipliers)

        for _ in range(n_epochs):
            epoch += 1
            order = _epoch_rng(config.seed, epoch).permutation(len(train_pairs))
            loss_sum = 0.0
            seen = 0
            lr = schedule.lr()
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                images, targets_um, labels = _stack_batch(train_pairs, idx)
                if config.augment and augment_fn is not None:
                    images = np.stack([
                        augment_fn(images[j], _sample_rng(config.seed, epoch, int(idx[j])))
                        for j in range(len(idx))
                    ])
                lr = schedule.lr()
                model.zero_grad()
                loss = _batch_loss(model, images, targets_um, labels, config, train=True)
                raw = float(loss.data)
                if not math.isfinite(raw):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                nd.backward(loss)
                adam_step(model, lr, state, multipliers)
                schedule.advance()
                loss_sum += raw * len(idx)
                seen += len(idx)

            valid_loss, valid_mae = _evaluate(model, valid_pairs, config)
            record = EpochRecord(epoch, phase, lr, loss_sum / seen, valid_loss, valid_mae)
            history.append(record)
            log.info("epoch %d phase %s lr %.5g train %.5g valid %.5g mae %.3f",
                     record.epoch, phase, record.lr, record.train_loss,
                     record.valid_loss, record.valid_mae)
            if valid_loss < best_loss:
                best_loss = valid_loss
                best_state = (model.state_arrays(), dict(model.trainable),
                              model.target_mean, model.target_sd)

    best = model.clone()
    arrays, masks, t_mean, t_sd = best_state
    best.load_state_arrays(arrays)
    best.trainable = masks
    best.target_mean = t_mean
    best.target_sd = t_sd
    return best, history


def history_to_csv(history, path):
    """Write per-epoch records with full float precision (repr round-trips)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,phase,lr,train_loss,valid_loss,valid_mae\n")
        for r in history:
            fh.write(f"{r.epoch},{r.phase},{r.lr!r},{r.train_loss!r},"
                     f"{r.valid_loss!r},{r.valid_mae!r}\n")
