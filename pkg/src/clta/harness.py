"""Sequential-task training: schedules, warmup, and the stream driver.

The protocol for each task: optionally warm the new head up in isolation,
then run SGD epochs over seeded shuffles where every batch contributes a
cross-entropy on the current task plus a weighted distillation term
against the teacher snapshot.  The teacher is a deep copy of the model
taken at the end of the previous task; what happens to it during the new
task is the teacher strategy's business.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import TaskStream
from .distill import (
    KDConfig,
    TeacherStrategy,
    auxiliary_kd_loss,
    continuous_teacher_step,
    extend_teacher_for_task,
    global_kd_loss,
    multiclass_kd_loss,
    pretrain_teacher,
    taskwise_kd_loss,
    teacher_forward,
    total_loss,
)
from .errors import ContractError, DataError, ParameterError
from .layers import IncrementalModel, NormMode, add_task_head, snapshot_model
from .metrics import AccuracyMatrix, bn_stats_kld, evaluate_task_agnostic


@dataclass
class TrainConfig:
    """Per-task SGD schedule.

    Defaults are desk-scale: 20 epochs with step decays at 30/60/80% of
    the run, mirroring the shape of the full-scale 200-epoch schedule
    with decays at 60/120/160.  Momentum and weight decay are pinned to
    zero by contract.
    """

    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 0.1
    lr_decay_epochs: tuple = (6, 12, 16)
    lr_decay_factor: float = 10.0
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ParameterError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ParameterError(f"base_lr must be > 0, got {self.base_lr}")
        decays = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ParameterError(f"decay epochs must be strictly increasing, got {decays}")
        if decays and decays[-1] >= self.epochs:
            raise ParameterError(
                f"decay epochs {decays} must all be < epochs ({self.epochs})"
            )
        if self.lr_decay_factor <= 1:
            raise ParameterError(f"decay factor must be > 1, got {self.lr_decay_factor}")
        if self.momentum != 0.0 or self.weight_decay != 0.0:
            raise ParameterError("the training protocol uses plain SGD: momentum and weight decay must be 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ParameterError(f"grad_clip must be positive, got {self.grad_clip}")


@dataclass
class WarmupConfig:
    """Head-only warmup with a one-cycle learning rate and early stopping."""

    enabled: bool = False
    max_lr: float = 0.1
    ramp_epochs: int = 40
    max_epochs: int = 200
    early_stop_patience: int = 20

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ParameterError(f"max_lr must be > 0, got {self.max_lr}")
        if not 1 <= self.ramp_epochs < self.max_epochs:
            raise ParameterError(
                f"need 1 <= ramp_epochs < max_epochs, got {self.ramp_epochs} / {self.max_epochs}"
            )
        if self.early_stop_patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.early_stop_patience}")


@dataclass
class TaskTrace:
    """Per-epoch means recorded while training one task."""

    ce: list = field(default_factory=list)
    kd: list = field(default_factory=list)
    bn_kld: list = field(default_factory=list)
    warmup_ce: list = field(default_factory=list)


@dataclass
class RunResult:
    accuracy_matrix: AccuracyMatrix
    traces: list
    wall_s: float
    seed: int
    model: IncrementalModel
    teacher: IncrementalModel | None = None


# ----------------------------------------------------------------------
# schedules and the optimizer step
# ----------------------------------------------------------------------


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: base_lr divided by the factor once per passed decay epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for d in cfg.lr_decay_epochs if epoch >= d)
    return cfg.base_lr / (cfg.lr_decay_factor ** drops)


def one_cycle_lr(epoch: int, cfg: WarmupConfig) -> float:
    """Cosine rise to max_lr at ramp_epochs, cosine fall to ~0 at the end."""
    if not 0 <= epoch < cfg.max_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    low = cfg.max_lr / 25.0
    floor = cfg.max_lr * 1e-4
    if epoch <= cfg.ramp_epochs:
        phase = epoch / cfg.ramp_epochs
        return low + (cfg.max_lr - low) * 0.5 * (1.0 - np.cos(np.pi * phase))
    phase = (epoch - cfg.ramp_epochs) / (cfg.max_epochs - 1 - cfg.ramp_epochs)
    return floor + (cfg.max_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * phase))


def sgd_step(params, lr: float, grad_clip: float | None = None) -> None:
    """In-place p <- p - lr * grad with optional global-L2-norm clipping.

    Every passed parameter must carry a gradient; pass exactly the
    parameters that participated in the loss.
    """
    params = list(params)
    if not params:
        raise ContractError("sgd_step got an empty parameter list")
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step: a parameter has no gradient")
    factor = 1.0
    if grad_clip is not None:
        total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
        if total > grad_clip:
            factor = grad_clip / total
    for p in params:
        p.data = p.data - lr * factor * p.grad


def epoch_permutation(seed: int, task_index: int, epoch: int, n: int,
                      stage: int = 0) -> np.ndarray:
    """Replayable shuffle: one permutation per (seed, task, epoch, stage)."""
    return np.random.default_rng((seed, task_index, epoch, stage)).permutation(n)


def iter_batches(n: int, batch_size: int, order: np.ndarray):
    """Index slices over a permutation; a trailing singleton is dropped
    because batch statistics need at least two samples."""
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < 2:
            continue
        yield idx


# ----------------------------------------------------------------------
# warmup
# ----------------------------------------------------------------------


def warmup_head(model: IncrementalModel, inputs: np.ndarray, labels_local: np.ndarray,
                cfg: WarmupConfig, batch_size: int, seed: int, task_index: int) -> list:
    """Train only the newest head on frozen backbone features.

    The backbone (and every running statistic) stays bit-identical: it is
    evaluated once in eval mode and the cached features feed the head.
    Stops early once the epoch-mean loss has not improved for
    ``early_stop_patience`` epochs.  Returns the per-epoch loss history.
    """
    head = model.heads[-1]
    feats_chunks = []
    with no_grad():
        for start in range(0, inputs.shape[0], 256):
            _, f = model.forward(Tensor(inputs[start:start + 256]), NormMode.EVAL,
                                 capture_features=True)
            feats_chunks.append(f.data)
    feats = np.concatenate(feats_chunks, axis=0)

    history = []
    best = np.inf
    stall = 0
    for epoch in range(cfg.max_epochs):
        lr = one_cycle_lr(epoch, cfg)
        order = epoch_permutation(seed, task_index, epoch, inputs.shape[0], stage=1)
        losses = []
        for idx in iter_batches(inputs.shape[0], batch_size, order):
            logits = head.forward(Tensor(feats[idx]), NormMode.EVAL)
            loss = ad.cross_entropy(logits, labels_local[idx])
            losses.append(loss.item())
            ad.zero_grads(head.parameters())
            loss.backward()
            sgd_step(head.parameters(), lr)
            ad.zero_grads(head.parameters())
        mean_ce = float(np.mean(losses))
        history.append(mean_ce)
        if best - mean_ce > 1e-12:
            best = mean_ce
            stall = 0
        else:
            stall += 1
            if stall >= cfg.early_stop_patience:
                break
    return history


# ----------------------------------------------------------------------
# per-task training
# ----------------------------------------------------------------------


def _kd_term(variant: str, student_logits, teacher_logits, aux_logits, kd: KDConfig):
    n_old = len(teacher_logits)
    if variant == "global":
        return global_kd_loss(ad.concat(student_logits[:n_old], axis=1),
                              ad.concat(teacher_logits, axis=1), kd.temperature)
    if variant == "taskwise":
        return taskwise_kd_loss(list(zip(student_logits[:n_old], teacher_logits)),
                                kd.temperature)
    if variant == "multiclass":
        return multiclass_kd_loss(ad.concat(student_logits[:n_old], axis=1),
                                  ad.concat(teacher_logits, axis=1))
    return auxiliary_kd_loss(student_logits, teacher_logits, aux_logits, kd)


def train_task(model: IncrementalModel, teacher: IncrementalModel | None,
               task_index: int, inputs: np.ndarray, labels_local: np.ndarray,
               kd: KDConfig, strategy: TeacherStrategy, train: TrainConfig,
               warmup: WarmupConfig, seed: int,
               aux_teacher: IncrementalModel | None = None,
               epoch_hook=None) -> TaskTrace:
    """Run one task's training, mutating model (and teacher, per strategy).

    ``task_index`` is 1-based; a teacher must be present exactly when it
    is >= 2.  The KD trace holds the raw loss for the plain variants and
    the internally weighted sum for the auxiliary variant; both traces are
    all-zero on the first task.  The batch-norm KLD trace compares teacher
    and student statistics at each epoch's end (zero when inapplicable).
    """
    if inputs.shape[0] == 0:
        raise DataError(f"task {task_index} has no training data")
    if task_index >= 2 and teacher is None:
        raise ContractError(f"task {task_index} needs a teacher snapshot")
    if task_index == 1 and teacher is not None:
        raise ContractError("the first task cannot have a teacher")
    if teacher is not None and kd.variant == "auxiliary" and aux_teacher is None:
        raise ContractError("auxiliary KD needs the auxiliary network")

    n_old = len(model.heads) - 1
    labels_local = np.asarray(labels_local, dtype=np.int64)
    trace = TaskTrace()

    if warmup.enabled:
        trace.warmup_ce = warmup_head(model, inputs, labels_local, warmup,
                                      train.batch_size, seed, task_index)

    if teacher is not None and strategy.trains_teacher:
        extend_teacher_for_task(teacher, int(labels_local.max()) + 1,
                                seed=(seed, task_index, 9))
        if strategy.kind.startswith("pretrain"):
            pretrain_teacher(teacher, inputs, labels_local, strategy,
                             train.batch_size, seed)

    student_mode = NormMode.TRAIN
    if strategy.kind == "fix_stats" and task_index >= 2:
        student_mode = NormMode.FROZEN

    n = inputs.shape[0]
    for epoch in range(train.epochs):
        lr = lr_schedule(epoch, train)
        order = epoch_permutation(seed, task_index, epoch, n, stage=0)
        ce_vals, kd_vals = [], []
        for idx in iter_batches(n, train.batch_size, order):
            xb = Tensor(inputs[idx])
            logits = model.forward(xb, student_mode)
            ce = ad.cross_entropy(logits[-1], labels_local[idx])

            if teacher is None:
                total = ce
                kd_vals.append(0.0)
            else:
                teacher_logits = teacher_forward(teacher, xb, strategy)[:n_old]
                aux_logits = None
                if kd.variant == "auxiliary":
                    with no_grad():
                        aux_out = aux_teacher.forward(xb, NormMode.EVAL)
                    aux_logits = Tensor(aux_out[-1].data)
                kd_t = _kd_term(kd.variant, logits, teacher_logits, aux_logits, kd)
                kd_vals.append(kd_t.item())
                weight = 1.0 if kd.variant == "auxiliary" else kd.weight
                total = total_loss(ce, kd_t, weight)

            ce_vals.append(ce.item())
            ad.zero_grads(model.parameters())
            total.backward()
            sgd_step(model.parameters(), lr, train.grad_clip)
            ad.zero_grads(model.parameters())

            if teacher is not None and strategy.kind.startswith("continuous"):
                continuous_teacher_step(teacher, inputs[idx], labels_local[idx], strategy)

        trace.ce.append(float(np.mean(ce_vals)))
        trace.kd.append(float(np.mean(kd_vals)))
        if teacher is not None and model.batchnorm_layers() and teacher.batchnorm_layers():
            trace.bn_kld.append(bn_stats_kld(teacher, model))
        else:
            trace.bn_kld.append(0.0)
        if epoch_hook is not None:
            epoch_hook(epoch, trace)
    return trace


def _train_ce_only(model: IncrementalModel, inputs: np.ndarray,
                   labels_local: np.ndarray, train: TrainConfig,
                   seed: int, task_index: int) -> None:
    """Plain supervised loop used to build the auxiliary network.

    Only the backbone and the newest head take part; older heads see no
    gradient from a current-task cross-entropy.
    """
    n = inputs.shape[0]
    params = [p for layer in model.backbone for p in layer.parameters()]
    params += model.heads[-1].parameters()
    for epoch in range(train.epochs):
        lr = lr_schedule(epoch, train)
        order = epoch_permutation(seed, task_index, epoch, n, stage=3)
        for idx in iter_batches(n, train.batch_size, order):
            logits = model.forward(Tensor(inputs[idx]), NormMode.TRAIN)
            loss = ad.cross_entropy(logits[-1], labels_local[idx])
            ad.zero_grads(model.parameters())
            loss.backward()
            sgd_step(params, lr, train.grad_clip)
            ad.zero_grads(model.parameters())


# ----------------------------------------------------------------------
# stream driver
# ----------------------------------------------------------------------


def run_stream(stream: TaskStream, model: IncrementalModel, kd: KDConfig,
               strategy: TeacherStrategy, train: TrainConfig,
               warmup: WarmupConfig, seed: int) -> RunResult:
    """Train through every task in order and fill the accuracy matrix.

    Row t holds the task-agnostic accuracy on every test split seen so far,
    measured right after task t finished.  Deterministic given the seed.
    """
    if model.heads:
        raise ContractError("run_stream expects a model with no heads yet")
    n_tasks = len(stream)
    matrix = AccuracyMatrix(n_tasks)
    traces = []
    teacher = None
    started = time.perf_counter()

    for t in range(1, n_tasks + 1):
        task = stream.tasks[t - 1]
        aux = None
        if t >= 2:
            teacher = snapshot_model(model)
            if kd.variant == "auxiliary":
                aux = snapshot_model(model)
                add_task_head(aux, len(task.classes), seed=(seed, t, 5))
                _train_ce_only(aux, task.train.inputs, task.local_labels(task.train),
                               train, seed, t)
        add_task_head(model, len(task.classes), seed=(seed, t, 1))
        traces.append(train_task(
            model, teacher, t, task.train.inputs, task.local_labels(task.train),
            kd, strategy, train, warmup, seed, aux_teacher=aux,
        ))
        seen = int(np.sum(stream.class_counts[:t]))
        order = stream.class_order[:seen]
        for j in range(1, t + 1):
            test = stream.tasks[j - 1].test
            matrix.set(t - 1, j - 1,
                       evaluate_task_agnostic(model, test.inputs, test.labels, order))

    wall = time.perf_counter() - started
    return RunResult(matrix, traces, wall, seed, model=model, teacher=teacher)
