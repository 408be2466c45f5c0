"""Distillation losses and teacher-update strategies.

Four regularizers penalize the student for drifting away from a saved
teacher network on the classes that teacher knows:

* ``global``     - one temperature softmax spanning all old classes,
  cross-entropy against the teacher's distribution.
* ``taskwise``   - a KL divergence per old task's class group, summed.
* ``multiclass`` - element-wise sigmoid matching, no temperature.
* ``auxiliary``  - the global loss against the main teacher on old classes
  plus a second global term on current-task classes against an auxiliary
  network trained on the current task alone.

Teacher strategies decide what happens to the saved snapshot while the
student trains on a new task: keep it bit-frozen, let only its running
normalization statistics follow the new data, or actually train it
(everything, or just the normalization parameters) either up front or one
step per student batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ContractError, ParameterError
from .layers import Dense, IncrementalModel, NormMode, add_task_head

KD_VARIANTS = ("global", "taskwise", "multiclass", "auxiliary")

STRATEGY_KINDS = (
    "frozen",
    "adapt_stats",
    "continuous_full",
    "continuous_norm",
    "pretrain_full",
    "pretrain_norm",
    "fix_stats",
)

_CONTINUOUS = ("continuous_full", "continuous_norm")
_PRETRAIN = ("pretrain_full", "pretrain_norm")


@dataclass
class KDConfig:
    """Distillation variant plus its weights and temperature.

    ``aux_weight`` only matters for the auxiliary variant and defaults to
    ``weight`` when left unset.
    """

    variant: str = "global"
    temperature: float = 2.0
    weight: float = 10.0
    aux_weight: float | None = None

    def __post_init__(self):
        if self.variant not in KD_VARIANTS:
            raise ParameterError(
                f"unknown KD variant '{self.variant}', expected one of {KD_VARIANTS}"
            )
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.weight < 0:
            raise ParameterError(f"KD weight must be >= 0, got {self.weight}")
        if self.aux_weight is not None and self.aux_weight < 0:
            raise ParameterError(f"auxiliary weight must be >= 0, got {self.aux_weight}")

    @property
    def effective_aux_weight(self) -> float:
        return self.weight if self.aux_weight is None else self.aux_weight


@dataclass
class TeacherStrategy:
    """What the teacher snapshot does while the student trains.

    ``teacher_lr`` and ``pretrain_epochs`` apply to the training kinds
    only.  A zero learning rate is legal: the continuous kinds then leave
    parameters untouched while their train-mode forwards still move the
    running statistics.  ``adapt_with_running`` switches the statistics
    adaptation mode to normalize by the updated running estimates rather
    than the batch estimates.
    """

    kind: str = "frozen"
    teacher_lr: float = 0.1
    pretrain_epochs: int = 1
    adapt_with_running: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ParameterError(
                f"unknown teacher strategy '{self.kind}', expected one of {STRATEGY_KINDS}"
            )
        if self.teacher_lr < 0:
            raise ParameterError(f"teacher_lr must be >= 0, got {self.teacher_lr}")
        if self.pretrain_epochs < 1:
            raise ParameterError(f"pretrain_epochs must be >= 1, got {self.pretrain_epochs}")

    @property
    def trains_teacher(self) -> bool:
        return self.kind in _CONTINUOUS or self.kind in _PRETRAIN


# ----------------------------------------------------------------------
# loss functions
# ----------------------------------------------------------------------


def _check_pair(student: Tensor, teacher: Tensor, name: str) -> None:
    if student.data.ndim != 2 or teacher.data.ndim != 2:
        raise ContractError(f"{name} expects 2-D (batch, classes) logits")
    if student.shape != teacher.shape:
        raise ContractError(
            f"{name}: student shape {student.shape} != teacher shape {teacher.shape}"
        )


def _softmax_np(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def global_kd_loss(student_logits: Tensor, teacher_logits: Tensor,
                   temperature: float = 2.0) -> Tensor:
    """Cross-entropy between teacher and student softmaxes over old classes.

    Minimized (at the teacher's entropy) exactly when the two temperature
    softmaxes agree.
    """
    _check_pair(student_logits, teacher_logits, "global KD")
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    targets = Tensor(_softmax_np(teacher_logits.data, temperature))
    logp = ad.log_softmax_temperature(student_logits, temperature)
    return -ad.tensor_mean(ad.tensor_sum(targets * logp, axis=1))


def taskwise_kd_loss(pairs, temperature: float = 2.0) -> Tensor:
    """Sum over old tasks of KL(teacher softmax || student softmax).

    ``pairs`` holds one (student logits, teacher logits) tuple per old
    task head.  Zero exactly when every per-task distribution matches.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("taskwise KD needs at least one previous-task logit pair")
    total = None
    for i, (student, teacher) in enumerate(pairs):
        _check_pair(student, teacher, f"taskwise KD (task {i})")
        p = _softmax_np(teacher.data, temperature)
        with np.errstate(divide="ignore"):
            plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
        logq = ad.log_softmax_temperature(student, temperature)
        cross = ad.tensor_sum(Tensor(p) * logq, axis=1)
        term = ad.tensor_mean(Tensor(plogp.sum(axis=1)) - cross)
        total = term if total is None else total + term
    return total


def multiclass_kd_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Element-wise sigmoid matching: mean of -sigma(teacher) log sigma(student).

    Treats every old class as its own binary problem, so no temperature and
    no shift invariance.
    """
    _check_pair(student_logits, teacher_logits, "multiclass KD")
    with no_grad():
        weights = 1.0 / (1.0 + np.exp(-np.clip(teacher_logits.data, -500, 500)))
    logsig = ad.log_sigmoid(student_logits)
    return -ad.tensor_mean(ad.tensor_sum(Tensor(weights) * logsig, axis=1))


def auxiliary_kd_loss(student_logits: list[Tensor], main_teacher_logits: list[Tensor],
                      aux_current_logits: Tensor | None, cfg: KDConfig) -> Tensor:
    """Weighted pair of global terms: old classes vs the main teacher and
    current-task classes vs the auxiliary network.

    Unlike the other losses this one applies its weights internally, so the
    caller adds it to the cross-entropy unscaled.
    """
    if aux_current_logits is None:
        raise ContractError("auxiliary KD requires the auxiliary network's current-task logits")
    if len(student_logits) < 2:
        raise ContractError("auxiliary KD needs at least one old head plus the current head")
    student_old = ad.concat(student_logits[:-1], axis=1)
    teacher_old = ad.concat(main_teacher_logits, axis=1)
    main_term = global_kd_loss(student_old, teacher_old, cfg.temperature)
    current_term = global_kd_loss(student_logits[-1], aux_current_logits, cfg.temperature)
    return ad.scale(main_term, cfg.weight) + ad.scale(current_term, cfg.effective_aux_weight)


def total_loss(ce, kd, weight: float):
    """ce + weight * kd, for tensors or plain numbers."""
    if weight < 0:
        raise ParameterError(f"KD weight must be >= 0, got {weight}")
    if isinstance(ce, Tensor) or isinstance(kd, Tensor):
        ce_t = ce if isinstance(ce, Tensor) else Tensor(np.asarray(ce))
        kd_t = kd if isinstance(kd, Tensor) else Tensor(np.asarray(kd))
        return ce_t + ad.scale(kd_t, weight)
    return ce + weight * kd


# ----------------------------------------------------------------------
# teacher strategies
# ----------------------------------------------------------------------


def teacher_norm_mode(strategy: TeacherStrategy) -> NormMode:
    """Forward mode the teacher uses when producing distillation targets."""
    if strategy.kind == "adapt_stats":
        return NormMode.ADAPT_STATS
    if strategy.kind == "fix_stats":
        return NormMode.FROZEN
    return NormMode.EVAL


def teacher_forward(teacher: IncrementalModel | None, x: Tensor,
                    strategy: TeacherStrategy) -> list[Tensor]:
    """Per-head teacher logits, detached from any gradient graph.

    Under the statistics-adaptation strategy this call also moves the
    teacher's running normalization statistics toward the batch; all other
    strategies leave the snapshot untouched here.
    """
    if teacher is None:
        raise ContractError("teacher_forward called without a teacher snapshot")
    mode = teacher_norm_mode(strategy)
    if strategy.kind == "adapt_stats":
        for bn in teacher.batchnorm_layers():
            bn.adapt_with_running = strategy.adapt_with_running
    with no_grad():
        logits = teacher.forward(x, mode)
    return [Tensor(t.data) for t in logits]


def extend_teacher_for_task(teacher: IncrementalModel, num_classes: int,
                            seed) -> IncrementalModel:
    """Give a trainable teacher a head for the current task.

    The extra head exists only so the teacher can compute a cross-entropy
    on new-task labels; distillation targets always come from the original
    heads.
    """
    return add_task_head(teacher, num_classes, init="kaiming-uniform", seed=seed)


def _trainable_teacher_params(teacher: IncrementalModel, kind: str) -> list[Tensor]:
    if kind.endswith("_norm"):
        return teacher.norm_parameters()
    params = list(teacher.parameters())
    return params


def _teacher_ce_step(teacher: IncrementalModel, xb: np.ndarray, yb_local: np.ndarray,
                     strategy: TeacherStrategy) -> float:
    """One train-mode CE step on the teacher's newest head; returns the loss."""
    logits = teacher.forward(Tensor(xb), NormMode.TRAIN)
    loss = ad.cross_entropy(logits[-1], yb_local)
    value = loss.item()
    params = _trainable_teacher_params(teacher, strategy.kind)
    ad.zero_grads(teacher.parameters())
    loss.backward()
    if strategy.teacher_lr > 0:
        for p in params:
            if p.grad is not None:
                p.data = p.data - strategy.teacher_lr * p.grad
    ad.zero_grads(teacher.parameters())
    return value


def pretrain_teacher(teacher: IncrementalModel, inputs: np.ndarray,
                     labels_local: np.ndarray, strategy: TeacherStrategy,
                     batch_size: int, seed: int) -> list[float]:
    """Train the teacher on the new task's data before the student starts.

    Runs ``pretrain_epochs`` of SGD at ``teacher_lr``; the scope of the
    parameter updates follows the strategy kind.  Returns per-epoch mean
    cross-entropy so callers can check the loss actually went down.
    """
    if strategy.kind not in _PRETRAIN:
        raise ContractError(f"pretrain_teacher called with strategy '{strategy.kind}'")
    n = inputs.shape[0]
    history = []
    for epoch in range(strategy.pretrain_epochs):
        rng = np.random.default_rng((seed, 0x7EAC, epoch))
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            losses.append(_teacher_ce_step(teacher, inputs[idx], labels_local[idx], strategy))
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return history


def continuous_teacher_step(teacher: IncrementalModel, xb: np.ndarray,
                            yb_local: np.ndarray, strategy: TeacherStrategy) -> float:
    """One SGD step on the teacher for the batch the student just saw."""
    if strategy.kind not in _CONTINUOUS:
        raise ContractError(f"continuous_teacher_step called with strategy '{strategy.kind}'")
    return _teacher_ce_step(teacher, xb, yb_local, strategy)
