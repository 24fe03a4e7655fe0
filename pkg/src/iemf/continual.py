"""Class-incremental task streams, sequential training, and forgetting metrics.

One shared output layer covers all classes from the start; classes outside the
allowed set for a loss are masked by adding a large negative constant to their
logits. Fine-tuning masks to the classes seen so far; the distillation variant
trains the current task's classes against labels while matching the pre-task
model's softened fused logits on previously seen classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, ContractError
from .model import Batch, MultimodalModel, network_logits
from .modulation import (
    batch_strength_scores,
    iemf_coefficient,
    per_sample_content,
)
from .tensor import Tape, Tensor, backward
from .training import OptimConfig, XiRecord, iterate_batches, sgd_step, top1_accuracy
from .util import STREAM_TASKS, STREAM_TRAIN, seeded_rng

MASK_NEG = -1e30
CONTINUAL_METHODS = ("finetune", "lwf")


@dataclass
class Task:
    classes: list[int]
    train: Batch
    test: Batch


@dataclass
class TaskStream:
    tasks: list[Task]
    n_classes: int

    def seen_classes(self, upto: int) -> list[int]:
        """Classes of tasks 1..upto (1-based), in task order."""
        seen: list[int] = []
        for task in self.tasks[:upto]:
            seen.extend(task.classes)
        return seen


def _restrict(batch: Batch, classes: Sequence[int]) -> Batch:
    mask = np.isin(batch.y, list(classes))
    return batch.subset(np.nonzero(mask)[0])


def build_task_stream(dataset: Dataset, k: int, classes_per_task: int, seed: int) -> TaskStream:
    """Seeded disjoint class partition into k tasks of classes_per_task each."""
    m = dataset.spec.n_classes
    if k < 1 or classes_per_task < 1:
        raise ConfigError("task count and classes per task must be positive")
    if k * classes_per_task > m:
        raise ConfigError(
            f"{k} tasks x {classes_per_task} classes need {k * classes_per_task} classes, "
            f"dataset has {m}"
        )
    order = seeded_rng(seed, STREAM_TASKS).permutation(m)
    tasks = []
    for t in range(k):
        classes = [int(c) for c in order[t * classes_per_task : (t + 1) * classes_per_task]]
        tasks.append(Task(classes, _restrict(dataset.train, classes), _restrict(dataset.test, classes)))
    return TaskStream(tasks=tasks, n_classes=m)


def _mask_row(allowed: Sequence[int], n_classes: int) -> np.ndarray:
    row = np.full(n_classes, MASK_NEG)
    row[list(allowed)] = 0.0
    return row


def masked_cross_entropy(logits: Tensor, labels, allowed: Sequence[int],
                         n_classes: int) -> tuple[Tensor, Tensor]:
    """Cross entropy over a class subset; blocked logits get an additive -1e30."""
    if len(allowed) == 0:
        raise ContractError("masked cross entropy needs at least one allowed class")
    masked = T.add_bias(logits, Tensor(_mask_row(allowed, n_classes)))
    return T.softmax_cross_entropy(masked, labels)


def lwf_loss(new_logits: Tensor, labels, old_logits: Tensor, current_classes: Sequence[int],
             prev_classes: Sequence[int], temperature: float, lam: float,
             n_classes: int | None = None) -> tuple[Tensor, Tensor]:
    """Masked CE on the current task plus softened distillation on earlier classes.

    loss = CE(new over current classes) + lam * T^2 * KL(soft old || soft new)
    where the KL runs over the previously seen classes. With no previous
    classes (or lam = 0) the distillation term is exactly zero.
    """
    if n_classes is None:
        n_classes = new_logits.shape[1]
    ce, probs = masked_cross_entropy(new_logits, labels, current_classes, n_classes)
    if len(prev_classes) == 0 or lam == 0.0:
        return ce, probs
    new_sel = T.select_cols(new_logits, prev_classes)
    old_sel = Tensor(old_logits.data[:, list(prev_classes)])
    kl = T.distill_kl(new_sel, old_sel, temperature)
    return T.add(ce, T.smul(kl, lam * temperature**2)), probs


def _incremental_step(batch: Batch, model: MultimodalModel, cfg: OptimConfig, method: str,
                      ce_classes: Sequence[int], prev_classes: Sequence[int],
                      old_model: MultimodalModel | None, temperature: float, lam: float):
    """One training step with masked losses; same modulation path as standard training."""
    m = model.cfg.n_classes
    tape = Tape()
    _, _, logits_av, logits_a, logits_v = network_logits(batch, model, tape)
    if method == "lwf" and old_model is not None and len(prev_classes) > 0:
        _, _, old_av, _, _ = network_logits(batch, old_model, None)
        loss_av, p_av = lwf_loss(logits_av, batch.y, old_av, ce_classes, prev_classes,
                                 temperature, lam, m)
    else:
        loss_av, p_av = masked_cross_entropy(logits_av, batch.y, ce_classes, m)
    loss_a, p_a = masked_cross_entropy(logits_a, batch.y, ce_classes, m)
    loss_v, p_v = masked_cross_entropy(logits_v, batch.y, ce_classes, m)
    loss = T.add(loss_av, T.smul(T.add(loss_a, loss_v), 0.5 * model.cfg.head_loss_weight))

    c_a = per_sample_content(p_a, batch.y)
    c_v = per_sample_content(p_v, batch.y)
    c_av = per_sample_content(p_av, batch.y)
    s_unimodal, s_multimodal = batch_strength_scores(c_a, c_v, c_av)
    xi = iemf_coefficient(s_unimodal, s_multimodal, cfg.iemf) if cfg.iemf.enabled else 1.0
    grads = backward(tape, loss)
    sgd_step(model, grads, cfg, xi)
    return s_unimodal, s_multimodal, xi


def train_incremental(stream: TaskStream, method: str, model: MultimodalModel,
                      cfg: OptimConfig, lwf_temperature: float = 2.0, lwf_lambda: float = 1.0,
                      on_task=None):
    """Sequential training over the stream; returns (accuracy matrix, xi trace).

    Row k of the matrix holds a_{k,j} for j <= k: accuracy on task j's test
    split after finishing task k. Evaluation argmaxes over all classes (the
    head is shared and fixed-size), so a frozen model repeats its rows.
    """
    if method not in CONTINUAL_METHODS:
        raise ConfigError(f"method must be one of {CONTINUAL_METHODS}")
    rng = seeded_rng(cfg.seed, STREAM_TRAIN)
    matrix: list[list[float]] = []
    trace: list[XiRecord] = []
    step = 0
    for k, task in enumerate(stream.tasks, start=1):
        prev_classes = stream.seen_classes(k - 1)
        seen_classes = stream.seen_classes(k)
        ce_classes = task.classes if method == "lwf" else seen_classes
        old_model = model.clone() if (method == "lwf" and prev_classes) else None
        n = task.train.size
        for epoch in range(1, cfg.epochs + 1):
            perm = rng.permutation(n)
            for idx in iterate_batches(n, cfg.batch_size, perm):
                batch = task.train.subset(idx)
                step += 1
                s_uni, s_multi, xi = _incremental_step(
                    batch, model, cfg, method, ce_classes, prev_classes,
                    old_model, lwf_temperature, lwf_lambda,
                )
                trace.append(XiRecord(step, epoch, s_uni, s_multi, xi))
        row = []
        for j in range(k):
            _, _, logits_av, _, _ = network_logits(stream.tasks[j].test, model, None)
            row.append(top1_accuracy(logits_av, stream.tasks[j].test.y))
        matrix.append(row)
        if on_task is not None:
            on_task(k, row)
    return matrix, trace


# ---------------------------------------------------------------------------
# metrics over the lower-triangular accuracy matrix


def _check_matrix(matrix) -> list[list[float]]:
    rows = [list(map(float, row)) for row in matrix]
    if len(rows) == 0:
        raise ContractError("accuracy matrix is empty")
    for k, row in enumerate(rows, start=1):
        if len(row) != k:
            raise ContractError(f"row {k} must hold {k} entries, got {len(row)}")
    return rows


def aa_aia(matrix) -> tuple[list[float], float]:
    """Average accuracy after each task and its mean over the whole sequence."""
    rows = _check_matrix(matrix)
    aa = [sum(row) / len(row) for row in rows]
    return aa, sum(aa) / len(aa)


def afr(matrix) -> float:
    """Mean drop from best-ever accuracy on earlier tasks, averaged over steps 2..K."""
    rows = _check_matrix(matrix)
    k_total = len(rows)
    if k_total < 2:
        raise ContractError("forgetting needs at least two tasks")
    f_values = []
    for k in range(2, k_total + 1):
        drops = []
        for j in range(1, k):
            best = max(rows[ell - 1][j - 1] for ell in range(j, k))
            drops.append(best - rows[k - 1][j - 1])
        f_values.append(sum(drops) / (k - 1))
    return sum(f_values) / (k_total - 1)
