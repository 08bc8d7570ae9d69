"""Loss functions: cross entropy, distillation, alpha regularization and their combination."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .genotypes import AlphaTable


@dataclass(frozen=True)
class LossWeights:
    """Weights of the distillation (``mu``) and alpha-norm (``lam``) terms.

    ``temperature`` divides both student and teacher logits before the
    softmax inside the distillation term. 1.0 is plain KL of the predictions.
    """

    mu: float = 0.5
    lam: float = 1e-3
    temperature: float = 1.0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: torch.Tensor
    kd: torch.Tensor
    reg: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("total", "ce", "kd", "reg")}


def ce_loss(logits, labels):
    """Batch-mean cross entropy."""
    if logits.shape[0] < 1:
        raise ValueError("empty batch")
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels, reduction="mean")


def kd_loss(student_logits, teacher_logits, temperature=1.0):
    """Batch-mean KL(teacher || student) over the teacher's classes.

    Only the first ``teacher_logits.shape[1]`` student columns take part, so
    the logits of classes the teacher never saw get no gradient from here.
    A teacher with zero classes (first task) gives exactly 0.
    """
    if isinstance(temperature, LossWeights):
        temperature = temperature.temperature
    n_old = 0 if teacher_logits is None else teacher_logits.shape[1]
    if n_old == 0:
        return student_logits.new_zeros(())
    if n_old > student_logits.shape[1]:
        raise ValueError(f"teacher has {n_old} classes, student only {student_logits.shape[1]}")
    teacher = teacher_logits.detach()
    log_p_s = F.log_softmax(student_logits[:, :n_old] / temperature, dim=1)
    log_p_t = F.log_softmax(teacher / temperature, dim=1)
    return F.kl_div(log_p_s, log_p_t, reduction="batchmean", log_target=True)


def alpha_reg(alpha):
    """Square root of the sum of squares of every alpha entry (global Frobenius norm)."""
    if isinstance(alpha, AlphaTable):
        return torch.as_tensor(float(torch.linalg.vector_norm(torch.as_tensor(alpha.values))),
                               dtype=torch.float64)
    if isinstance(alpha, (list, tuple)):
        return torch.linalg.vector_norm(torch.cat([a.reshape(-1) for a in alpha]))
    return torch.linalg.vector_norm(alpha.reshape(-1))


def idarts_loss(logits, labels, teacher_logits=None, alpha=None, weights=LossWeights()):
    """CE + mu * KD + lam * alpha_reg, returned with its components.

    Without a teacher the distillation term is 0; without alpha (a discrete
    child network) the regularizer is 0 and this is the plain distillation
    objective.
    """
    if weights.mu < 0 or weights.lam < 0:
        raise ValueError("loss weights must be non-negative")
    ce = ce_loss(logits, labels)
    kd = kd_loss(logits, teacher_logits, weights.temperature)
    reg = alpha_reg(alpha) if alpha is not None else logits.new_zeros(())
    total = ce
    if weights.mu != 0:
        total = total + weights.mu * kd
    if weights.lam != 0:
        total = total + weights.lam * reg
    return LossBreakdown(total=total, ce=ce, kd=kd, reg=reg)
