"""Stage 1: distil a frozen MS teacher into a projector on top of a frozen RGB encoder.

Teacher distributions are centred by an EMA of the teacher logits and
sharpened with ``tau_t``; student distributions use ``tau_s`` and no centre.
The loss is the cross-entropy averaged over every (RGB view, MS view) pair of
a sample, then over samples. Only the projector is optimised; the centre is
updated after the optimiser step and never enters the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import Encoder, VisionProjector
from .errors import ConfigurationError, InputError, ParameterError, TrainingError
from .optim import AdamW, cosine_lr
from .tensor import Tensor
from .views import ViewBatch, ViewConfig, make_views


@dataclass
class CenterState:
    mu: np.ndarray
    m_c: float = 0.9
    tau_t: float = 0.06
    tau_s: float = 0.1

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        if not (self.tau_t > 0 and self.tau_s > 0):
            raise ParameterError("temperatures must be positive")
        if not self.tau_t < self.tau_s:
            raise ParameterError(f"teacher temperature {self.tau_t} must be below student {self.tau_s}")
        if not 0.0 <= self.m_c <= 1.0:
            raise ParameterError(f"center momentum {self.m_c} outside [0, 1]")

    @classmethod
    def zeros(cls, k: int, **kw) -> "CenterState":
        return cls(np.zeros(k), **kw)


@dataclass
class SrdStepReport:
    step: int
    loss: float
    n_pairs: int
    grad_norm_projector: float
    center_shift: float
    teacher_entropy: float
    lr: float

    def __post_init__(self):
        if not math.isfinite(self.loss) or self.loss < 0:
            raise TrainingError(f"invalid SRD loss {self.loss}")


def _rows(logits) -> Tensor:
    """Stack a list of K-vectors (or pass through a [n, K] matrix) as a [n, K] tensor."""
    if isinstance(logits, (list, tuple)):
        if not logits:
            raise InputError("empty view set")
        parts = [T.reshape(T._as_tensor(z), (1, -1)) for z in logits]
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    z = T._as_tensor(logits)
    if z.shape[0] == 0:
        raise InputError("empty view set")
    return z if z.ndim == 2 else T.reshape(z, (1, -1))


def teacher_distribution(z_ms, c: CenterState) -> Tensor:
    """softmax((z - mu) / tau_t), computed outside the tape."""
    z = T.stop_gradient(T._as_tensor(z_ms))
    with T.no_grad():
        return T.softmax_temp(z - c.mu, c.tau_t)


def student_distribution(z_hat, c: CenterState) -> Tensor:
    return T.softmax_temp(z_hat, c.tau_s)


def entropy(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    return -(q * np.log(np.where(q > 0, q, 1.0))).sum(axis=-1)


def srd_loss(teacher_logits, student_logits, c: CenterState) -> Tensor:
    """Mean cross-entropy -q_u . log p_v over all (student v, teacher u) pairs."""
    t = _rows(teacher_logits)
    s = _rows(student_logits)
    q_bar = teacher_distribution(t, c).data.mean(axis=0)
    logp = T.log_softmax_temp(s, c.tau_s)
    return -(T.tsum(logp * q_bar) * (1.0 / s.shape[0]))


def srd_batch_loss(teacher_logits: np.ndarray, student_logits: Tensor, sample_index, c: CenterState) -> Tensor:
    """Batched loss: per-sample pair average, then mean over samples.

    ``teacher_logits`` is [B, U, K]; row r of ``student_logits`` belongs to
    sample ``sample_index[r]``, and every sample has the same number of rows.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    b, u, k = teacher_logits.shape
    if u == 0 or student_logits.shape[0] == 0:
        raise InputError("empty view set")
    q = teacher_distribution(teacher_logits.reshape(-1, k), c).data.reshape(b, u, k)
    q_rep = Tensor._wrap(q.mean(axis=1)[np.asarray(sample_index)])
    logp = T.log_softmax_temp(student_logits, c.tau_s)
    return -(T.tsum(logp * q_rep) * (1.0 / student_logits.shape[0]))


def update_center(c: CenterState, teacher_logits) -> CenterState:
    """mu <- m_c * mu + (1 - m_c) * mean(teacher logits); returns a new state."""
    if isinstance(teacher_logits, (list, tuple)):
        if not teacher_logits:
            raise InputError("cannot update the center from an empty view list")
        z = np.stack([np.asarray(T._as_tensor(t).data).reshape(-1) for t in teacher_logits])
    else:
        z = np.asarray(T._as_tensor(teacher_logits).data)
        if z.size == 0:
            raise InputError("cannot update the center from an empty view list")
        z = z.reshape(-1, z.shape[-1])
    batch_mean = z.mean(axis=0)
    mu = c.m_c * c.mu + (1.0 - c.m_c) * batch_mean
    return CenterState(mu, c.m_c, c.tau_t, c.tau_s)


def teacher_logits_for(enc_ms: Encoder, ms_views: np.ndarray) -> np.ndarray:
    """Patch-pooled teacher outputs [N, K] for a [N, C, g, g] stack of MS views."""
    return enc_ms.encode_tokens(ms_views)[:, 1:].mean(axis=1)


def student_logits_for(enc_rgb: Encoder, g_v: VisionProjector, batch: list[ViewBatch]):
    """Student logits for every RGB view in the batch plus each row's sample index.

    Views are grouped by spatial size so each group is encoded in one call.
    """
    groups: dict[int, tuple[list, list]] = {}
    for b, vb in enumerate(batch):
        for v in vb.rgb_views:
            views, owners = groups.setdefault(v.shape[-1], ([], []))
            views.append(v)
            owners.append(b)
    parts, owners = [], []
    for size in sorted(groups, reverse=True):
        views, idx = groups[size]
        tokens = enc_rgb.encode_tokens(np.stack(views))
        parts.append(g_v.stage1_logits(tokens))
        owners.extend(idx)
    logits = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return logits, np.asarray(owners)


def srd_train_step(batch: list[ViewBatch], enc_rgb: Encoder, enc_ms: Encoder, g_v: VisionProjector,
                   c: CenterState, opt: AdamW, lr: float, step: int = 0) -> SrdStepReport:
    """One Stage-1 step: forward, loss, backward, projector update, then centre update.

    The centre of ``c`` is replaced in place by the EMA update.
    """
    if not opt.owns(g_v.stage1_params()):
        raise ConfigurationError("optimizer must hold exactly the projector's stage-1 parameters")
    if not batch:
        raise InputError("empty batch")
    n_ms = len(batch[0].ms_views)
    n_rgb = len(batch[0].rgb_views)
    ms = np.stack([v for vb in batch for v in vb.ms_views])
    t_logits = teacher_logits_for(enc_ms, ms).reshape(len(batch), n_ms, -1)
    s_logits, owners = student_logits_for(enc_rgb, g_v, batch)

    loss = srd_batch_loss(t_logits, s_logits, owners, c)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite SRD loss at step {step}: teacher logit range "
            f"[{t_logits.min():.3g}, {t_logits.max():.3g}], student logit range "
            f"[{s_logits.data.min():.3g}, {s_logits.data.max():.3g}]"
        )
    opt.zero_grad()
    loss.backward()
    grad_norm = math.sqrt(sum(float((p.grad**2).sum()) for p in opt.params if p.grad is not None))
    opt.step(lr)

    q = teacher_distribution(t_logits.reshape(-1, t_logits.shape[-1]), c).data
    new_c = update_center(c, t_logits)
    shift = float(np.linalg.norm(new_c.mu - c.mu))
    c.mu = new_c.mu
    return SrdStepReport(step, value, n_rgb * n_ms, grad_norm, shift, float(entropy(q).mean()), lr)


@dataclass
class SrdRun:
    reports: list[SrdStepReport] = field(default_factory=list)
    center: CenterState | None = None
    optimizer: AdamW | None = None


def train_srd(images: np.ndarray, enc_rgb: Encoder, enc_ms: Encoder, g_v: VisionProjector,
              view_cfg: ViewConfig, rgb_bands, steps: int, batch_size: int, lr0: float,
              center: CenterState, seed: int = 0, weight_decay: float = 0.0,
              ms_stats=None, rgb_stats=None, optimizer: AdamW | None = None,
              start_step: int = 0, callback=None) -> SrdRun:
    """Run ``steps`` Stage-1 steps over ``images`` ([N, C_ms, H, W]) with cosine decay."""
    n = images.shape[0]
    if n == 0:
        raise InputError("no training images")
    opt = optimizer or AdamW(g_v.stage1_params(), weight_decay=weight_decay)
    order_rng = np.random.default_rng([seed, 1])
    order = order_rng.permutation(n)
    cursor = 0
    run = SrdRun(center=center, optimizer=opt)
    total = start_step + steps
    for step in range(start_step, total):
        idx = []
        while len(idx) < batch_size:
            if cursor == n:
                order, cursor = order_rng.permutation(n), 0
            take = min(batch_size - len(idx), n - cursor)
            idx.extend(order[cursor:cursor + take])
            cursor += take
        view_rng = np.random.default_rng([seed, 2, step])
        batch = [make_views(images[i], rgb_bands, view_cfg, view_rng, ms_stats, rgb_stats) for i in idx]
        report = srd_train_step(batch, enc_rgb, enc_ms, g_v, center, opt, cosine_lr(step, total, lr0), step)
        run.reports.append(report)
        if callback is not None:
            callback(report)
    return run
