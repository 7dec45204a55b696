"""Downstream protocols: zero-shot classification, retrieval mAP, linear probe,
patch similarity maps and decoder-free segmentation.

Everything here works on plain numpy arrays of already-computed embeddings;
the only trained object is the linear probe, which never touches its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import TextProjector, TokenGrid
from .errors import ConfigurationError, DataError, EvaluationError, InputError
from .optim import AdamW, multistep_lr
from .reports import EvalReport
from .sgi import TextBank, build_prompt, pool_text, prompt_id
from .synthetic import LABEL_TEMPLATE
from .tensor import Tensor


def _unit_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(norms > T.EPS, norms, 1.0)


def cosine_scores(a, b) -> np.ndarray:
    """[Na, Nb] cosine similarities; zero-norm rows score 0 against everything."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"embedding widths differ: {a.shape[1]} vs {b.shape[1]}")
    return _unit_rows(a) @ _unit_rows(b).T


@dataclass
class LabelSet:
    classes: list[str]
    prompt_embeddings: np.ndarray

    def __post_init__(self):
        self.classes = list(self.classes)
        emb = np.array(self.prompt_embeddings, dtype=np.float64)
        if len(self.classes) < 2:
            raise ConfigurationError(f"a label set needs at least 2 classes, got {len(self.classes)}")
        if emb.ndim != 2 or emb.shape[0] != len(self.classes):
            raise ConfigurationError(
                f"prompt embeddings of shape {emb.shape} are not row-aligned to {len(self.classes)} classes")
        emb.setflags(write=False)
        self.prompt_embeddings = emb

    @property
    def width(self) -> int:
        return self.prompt_embeddings.shape[1]


def label_prompt_ids(classes) -> list[str]:
    return [prompt_id(build_prompt(LABEL_TEMPLATE.format(cls=c), 0)) for c in classes]


def label_set_from_bank(classes, bank: TextBank, g_t: TextProjector, pooling: str = "mean") -> LabelSet:
    """Embed "a satellite image of {class}" (instruction 0) for every class once."""
    rows = []
    with T.no_grad():
        for pid in label_prompt_ids(classes):
            rows.append(g_t(pool_text(Tensor._wrap(bank.lookup(pid)), pooling)).data)
    return LabelSet(list(classes), np.stack(rows))


def zero_shot_scores(z_v, labels: LabelSet) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z_v, dtype=np.float64))
    if z.shape[1] != labels.width:
        raise ConfigurationError(f"embedding width {z.shape[1]} does not match label set width {labels.width}")
    return cosine_scores(z, labels.prompt_embeddings)


def zero_shot_classify(z_v, labels: LabelSet) -> int:
    """Index of the most similar class prompt; ties go to the lowest index."""
    return int(np.argmax(zero_shot_scores(z_v, labels)[0]))


def zero_shot_classify_batch(z_v, labels: LabelSet) -> np.ndarray:
    return np.argmax(zero_shot_scores(z_v, labels), axis=1)


def mean_of_others_rule(sims: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Positive where a class beats the mean similarity of the remaining classes by more than ``margin``."""
    c = sims.shape[-1]
    others = (sims.sum(axis=-1, keepdims=True) - sims) / (c - 1)
    return sims > others + margin


def multilabel_one_vs_rest(z_v, labels: LabelSet, margin: float = 0.0, rule=mean_of_others_rule) -> np.ndarray:
    """Boolean [C] (or [N, C] for a batch) of one-vs-rest decisions."""
    if len(labels.classes) < 2:
        raise ConfigurationError("one-vs-rest needs at least 2 classes")
    z = np.asarray(z_v, dtype=np.float64)
    out = rule(zero_shot_scores(z, labels), margin)
    return out[0] if z.ndim == 1 else out


def f1_macro(pred, truth, n_classes: int) -> tuple[float, list[float]]:
    """Macro F1 over classes; a class absent from both prediction and truth scores 1."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    per = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        per.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(per)), [float(v) for v in per]


def _check_ranking_inputs(scores, relevance):
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    r = np.atleast_2d(np.asarray(relevance)).astype(bool)
    if s.shape != r.shape:
        raise InputError(f"scores {s.shape} and relevance {r.shape} differ in shape")
    if s.shape[1] == 0:
        raise InputError("cannot rank an empty gallery")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores contain non-finite values")
    return s, r


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Descending order per row; equal scores keep index order."""
    return np.argsort(-scores, axis=-1, kind="stable")


def average_precisions(scores, relevance, k: int = 100, denominator: str = "min"):
    """Per-query AP@k and a mask of queries with no relevant item.

    ``denominator`` is "min" for min(k, R) or "total" for R. ``k`` larger
    than the gallery is clamped to the gallery size.
    """
    if denominator not in ("min", "total"):
        raise ConfigurationError(f"unknown AP denominator {denominator!r}")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    s, r = _check_ranking_inputs(scores, relevance)
    k = min(k, s.shape[1])
    ranked = np.take_along_axis(r, rank_order(s), axis=1)[:, :k]
    hits = np.cumsum(ranked, axis=1)
    precision_at_hits = np.where(ranked, hits / np.arange(1, k + 1), 0.0)
    total = r.sum(axis=1)
    denom = np.minimum(total, k) if denominator == "min" else total
    empty = total == 0
    # cumsum adds strictly left to right (rank order), unlike pairwise .sum()
    summed = np.cumsum(precision_at_hits, axis=1)[:, -1]
    aps = np.where(empty, 0.0, summed / np.where(empty, 1, denom))
    return aps, empty


def map_at_k(scores, relevance, k: int = 100, denominator: str = "min") -> float:
    aps, _ = average_precisions(scores, relevance, k, denominator)
    return sum(aps.tolist()) / len(aps)


def recall_at_1(scores, relevance) -> float:
    s, r = _check_ranking_inputs(scores, relevance)
    top = rank_order(s)[:, 0]
    return float(r[np.arange(len(top)), top].mean())


def retrieval_report(scores, relevance, k: int = 100, denominator: str = "min", task: str = "retrieval",
                     query_classes=None) -> EvalReport:
    """mAP@k report; queries without relevant items are listed in ``extra``.

    With ``query_classes`` the per-class values are the mean AP of each class's queries.
    """
    aps, empty = average_precisions(scores, relevance, k, denominator)
    per_class = None
    if query_classes is not None:
        qc = np.asarray(query_classes)
        per_class = [float(aps[qc == c].mean()) for c in np.unique(qc)]
        value = float(np.mean(per_class))
    else:
        value = float(aps.mean())
    extra = {"k": int(k), "denominator": denominator, "n_queries": int(len(aps)),
             "zero_relevant_queries": [int(i) for i in np.flatnonzero(empty)],
             "recall_at_1": recall_at_1(scores, relevance)}
    return EvalReport(task, "map100", value, per_class, extra)


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    milestones: tuple[float, ...] = (0.6, 0.9)
    gamma: float = 0.1
    holdout: float = 0.25
    seed: int = 0

    def milestone_epochs(self) -> list[int]:
        return [int(round(f * self.epochs)) for f in self.milestones]


@dataclass
class ProbeResult:
    weights: np.ndarray
    bias: np.ndarray
    losses: list[float] = field(default_factory=list)

    def logits(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias


def train_probe(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: ProbeConfig, multilabel: bool = False) -> ProbeResult:
    """Fit one linear layer from zero initialisation; ``y`` is [N] ints or [N, C] 0/1."""
    d = x.shape[1]
    w = Tensor(np.zeros((d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = AdamW([w, b], betas=cfg.betas, weight_decay=cfg.weight_decay)
    milestones = cfg.milestone_epochs()
    target = np.asarray(y, dtype=np.float64) if multilabel else np.eye(n_classes)[y]
    rng = np.random.default_rng([cfg.seed, 5])
    losses = []
    for epoch in range(cfg.epochs):
        lr = multistep_lr(epoch, cfg.lr, milestones, cfg.gamma)
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            z = Tensor._wrap(x[idx]) @ w + b
            tgt = target[idx]
            if multilabel:
                per = T.softplus(z) - z * tgt
            else:
                per = -(T.log_softmax_temp(z) * tgt)
            loss = T.tsum(per) * (1.0 / len(idx))
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
    return ProbeResult(w.data.copy(), b.data.copy(), losses)


def _split(n: int, frac: float, seed: int):
    order = np.random.default_rng([seed, 6]).permutation(n)
    n_eval = int(round(frac * n))
    if n_eval == 0 or n_eval == n:
        raise DataError(f"holdout fraction {frac} leaves an empty side for {n} samples")
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


def linear_probe(features, labels, cfg: ProbeConfig = ProbeConfig(), multilabel: bool = False,
                 eval_features=None, eval_labels=None, task: str = "linear_probe") -> EvalReport:
    """Train a linear classifier on frozen features and score it on held-out data.

    Without ``eval_features`` a seeded ``cfg.holdout`` fraction of the inputs
    is held out. Single-label reports accuracy (macro F1 in ``extra``);
    multi-label reports the mean over classes of AP over all samples.
    """
    x = np.array(features, dtype=np.float64)
    y = np.array(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise InputError(f"features {x.shape} and labels {y.shape} do not align")
    if multilabel:
        if y.ndim != 2 or y.shape[1] < 2:
            raise DataError("multi-label targets must be [N, C] with C >= 2")
        n_classes = y.shape[1]
        if np.all(y == y[0]):
            raise DataError("every sample carries the same label set")
    else:
        y = y.astype(np.int64)
        if len(np.unique(y)) < 2:
            raise DataError("labels contain a single class")
        n_classes = int(y.max()) + 1
    if eval_features is None:
        tr, ev = _split(len(x), cfg.holdout, cfg.seed)
        x_tr, y_tr, x_ev, y_ev = x[tr], y[tr], x[ev], y[ev]
    else:
        x_tr, y_tr = x, y
        x_ev = np.array(eval_features, dtype=np.float64)
        y_ev = np.array(eval_labels) if multilabel else np.array(eval_labels, dtype=np.int64)
    probe = train_probe(x_tr, y_tr, n_classes, cfg, multilabel)
    logits = probe.logits(x_ev)
    extra = {"n_train": int(len(x_tr)), "n_eval": int(len(x_ev)), "final_loss": probe.losses[-1]}
    if multilabel:
        aps, empty = average_precisions(logits.T, y_ev.T.astype(bool), k=len(x_ev), denominator="total")
        extra["classes_without_positives"] = [int(i) for i in np.flatnonzero(empty)]
        return EvalReport(task, "map_multilabel", float(aps.mean()), aps.tolist(), extra)
    pred = np.argmax(logits, axis=1)
    extra["f1_macro"], _ = f1_macro(pred, y_ev, n_classes)
    per_class = [float(np.mean(pred[y_ev == c] == c)) if np.any(y_ev == c) else 0.0 for c in range(n_classes)]
    return EvalReport(task, "accuracy", float(np.mean(pred == y_ev)), per_class, extra)


def _patch_part(text, d_v: int) -> np.ndarray:
    """The patch-aligned half of a descriptor-space vector, or the vector itself at width d_v."""
    t = np.asarray(text, dtype=np.float64)
    if t.shape[-1] == 2 * d_v:
        return t[..., d_v:]
    if t.shape[-1] == d_v:
        return t
    raise ConfigurationError(f"text width {t.shape[-1]} fits neither d_v={d_v} nor 2*d_v={2 * d_v}")


def _patch_array(h: TokenGrid) -> np.ndarray:
    p = h.patches.data if isinstance(h.patches, Tensor) else np.asarray(h.patches)
    return np.asarray(p, dtype=np.float64)


def patch_similarity_map(h: TokenGrid, text) -> np.ndarray:
    """Cosine similarity of each projected patch to the text vector, shaped [rows, cols]."""
    patches = _patch_array(h)
    sims = cosine_scores(patches, _patch_part(text, patches.shape[1]))[:, 0]
    return np.clip(sims, -1.0, 1.0).reshape(h.grid)


def upsample_nearest(grid_map: np.ndarray, out_size) -> np.ndarray:
    rows, cols = grid_map.shape
    oh, ow = out_size
    ri = (np.arange(oh) * rows) // oh
    ci = (np.arange(ow) * cols) // ow
    return grid_map[ri[:, None], ci[None, :]]


def segment_open_vocab(h: TokenGrid, labels: LabelSet, out_size, ground_truth=None):
    """Per-patch argmax over class similarity maps, upsampled to ``out_size``.

    Returns the class map and, when ``ground_truth`` is given, the mIoU report.
    """
    patches = _patch_array(h)
    sims = cosine_scores(patches, _patch_part(labels.prompt_embeddings, patches.shape[1]))
    pred = upsample_nearest(np.argmax(sims, axis=1).reshape(h.grid), out_size)
    if ground_truth is None:
        return pred, None
    value, per = miou(pred, ground_truth, len(labels.classes))
    return pred, EvalReport("segmentation", "miou", value, per)


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise InputError(f"prediction and ground truth sizes differ: {pred.size} vs {truth.size}")
    if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= n_classes):
        raise InputError(f"labels outside [0, {n_classes})")
    return np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou(pred, truth, n_classes: int | None = None) -> tuple[float, list[float]]:
    """Mean IoU over classes present in the prediction or the ground truth.

    Per-class IoU is reported for every class; absent classes get NaN.
    """
    pred, truth = np.asarray(pred, dtype=np.int64), np.asarray(truth, dtype=np.int64)
    if np.shape(pred) != np.shape(truth):
        raise InputError(f"prediction {np.shape(pred)} and ground truth {np.shape(truth)} differ")
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    cm = confusion_matrix(pred, truth, n_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        raise EvaluationError("no class is present in prediction or ground truth")
    iou = np.full(n_classes, np.nan)
    iou[present] = inter[present] / union[present]
    return sum(iou[present].tolist()) / int(present.sum()), iou.tolist()
