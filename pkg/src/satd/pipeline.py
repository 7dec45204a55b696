"""Stage orchestration: every run writes its resolved config, a metrics CSV and its outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_text_bank, save_checkpoint
from .config import RunConfig, save_config
from .encoders import Encoder, EncoderSpec, TextProjector, TokenGrid, VisionProjector
from .errors import ConfigurationError, SatdError, TrainingError
from .evaluation import (LabelSet, ProbeConfig, average_precisions, cosine_scores, f1_macro, label_prompt_ids,
                         linear_probe, mean_of_others_rule, miou, patch_similarity_map, retrieval_report,
                         segment_open_vocab, zero_shot_classify_batch)
from .reports import EvalReport, write_pgm, write_reports
from .sgi import (FrozenFeatures, TextBank, build_prompt, embed_images, embed_texts, prompt_id,
                  prompt_manifest, train_sgi)
from .srd import CenterState, train_srd
from .stf import stf_read, stf_write
from .synthetic import RGB_BANDS, SyntheticDataset, load_dataset, mosaic
from .views import ViewConfig


class StageError(SatdError, RuntimeError):
    """A module error re-raised with the stage it happened in."""


@dataclass
class StageResult:
    stage: str
    out_dir: Path
    checkpoint: Path | None = None
    reports: list = field(default_factory=list)
    metrics: list = field(default_factory=list)


def build_encoders(cfg: RunConfig, c_ms: int) -> tuple[Encoder, Encoder]:
    rgb = Encoder(EncoderSpec("rgb", 3, cfg.patch_size, cfg.rgb_dim, cfg.encoder_depth, cfg.rgb_encoder_seed))
    ms = Encoder(EncoderSpec("ms", c_ms, cfg.patch_size, cfg.ms_dim, cfg.encoder_depth, cfg.ms_encoder_seed))
    return rgb, ms


def build_projector(cfg: RunConfig) -> VisionProjector:
    return VisionProjector(cfg.rgb_dim, cfg.ms_dim, cfg.d_v, cfg.projector_blocks,
                           seed=cfg.projector_seed, head_std=cfg.projector_head_std)


def view_config(cfg: RunConfig) -> ViewConfig:
    return ViewConfig(
        n_global=cfg.n_global_crops, n_local=cfg.n_local_crops,
        global_size=cfg.global_crop_size, local_size=cfg.local_crop_size,
        global_scale=cfg.global_crop_scale, local_scale=cfg.local_crop_scale,
        hflip_prob=cfg.hflip_prob, jitter_strength=cfg.jitter_strength, jitter_prob=cfg.jitter_prob,
        blur_prob=cfg.blur_prob, solarize_prob=cfg.solarize_prob, grayscale_prob=cfg.grayscale_prob,
        rng_seed=cfg.seed,
    )


def _params_to_arrays(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v.data for k, v in params.items()}


def _load_params(prefix: str, params: dict, tensors: dict):
    for k, p in params.items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise ConfigurationError(f"checkpoint lacks tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise ConfigurationError(f"checkpoint tensor {key!r} has shape {tensors[key].shape}, "
                                     f"projector expects {p.data.shape}")
        p.data = np.array(tensors[key], dtype=np.float64)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


def _prepare(cfg: RunConfig, *required) -> tuple[Path, SyntheticDataset]:
    cfg.require("data_dir", "out_dir", *required)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return out, load_dataset(cfg.data_dir)


def _check_frozen(before: dict, encoders: dict):
    after = {k: e.digest() for k, e in encoders.items()}
    if after != before:
        raise TrainingError(f"frozen encoder weights changed: {before} -> {after}")


def _stats(ds: SyntheticDataset):
    return ds.stats("ms"), ds.stats("rgb")


def _split_items(ds: SyntheticDataset, split: str) -> list[dict]:
    return [it for it in ds.items if it["split"] == split]


def _index_of(ds: SyntheticDataset) -> dict:
    return {it["id"]: i for i, it in enumerate(ds.items)}


def run_srd(cfg: RunConfig) -> StageResult:
    out, ds = _prepare(cfg)
    rgb_bands = ds.manifest.get("rgb_bands", list(RGB_BANDS))
    enc_rgb, enc_ms = build_encoders(cfg, ds.images.shape[1])
    frozen = {"rgb": enc_rgb.digest(), "ms": enc_ms.digest()}
    g_v = build_projector(cfg)
    train = ds.split_indices("train")
    steps = cfg.srd_steps or cfg.srd_epochs * math.ceil(len(train) / cfg.srd_batch_size)
    center = CenterState.zeros(cfg.ms_dim, m_c=cfg.m_c, tau_t=cfg.tau_t, tau_s=cfg.tau_s)
    ms_stats, rgb_stats = _stats(ds)
    run = train_srd(ds.images[train], enc_rgb, enc_ms, g_v, view_config(cfg), rgb_bands, steps,
                    cfg.srd_batch_size, cfg.srd_lr, center, seed=cfg.seed, weight_decay=cfg.srd_weight_decay,
                    ms_stats=ms_stats, rgb_stats=rgb_stats)
    _check_frozen(frozen, {"rgb": enc_rgb, "ms": enc_ms})
    rows = [(r.step, r.loss, r.teacher_entropy, r.n_pairs, r.grad_norm_projector, r.center_shift, r.lr)
            for r in run.reports]
    _write_csv(out / "metrics.csv",
               ["step", "loss", "teacher_entropy", "n_pairs", "grad_norm", "center_shift", "lr"], rows)
    tensors = _params_to_arrays("gv", g_v.params)
    tensors["center.mu"] = center.mu
    tensors.update({f"opt.{k}": v for k, v in run.optimizer.state_arrays().items()})
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, tensors, "srd", steps, cfg.digest(), {"encoder_digests": frozen})
    return StageResult("srd", out, ckpt, metrics=rows)


def dataset_bank(cfg: RunConfig, ds: SyntheticDataset) -> TextBank:
    """The configured bank file, or a pseudo bank over every caption (all instructions)."""
    if cfg.text_bank is not None:
        bank = load_text_bank(cfg.text_bank)
        if bank.d_t != cfg.text_dim:
            raise ConfigurationError(f"text bank width {bank.d_t} differs from text_dim {cfg.text_dim}")
        return bank
    captions = [c for it in ds.items for c in it["captions"]]
    return TextBank.from_manifest(prompt_manifest(captions), cfg.text_dim, cfg.text_seed)


def _features(cfg: RunConfig, ds: SyntheticDataset, enc_rgb: Encoder) -> FrozenFeatures:
    bands = ds.manifest.get("rgb_bands", list(RGB_BANDS))
    images = {it["id"]: ds.images[i][bands] for i, it in enumerate(ds.items)}
    return FrozenFeatures(enc_rgb, images, ds.stats("rgb"))


def _stage2_models(cfg: RunConfig):
    g_v = build_projector(cfg)
    g_t = TextProjector(cfg.text_dim, 2 * g_v.d_v, seed=cfg.text_projector_seed)
    return g_v, g_t


def run_sgi(cfg: RunConfig) -> StageResult:
    out, ds = _prepare(cfg)
    enc_rgb, enc_ms = build_encoders(cfg, ds.images.shape[1])
    frozen = {"rgb": enc_rgb.digest(), "ms": enc_ms.digest()}
    g_v, g_t = _stage2_models(cfg)
    init_from = None
    if cfg.checkpoint is not None:
        tensors, manifest = load_checkpoint(cfg.checkpoint)
        _load_params("gv", g_v.params, tensors)
        init_from = manifest["stage"]
    bank = dataset_bank(cfg, ds)
    items = [(it["id"], it["captions"]) for it in _split_items(ds, "train")]
    steps = cfg.sgi_steps or cfg.sgi_epochs * math.ceil(len(items) / cfg.sgi_batch_size)
    features = _features(cfg, ds, enc_rgb)
    rows = []
    losses = train_sgi(items, features, g_v, g_t, bank, steps, cfg.sgi_batch_size, cfg.sgi_lr, cfg.tau,
                       seed=cfg.seed, weight_decay=cfg.sgi_weight_decay, pooling=cfg.text_pooling,
                       callback=lambda s, l: rows.append((s, l)))
    _check_frozen(frozen, {"rgb": enc_rgb, "ms": enc_ms})
    _write_csv(out / "metrics.csv", ["step", "loss"], rows)
    tensors = _params_to_arrays("gv", g_v.params)
    tensors.update(_params_to_arrays("gt", g_t.params))
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, tensors, "sgi", steps, cfg.digest(),
                    {"encoder_digests": frozen, "pooling": cfg.text_pooling, "bank_source": bank.source,
                     "init_from": init_from, "final_loss": losses[-1]})
    return StageResult("sgi", out, ckpt, metrics=rows)


@dataclass
class Stage2Model:
    """Everything evaluation needs, rebuilt from a Stage-2 checkpoint."""

    cfg: RunConfig
    ds: SyntheticDataset
    enc_rgb: Encoder
    g_v: VisionProjector
    g_t: TextProjector
    bank: TextBank
    features: FrozenFeatures
    pooling: str

    def image_descriptors(self, ids) -> np.ndarray:
        with T.no_grad():
            return embed_images(self.features, self.g_v, ids).data

    def text_vectors(self, pids) -> np.ndarray:
        with T.no_grad():
            return embed_texts(self.bank, self.g_t, pids, self.pooling).data

    def label_set(self) -> LabelSet:
        classes = self.ds.manifest["classes"]
        return LabelSet(classes, self.text_vectors(label_prompt_ids(classes)))

    def projected_grid(self, image_rgb: np.ndarray) -> TokenGrid:
        mean, std = self.ds.stats("rgb")
        x = (image_rgb - mean[:, None, None]) / std[:, None, None]
        tok = self.enc_rgb.encode_tokens(x[None])
        with T.no_grad():
            rows = self.g_v.stage2_tokens(tok).data
        p = self.cfg.patch_size
        return TokenGrid(rows[0], rows[1:], (x.shape[1] // p, x.shape[2] // p))


def _stage2_checkpoint(cfg: RunConfig) -> tuple[dict, dict]:
    cfg.require("checkpoint")
    tensors, manifest = load_checkpoint(cfg.checkpoint)
    if manifest["stage"] != "sgi":
        raise ConfigurationError(
            f"evaluation needs a Stage-2 (sgi) checkpoint; {cfg.checkpoint} is from stage {manifest['stage']!r}")
    return tensors, manifest


def load_stage2(cfg: RunConfig, ds: SyntheticDataset) -> Stage2Model:
    tensors, manifest = _stage2_checkpoint(cfg)
    enc_rgb, _ = build_encoders(cfg, ds.images.shape[1])
    g_v, g_t = _stage2_models(cfg)
    _load_params("gv", g_v.params, tensors)
    _load_params("gt", g_t.params, tensors)
    pooling = manifest["extra"].get("pooling", cfg.text_pooling)
    return Stage2Model(cfg, ds, enc_rgb, g_v, g_t, dataset_bank(cfg, ds), _features(cfg, ds, enc_rgb), pooling)


def eval_zeroshot(m: Stage2Model, items) -> list[EvalReport]:
    labels = m.label_set()
    truth = np.array([it["label"] for it in items])
    pred = zero_shot_classify_batch(m.image_descriptors([it["id"] for it in items]), labels)
    n_cls = len(labels.classes)
    acc_per = [float(np.mean(pred[truth == c] == c)) if np.any(truth == c) else None for c in range(n_cls)]
    f1, f1_per = f1_macro(pred, truth, n_cls)
    extra = {"n": len(items), "pooling": m.pooling}
    return [EvalReport("zeroshot", "accuracy", float(np.mean(pred == truth)), acc_per, extra),
            EvalReport("zeroshot", "f1_macro", f1, f1_per, extra)]


def eval_retrieval(m: Stage2Model, items) -> list[EvalReport]:
    """Class-averaged mAP@k with label-prompt queries; caption-level R@1 in ``extra``."""
    cfg = m.cfg
    labels = m.label_set()
    zv = m.image_descriptors([it["id"] for it in items])
    truth = np.array([it["label"] for it in items])
    n_cls = len(labels.classes)
    rel = truth[None, :] == np.arange(n_cls)[:, None]
    report = retrieval_report(cosine_scores(labels.prompt_embeddings, zv), rel, cfg.eval_k, cfg.ap_denominator,
                              task="retrieval_class", query_classes=np.arange(n_cls))
    captions = [it["captions"][-1] for it in items]
    zt = m.text_vectors([prompt_id(build_prompt(c, 0)) for c in captions])
    cap_rel = np.array([[a == b for b in captions] for a in captions])
    cap = retrieval_report(cosine_scores(zt, zv), cap_rel, cfg.eval_k, cfg.ap_denominator, task="retrieval_caption")
    report.extra["pooling"] = cap.extra["pooling"] = m.pooling
    report.extra["caption_recall_at_1"] = cap.extra["recall_at_1"]
    return [report, cap]


def _mosaics(m: Stage2Model, items):
    idx_of = _index_of(m.ds)
    pool = [idx_of[it["id"]] for it in items]
    rng = np.random.default_rng([m.cfg.seed, 7])
    for _ in range(m.cfg.segment_mosaics):
        picks = rng.choice(pool, size=4, replace=len(pool) < 4)
        yield mosaic(m.ds, picks, rng)


def eval_segment(m: Stage2Model, items, out: Path | None = None) -> list[EvalReport]:
    """Decoder-free segmentation and one-vs-rest multi-label scoring on 2x2 scene mosaics."""
    labels = m.label_set()
    bands = m.ds.manifest.get("rgb_bands", list(RGB_BANDS))
    n_cls = len(labels.classes)
    preds, truths, scores, present = [], [], [], []
    for j, (img, lab) in enumerate(_mosaics(m, items)):
        grid = m.projected_grid(img[bands])
        pred, _ = segment_open_vocab(grid, labels, lab.shape)
        preds.append(pred)
        truths.append(lab)
        desc = np.concatenate([grid.cls, grid.patches.mean(axis=0)])
        scores.append(cosine_scores(desc, labels.prompt_embeddings)[0])
        present.append(np.isin(np.arange(n_cls), lab))
        if out is not None and j == 0:
            write_pgm(out / "segment_pred.pgm", pred.astype(np.float64))
            write_pgm(out / "segment_truth.pgm", lab.astype(np.float64))
    value, per = miou(np.stack(preds), np.stack(truths), n_cls)
    scores, present = np.array(scores), np.array(present)
    aps, empty = average_precisions(scores.T, present.T, k=len(scores), denominator="total")
    decisions = mean_of_others_rule(scores, m.cfg.ovr_margin)  # one-vs-rest rule on the mosaic descriptor
    ovr_f1, _ = f1_macro(decisions.ravel().astype(int), present.ravel().astype(int), 2)
    extra = {"n_mosaics": len(preds), "pooling": m.pooling}
    return [EvalReport("segmentation", "miou", value, per, extra),
            EvalReport("multilabel", "map_multilabel", float(aps.mean()), aps.tolist(),
                       dict(extra, ovr_f1=ovr_f1, classes_without_positives=np.flatnonzero(empty).tolist()))]


EVAL_TASKS = ("zeroshot", "retrieval", "segment")


def _write_eval_outputs(out: Path, reports: list[EvalReport]):
    write_reports(reports, out / "reports.json", out / "metrics.csv")


def run_eval(cfg: RunConfig, tasks=EVAL_TASKS) -> StageResult:
    """Evaluate a Stage-2 checkpoint on the ``eval_split`` items; refuses any other checkpoint."""
    _stage2_checkpoint(cfg)
    out, ds = _prepare(cfg)
    m = load_stage2(cfg, ds)
    items = _split_items(ds, cfg.eval_split)
    if not items:
        raise ConfigurationError(f"split {cfg.eval_split!r} has no items")
    reports = []
    for task in tasks:
        if task == "zeroshot":
            reports += eval_zeroshot(m, items)
        elif task == "retrieval":
            reports += eval_retrieval(m, items)
        elif task == "segment":
            reports += eval_segment(m, items, out)
        else:
            raise ConfigurationError(f"unknown evaluation task {task!r}; expected one of {EVAL_TASKS}")
    _write_eval_outputs(out, reports)
    return StageResult("eval", out, None, reports)


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def probe_features(cfg: RunConfig, ds: SyntheticDataset) -> tuple[np.ndarray, str]:
    """Frozen per-image features: Stage-2 descriptors when a checkpoint is given, else raw encoder [cls; mean]."""
    if cfg.checkpoint is not None:
        m = load_stage2(cfg, ds)
        return m.image_descriptors([it["id"] for it in ds.items]), "stage2_descriptor"
    enc_rgb, _ = build_encoders(cfg, ds.images.shape[1])
    tok = _features(cfg, ds, enc_rgb).tokens([it["id"] for it in ds.items])
    return np.concatenate([tok[:, 0], tok[:, 1:].mean(axis=1)], axis=1), "encoder_tokens"


def run_probe(cfg: RunConfig) -> StageResult:
    """Write features to STF, train the probe from the file, and confirm the file is untouched."""
    out, ds = _prepare(cfg)
    feats, source = probe_features(cfg, ds)
    feat_path = stf_write(out / "features.stf", feats)
    before = _file_sha(feat_path)
    x = stf_read(feat_path)
    labels = ds.labels()
    tr, ev = ds.split_indices("train"), ds.split_indices(cfg.eval_split)
    pcfg = ProbeConfig(epochs=cfg.probe_epochs, batch_size=cfg.probe_batch_size, lr=cfg.probe_lr,
                       weight_decay=cfg.probe_weight_decay, seed=cfg.seed)
    report = linear_probe(x[tr], labels[tr], pcfg, eval_features=x[ev], eval_labels=labels[ev])
    after = _file_sha(feat_path)
    if after != before:
        raise TrainingError("probe modified its input feature file")
    report.extra.update({"feature_source": source, "features_sha256": after})
    _write_eval_outputs(out, [report])
    return StageResult("probe", out, None, [report])


def viz_similarity(cfg: RunConfig, image_index: int, text: str | None = None, out_name: str = "similarity.pgm"):
    """Patch-text similarity map for one dataset image; ``text`` defaults to the image's own label prompt."""
    cfg.require("checkpoint")
    out, ds = _prepare(cfg)
    m = load_stage2(cfg, ds)
    if not 0 <= image_index < len(ds.items):
        raise ConfigurationError(f"image index {image_index} outside [0, {len(ds.items)})")
    item = ds.items[image_index]
    caption = text if text is not None else item["captions"][0]
    pid = prompt_id(build_prompt(caption, 0))
    if pid in m.bank:
        vec = m.text_vectors([pid])[0]
    else:
        raise ConfigurationError(f"caption {caption!r} is not in the text bank")
    bands = ds.manifest.get("rgb_bands", list(RGB_BANDS))
    sim = patch_similarity_map(m.projected_grid(ds.images[image_index][bands]), vec)
    record = write_pgm(out / out_name, sim)
    return sim, record


def pooling_sweep(cfg: RunConfig, modes=("mean", "bos", "eos")) -> dict:
    """Train Stage 2 and evaluate retrieval once per pooling mode; reports go to one comparison file."""
    cfg.require("data_dir", "out_dir")
    out = Path(cfg.out_dir)
    rows = {}
    for mode in modes:
        sub = out / f"pooling-{mode}"
        train_cfg = cfg.with_overrides(stage="sgi", text_pooling=mode, out_dir=str(sub / "sgi"))
        res = run_sgi(train_cfg)
        eval_cfg = cfg.with_overrides(stage="eval", text_pooling=mode, out_dir=str(sub / "eval"),
                                      checkpoint=str(res.checkpoint))
        reports = run_eval(eval_cfg, tasks=("retrieval",)).reports
        rows[mode] = {r.task: r.to_dict() for r in reports}
    mean_map = rows["mean"]["retrieval_class"]["value"] if "mean" in rows else None
    summary = {
        "modes": list(modes),
        "reports": rows,
        "mean_not_worse": None if mean_map is None else all(
            mean_map >= rows[m]["retrieval_class"]["value"] for m in modes if m != "mean"),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "pooling_sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_csv(out / "pooling_sweep.csv", ["pooling", "task", "metric", "value", "recall_at_1"],
               [(mode, t, r["metric"], r["value"], r["extra"]["recall_at_1"])
                for mode, tr in rows.items() for t, r in tr.items()])
    return summary


STAGE_RUNNERS = {"srd": run_srd, "sgi": run_sgi, "eval": run_eval, "probe": run_probe}


def run_stage(cfg: RunConfig) -> StageResult:
    """Dispatch on ``cfg.stage``; module errors come back as StageError naming the stage."""
    try:
        return STAGE_RUNNERS[cfg.stage](cfg)
    except StageError:
        raise
    except SatdError as exc:
        raise StageError(f"stage {cfg.stage!r} failed: {type(exc).__name__}: {exc}") from exc
