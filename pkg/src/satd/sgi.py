"""Stage 2: contrastive alignment of distilled visual descriptors with cached text embeddings.

The text side never runs a language model here. Prompt token embeddings are
either imported from files or produced by ``pseudo_embed``, a hash-seeded
stand-in; either way they are computed once and kept in an immutable
``TextBank``. Training touches only the vision projector (trunk + token head)
and the linear text projector.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import tensor as T
from .encoders import Encoder, TextProjector, TokenGrid, VisionProjector
from .errors import ConfigurationError, DataError, InputError, ParameterError, TrainingError
from .optim import AdamW, cosine_lr
from .tensor import Tensor

INSTRUCTIONS = (
    "Represent this satellite caption to align with its image",
    "Represent this overhead description for image-text retrieval",
    "Remote sensing caption to match its satellite image",
    "Overhead scene description for image-text alignment",
    "Produce a caption representation suitable for visual search over satellite images",
)
POOLING_MODES = ("mean", "bos", "eos")


def build_prompt(caption: str, instruction_index: int) -> str:
    if not 0 <= instruction_index < len(INSTRUCTIONS):
        raise ParameterError(f"instruction index {instruction_index} outside [0, {len(INSTRUCTIONS)})")
    return f"{INSTRUCTIONS[instruction_index]}: {caption}"


def prompt_id(prompt: str) -> str:
    return "p" + hashlib.sha256(prompt.encode()).hexdigest()[:16]


def token_count(prompt: str) -> int:
    return max(1, len(prompt.split()))


def pseudo_embed(prompt: str, d_t: int, k: int, seed: int = 0) -> np.ndarray:
    """Deterministic [k, d_t] token embeddings; token i is seeded by sha256(seed, prompt, i)."""
    if d_t < 1 or k < 1:
        raise ParameterError(f"need d_t >= 1 and k >= 1, got {d_t}, {k}")
    out = np.empty((k, d_t))
    for i in range(k):
        digest = hashlib.sha256(f"{seed}\x1f{prompt}\x1f{i}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        out[i] = rng.standard_normal(d_t) / math.sqrt(d_t)
    return out


@dataclass(frozen=True)
class TextEntry:
    tokens: np.ndarray
    caption: str
    instruction: str
    instruction_index: int = -1


class TextBank:
    """Immutable prompt_id -> token matrix store. ``lookups`` counts reads."""

    def __init__(self, entries: dict, d_t: int, source: str = "pseudo"):
        frozen = {}
        for pid, e in entries.items():
            tok = np.array(e.tokens, dtype=np.float64)
            if tok.ndim != 2 or tok.shape[0] < 1 or tok.shape[1] != d_t:
                raise DataError(f"entry {pid!r} has token shape {tok.shape}, expected (k>=1, {d_t})")
            tok.setflags(write=False)
            frozen[pid] = TextEntry(tok, e.caption, e.instruction, e.instruction_index)
        self.entries = MappingProxyType(frozen)
        self.d_t = d_t
        self.source = source
        self.lookups = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, pid):
        return pid in self.entries

    def lookup(self, pid: str) -> np.ndarray:
        try:
            entry = self.entries[pid]
        except KeyError:
            raise DataError(f"prompt id {pid!r} is not in the text bank") from None
        self.lookups += 1
        return entry.tokens

    @classmethod
    def from_manifest(cls, manifest: list[dict], d_t: int, seed: int = 0) -> "TextBank":
        """Pseudo-embed every manifest prompt."""
        entries = {}
        for m in manifest:
            prompt = m.get("prompt") or build_prompt(m["caption"], m["instruction_index"])
            entries[m["prompt_id"]] = TextEntry(
                pseudo_embed(prompt, d_t, int(m.get("k") or token_count(prompt)), seed),
                m["caption"], INSTRUCTIONS[m["instruction_index"]], m["instruction_index"],
            )
        return cls(entries, d_t, "pseudo")


def prompt_manifest(captions, instruction_indices=range(len(INSTRUCTIONS))) -> list[dict]:
    """One manifest row per (caption, instruction) in first-seen caption order."""
    rows, seen = [], set()
    for cap in captions:
        for ii in instruction_indices:
            prompt = build_prompt(cap, ii)
            pid = prompt_id(prompt)
            if pid in seen:
                continue
            seen.add(pid)
            rows.append({"prompt_id": pid, "caption": cap, "instruction_index": ii,
                         "prompt": prompt, "k": token_count(prompt)})
    return rows


def pool_text(tokens, mode: str = "mean") -> Tensor:
    """Sentence vector from [k, d_t] token embeddings: mean, first (bos) or last (eos) token."""
    tok = T._as_tensor(tokens)
    if tok.ndim != 2 or tok.shape[0] == 0:
        raise InputError(f"need at least one token, got shape {tok.shape}")
    if mode == "mean":
        return T.mean(tok, axis=0)
    if mode == "bos":
        return T.take_rows(tok, 0)
    if mode == "eos":
        return T.take_rows(tok, tok.shape[0] - 1)
    raise ConfigurationError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")


def project_text(g_t: TextProjector, z_tilde) -> Tensor:
    return g_t(z_tilde)


def visual_descriptor(h: TokenGrid) -> Tensor:
    """[cls; mean(patches)], length 2 * d_v."""
    if h.patches.shape[0] == 0:
        raise InputError("visual descriptor needs at least one patch token")
    return T.concat([h.cls, T.mean(h.patches, axis=0)], axis=0)


def visual_descriptors(tokens: Tensor, tokens_per_item: int) -> Tensor:
    """Batched descriptors [N, 2*d_v] from projected tokens [N*(1+n), d_v]."""
    t = tokens_per_item
    if t < 2:
        raise InputError("visual descriptor needs at least one patch token")
    n = tokens.shape[0] // t
    cls = T.take_rows(tokens, np.arange(n) * t)
    patch_rows = (np.arange(n)[:, None] * t + np.arange(1, t)[None, :]).reshape(-1)
    mean_patch = T.group_mean(T.take_rows(tokens, patch_rows), t - 1)
    return T.concat([cls, mean_patch], axis=1)


def sgi_loss(zv, zt, tau: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over cosine similarities scaled by 1/tau; row i of zv pairs with row i of zt."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    zv, zt = T._as_tensor(zv), T._as_tensor(zt)
    if zv.ndim != 2 or zv.shape != zt.shape or zv.shape[0] < 1:
        raise InputError(f"need matching non-empty [B, D] batches, got {zv.shape} and {zt.shape}")
    b = zv.shape[0]
    sim = T.cosine_sim_matrix(zv, zt) * (1.0 / tau)
    eye = np.eye(b)
    v2t = -T.tsum(T.log_softmax_temp(sim) * eye) * (1.0 / b)
    t2v = -T.tsum(T.log_softmax_temp(T.transpose(sim)) * eye) * (1.0 / b)
    return (v2t + t2v) * 0.5


@dataclass(frozen=True)
class AlignPair:
    image_id: str
    prompt_id: str
    split: str = "train"


class FrozenFeatures:
    """Caches frozen RGB encoder tokens per image id (one full-resolution view per image)."""

    def __init__(self, enc_rgb: Encoder, images: dict, stats=None):
        self.enc = enc_rgb
        self.images = images
        self.stats = stats
        self._cache: dict[str, np.ndarray] = {}

    def _prep(self, img):
        if self.stats is None:
            return img
        mean, std = self.stats
        return (img - np.asarray(mean)[:, None, None]) / np.asarray(std)[:, None, None]

    def tokens(self, ids) -> np.ndarray:
        missing = [i for i in dict.fromkeys(ids) if i not in self._cache]
        if missing:
            for i in missing:
                if i not in self.images:
                    raise DataError(f"unknown image id {i!r}")
            enc = self.enc.encode_tokens(np.stack([self._prep(self.images[i]) for i in missing]))
            for i, tok in zip(missing, enc):
                tok.setflags(write=False)
                self._cache[i] = tok
        return np.stack([self._cache[i] for i in ids])


def embed_images(features: FrozenFeatures, g_v: VisionProjector, ids) -> Tensor:
    tok = features.tokens(ids)
    return visual_descriptors(g_v.stage2_tokens(tok), tok.shape[1])


def embed_texts(bank: TextBank, g_t: TextProjector, pids, pooling: str = "mean") -> Tensor:
    pooled = np.stack([pool_text(Tensor._wrap(bank.lookup(p)), pooling).data for p in pids])
    return g_t(Tensor._wrap(pooled))


def sgi_train_step(pairs, features: FrozenFeatures, g_v: VisionProjector, g_t: TextProjector,
                   bank: TextBank, tau: float, opt: AdamW, lr: float, pooling: str = "mean") -> float:
    """One Stage-2 step on a batch of AlignPairs; returns the loss before the update."""
    if not opt.owns(g_v.stage2_params() + g_t.parameters()):
        raise ConfigurationError("optimizer must hold exactly the stage-2 projector parameters")
    if not pairs:
        raise InputError("empty batch")
    missing = [p.prompt_id for p in pairs if p.prompt_id not in bank]
    if missing:
        raise DataError(f"unresolved prompt ids: {missing}")
    zv = embed_images(features, g_v, [p.image_id for p in pairs])
    zt = embed_texts(bank, g_t, [p.prompt_id for p in pairs], pooling)
    loss = sgi_loss(zv, zt, tau)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite SGI loss {value}")
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    return value


def sample_pairs(items, epoch: int, seed: int, caption_choice=None) -> list[AlignPair]:
    """Draw one (caption, instruction) prompt per training item for this epoch.

    ``items`` is a sequence of (image_id, captions) tuples. Both the caption
    and the instruction are drawn uniformly, seeded by (seed, epoch, position).
    """
    pairs = []
    for pos, (image_id, captions) in enumerate(items):
        rng = np.random.default_rng([seed, 3, epoch, pos])
        cap = captions[int(rng.integers(len(captions)))] if caption_choice is None else captions[caption_choice]
        ii = int(rng.integers(len(INSTRUCTIONS)))
        pairs.append(AlignPair(image_id, prompt_id(build_prompt(cap, ii))))
    return pairs


def train_sgi(items, features: FrozenFeatures, g_v: VisionProjector, g_t: TextProjector, bank: TextBank,
              steps: int, batch_size: int, lr0: float, tau: float = 0.07, seed: int = 0,
              weight_decay: float = 0.0, pooling: str = "mean", optimizer: AdamW | None = None,
              callback=None) -> list[float]:
    """Stage-2 loop with per-epoch shuffling, prompt sampling and cosine decay."""
    if not items:
        raise InputError("no training pairs")
    opt = optimizer or AdamW(g_v.stage2_params() + g_t.parameters(), weight_decay=weight_decay)
    batch_size = min(batch_size, len(items))
    losses = []
    epoch, queue = 0, []
    for step in range(steps):
        if len(queue) < batch_size:
            order = np.random.default_rng([seed, 4, epoch]).permutation(len(items))
            epoch_pairs = sample_pairs(items, epoch, seed)
            queue = [epoch_pairs[i] for i in order]
            epoch += 1
        batch, queue = queue[:batch_size], queue[batch_size:]
        loss = sgi_train_step(batch, features, g_v, g_t, bank, tau, opt, cosine_lr(step, steps, lr0), pooling)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return losses
