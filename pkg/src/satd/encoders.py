"""Frozen patch-token encoders and the trainable vision/text projectors.

The encoders are small token-mixing networks with seeded random weights. A
token-mixing block is a residual channel MLP followed by a residual global
mixing term (the per-image token mean passed through a linear map and added
back to every token). The same block definition is used by the trainable
vision projector, whose residual branches start at zero so a fresh projector
trunk is the identity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ModalityError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderSpec:
    modality: str
    in_channels: int
    patch_size: int
    embed_dim: int
    depth: int = 2
    weights_seed: int = 0
    hidden_mult: int = 2
    zero_bias: bool = False

    def __post_init__(self):
        if self.modality not in ("rgb", "ms"):
            raise ModalityError(f"unknown modality {self.modality!r}")
        if self.modality == "rgb" and self.in_channels != 3:
            raise ModalityError(f"rgb encoder needs 3 channels, got {self.in_channels}")


@dataclass
class TokenGrid:
    cls: Tensor
    patches: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        if rows * cols != self.patches.shape[0]:
            raise ShapeError(f"grid {self.grid} does not hold {self.patches.shape[0]} patches")

    @property
    def width(self) -> int:
        return self.cls.shape[-1]

    def tokens(self) -> np.ndarray:
        """Stacked [1+n, d] array, class token first."""
        return np.vstack([self.cls.data[None, :], self.patches.data])


def patchify(image, patch: int) -> np.ndarray:
    """Split a [C, H, W] image (or [N, C, H, W] batch) into flattened patches.

    Row i is the i-th patch in row-major grid order, flattened channel-major.
    """
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    r, q = h // patch, w // patch
    out = x.reshape(n, c, r, patch, q, patch).transpose(0, 2, 4, 1, 3, 5).reshape(n, r * q, c * patch * patch)
    return out[0] if single else out


def unpatchify(rows: np.ndarray, channels: int, grid: tuple[int, int], patch: int) -> np.ndarray:
    r, q = grid
    x = np.asarray(rows).reshape(r, q, channels, patch, patch)
    return x.transpose(2, 0, 3, 1, 4).reshape(channels, r * patch, q * patch)


def mixing_block(x: Tensor, tokens_per_item: int, w: dict) -> Tensor:
    """Residual channel MLP, then residual global token mixing."""
    h = x + (T.tanh(x @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"])
    mixed = T.group_mean(h, tokens_per_item) @ w["wm"]
    return h + T.repeat_rows(mixed, tokens_per_item)


def _block_names(prefix: str):
    return [f"{prefix}.{k}" for k in ("w1", "b1", "w2", "b2", "wm")]


def _block_weights(params: dict, prefix: str) -> dict:
    return {k: params[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2", "wm")}


def weights_digest(weights: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class Encoder:
    """A frozen stand-in encoder. Weights are read-only numpy arrays."""

    def __init__(self, spec: EncoderSpec, weights: dict | None = None):
        self.spec = spec
        if weights is None:
            weights = _init_encoder_weights(spec)
        self.weights = {}
        for name, arr in weights.items():
            arr = np.array(arr, dtype=np.float64)
            arr.setflags(write=False)
            self.weights[name] = arr
        self._tensors = {k: Tensor._wrap(v) for k, v in self.weights.items()}

    def digest(self) -> str:
        return weights_digest(self.weights)

    def encode_tokens(self, images) -> np.ndarray:
        """Encode a [N, C, H, W] batch into a [N, 1+n, d] array (class token first)."""
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeError(f"expected a [N, C, H, W] batch, got shape {x.shape}")
        if x.shape[1] != self.spec.in_channels:
            raise ModalityError(
                f"{self.spec.modality} encoder expects {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        p = self.spec.patch_size
        patches = patchify(x, p)
        n_img, n_patch, _ = patches.shape
        w = self._tensors
        d = self.spec.embed_dim
        with T.no_grad():
            emb = Tensor._wrap(patches.reshape(-1, patches.shape[-1])) @ w["patch.w"] + w["patch.b"]
            tok = np.empty((n_img, n_patch + 1, d))
            tok[:, 0] = self.weights["cls"]
            tok[:, 1:] = emb.data.reshape(n_img, n_patch, d)
            h = Tensor._wrap(tok.reshape(-1, d))
            for j in range(self.spec.depth):
                h = mixing_block(h, n_patch + 1, _block_weights(w, f"block{j}"))
        return h.data.reshape(n_img, n_patch + 1, d)

    def encode(self, image) -> TokenGrid:
        x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected a [C, H, W] image, got shape {x.shape}")
        tok = self.encode_tokens(x[None])[0]
        p = self.spec.patch_size
        return TokenGrid(Tensor(tok[0]), Tensor(tok[1:]), (x.shape[1] // p, x.shape[2] // p))


def _init_encoder_weights(spec: EncoderSpec) -> dict:
    rng = np.random.default_rng(spec.weights_seed)
    d = spec.embed_dim
    hd = spec.hidden_mult * d
    fan_in = spec.in_channels * spec.patch_size**2
    bias = (lambda n, s: np.zeros(n)) if spec.zero_bias else (lambda n, s: rng.normal(0.0, s, n))
    w = {
        "patch.w": rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, d)),
        "patch.b": bias(d, 0.1),
        "cls": rng.normal(0.0, 0.5, d),
    }
    for j in range(spec.depth):
        w[f"block{j}.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, hd))
        w[f"block{j}.b1"] = bias(hd, 0.1)
        w[f"block{j}.w2"] = rng.normal(0.0, 0.5 / np.sqrt(hd), (hd, d))
        w[f"block{j}.b2"] = bias(d, 0.05)
        w[f"block{j}.wm"] = rng.normal(0.0, 0.5 / np.sqrt(d), (d, d))
    return w


@lru_cache(maxsize=16)
def _encoder_for(spec: EncoderSpec) -> Encoder:
    return Encoder(spec)


def encode(spec_or_encoder, image) -> TokenGrid:
    """Encode one [C, H, W] image; deterministic in (weights_seed, image)."""
    enc = spec_or_encoder if isinstance(spec_or_encoder, Encoder) else _encoder_for(spec_or_encoder)
    return enc.encode(image)


def pool_patches(t: TokenGrid) -> Tensor:
    """Mean over patch tokens; the class token is excluded."""
    return T.mean(t.patches, axis=0)


class VisionProjector:
    """Trainable G_v: two mixing blocks, a K-dim head (stage 1) and a token head (stage 2).

    The stage-1 head reads the mean of the projected patch tokens, so view
    size does not affect the shape of the student logits.
    """

    def __init__(self, d_in: int, k_out: int, d_v: int | None = None, n_blocks: int = 2,
                 hidden_mult: int = 2, seed: int = 0, head_std: float | None = None):
        self.d_in, self.k_out = d_in, k_out
        self.d_v = d_in if d_v is None else d_v
        self.n_blocks = n_blocks
        rng = np.random.default_rng(seed)
        hd = hidden_mult * d_in
        p = {}
        for j in range(n_blocks):
            p[f"block{j}.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hd))
            p[f"block{j}.b1"] = np.zeros(hd)
            p[f"block{j}.w2"] = np.zeros((hd, d_in))
            p[f"block{j}.b2"] = np.zeros(d_in)
            p[f"block{j}.wm"] = np.zeros((d_in, d_in))
        std = 1.0 / np.sqrt(d_in) if head_std is None else head_std
        p["head_k.w"] = rng.normal(0.0, std, (d_in, k_out))
        p["head_k.b"] = np.zeros(k_out)
        if self.d_v == d_in:
            p["head_tok.w"] = np.eye(d_in)
        else:
            p["head_tok.w"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, self.d_v))
        p["head_tok.b"] = np.zeros(self.d_v)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def trunk_names(self) -> list[str]:
        return [n for j in range(self.n_blocks) for n in _block_names(f"block{j}")]

    def stage1_params(self) -> list[Tensor]:
        return [self.params[n] for n in self.trunk_names() + ["head_k.w", "head_k.b"]]

    def stage2_params(self) -> list[Tensor]:
        return [self.params[n] for n in self.trunk_names() + ["head_tok.w", "head_tok.b"]]

    def _check_width(self, d):
        if d != self.d_in:
            raise ConfigurationError(f"projector expects token width {self.d_in}, got {d}")

    def trunk(self, tokens: np.ndarray) -> Tensor:
        """[N, T, d] frozen tokens -> [N*T, d] tensor after the mixing blocks."""
        tokens = np.asarray(tokens, dtype=np.float64)
        n, t, d = tokens.shape
        self._check_width(d)
        h = Tensor._wrap(tokens.reshape(n * t, d))
        for j in range(self.n_blocks):
            h = mixing_block(h, t, _block_weights(self.params, f"block{j}"))
        return h

    def stage1_logits(self, tokens: np.ndarray) -> Tensor:
        """Student logits [N, K] from [N, 1+n, d] tokens."""
        n, t, _ = np.shape(tokens)
        h = self.trunk(tokens)
        patch_rows = (np.arange(n)[:, None] * t + np.arange(1, t)[None, :]).reshape(-1)
        pooled = T.group_mean(T.take_rows(h, patch_rows), t - 1)
        return pooled @ self.params["head_k.w"] + self.params["head_k.b"]

    def stage2_tokens(self, tokens: np.ndarray) -> Tensor:
        """Projected tokens [N*(1+n), d_v] from [N, 1+n, d] tokens."""
        h = self.trunk(tokens)
        return h @ self.params["head_tok.w"] + self.params["head_tok.b"]


def project_vision(g: VisionProjector, t: TokenGrid, mode: str = "stage1"):
    """Stage-1: K-vector of student logits. Stage-2: TokenGrid of width d_v."""
    if t.width != g.d_in:
        raise ConfigurationError(f"token width {t.width} does not match projector input {g.d_in}")
    tok = t.tokens()[None]
    if mode == "stage1":
        return T.reshape(g.stage1_logits(tok), (g.k_out,))
    if mode == "stage2":
        out = g.stage2_tokens(tok)
        n = tok.shape[1]
        return TokenGrid(T.take_rows(out, 0), T.take_rows(out, np.arange(1, n)), t.grid)
    raise ConfigurationError(f"unknown projection mode {mode!r}")


class TextProjector:
    """Trainable G_t: a single bias-free linear map d_t -> 2*d_v."""

    def __init__(self, d_t: int, d_out: int, seed: int = 0, init: str = "random"):
        self.d_t, self.d_out = d_t, d_out
        if init == "random":
            w = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(d_t), (d_t, d_out))
        elif init == "zeros":
            w = np.zeros((d_t, d_out))
        elif init == "identity":
            w = np.eye(d_t, d_out)
        else:
            raise ConfigurationError(f"unknown init {init!r}")
        self.params = {"w": Tensor(w, requires_grad=True)}

    def parameters(self) -> list[Tensor]:
        return [self.params["w"]]

    def __call__(self, z) -> Tensor:
        z = T._as_tensor(z)
        if z.shape[-1] != self.d_t:
            raise ConfigurationError(f"text projector expects width {self.d_t}, got {z.shape[-1]}")
        if z.ndim == 1:
            return T.reshape(T.reshape(z, (1, self.d_t)) @ self.params["w"], (self.d_out,))
        return z @ self.params["w"]
