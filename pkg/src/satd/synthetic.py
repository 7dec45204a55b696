"""Seed-deterministic paired MS/RGB scenes with captions.

Bands 0-2 are an RGB scene; every band >= 3 is a fixed saturating function of
the RGB bands at the same pixel, so spectral content is recoverable from RGB.
Each scene is one latent class (base palette) with two within-class
attributes: a tone (brightness offset) and an accent cover fraction, rendered
as a per-pixel blend toward the class accent colour so that every crop of a
scene carries the same cover.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

CLASSES = [
    # name, base colour, accent noun, accent colour
    ("forest", (0.13, 0.36, 0.16), "clearings", (0.62, 0.55, 0.30)),
    ("river", (0.14, 0.28, 0.52), "sandbanks", (0.80, 0.72, 0.52)),
    ("residential", (0.58, 0.52, 0.50), "rooftops", (0.72, 0.22, 0.16)),
    ("farmland", (0.56, 0.54, 0.20), "hedgerows", (0.12, 0.30, 0.10)),
    ("desert", (0.82, 0.66, 0.42), "dunes", (0.95, 0.86, 0.66)),
    ("wetland", (0.22, 0.40, 0.36), "pools", (0.10, 0.16, 0.34)),
    ("industrial", (0.44, 0.44, 0.46), "tanks", (0.92, 0.92, 0.90)),
    ("pasture", (0.40, 0.60, 0.26), "paddocks", (0.58, 0.48, 0.28)),
]
TONES = [("shadowed", -0.12), ("dim", -0.04), ("sunlit", 0.04), ("bright", 0.12)]
COVERS = [("no", 0.0), ("sparse", 0.2), ("scattered", 0.4), ("dense", 0.6)]
CAPTION_TEMPLATES = ("a satellite image of {cls}", "{tone} {cls} with {cover} {accent}")
LABEL_TEMPLATE = CAPTION_TEMPLATES[0]
RGB_BANDS = (0, 1, 2)
EVAL_EVERY = 4
FIELD_AMP = 0.03
PIXEL_NOISE = 0.01


def band_coefficients(band: int) -> tuple[np.ndarray, float]:
    """Fixed (weights, offset) defining MS band ``band`` (>= 3) from RGB."""
    rng = np.random.default_rng(1000 + band)
    return rng.normal(0.0, 4.0, 3), float(rng.normal(0.0, 1.0))


def band_function(band: int, rgb: np.ndarray) -> np.ndarray:
    """sigmoid(a . rgb + c) evaluated per pixel for a [3, H, W] array."""
    a, c = band_coefficients(band)
    return 1.0 / (1.0 + np.exp(-(np.tensordot(a, rgb, axes=(0, 0)) + c)))


def smooth_field(rng: np.random.Generator, h: int, w: int, n_waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    field = np.zeros((h, w))
    for _ in range(n_waves):
        theta = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 2.5) / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return field / np.sqrt(n_waves / 2)


def caption_for(class_idx: int, tone: int, cover: int) -> list[str]:
    name, _, accent, _ = CLASSES[class_idx]
    return [t.format(cls=name, tone=TONES[tone][0], cover=COVERS[cover][0], accent=accent)
            for t in CAPTION_TEMPLATES]


def render_scene(rng: np.random.Generator, class_idx: int, tone: int, cover: int,
                 c_ms: int, h: int, w: int) -> np.ndarray:
    _, base, _, accent = CLASSES[class_idx]
    shift = TONES[tone][1]
    rgb = np.empty((3, h, w))
    for ch in range(3):
        rgb[ch] = base[ch] + shift + FIELD_AMP * smooth_field(rng, h, w)
    frac = COVERS[cover][1]
    for ch in range(3):
        rgb[ch] += frac * (accent[ch] - base[ch])
    rgb += PIXEL_NOISE * rng.standard_normal(rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    out = np.empty((c_ms, h, w))
    out[:3] = rgb
    for b in range(3, c_ms):
        out[b] = band_function(b, rgb)
    return out


@dataclass
class SyntheticDataset:
    images: np.ndarray
    manifest: dict

    @property
    def items(self) -> list[dict]:
        return self.manifest["items"]

    def labels(self) -> np.ndarray:
        return np.array([it["label"] for it in self.items], dtype=np.int64)

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, it in enumerate(self.items) if it["split"] == split], dtype=np.int64)

    def stats(self, modality: str):
        s = self.manifest["stats"][modality]
        return np.array(s["mean"]), np.array(s["std"])


def _channel_stats(x: np.ndarray):
    if x.shape[0] == 0:
        return [0.0] * x.shape[1], [1.0] * x.shape[1]
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std > 1e-6, std, 1.0)
    return mean.tolist(), std.tolist()


def gen_synthetic(n: int, c_ms: int = 6, h: int = 64, w: int = 64, seed: int = 0,
                  n_classes: int = 4, out_dir=None) -> SyntheticDataset:
    """Generate ``n`` scenes; item i has attribute combination ``i mod (classes*16)``.

    Every fourth repetition of a combination is placed in the eval split.
    When ``out_dir`` is given the dataset is also written there.
    """
    if c_ms < 4:
        raise ConfigurationError(f"need at least 4 MS bands, got {c_ms}")
    if not 2 <= n_classes <= len(CLASSES):
        raise ConfigurationError(f"n_classes must be in [2, {len(CLASSES)}]")
    n_combos = n_classes * len(TONES) * len(COVERS)
    images = np.empty((n, c_ms, h, w))
    items = []
    for i in range(n):
        combo, rep = i % n_combos, i // n_combos
        cls, rest = divmod(combo, len(TONES) * len(COVERS))
        tone, cover = divmod(rest, len(COVERS))
        rng = np.random.default_rng([seed, i])
        images[i] = render_scene(rng, cls, tone, cover, c_ms, h, w)
        items.append({
            "id": f"img{i:06d}",
            "label": cls,
            "class_name": CLASSES[cls][0],
            "tone": tone,
            "cover": cover,
            "combo": combo,
            "split": "eval" if rep % EVAL_EVERY == EVAL_EVERY - 1 else "train",
            "captions": caption_for(cls, tone, cover),
        })
    ms_mean, ms_std = _channel_stats(images)
    rgb_mean, rgb_std = _channel_stats(images[:, list(RGB_BANDS)])
    manifest = {
        "format": "satd-synthetic-1",
        "n": n, "c_ms": c_ms, "height": h, "width": w, "seed": seed,
        "classes": [c[0] for c in CLASSES[:n_classes]],
        "rgb_bands": list(RGB_BANDS),
        "band_functions": {str(b): {"weights": band_coefficients(b)[0].tolist(), "offset": band_coefficients(b)[1]}
                           for b in range(3, c_ms)},
        "stats": {"ms": {"mean": ms_mean, "std": ms_std}, "rgb": {"mean": rgb_mean, "std": rgb_std}},
        "items": items,
    }
    ds = SyntheticDataset(images, manifest)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: SyntheticDataset, out_dir):
    from .stf import stf_write

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stf_write(out / "images.stf", ds.images)
    (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True))


def load_dataset(path) -> SyntheticDataset:
    from .stf import stf_read

    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise DataError(f"{path} is not a dataset directory (no manifest.json)")
    manifest = json.loads((path / "manifest.json").read_text())
    images = stf_read(path / "images.stf")
    return SyntheticDataset(np.asarray(images), manifest)


def mosaic(ds: SyntheticDataset, indices, rng: np.random.Generator):
    """2x2 quadrant mosaic of four scenes with its per-pixel class map."""
    idx = list(indices)
    if len(idx) != 4:
        raise ConfigurationError("a mosaic needs exactly four scenes")
    c, h, w = ds.images.shape[1:]
    hh, hw = h // 2, w // 2
    img = np.empty((c, h, w))
    lab = np.empty((h, w), dtype=np.int64)
    for q, i in enumerate(idx):
        r, col = divmod(q, 2)
        top, left = int(rng.integers(0, h - hh + 1)), int(rng.integers(0, w - hw + 1))
        img[:, r * hh:(r + 1) * hh, col * hw:(col + 1) * hw] = ds.images[i][:, top:top + hh, left:left + hw]
        lab[r * hh:(r + 1) * hh, col * hw:(col + 1) * hw] = ds.items[i]["label"]
    return img, lab
