"""Checkpoint directories and text-bank files.

A checkpoint is a directory of STF tensors plus ``manifest.json`` holding the
stage, step, config digest and a SHA-256 digest of every tensor file. A text
bank is ``bank.json`` (one row per prompt) plus ``tokens.stf``, the row-wise
concatenation of every entry's [k, d_t] token matrix.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .sgi import INSTRUCTIONS, TextBank, TextEntry, build_prompt, prompt_id, pseudo_embed
from .stf import stf_bytes, stf_read, stf_write

CHECKPOINT_FORMAT = "satd-checkpoint-1"
BANK_FORMAT = "satd-text-bank-1"


def save_checkpoint(path, tensors: dict, stage: str, step: int, config_digest: str, extra: dict | None = None) -> dict:
    """Write ``tensors`` (name -> array) as ``<name>.stf`` files and the manifest; returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name in sorted(tensors):
        blob = stf_bytes(tensors[name])
        stf_write(path / f"{name}.stf", tensors[name])
        digests[name] = hashlib.sha256(blob).hexdigest()
    manifest = {"format": CHECKPOINT_FORMAT, "stage": stage, "step": int(step),
                "config_digest": config_digest, "tensors": digests, "extra": extra or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_checkpoint(path, verify: bool = True) -> tuple[dict, dict]:
    """Return (tensors, manifest); with ``verify`` every file is checked against its digest."""
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise DataError(f"{path} is not a checkpoint (no manifest.json)")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{mf}: unexpected checkpoint format {manifest.get('format')!r}")
    tensors = {}
    for name, digest in manifest["tensors"].items():
        f = path / f"{name}.stf"
        if not f.is_file():
            raise DataError(f"checkpoint {path} is missing tensor file {f.name}")
        if verify and hashlib.sha256(f.read_bytes()).hexdigest() != digest:
            raise DataError(f"checkpoint tensor {f.name} does not match its recorded digest")
        tensors[name] = stf_read(f)
    return tensors, manifest


def emit_prompt_manifest(rows: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(rows, indent=1, sort_keys=True))
    return path


def _check_manifest_rows(rows):
    for r in rows:
        for key in ("prompt_id", "caption", "instruction_index"):
            if key not in r:
                raise DataError(f"prompt manifest row lacks {key!r}: {r}")
        expected = prompt_id(build_prompt(r["caption"], r["instruction_index"]))
        if r["prompt_id"] != expected:
            raise DataError(f"prompt id {r['prompt_id']!r} does not match its caption and instruction")


def emit_text_bank(rows: list[dict], d_t: int, mode: str = "pseudo", seed: int = 0, import_dir=None) -> TextBank:
    """Build a bank from a prompt manifest.

    ``pseudo`` fills every entry with ``pseudo_embed``; ``import`` reads
    ``<import_dir>/<prompt_id>.stf`` token matrices and requires the id sets to
    match exactly.
    """
    _check_manifest_rows(rows)
    entries = {}
    if mode == "pseudo":
        for r in rows:
            prompt = build_prompt(r["caption"], r["instruction_index"])
            k = int(r.get("k") or len(prompt.split()))
            entries[r["prompt_id"]] = TextEntry(pseudo_embed(prompt, d_t, k, seed), r["caption"],
                                                INSTRUCTIONS[r["instruction_index"]], r["instruction_index"])
        return TextBank(entries, d_t, "pseudo")
    if mode != "import":
        raise DataError(f"unknown bank mode {mode!r}")
    if import_dir is None:
        raise DataError("import mode needs a directory of <prompt_id>.stf files")
    import_dir = Path(import_dir)
    wanted = {r["prompt_id"] for r in rows}
    found = {p.stem for p in import_dir.glob("*.stf")}
    missing, unexpected = sorted(wanted - found), sorted(found - wanted)
    if missing or unexpected:
        raise DataError(f"import id mismatch; missing: {missing}; not in manifest: {unexpected}")
    for r in rows:
        tok = stf_read(import_dir / f"{r['prompt_id']}.stf")
        if "k" in r and tok.ndim == 2 and tok.shape[0] != r["k"]:
            raise DataError(f"{r['prompt_id']}: {tok.shape[0]} tokens imported, manifest declares {r['k']}")
        entries[r["prompt_id"]] = TextEntry(tok, r["caption"], INSTRUCTIONS[r["instruction_index"]],
                                            r["instruction_index"])
    return TextBank(entries, d_t, "import")


def save_text_bank(bank: TextBank, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows, mats, offset = [], [], 0
    for pid in sorted(bank.entries):
        e = bank.entries[pid]
        k = e.tokens.shape[0]
        rows.append({"prompt_id": pid, "caption": e.caption, "instruction_index": e.instruction_index,
                     "offset": offset, "k": k})
        mats.append(e.tokens)
        offset += k
    stf_write(path / "tokens.stf", np.concatenate(mats) if mats else np.zeros((0, bank.d_t)))
    meta = {"format": BANK_FORMAT, "d_t": bank.d_t, "source": bank.source, "entries": rows}
    (path / "bank.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_text_bank(path) -> TextBank:
    path = Path(path)
    meta = json.loads((path / "bank.json").read_text())
    if meta.get("format") != BANK_FORMAT:
        raise FormatError(f"{path}: unexpected bank format {meta.get('format')!r}")
    tokens = stf_read(path / "tokens.stf")
    d_t = meta["d_t"]
    if tokens.ndim != 2 or tokens.shape[1] != d_t:
        raise DataError(f"bank tokens have shape {tokens.shape}, expected [*, {d_t}]")
    entries = {}
    for r in meta["entries"]:
        sl = tokens[r["offset"]:r["offset"] + r["k"]]
        if sl.shape[0] != r["k"]:
            raise DataError(f"bank entry {r['prompt_id']} runs past the token file")
        entries[r["prompt_id"]] = TextEntry(sl, r["caption"], INSTRUCTIONS[r["instruction_index"]],
                                            r["instruction_index"])
    return TextBank(entries, d_t, meta.get("source", "file"))
