"""Command-line entry point: ``satd <verb> [--config PATH] [--seed N] [--out DIR] [--checkpoint PATH]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .checkpoint import emit_prompt_manifest, emit_text_bank, save_text_bank
from .config import RunConfig, config_from_dict, load_config
from .errors import ConfigurationError, SatdError
from .pipeline import pooling_sweep, run_eval, run_stage, viz_similarity
from .sgi import prompt_manifest
from .synthetic import gen_synthetic, load_dataset

VERBS = ("gen", "embed-bank", "train-srd", "train-sgi", "eval-zeroshot", "eval-retrieval",
         "eval-probe", "eval-segment", "viz-sim")


def _parse_set(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(args, stage: str) -> RunConfig:
    """Config file, then ``--set`` overrides, then the dedicated flags."""
    base = load_config(args.config).to_dict() if args.config else {}
    base.update(_parse_set(args.set))
    base["stage"] = stage
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("checkpoint", "checkpoint"), ("data", "data_dir"),
                      ("bank", "text_bank")):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return config_from_dict(base)


def _thread_limit():
    raw = os.environ.get("SATD_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"SATD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"SATD_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="satd", description="Spectral distillation and text alignment at desk scale.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", help="flat JSON run config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--checkpoint", help="checkpoint directory to load")
        s.add_argument("--data", help="dataset directory written by 'gen'")
        s.add_argument("--bank", help="text bank directory written by 'embed-bank'")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if verb == "embed-bank":
            s.add_argument("--manifest", help="prompt manifest JSON (default: built from --data captions)")
            s.add_argument("--mode", choices=("pseudo", "import"), default="pseudo")
            s.add_argument("--import-dir", help="directory of <prompt_id>.stf token matrices")
        if verb == "eval-retrieval":
            s.add_argument("--pooling-sweep", action="store_true",
                           help="train and evaluate Stage 2 once per text pooling mode")
        if verb == "viz-sim":
            s.add_argument("--image", type=int, default=0, help="dataset image index")
            s.add_argument("--text", help="caption to compare against (default: the image's label prompt)")
    return p


def _print_reports(reports):
    for r in reports:
        print(f"{r.task:<20} {r.metric:<15} {r.value:.4f}")


def _gen(args):
    cfg = resolve_config(args, "srd")
    cfg.require("out_dir")
    ds = gen_synthetic(cfg.gen_n, cfg.gen_channels, cfg.gen_height, cfg.gen_width, cfg.seed, cfg.gen_classes,
                       out_dir=cfg.out_dir)
    print(f"wrote {len(ds.items)} scenes to {cfg.out_dir}")


def _embed_bank(args):
    cfg = resolve_config(args, "sgi")
    cfg.require("out_dir")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        rows = json.loads(Path(args.manifest).read_text())
    else:
        cfg.require("data_dir")
        ds = load_dataset(cfg.data_dir)
        rows = prompt_manifest([c for it in ds.items for c in it["captions"]])
    emit_prompt_manifest(rows, out / "prompt_manifest.json")
    bank = emit_text_bank(rows, cfg.text_dim, args.mode, cfg.text_seed, args.import_dir)
    save_text_bank(bank, out)
    print(f"wrote {len(bank)} prompts ({bank.source}) to {out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            verb = args.verb
            if verb == "gen":
                _gen(args)
            elif verb == "embed-bank":
                _embed_bank(args)
            elif verb == "train-srd":
                res = run_stage(resolve_config(args, "srd"))
                print(f"final loss {res.metrics[-1][1]:.4f}; checkpoint {res.checkpoint}")
            elif verb == "train-sgi":
                res = run_stage(resolve_config(args, "sgi"))
                print(f"final loss {res.metrics[-1][1]:.4f}; checkpoint {res.checkpoint}")
            elif verb == "eval-probe":
                _print_reports(run_stage(resolve_config(args, "probe")).reports)
            elif verb == "eval-retrieval" and args.pooling_sweep:
                summary = pooling_sweep(resolve_config(args, "eval"))
                for mode, reps in summary["reports"].items():
                    print(f"{mode:<5} class mAP {reps['retrieval_class']['value']:.4f}")
                if not summary["mean_not_worse"]:
                    print("note: mean pooling scored below a single-token variant (informational)")
            elif verb in ("eval-zeroshot", "eval-retrieval", "eval-segment"):
                task = verb.split("-", 1)[1]
                _print_reports(run_eval(resolve_config(args, "eval"), tasks=(task,)).reports)
            elif verb == "viz-sim":
                sim, record = viz_similarity(resolve_config(args, "eval"), args.image, args.text)
                print(f"similarity map {sim.shape[0]}x{sim.shape[1]}, range [{record['min']:.3f}, {record['max']:.3f}]")
    except SatdError as exc:
        print(f"satd {args.verb}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) or isinstance(exc.__cause__, ConfigurationError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
