"""Command-line entry point.

Subcommands cover the whole pipeline: ``make-toy`` (synthetic corpus),
``train`` (two-stage training with ablation switches), ``eval`` (video-level
metrics), ``robust`` (perturbation grid), ``export`` (embedding point files
and saliency overlays).

Exit codes: 0 success, 1 usage error (bad flags, refused overwrite,
malformed config), 2 runtime failure. ``PROMPTSEP_OUT`` sets the default
output root for commands that write artifacts.
"""

from __future__ import annotations

import argparse
import importlib
import json
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from .config import ConfigBundle, ConfigError, bundle_from_dict, load_config

ADAPTER_MODES = ("none", "standard", "plugin")


class UsageError(Exception):
    """Invocation problem detected after argparse; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; the contract here is 1
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_root() -> str:
    return os.environ.get("PROMPTSEP_OUT", ".")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promptsep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                            parser_class=_Parser)

    p = sub.add_parser("make-toy",
                       help="generate the synthetic toy corpus")
    p.add_argument("--root", default=None, help="output directory (default: <out-root>/toy)")
    p.add_argument("--n-videos", type=int, default=80)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", default=None, help="flat YAML config; defaults if omitted")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=None, help="default: <out-root>/run")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--skip-pretrain", action="store_true",
                   help="stage 2 only (pretraining ablation)")
    p.add_argument("--no-dis", action="store_true", help="drop the disentanglement term")
    p.add_argument("--no-div", action="store_true", help="drop the prompt-diversity term")
    p.add_argument("--no-align", action="store_true", help="drop the alignment term")
    p.add_argument("--no-con", action="store_true", help="drop the contrastive term")
    p.add_argument("--fusion", choices=("attention", "concat"), default="attention")
    p.add_argument("--adapter", choices=ADAPTER_MODES, default="standard")
    p.add_argument("--adapter-module", default=None,
                   help="plugin adapter factory as 'package.module:attr'")
    p.add_argument("--context-len", type=int, default=None, help="override prompt length k")
    p.add_argument("--augment", action="store_true", help="train-time augmentation")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="allow overwriting checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="video-level AUC/AP/EER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None, help="report JSON path (default: stdout only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robust", help="perturbation-robustness grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--families", nargs="*", default=None,
                   help="subset of perturbation families (default: all six)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="grid JSON path (default: <out-root>/robust.json)")
    p.add_argument("--plot", default=None, help="plot PNG path (optional)")
    p.set_defaults(func=cmd_robust)

    p = sub.add_parser("export",
                       help="embedding point files / saliency overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("embeddings", "saliency"), required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--which", choices=("backbone", "specific", "irrelevant"),
                   default="specific", help="feature for --kind embeddings")
    p.add_argument("--image", default=None, help="image path for --kind saliency")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output file path")
    p.add_argument("--plot", default=None, help="projection plot path (embeddings)")
    p.set_defaults(func=cmd_export)
    return parser


def _load_bundle(args) -> ConfigBundle:
    bundle = load_config(args.config) if args.config else bundle_from_dict({})
    model, train = bundle.model, bundle.train
    if getattr(args, "context_len", None) is not None:
        model = replace(model, context_len=args.context_len)
    if getattr(args, "adapter", "standard") == "none":
        model = replace(model, adapter_rank=0)
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    bundle = ConfigBundle(model=model, loss=bundle.loss, train=train)
    bundle.validate()
    return bundle


def _plugin_factory(spec: Optional[str]):
    if spec is None:
        raise UsageError("--adapter plugin requires --adapter-module 'pkg.mod:attr'")
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise UsageError(f"malformed --adapter-module {spec!r}, expected 'pkg.mod:attr'")
    try:
        module = importlib.import_module(module_name)
        return getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise UsageError(f"cannot load adapter factory {spec!r}: {exc}") from exc


def _guard_overwrite(paths: Sequence[str], force: bool) -> None:
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise UsageError(
            f"refusing to overwrite checkpoint(s) {existing}; pass --force to allow"
        )


def cmd_make_toy(args) -> int:
    from .data import make_toy_dataset

    root = args.root or os.path.join(_out_root(), "toy")
    manifest = make_toy_dataset(root, n_videos=args.n_videos,
                                frames_per_video=args.frames, seed=args.seed)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    from .data import BatchStream, load_manifest, split_samples
    from .model import build_toy_detector
    from .trainer import run_stage1, run_stage2

    bundle = _load_bundle(args)
    seed = bundle.train.seed
    out_dir = args.out_dir or os.path.join(_out_root(), "run")
    os.makedirs(out_dir, exist_ok=True)
    stage1_path = os.path.join(out_dir, "stage1.ckpt")
    stage2_path = os.path.join(out_dir, "stage2.ckpt")
    if args.resume is None:
        targets = [stage2_path] if args.skip_pretrain else [stage1_path, stage2_path]
        _guard_overwrite(targets, args.force)

    model = build_toy_detector(bundle.model, seed=seed, fusion=args.fusion)
    if args.adapter == "plugin":
        factory = _plugin_factory(args.adapter_module)
        model.encoder.inject_adapters(bundle.model.adapter_rank, seed=seed * 10 + 2,
                                      factory=factory)

    samples = split_samples(load_manifest(args.manifest), "train")
    disabled = [name for name, off in (("dis", args.no_dis), ("div", args.no_div),
                                       ("align", args.no_align), ("con", args.no_con)) if off]

    resume_stage = None
    if args.resume is not None:
        from .checkpoint import load_archive
        _, meta = load_archive(args.resume)
        resume_stage = int(meta.get("state", {}).get("stage", 0))
        if resume_stage not in (1, 2):
            raise UsageError(f"cannot infer stage from checkpoint {args.resume}")

    stream1 = BatchStream(samples, bundle.train.batch_size, seed=seed * 100 + 11,
                          augment_train=args.augment)
    stream2 = BatchStream(samples, bundle.train.batch_size, seed=seed * 100 + 12,
                          augment_train=args.augment)
    log1 = os.path.join(out_dir, "stage1_log.jsonl")
    log2 = os.path.join(out_dir, "stage2_log.jsonl")

    if args.skip_pretrain and resume_stage != 2:
        run_stage2(model, stream2, bundle, stage2_path, stage1_checkpoint=None,
                   log_path=log2, disabled=disabled)
    elif resume_stage == 2:
        run_stage2(model, stream2, bundle, stage2_path, log_path=log2,
                   resume_path=args.resume, disabled=disabled)
    else:
        if resume_stage == 1:
            run_stage1(model, stream1, bundle, stage1_path, log_path=log1,
                       resume_path=args.resume)
        else:
            run_stage1(model, stream1, bundle, stage1_path, log_path=log1)
        run_stage2(model, stream2, bundle, stage2_path, stage1_checkpoint=stage1_path,
                   log_path=log2, disabled=disabled)
    print(f"wrote {stage2_path}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest, split_samples
    from .evaluation import evaluate
    from .trainer import load_model_for_eval

    model, meta = load_model_for_eval(args.checkpoint)
    samples = split_samples(load_manifest(args.manifest), args.split)
    report = evaluate(model, samples, config_hash=meta.get("config_hash", ""))
    line = json.dumps(report.to_dict(), sort_keys=True)
    print(line)
    if args.out:
        report.save(args.out)
    return 0


def cmd_robust(args) -> int:
    from .data import PERTURB_FAMILIES, load_manifest, split_samples
    from .evaluation import robustness_sweep
    from .trainer import load_model_for_eval

    model, _ = load_model_for_eval(args.checkpoint)
    samples = split_samples(load_manifest(args.manifest), args.split)
    families = tuple(args.families) if args.families else PERTURB_FAMILIES
    result = robustness_sweep(model, samples, families=families, seed=args.seed,
                              plot_path=args.plot)
    out = args.out or os.path.join(_out_root(), "robust.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {out}")
    return 0


def cmd_export(args) -> int:
    from .data import load_image, load_manifest, split_samples
    from .evaluation import export_embeddings, export_saliency
    from .trainer import load_model_for_eval

    model, _ = load_model_for_eval(args.checkpoint)
    if args.kind == "embeddings":
        if args.manifest is None:
            raise UsageError("--kind embeddings requires --manifest")
        samples = split_samples(load_manifest(args.manifest), args.split)
        out = args.out or os.path.join(_out_root(), f"points_{args.which}.tsv")
        export_embeddings(model, samples, which=args.which, out_path=out,
                          seed=args.seed, plot_path=args.plot)
    else:
        if args.image is None:
            raise UsageError("--kind saliency requires --image")
        out = args.out or os.path.join(_out_root(), "saliency.png")
        export_saliency(model, load_image(args.image), out)
    print(f"wrote {out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    import torch

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(1)  # keeps reductions bit-stable across machines
    try:
        return int(args.func(args) or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
