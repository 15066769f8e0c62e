"""Command-line entry point: ``mdse <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, TrainConfig, apply_overrides, load_config, parse_kv

log = logging.getLogger("mdse")


def _emit(report: dict, out_dir: str | None, name: str) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text + "\n", encoding="utf-8")
    print(text)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, parse_kv("\n".join(args.set)))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# ---------------------------------------------------------------- subcommands


def cmd_enhance(args) -> int:
    from .enhance import enhance, load_image, save_image, with_stages

    cfg = _config(args).enhance
    cfg = with_stages(cfg, fusion=cfg.fusion and not args.no_fusion, tonemap=cfg.tonemap and not args.no_tonemap,
                      wb=cfg.white_balance and not args.no_wb, sat=cfg.saturation and not args.no_sat)
    save_image(enhance(load_image(args.input), cfg), args.output)
    return 0


def cmd_synth(args) -> int:
    from .data import make_synthetic

    seed = args.seed if args.seed is not None else 0
    man = make_synthetic(args.out, args.records, seed=seed, context_pairs=args.context_pairs)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "records": len(man.records)}))
    return 0


def cmd_train(args) -> int:
    from .data import DatasetManifest
    from .harness import build_vocab, evaluate, save_checkpoint, train

    cfg = _config(args)
    man = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(man)
    vocab.save(out / "vocab.txt")
    res = train(man, cfg, trace_path=out / "trace.csv", vocab=vocab)
    save_checkpoint(res, out / "checkpoint", context_categories=man.context_categories)
    report = evaluate(res.model, res.encoded)
    report.pop("captions")
    report.update(initial_loss=res.trace[0][4], final_loss=res.trace[-1][4], steps=cfg.steps,
                  config_hash=cfg.digest())
    _emit(report, args.out, "train_report")
    return 0


def _load(args):
    from .data import DatasetManifest
    from .harness import encode_manifest, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    man = DatasetManifest.load(args.manifest)
    return ckpt, encode_manifest(ckpt.model, man, ckpt.config)


def cmd_caption(args) -> int:
    from .harness import caption_image, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    report = caption_image(args.image, ckpt, args.context, mask_dir=args.mask_dir, image_id=args.image_id)
    _emit(report, args.out, "caption")
    return 0


def cmd_retrieve(args) -> int:
    from .harness import retrieve

    ckpt, encoded = _load(args)
    ks = tuple(int(k) for k in args.k.split(","))
    _emit(retrieve(ckpt.model, encoded, ks), args.out, "retrieval")
    return 0


def cmd_eval(args) -> int:
    from .harness import evaluate

    ckpt, encoded = _load(args)
    full = evaluate(ckpt.model, encoded)
    report = {k: full[k] for k in ("cider", "cider_x10", "r_at", "map")}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "captions.txt").write_text("\n".join(full["captions"]) + "\n", encoding="utf-8")
    _emit(report, args.out, "eval")
    return 0


def cmd_ablate(args) -> int:
    from .data import DatasetManifest
    from .harness import ablate, lora_sweep

    cfg = _config(args)
    man = DatasetManifest.load(args.manifest)
    table = lora_sweep(man, cfg) if args.lora_sweep else ablate(man, cfg)
    _emit(table, args.out, "lora_sweep" if args.lora_sweep else "ablation")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_gradcheck

    report = model_gradcheck(seed=args.seed or 0)
    if not args.verbose:
        report.pop("per_parameter")
    report["passed"] = report["max_rel_error"] < args.tolerance
    _emit(report, args.out, "gradcheck")
    return 0 if report["passed"] else 1


def cmd_paramcount(args) -> int:
    if args.preset == "full":
        from .lora import full_scale_count

        report = full_scale_count()
    else:
        from .decoder import SPECIALS, Vocab
        from .model import MDSE

        cfg = _config(args)
        # placeholder words sized to the configured vocabulary
        n_words = cfg.model.decoder.vocab_size - len(SPECIALS)
        model = MDSE(cfg.model_config(), Vocab(list(SPECIALS) + [f"w{i}" for i in range(n_words)]))
        layout = model.layout()
        report = {"total": model.count_trainable(), "dense": layout.dense,
                  "lora_plan": [[e.target, e.rank, e.alpha] for e in cfg.model.lora_plan]}
    _emit(report, args.out, "paramcount")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mdse", description="Desk-scale captioning model toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("enhance", parents=[common], help="enhance one PNG")
    s.add_argument("input")
    s.add_argument("output")
    for flag in ("fusion", "tonemap", "wb", "sat"):
        s.add_argument(f"--no-{flag}", action="store_true")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic colored-shapes dataset")
    s.add_argument("--records", type=int, default=16)
    s.add_argument("--context-pairs", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train and write checkpoint, trace and vocab")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("caption", parents=[common], help="caption one image")
    s.add_argument("checkpoint")
    s.add_argument("image")
    s.add_argument("--context", required=True)
    s.add_argument("--mask-dir")
    s.add_argument("--image-id")
    s.set_defaults(func=cmd_caption)

    for name, func, helptext in (("retrieve", cmd_retrieve, "image-to-text retrieval report"),
                                 ("eval", cmd_eval, "CIDEr, R@k and mAP report")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("checkpoint")
        s.add_argument("manifest")
        if name == "retrieve":
            s.add_argument("--k", default="1,5,10")
        s.set_defaults(func=func)

    s = sub.add_parser("ablate", parents=[common], help="single-removal ablations or a LoRA (r, alpha) sweep")
    s.add_argument("manifest")
    s.add_argument("--lora-sweep", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every trainable tensor")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("paramcount", parents=[common], help="count trainable parameters")
    s.add_argument("--preset", choices=("full", "desk"), default="full")
    s.set_defaults(func=cmd_paramcount)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.out:
        args.out = "run"
    if args.command == "synth" and not args.out:
        print("synth needs --out", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
