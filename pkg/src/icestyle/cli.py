"""Command-line entry point: synth, stylize, train, eval, experiment, matrix."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import DatasetError, load_manifest
from .experiments.runner import (ARMS, ExperimentSpec, ZeroShotViolation, render_table, run_experiment,
                                 run_matrix, verify_zero_shot)
from .experiments.synth import SynthError, SyntheticDomainParams, gen_synthetic_domains
from .icehrnet import ConfigError, SegConfig, build_model, load_checkpoint, save_checkpoint
from .styletransfer import StyleBank, StyleError, make_backend, stylize_dataset
from .training import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_ZERO_SHOT = 0, 1, 2, 3

log = logging.getLogger("icestyle")


def load_config(path) -> dict:
    """Config file sections: seg_config, train_config, backend, synthetic (all optional)."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    unknown = set(cfg) - {"seg_config", "train_config", "backend", "synthetic"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return cfg


def _seg_config(cfg, num_classes=2) -> SegConfig:
    d = dict(cfg.get("seg_config", {}))
    preset = d.pop("preset", "toy")
    d.setdefault("num_classes", num_classes)
    if preset == "toy":
        return SegConfig.toy(**d)
    if preset == "w48":
        return SegConfig.w48(**d)
    raise ConfigError(f"unknown seg_config preset {preset!r}")


def _train_config(cfg, seed) -> TrainConfig:
    d = dict(cfg.get("train_config", {}))
    d["seed"] = seed
    if d.pop("preset", "desk") == "full":
        return TrainConfig(**d)
    return TrainConfig.desk(**d)


def _backend(cfg, args) -> dict:
    b = dict(cfg.get("backend", {"kind": "statistical"}))
    if getattr(args, "backend", None):
        b["kind"] = args.backend
    if getattr(args, "backend_params", None):
        b["params_path"] = args.backend_params
    return b


def cmd_synth(args, cfg):
    params = dict(cfg.get("synthetic", {}))
    params["seed"] = args.seed
    if args.classes:
        params["num_classes"] = args.classes
    source, target, bank = gen_synthetic_domains(SyntheticDomainParams(**params), args.out)
    print(json.dumps({"source": str(Path(args.out) / "source" / "manifest.json"),
                      "target": str(Path(args.out) / "target" / "manifest.json"),
                      "bank": str(Path(args.out) / "bank" / "bank.json"),
                      "source_samples": len(source.samples), "target_samples": len(target.samples),
                      "bank_classes": sorted(bank.styles)}, indent=2))


def cmd_stylize(args, cfg):
    manifest = load_manifest(args.input)
    bank = StyleBank.load(args.bank) if args.bank else None
    if args.mode != "none" and bank is None:
        raise StyleError(f"--bank is required for mode {args.mode}")
    backend = make_backend(**_backend(cfg, args)) if args.mode != "none" else None
    out = stylize_dataset(manifest, bank, args.mode, backend, seed=args.seed, out_dir=args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "samples": len(out.samples)}))


def cmd_train(args, cfg):
    manifest = load_manifest(args.manifest)
    if manifest.split is not None:
        train_set, val_set = manifest.load("train"), manifest.load("val")
    else:
        train_set, val_set = manifest.load(), []
    model = build_model(_seg_config(cfg, manifest.num_classes), args.seed)
    tcfg = _train_config(cfg, args.seed)
    state = train(model, train_set, val_set, tcfg, out_dir=args.out)
    save_checkpoint(model, Path(args.out) / "model.pt", iteration=state.iteration,
                    extra={"train_config": tcfg.to_dict()})
    print(json.dumps({"checkpoint": str(Path(args.out) / "model.pt"), "best_val_miou": state.best_miou,
                      "final_loss": state.history[-1]["loss"]}))


def cmd_eval(args, cfg):
    model, _ = load_checkpoint(args.checkpoint)
    splits = (args.split,) if args.split else None
    manifest = load_manifest(args.manifest, splits=splits)
    report, _ = evaluate(model, manifest.load(), manifest.num_classes, manifest.class_names)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "metrics.json").write_text(json.dumps(report, indent=2))
    print(json.dumps({k: report[k] for k in ("acc", "miou", "per_class_iou")}, indent=2))


def _spec(args, cfg, mode, out) -> ExperimentSpec:
    return ExperimentSpec(mode=mode, target_manifest=args.target, source_manifest=args.source,
                          style_bank=args.bank, seg_config=_seg_config(cfg), train_config=_train_config(cfg, args.seed),
                          backend=_backend(cfg, args), seed=args.seed, out_dir=str(out))


def cmd_experiment(args, cfg):
    spec = _spec(args, cfg, args.mode, Path(args.out) / args.mode)
    if args.verify_zero_shot:
        print(json.dumps(verify_zero_shot(replace(spec)), indent=2))
    report = run_experiment(spec)
    print(json.dumps({"arm": report["arm"], "miou": report["metrics"]["miou"], "acc": report["metrics"]["acc"]},
                     indent=2))


def cmd_matrix(args, cfg):
    arms = args.arms or list(ARMS)
    specs = [_spec(args, cfg, m, Path(args.out) / m) for m in arms]
    table = run_matrix(specs)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    rows = [{k: v for k, v in r.items() if k != "report"} for r in table["rows"]]
    (Path(args.out) / "matrix.json").write_text(json.dumps({"columns": table["columns"], "rows": rows}, indent=2))
    text = render_table(table)
    (Path(args.out) / "matrix.txt").write_text(text + "\n")
    print(text)
    if any(r["error"] for r in rows):
        return EXIT_VALIDATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="JSON file with seg_config/train_config/backend/synthetic")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="icestyle", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic source/target domains")
    p.add_argument("--classes", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stylize", parents=[common], help="stylize a dataset")
    p.add_argument("--mode", choices=["none", "conventional", "advanced"], required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--backend", choices=["statistical", "neural"], default=None)
    p.add_argument("--backend-params", default=None, help="parameter blob for the neural backend")
    p.add_argument("--in", dest="input", required=True, help="input manifest")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("train", parents=[common], help="train on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    for name, helptext in (("experiment", "run one arm"), ("matrix", "run all arms")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--source", default=None)
        p.add_argument("--target", required=True)
        p.add_argument("--bank", default=None)
        p.add_argument("--backend", choices=["statistical", "neural"], default=None)
        p.add_argument("--backend-params", default=None)
        if name == "experiment":
            p.add_argument("--mode", choices=ARMS, required=True)
            p.add_argument("--verify-zero-shot", action="store_true",
                           help="rerun with target training masks deleted and compare weights")
            p.set_defaults(func=cmd_experiment)
        else:
            p.add_argument("--arms", nargs="+", choices=ARMS, default=None)
            p.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        code = args.func(args, cfg)
        return EXIT_OK if code is None else code
    except ZeroShotViolation as exc:
        print(f"zero-shot contract violation: {exc}", file=sys.stderr)
        return EXIT_ZERO_SHOT
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, StyleError, ConfigError, SynthError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
