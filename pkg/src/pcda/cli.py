"""Command-line entry point: ``pcda <verb> [flags] [dotted.key=value ...]``."""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import pipeline as P
from .datasets import DATA_ROOT_ENV, CloudArrays, DatasetManifest, load_arrays, make_toy_pair
from .evalreport import compare_scenarios, evaluate, export_clouds, save_report, scenario_label
from .geometry import DomainTag
from .nets import ModelBundle, load_checkpoint

log = logging.getLogger("pcda")

VERBS = ("make-toy", "train-ae", "train-vae", "train-cls", "train-gan", "generate", "adapt-eval",
         "run-all", "export-viz")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_INVALID)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcda", description="Latent-GAN domain adaptation for point-cloud classification.")
    parser.add_argument("verb", choices=VERBS, help="stage to run")
    parser.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                        help="dotted config overrides, e.g. weights.alpha=0.5 schedules.gan.epochs=10")
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--scenario", help="named preset: toy, toy-quick, M-S, M-S*, S-M, S-S*, S*-M, S*-S")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--data-root", type=Path, default=os.environ.get(DATA_ROOT_ENV),
                        help=f"dataset root (default ${DATA_ROOT_ENV})")
    parser.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    parser.add_argument("--ablation", choices=sorted(P.ABLATIONS), help="loss ablation for GAN stages")
    parser.add_argument("--workers", type=int, default=1, help="data-loading threads")
    parser.add_argument("--samples", type=int, default=4, help="objects exported by export-viz")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> P.AdaptationConfig:
    if args.config is not None:
        config = P.AdaptationConfig.load(args.config)
    elif args.scenario is not None:
        config = P.AdaptationConfig.preset(args.scenario)
    else:
        config = P.AdaptationConfig.preset("toy")
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.ablation is not None:
        config = replace(config, ablation=P.Ablation.named(args.ablation, config.ablation.fake_term),
                         ablations=(args.ablation,))
    return config.with_overrides(args.overrides)


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def _require_root(args) -> Path:
    if args.data_root is None:
        raise UsageError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
    return args.data_root


def _data(args, config):
    return P.prepare_data(config, _require_root(args), args.workers)


def _load_stage(out: Path, stage: str, what: str) -> ModelBundle:
    path = out / stage / "checkpoint"
    if not (path / "metadata.json").is_file():
        # run-all keeps its checkpoints in the stage cache; take the newest match
        cached = sorted(out.glob(f"stages/{stage}-*/checkpoint/metadata.json"), key=lambda p: p.stat().st_mtime)
        if cached:
            path = cached[-1].parent
    if not (path / "metadata.json").is_file():
        raise P.MissingPrerequisite(f"missing prerequisite: {what} checkpoint not found at {path}")
    return load_checkpoint(path)


def _pretrained(out: Path, config) -> ModelBundle:
    bundle = ModelBundle(config.net)
    bundle.merge(_load_stage(out, "ae", "autoencoder (run train-ae)"), ("encoder", "decoder"))
    bundle.merge(_load_stage(out, "vae", "mode encoder (run train-vae)"), ("mode_encoder",))
    bundle.merge(_load_stage(out, "cls", "source classifier (run train-cls)"), ("classifier",))
    return bundle


def _ablation_name(config) -> str:
    return config.ablations[0] if len(config.ablations) == 1 else "full"


def cmd_make_toy(args, config):
    if config.toy is None:
        raise UsageError("config has no toy section")
    root = _require_root(args)
    make_toy_pair(config.toy.source, config.toy.target, config.toy.per_class, root, config.cloud_size)
    print(f"toy pair written under {root}")


def cmd_train_ae(args, config):
    res = P.train_autoencoder(config, _data(args, config).source_train, args.out / "ae")
    print(json.dumps(res.to_dict()["report"]))


def cmd_train_vae(args, config):
    res = P.train_vae(config, _data(args, config).source_train, args.out / "vae")
    print(json.dumps(res.to_dict()["report"]))


def cmd_train_cls(args, config):
    res = P.train_classifier(config, _data(args, config).source_train, "source_pretrain", args.out / "cls")
    print(json.dumps(res.metrics))


def cmd_train_gan(args, config):
    pretrained = _pretrained(args.out, config)
    data = _data(args, config)
    name = _ablation_name(config)
    res = P.train_gan(config, data.source_train, data.target_train, pretrained, args.out / f"gan-{name}",
                      P.Ablation.named(name, config.ablation.fake_term))
    print(json.dumps(res.to_dict()["report"]))


def cmd_generate(args, config):
    name = _ablation_name(config)
    bundle = _load_stage(args.out, f"gan-{name}", f"GAN ({name}; run train-gan)")
    data = _data(args, config)
    manifest, _ = P.generate_synthetic(config, bundle, data.source_train, config.samples_per_object,
                                       args.out, f"synthetic-{name}", data.classes)
    print(f"{manifest.total('train')} synthetic clouds in {args.out / f'synthetic-{name}'}")


def cmd_adapt_eval(args, config):
    name = _ablation_name(config)
    data = _data(args, config)
    cls = _load_stage(args.out, "cls", "source classifier (run train-cls)")
    syn_dir = args.out / f"synthetic-{name}"
    if not (syn_dir / "manifest.json").is_file():
        raise P.MissingPrerequisite(f"missing prerequisite: synthetic dataset not found at {syn_dir} (run generate)")
    manifest = DatasetManifest.load(syn_dir / "manifest.json")
    manifest.cloud_size = config.cloud_size
    synth = load_arrays(args.out, manifest, "train", DomainTag.SYNTHETIC, args.workers)
    train_set = synth if config.downstream_data == "synthetic" else data.source_train.concat(synth)
    down = P.train_classifier(config, train_set, "downstream_synthetic", args.out / f"downstream-{name}")
    metrics = {"scenario": scenario_label(config.scenario), "seed": config.seed, "classes": data.classes,
               "results": {}}
    for row, bundle in (("w/o Adapt", cls), (P.ABLATION_ROWS[name], down.bundle)):
        acc, cm = evaluate(bundle, data.target_test)
        metrics["results"][row] = P._result_entry(acc, cm)
    _finish(args.out, metrics, data.classes)


def cmd_run_all(args, config):
    metrics = P.run_scenario(config, args.out, _require_root(args), cache_dir=args.out / "stages",
                             workers=args.workers)
    _finish(args.out, metrics, metrics["classes"])


def cmd_export_viz(args, config):
    name = _ablation_name(config)
    bundle = _load_stage(args.out, f"gan-{name}", f"GAN ({name}; run train-gan)")
    data = _data(args, config)
    k = min(args.samples, len(data.source_train))
    # spread the exported objects over the classes
    idx = np.linspace(0, len(data.source_train) - 1, k).round().astype(int)
    sub = data.source_train.subset(idx)
    synth = P.synthesize(config, bundle, sub, 1)
    groups = {}
    for j, i in enumerate(idx):
        same = np.flatnonzero(data.target_train.labels == data.source_train.labels[i])
        groups[f"obj{int(i):05d}"] = {"source": sub.points[j], "synthetic": synth.points[j],
                                      "target": data.target_train.points[same[0]] if same.size else sub.points[j]}
    paths = export_clouds(groups, "both", args.out / "viz")
    print(f"{len(paths)} files in {args.out / 'viz'}")


def _finish(out: Path, metrics: dict, classes) -> None:
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    save_report(metrics, out, classes)
    print(compare_scenarios([metrics]).text, end="")


COMMANDS = {
    "make-toy": cmd_make_toy,
    "train-ae": cmd_train_ae,
    "train-vae": cmd_train_vae,
    "train-cls": cmd_train_cls,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "adapt-eval": cmd_adapt_eval,
    "run-all": cmd_run_all,
    "export-viz": cmd_export_viz,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        config = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.json").write_text(config.to_json())
        COMMANDS[args.verb](args, config)
    except P.TrainingAborted as exc:
        print(f"pcda: training aborted: {exc} (last finite checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_ABORT
    except (UsageError, P.MissingPrerequisite, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"pcda: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
