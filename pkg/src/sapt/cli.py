"""``sap`` command line: describe, train, eval, report.

Every run resolves a single hashed configuration (file + preset + overrides)
and embeds the hash in its artifacts. The ``toy`` preset bundles the seeded
toy encoder, a synthetic dataset, and a miniature catalog so the full
pipeline runs with zero external assets.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .catalog import CatalogError, build_catalog, catalog_hash, load_catalog, save_catalog
from .datasets import (
    ManifestError,
    generate_toy_dataset,
    load_manifest,
    sample_k_shot,
    toy_catalog,
)
from .descriptions import CACHE_DIR_ENV, DescriptionProviderError, LLMClient, fetch_descriptions
from .encoder import build_toy_encoder
from .protocols import (
    PROTOCOLS,
    EvalContext,
    evaluate_b2n,
    evaluate_cross_dataset,
    evaluate_fewshot,
    evaluate_gzs,
    evaluate_ovc,
    load_split_file,
    save_report,
    split_base_novel,
)
from .runconfig import ConfigError, resolve_config
from .trainer import (
    CheckpointError,
    NonFiniteLossError,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _add_common_flags(parser, *names):
    flags = {
        "manifest": dict(type=Path, help="dataset manifest JSON"),
        "catalog": dict(type=Path, help="description catalog JSON"),
        "config": dict(type=Path, help="run config JSON"),
        "set": dict(action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)"),
        "out": dict(type=Path, help="output path"),
        "checkpoint": dict(type=Path, help="prompt checkpoint JSON"),
        "protocol": dict(type=str, help=f"evaluation protocol: {', '.join(PROTOCOLS)}"),
        "seed": dict(type=int, help="seed override for encoder/train/eval"),
        "variant": dict(type=str, help="alignment variant"),
        "preset": dict(type=str, help="bundled preset (toy)"),
        "workers": dict(type=int, help="evaluation fan-out cap"),
        "cached-only": dict(action="store_true", help="never call the provider; use the cache"),
    }
    for name in names:
        parser.add_argument(f"--{name}", **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    describe = sub.add_parser("describe", help="generate or refresh a description catalog")
    _add_common_flags(describe, "manifest", "out", "config", "set", "cached-only")

    train_p = sub.add_parser("train", help="tune prompts on a dataset")
    _add_common_flags(train_p, "manifest", "catalog", "config", "set", "out", "seed", "variant", "preset", "protocol")

    eval_p = sub.add_parser("eval", help="run an evaluation protocol")
    _add_common_flags(
        eval_p, "manifest", "catalog", "config", "set", "out", "checkpoint",
        "protocol", "seed", "variant", "preset", "workers",
    )

    report_p = sub.add_parser("report", help="aggregate reports across seeds")
    report_p.add_argument("reports", nargs="+", type=Path, help="report JSON files")
    _add_common_flags(report_p, "out")
    return parser


# -- describe --------------------------------------------------------------------


def cmd_describe(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except (ManifestError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    config = resolve_config(args.config, args.set)
    llm = None
    if not args.cached_only:
        endpoint = config.values["llm"]["endpoint"]
        model = config.values["llm"]["model"]
        if endpoint and model:
            llm = LLMClient(endpoint, model)
    cache_dir = os.environ.get(CACHE_DIR_ENV, ".sap-cache")
    classes = {}
    try:
        for name in manifest.classes:
            classes[name] = fetch_descriptions(name, llm, cache_dir, manifest.dataset_id)
    except DescriptionProviderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    catalog = build_catalog(manifest.dataset_id, classes)
    save_catalog(catalog, args.out)
    for name in manifest.classes:
        print(f"{name}: {len(catalog.descriptions_for(name))} descriptions")
    print(f"catalog written to {args.out} ({catalog.n_descriptions} unique descriptions)")
    return EXIT_OK


# -- train -----------------------------------------------------------------------


def _resolve_assets(config, args, split="train"):
    """Bundle, catalog, and manifests for a run (preset or file-backed)."""
    encoder_config = config.encoder_config()
    bundle = build_toy_encoder(encoder_config)
    if config.values["preset"] == "toy":
        catalog = toy_catalog()
        ds = config.values["dataset"]
        train_m, test_m = generate_toy_dataset(
            seed=config.values["eval"]["seed"],
            bundle=bundle,
            catalog=catalog,
            train_per_class=ds["train_per_class"],
            test_per_class=ds["test_per_class"],
            noise=ds["noise"],
        )
        return bundle, catalog, train_m, test_m
    manifest_path = args.manifest or config.values["dataset"]["manifest"]
    catalog_path = args.catalog or config.values["dataset"]["catalog"]
    if manifest_path is None or catalog_path is None:
        raise ConfigError("need --manifest and --catalog (or --preset toy)")
    manifest = load_manifest(manifest_path)
    catalog = load_catalog(catalog_path)
    test_path = config.values["dataset"]["test_manifest"]
    test_m = load_manifest(test_path) if test_path else manifest
    return bundle, catalog, manifest, test_m


def _training_split(config, classes):
    split_file = config.values["eval"]["split_file"]
    if config.protocol in ("fewshot", "xdataset"):
        return list(classes), None
    if split_file:
        split = load_split_file(split_file, list(classes), seed=config.values["eval"]["seed"],
                                k_shots=config.values["eval"]["k_shots"])
    else:
        split = split_base_novel(list(classes), seed=config.values["eval"]["seed"])
    return list(split.base_classes), split


def cmd_train(args) -> int:
    try:
        config = resolve_config(args.config, args.set, preset=args.preset, seed=args.seed,
                                variant=args.variant, protocol=args.protocol)
        bundle, catalog, train_m, _ = _resolve_assets(config, args)
        train_classes, _ = _training_split(config, train_m.classes)
        shots = sample_k_shot(train_m, train_classes, config.values["eval"]["k_shots"],
                              config.values["eval"]["seed"])
        train_config = config.train_config()
        template = config.template()
    except (ConfigError, ManifestError, CatalogError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = args.out or Path("sap-run")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        params, history = train(shots, catalog, bundle, train_config, template=template,
                                label_space=train_classes)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    save_checkpoint(params, train_config, out_dir / "checkpoint.json", bundle.config, template)
    write_history(history, out_dir / "history.jsonl")
    final_epoch = [s for s in history.steps if s["epoch"] == history.steps[-1]["epoch"]] if history.steps else []
    print(f"config_hash={config.config_hash}")
    print(f"trainable_parameters={params.num_parameters()}")
    if final_epoch:
        for key in ("l_ce", "l_steer_v", "l_steer_t", "total"):
            print(f"final_{key}={float(np.mean([s[key] for s in final_epoch]))!r}")
        print(f"final_train_accuracy={history.epoch_accuracy[-1]!r}")
    print(f"checkpoint written to {out_dir / 'checkpoint.json'}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        config = resolve_config(args.config, args.set, preset=args.preset, seed=args.seed,
                                variant=args.variant, protocol=args.protocol, workers=args.workers)
        protocol = config.protocol
        if protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required for eval")
        bundle, catalog, train_m, test_m = _resolve_assets(config, args)
        checkpoint = load_checkpoint(args.checkpoint, bundle.config)
        if not (set(test_m.classes) & set(catalog.entries)):
            raise ConfigError(
                f"catalog {catalog.dataset_id!r} shares no classes with dataset {test_m.dataset_id!r}"
            )
    except (ConfigError, ManifestError, CatalogError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    ctx = EvalContext(
        catalog=catalog,
        bundle=bundle,
        params=checkpoint.params,
        variant=config.values["train"]["variant"],
        template=checkpoint.template,
        workers=config.values["eval"]["workers"],
        metadata={
            "config_hash": config.config_hash,
            "checkpoint_hash": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(),
            "eval_seed": config.values["eval"]["seed"],
            "train_seed": checkpoint.seed,
        },
    )
    _, split = _training_split(config, test_m.classes)
    if split is None:
        split = split_base_novel(list(test_m.classes), seed=config.values["eval"]["seed"])
    if protocol == "b2n":
        report = evaluate_b2n(test_m, split, ctx)
    elif protocol == "gzs":
        report = evaluate_gzs(test_m, split, ctx)
    elif protocol == "ovc":
        report = evaluate_ovc(test_m, split, ctx)
    elif protocol == "xdataset":
        report = evaluate_cross_dataset(test_m, ctx)
    else:
        report = evaluate_fewshot(test_m, list(test_m.classes), ctx)

    out_path = args.out or Path(f"report-{protocol}.json")
    save_report(report, out_path)
    for name in sorted(report.metrics):
        print(f"{name}={report.metrics[name]!r}")
    print(f"report written to {out_path}")
    return EXIT_OK


# -- report ----------------------------------------------------------------------


def cmd_report(args) -> int:
    loaded = []
    try:
        for path in args.reports:
            loaded.append(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    protocols = {r.get("protocol") for r in loaded}
    if len(protocols) != 1:
        print(f"error: mixed protocols in aggregation: {sorted(p or '?' for p in protocols)}", file=sys.stderr)
        return EXIT_USAGE
    metric_names = sorted({name for r in loaded for name in r["metrics"]})
    aggregate = {
        "protocol": protocols.pop(),
        "num_reports": len(loaded),
        "metrics": {name: float(np.mean([r["metrics"][name] for r in loaded if name in r["metrics"]]))
                    for name in metric_names},
        "sources": [str(p) for p in args.reports],
    }
    lines = [f"{'metric':<12} {'mean':>10}", "-" * 23]
    for name in metric_names:
        lines.append(f"{name:<12} {aggregate['metrics'][name]:>10.4f}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        Path(args.out).with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
        print(f"aggregate written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "describe": cmd_describe,
        "train": cmd_train,
        "eval": cmd_eval,
        "report": cmd_report,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
