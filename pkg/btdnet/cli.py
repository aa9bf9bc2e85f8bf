#!/usr/bin/python
# -*- coding: utf-8 -*-
# Copyright (c) 2023, BTDNet contributors
#
# Permission to use, copy, modify, and/or distribute this software for any purpose
# with or without fee is hereby granted, provided that the above copyright notice
# and this permission notice appear in all copies.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES WITH
# REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF MERCHANTABILITY AND
# FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR ANY SPECIAL, DIRECT, INDIRECT,
# OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES WHATSOEVER RESULTING FROM LOSS OF USE,
# DATA OR PROFITS, WHETHER IN AN ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS
# ACTION, ARISING OUT OF OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS
# SOFTWARE.

from argparse import ArgumentParser, BooleanOptionalAction, Namespace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import os
import sys

from btdnet.data import (PREP_META_NAME, Manifest, ScanDataset, dataset_stats, prep_root_of, preprocess_dataset,
                         write_report)
from btdnet.evaluation import aggregate_folds, evaluate_fold, write_eval_report
from btdnet.network import restore_model
from btdnet.selftest import gradcheck_report, run_selftest
from btdnet.support import (CONFIG_PATH, BTDNetError, FileManager, InvalidParameter, ManifestMismatch, config_digest,
                            load_config)
from btdnet.synth import LEDGER_NAME, SynthConfig, generate_synthetic, ledger_totals
from btdnet.training import DTYPES, FoldSplit, Trainer, stratified_kfold


def _overrides(args:Namespace) -> Dict[str, Any]:
    overrides = dict()
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = overrides["synth.seed"] = args.seed
    if getattr(args, "n", None) is not None:
        overrides["synth.num_scans"] = args.n
    if getattr(args, "backbone", None) is not None:
        overrides["network.backbone"] = args.backbone
    if getattr(args, "strict_length", None) is not None:
        overrides["data.strict_length"] = args.strict_length
    if getattr(args, "tta", None) is not None:
        overrides["augment.use_tta"] = args.tta
    return overrides


def _config(args:Namespace) -> Dict[str, Any]:
    path = args.config
    if path is None and os.path.isfile(CONFIG_PATH):
        path = CONFIG_PATH
    return load_config(path, _overrides(args))


def _prepared_manifest(root) -> Manifest:
    root = Path(root)
    if not (root / PREP_META_NAME).is_file():
        root = prep_root_of(root)
    if not (root / PREP_META_NAME).is_file():
        raise ManifestMismatch(f"No preprocessed cache at {root}; run `prep` first.")
    return Manifest.load(root)


def _split(config:Dict[str, Any], manifest:Manifest, run_dir:Path) -> FoldSplit:
    meta = run_dir / "run_meta.json"
    if meta.is_file():
        return FoldSplit(FileManager(meta).import_json()["split"])
    return stratified_kfold(manifest.labels, config["train"]["folds"], config["train"]["seed"], manifest.scan_ids)


def cmd_synth(args:Namespace, config:Dict[str, Any]) -> int:
    generate_synthetic(SynthConfig.from_config(config), args.out)
    return 0


def cmd_prep(args:Namespace, config:Dict[str, Any]) -> int:
    manifest = Manifest.load(args.root)
    preprocess_dataset(manifest, args.out, config["data"]["min_area_frac"], config["data"]["size"])
    return 0


def cmd_report(args:Namespace, config:Dict[str, Any]) -> int:
    manifest = Manifest.load(args.root)
    stats = dataset_stats(manifest)
    write_report(stats, args.out or Path(args.root) / "report")
    if (Path(args.root) / LEDGER_NAME).is_file():
        totals = dict(zip(stats.totals["modality"], stats.totals["total"].astype(int)))
        expected = ledger_totals(args.root)
        if totals != expected:
            raise ManifestMismatch(f"Slice totals {totals} differ from the generator ledger {expected}.")
        print("[report: INFO] Slice totals match the generator ledger")
    return 0


def cmd_train(args:Namespace, config:Dict[str, Any]) -> int:
    manifest = _prepared_manifest(args.root)
    trainer = Trainer(config, manifest, args.out)
    results = trainer.cross_validate(None if args.fold is None else [args.fold])
    scores = [r["phase2"] for r in results.values() if r["phase2"] is not None]
    if scores:
        print(f"[train: INFO] Validation macro-F1 {aggregate_folds(scores)}")
    return 0


def cmd_eval(args:Namespace, config:Dict[str, Any]) -> int:
    run_dir = Path(args.out)
    dtype = DTYPES[config["train"]["dtype"]]
    fixed = restore_model(args.ckpt, dtype=dtype) if args.ckpt else None
    if args.root is None:
        raise InvalidParameter("eval needs --root, the dataset the folds are drawn from.")
    manifest = _prepared_manifest(args.root)
    split = _split(config, manifest, run_dir)
    folds = range(split.k) if args.fold is None else [args.fold]
    use_tta = config["augment"]["use_tta"]
    tta_seed = config["augment"]["tta_seed"]
    scores = list()
    for fold in folds:
        model = fixed
        if model is None:
            model = restore_model(run_dir / "ckpt" / f"fold{fold}" / "phase2_best.bin", dtype=dtype)
        scans = ScanDataset(manifest, split.val_ids(fold), model.config.lengths, config["data"]["strict_length"],
                            length_mode=config["data"]["length_mode"])
        evaluation = evaluate_fold(model, scans, use_tta, tta_seed, config["augment"]["rotation_deg"],
                                   run_dir / f"preds_fold{fold}.jsonl", dtype, config["train"]["device"],
                                   progress=True)
        print(f"[eval: INFO] fold {fold}: macro-F1 {evaluation.macro_f1:.4f}")
        scores.append(evaluation.macro_f1)
    report = aggregate_folds(scores)
    write_eval_report(run_dir / "eval_report.json", report, config_digest(config), tta_seed if use_tta else None)
    print(f"[eval: INFO] macro-F1 {report}")
    return 0


def cmd_gradcheck(args:Namespace, config:Dict[str, Any]) -> int:
    report = gradcheck_report(config, args.seed or 0)
    print(f"[gradcheck: INFO] {report.checked} parameters, max relative error {report.max_rel_error:.3g} "
          f"at {report.worst[0]}[{report.worst[1]}], {report.exact_zeros} exact zeros")
    return 0 if report.passed() else 1


def cmd_selftest(args:Namespace, config:Dict[str, Any]) -> int:
    results = run_selftest(config, args.seed or 0)
    failed = [name for name, passed, _ in results if not passed]
    if failed:
        print(f"[selftest: ERROR] {len(failed)} invariant(s) failed: {', '.join(failed)}")
        return 1
    print(f"[selftest: INFO] All {len(results)} invariants hold")
    return 0


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="btdnet", description="Multimodal MRI volume classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name:str, handler, help_text:str) -> ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="overrides the training and generator seeds")
        p.set_defaults(handler=handler)
        return p

    p = command("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--n", type=int, help="number of scans")

    p = command("prep", cmd_prep, "crop, resize and normalize every slice of a dataset")
    p.add_argument("--root", required=True, help="raw dataset root")
    p.add_argument("--out", help="cache root, <root>_prep by default")

    p = command("report", cmd_report, "slice-count tables and plot")
    p.add_argument("--root", required=True, help="dataset root")
    p.add_argument("--out", help="report directory, <root>/report by default")

    for name, handler, help_text in (("train", cmd_train, "two-phase training over the folds"),
                                     ("eval", cmd_eval, "evaluate fold checkpoints")):
        p = command(name, handler, help_text)
        p.add_argument("--root", required=name == "train", help="preprocessed (or raw) dataset root")
        p.add_argument("--out", default="runs", help="run directory")
        p.add_argument("--fold", type=int, help="a single fold")
        p.add_argument("--backbone", choices=["tiny_cnn", "resnet18_gap"])
        p.add_argument("--strict-length", action=BooleanOptionalAction, default=None,
                       help="reject volumes longer than their padded length")
    p.add_argument("--tta", action=BooleanOptionalAction, default=None,
                   help="predict from the four test-time versions, augment.use_tta by default")
    p.add_argument("--ckpt", help="a single checkpoint to evaluate")

    command("gradcheck", cmd_gradcheck, "finite-difference check of the loss gradient")
    command("selftest", cmd_selftest, "run the invariant suite")
    return parser


def main(argv:Optional[Sequence[str]]=None) -> int:
    """
    Run one subcommand.

    :returns: int -- 0 on success, 1 on a runtime failure, 2 on a usage error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)
    try:
        config = _config(args)
        return args.handler(args, config)
    except (BTDNetError, OSError) as e:
        print(f"[cli: ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
