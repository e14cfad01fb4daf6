"""Command-line front door: dataset generation, training, evaluation,
top-p sweeps, modality ablations, and attention-mask dumps.

Exit codes: 0 ok, 2 usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from sparsemodal.attention import write_mask_pgm, write_selection_csv
from sparsemodal.config import ModelConfig, load_config
from sparsemodal.model import (
    DataSpec,
    Network,
    evaluate,
    load_checkpoint,
    run_training,
    save_checkpoint,
)
from sparsemodal.signal import (
    Manifest,
    build_samples,
    load_manifest,
    make_records,
    save_manifest,
    split_manifest,
)
from sparsemodal.sparse import FlopsLedger, flops_report
from sparsemodal.tensor import NumericFailure

__all__ = ["main"]

FE2E_ABLATION_ROWS = ("TAV", "TA", "TV", "VA", "T", "A", "V")
MESM_ABLATION_ROWS = ("TAV", "TA", "TV")


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsemodal",
        description="Multimodal emotion classification with attention-gated "
                    "sparse convolutions")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset manifest")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-samples", type=int, default=600)
    gen.add_argument("--classes", type=int, default=6)
    gen.add_argument("--seed", type=int, default=0)

    train = sub.add_parser("train", help="train one model from a config")
    train.add_argument("--config", required=True)
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test",
                    choices=("train", "valid", "test"))

    sweep = sub.add_parser("sweep", help="train/evaluate across top-p values")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--manifest", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--p-list", default=None,
                       help="comma-separated top-p values; default 0.1..1.0")
    sweep.add_argument("--seed", type=int, default=None)

    abl = sub.add_parser("ablate", help="train/evaluate modality subsets")
    abl.add_argument("--config", required=True)
    abl.add_argument("--manifest", required=True)
    abl.add_argument("--out", required=True)
    abl.add_argument("--modalities", default=None,
                     help="comma-separated subsets, e.g. TAV,TA,T")
    abl.add_argument("--seeds", type=int, default=1,
                     help="average each subset over this many seeds")
    abl.add_argument("--seed", type=int, default=None)

    dump = sub.add_parser("dump-masks",
                          help="export per-block selection masks and scores")
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--manifest", required=True)
    dump.add_argument("--sample-id", required=True)
    dump.add_argument("--out", required=True)
    return parser


def _require_file(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{kind} not found: {path}")
    return p


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(args) -> tuple[ModelConfig, Manifest]:
    config = load_config(_require_file(args.config, "config"))
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    manifest = load_manifest(_require_file(args.manifest, "manifest"),
                             pos_weight_cap=config.pos_weight_cap)
    return config, manifest


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _train_one(config: ModelConfig, manifest: Manifest
               ) -> tuple[Network, list, "object"]:
    train_samples = build_samples(manifest.split("train"))
    valid_samples = build_samples(manifest.split("valid"))
    network = Network(config, DataSpec.from_samples(train_samples))
    history, optimizer = run_training(network, train_samples, valid_samples,
                                      manifest.pos_weights)
    return network, history, optimizer


def _eval_with_ledger(network: Network, samples) -> tuple[dict, FlopsLedger]:
    ledger = FlopsLedger()
    stats = evaluate(network, samples, ledger=ledger)
    return stats, ledger


def cmd_gen_data(args) -> int:
    out = _outdir(args.out)
    records = make_records(args.n_samples, classes=args.classes,
                           seed=args.seed)
    manifest = split_manifest(records, seed=args.seed)
    save_manifest(manifest, out / "manifest.jsonl")
    counts = {name: len(manifest.split(name))
              for name in ("train", "valid", "test")}
    print(f"wrote {out / 'manifest.jsonl'} ({counts})")
    return 0


def cmd_train(args) -> int:
    config, manifest = _load_inputs(args)
    out = _outdir(args.out)
    network, history, optimizer = _train_one(config, manifest)
    _write_csv(out / "metrics.csv",
               ["epoch", "train_loss", "valid_loss", "valid_wacc", "valid_f1"],
               [[h.epoch, f"{h.train_loss:.10g}", f"{h.valid_loss:.10g}",
                 f"{h.valid_wacc:.10g}", f"{h.valid_f1:.10g}"]
                for h in history])
    save_checkpoint(out / "checkpoint", network, optimizer)
    stats, _ = _eval_with_ledger(network,
                                 build_samples(manifest.split("test")))
    print(f"trained {config.mode}: test mean WAcc {stats['mean_wacc']:.4f} "
          f"mean F1 {stats['mean_f1']:.4f}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    samples = build_samples(manifest.split(args.split))
    network, _ = load_checkpoint(
        _require_file(args.checkpoint, "checkpoint"),
        DataSpec.from_samples(samples))
    out = _outdir(args.out)
    stats, ledger = _eval_with_ledger(network, samples)
    rows = [[c, "" if stats["wacc"][c] is None else f"{stats['wacc'][c]:.10g}",
             f"{stats['f1'][c]:.10g}"] for c in range(len(stats["wacc"]))]
    rows.append(["mean", f"{stats['mean_wacc']:.10g}",
                 f"{stats['mean_f1']:.10g}"])
    _write_csv(out / "eval.csv", ["class", "wacc", "f1"], rows)
    report = flops_report(ledger)
    _write_csv(out / "flops.csv", ["layer", "dense_macs", "executed_macs",
                                   "fraction"],
               [[name, rec["dense"], rec["executed"], f"{rec['fraction']:.10g}"]
                for name, rec in report["layers"].items()]
               + [["total", report["total_dense"], report["total_executed"],
                   f"{report['fraction']:.10g}"]])
    print(f"eval {args.split}: mean WAcc {stats['mean_wacc']:.4f}")
    return 0


def _parse_p_list(raw: str | None) -> list[float]:
    if raw is None:
        return [round(0.1 * k, 1) for k in range(1, 11)]
    try:
        values = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --p-list: {exc}") from None
    if not values:
        raise UsageError("empty --p-list")
    for p in values:
        if not 0.0 < p <= 1.0:
            raise UsageError(
                f"top-p {p} outside (0, 1]: selection needs positive mass")
    return values


def cmd_sweep(args) -> int:
    config, manifest = _load_inputs(args)
    p_values = sorted(_parse_p_list(args.p_list))
    out = _outdir(args.out)
    test_samples = build_samples(manifest.split("test"))
    classes = manifest.classes
    rows = []
    for p in p_values:
        cfg = config.replace(mode="MESM", top_p=p)
        network, _, _ = _train_one(cfg, manifest)
        stats, ledger = _eval_with_ledger(network, test_samples)
        dense, executed = ledger.totals()
        block = ledger.subset(lambda name: "/block" in name)
        rows.append([f"{p:.10g}"]
                    + ["" if w is None else f"{w:.10g}" for w in stats["wacc"]]
                    + [f"{stats['mean_wacc']:.10g}", f"{stats['mean_f1']:.10g}",
                       executed, dense, f"{executed / dense:.10g}",
                       f"{block.fraction():.10g}"])
        print(f"p={p:g}: mean WAcc {stats['mean_wacc']:.4f} "
              f"block MAC fraction {block.fraction():.4f}")
    header = (["top_p"] + [f"wacc_{c}" for c in range(classes)]
              + ["mean_wacc", "mean_f1", "executed_macs", "dense_macs",
                 "fraction", "block_fraction"])
    _write_csv(out / "sweep.csv", header, rows)
    return 0


def cmd_ablate(args) -> int:
    config, manifest = _load_inputs(args)
    if args.modalities is None:
        subsets = FE2E_ABLATION_ROWS if config.mode == "FE2E" \
            else MESM_ABLATION_ROWS
    else:
        subsets = tuple(tok.strip() for tok in args.modalities.split(",")
                        if tok.strip())
        if not subsets:
            raise UsageError("empty --modalities")
    out = _outdir(args.out)
    test_samples = build_samples(manifest.split("test"))
    seed_rows, agg_rows = [], []
    for subset in subsets:
        try:
            base = config.replace(modalities=subset)
        except ValueError as exc:
            raise UsageError(f"subset {subset!r}: {exc}") from None
        waccs, f1s = [], []
        for k in range(args.seeds):
            cfg = base.replace(seed=base.seed + k)
            network, _, _ = _train_one(cfg, manifest)
            stats, _ = _eval_with_ledger(network, test_samples)
            waccs.append(stats["mean_wacc"])
            f1s.append(stats["mean_f1"])
            seed_rows.append([config.mode, subset, cfg.seed,
                              f"{stats['mean_wacc']:.10g}",
                              f"{stats['mean_f1']:.10g}"])
        agg_rows.append([config.mode, subset,
                         f"{float(np.mean(waccs)):.10g}",
                         f"{float(np.mean(f1s)):.10g}"])
        print(f"{config.mode} {subset}: avg WAcc {float(np.mean(waccs)):.4f}")
    _write_csv(out / "ablation.csv",
               ["model", "modalities", "avg_acc", "avg_f1"], agg_rows)
    _write_csv(out / "ablation_seeds.csv",
               ["model", "modalities", "seed", "mean_wacc", "mean_f1"],
               seed_rows)
    return 0


def cmd_dump_masks(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    record = next((r for r in manifest.records if r.id == args.sample_id),
                  None)
    if record is None:
        raise UsageError(f"sample id {args.sample_id!r} not in manifest")
    samples = build_samples([record])
    network, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"),
                                 DataSpec.from_samples(samples))
    if network.config.mode != "MESM":
        raise UsageError("checkpoint is a dense model: no selection masks exist")
    out = _outdir(args.out)
    from sparsemodal.signal import write_stack_csv
    write_stack_csv(samples[0].frames, out / "input_frames.csv")
    write_stack_csv(samples[0].audio_chunks, out / "input_chunks.csv")
    result = network.forward(samples, collect_traces=True)
    selected, scored = [], []
    for trace in result.traces:
        layer = f"{trace.modality}/block{trace.block}"
        for s in range(trace.mask.shape[0]):
            write_mask_pgm(trace.mask[s],
                           out / f"{trace.modality}_block{trace.block}_s{s}.pgm")
            for h, w in np.argwhere(trace.mask[s]):
                selected.append((layer, s, int(h), int(w)))
            for (h, w), val in np.ndenumerate(trace.scores[s]):
                scored.append([layer, s, h, w, f"{val:.10g}"])
    write_selection_csv(selected, out / "selected.csv")
    _write_csv(out / "scores.csv", ["layer", "s", "h", "w", "score"], scored)
    print(f"wrote masks for {args.sample_id} to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "dump-masks": cmd_dump_masks,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
