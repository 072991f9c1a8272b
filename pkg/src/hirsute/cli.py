"""Command-line interface: ingest, mask-eval, score, calibrate, evaluate, synth, report.

Exit codes are a stable scripting contract: 0 success, 1 usage error,
2 data error, 3 calibration error. The HIRSUTE_LOG environment variable
sets log verbosity (DEBUG/INFO/WARNING/ERROR). Every run writes its
effective configuration snapshot and a timestamped run.log into the output
directory; all other outputs are byte-deterministic for fixed inputs, seed
and configuration, independent of --workers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import maskops, synthgen
from .config import RunConfig, build_config
from .dataset import (
    attach_ratios,
    load_embeddings,
    load_manifest,
    write_embeddings,
    write_manifest,
)
from .errors import CalibrationError, DataError
from .metrics import ThresholdTable, threshold_for_fmr
from .protocol import fmr_table_rows, run_protocol
from .reference import format_reference_table
from .scoring import load_cells, save_cells, score_cells, write_histogram_csv

log = logging.getLogger("hirsute")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CALIBRATION = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; our contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level_name = os.environ.get("HIRSUTE_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    root = logging.getLogger()
    root.setLevel(level)
    if not any(isinstance(h, logging.StreamHandler) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setLevel(level)  # stays at the env level even if root drops to INFO
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


def _prepare_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise DataError("an output directory is required (--out)")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}") from exc
    (out / "config_snapshot.cfg").write_text(cfg.snapshot(), encoding="utf-8")
    # timestamps are confined to this log file; reports stay byte-deterministic
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.setLevel(logging.INFO)
    root = logging.getLogger()
    root.addHandler(handler)
    _run_handlers.append(handler)
    if root.level > logging.INFO:
        root.setLevel(logging.INFO)
    return out


_run_handlers: list[logging.Handler] = []


def _close_run_logging() -> None:
    root = logging.getLogger()
    while _run_handlers:
        handler = _run_handlers.pop()
        root.removeHandler(handler)
        handler.close()


def _write_json(path: Path, obj) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv_rows(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")


def _load_dataset(cfg: RunConfig, need_ratios: bool = True):
    """Load manifest + embeddings, deriving missing ratios from masks."""
    if not cfg.manifest:
        raise DataError("a manifest path is required (--manifest)")
    if not cfg.embeddings:
        raise DataError("an embeddings path is required (--embeddings)")
    store = load_embeddings(cfg.embeddings)
    ds = load_manifest(cfg.manifest, store=store)
    missing = [r for r in ds.records if r.facial_hair_ratio is None]
    if missing and need_ratios:
        base = Path(cfg.masks) if cfg.masks else Path(cfg.manifest).parent
        derived = {}
        for rec in missing:
            if not rec.mask_path:
                raise DataError(
                    f"record {rec.image_id!r} has neither a facial_hair_ratio nor a mask_path"
                )
            mask = maskops.load_mask(base / rec.mask_path)
            derived[rec.image_id] = maskops.facial_hair_ratio(
                mask, include_shadow=cfg.include_shadow
            )
        ds = attach_ratios(ds, derived)
        log.info("derived %d facial hair ratios from masks", len(derived))
    return ds, store


def _scopes(cfg: RunConfig, ds) -> list[str]:
    if cfg.scope:
        if cfg.scope not in ds.demographics:
            raise DataError(f"scope {cfg.scope!r} not present in dataset")
        return [cfg.scope]
    return sorted(ds.demographics)


def _scope_label(scope: str | None) -> str:
    return scope if scope else "all"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    ds, store = _load_dataset(cfg, need_ratios=True)
    write_manifest(ds, out / "dataset_validated.csv")
    scheme = cfg.scheme()
    per_demo = {}
    for tag, ids in sorted(ds.demographics.items()):
        subj = {ds.record(i).subject_id for i in ids}
        per_demo[tag] = {"images": len(ids), "subjects": len(subj)}
    from .pairs import classify

    class_counts: dict[str, int] = {}
    for rec in ds.records:
        for name in classify(rec.facial_hair_ratio, scheme):
            class_counts[name] = class_counts.get(name, 0) + 1
    _write_json(out / "ingest_summary.json", {
        "records": len(ds.records),
        "subjects": len(ds.subjects),
        "demographics": per_demo,
        "ratio_class_counts": dict(sorted(class_counts.items())),
        "embedding_dim": store.dim,
        "embedding_count": store.count,
    })
    print(f"ingested {len(ds.records)} records, {len(ds.subjects)} subjects -> {out}")
    return EXIT_OK


def _matched_mask_files(pred_dir: Path, gt_dir: Path) -> list[str]:
    pred = {p.name for p in pred_dir.iterdir() if p.is_file()}
    gt = {p.name for p in gt_dir.iterdir() if p.is_file()}
    unmatched = sorted(pred ^ gt)
    if unmatched:
        raise DataError(
            f"prediction and ground-truth directories do not match; "
            f"unpaired files: {', '.join(unmatched)}"
        )
    if not pred:
        raise DataError(f"no mask files found in {pred_dir}")
    return sorted(pred)


def cmd_mask_eval(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise DataError(f"mask directories not found: {pred_dir}, {gt_dir}")
    names = _matched_mask_files(pred_dir, gt_dir)
    pairs = []
    rows = [["filename", "intersection", "union", "iou", "gt_ratio"]]
    for name in names:
        pred = maskops.load_mask(pred_dir / name)
        gt = maskops.load_mask(gt_dir / name)
        pairs.append((pred, gt))
        rep = maskops.iou(pred, gt, maskops.FACIAL_HAIR)
        ratio = maskops.facial_hair_ratio(gt, include_shadow=cfg.include_shadow)
        rows.append([
            name, rep.intersection, rep.union,
            "" if rep.iou is None else repr(rep.iou), repr(ratio),
        ])
    _write_csv_rows(out / "per_image_iou.csv", rows)

    bucket_rows = [["ratio_range", "pairs", "mean_iou", "undefined_iou_pairs"]]
    for rep in maskops.iou_by_ratio_bucket(pairs, include_shadow=cfg.include_shadow):
        bucket_rows.append([
            rep.bucket.label(), rep.count,
            "" if rep.mean_iou is None else f"{rep.mean_iou:.4f}", rep.undefined_count,
        ])
    _write_csv_rows(out / "bucket_means.csv", bucket_rows)

    summary = {"images": len(names), "buckets": str(out / "bucket_means.csv")}
    if args.gt2:
        gt2_dir = Path(args.gt2)
        if not gt2_dir.is_dir():
            raise DataError(f"second ground-truth directory not found: {gt2_dir}")
        names2 = _matched_mask_files(gt_dir, gt2_dir)
        gt1_masks = [maskops.load_mask(gt_dir / n) for n in names2]
        gt2_masks = [maskops.load_mask(gt2_dir / n) for n in names2]
        agreement = maskops.annotator_agreement(gt1_masks, gt2_masks, maskops.FACIAL_HAIR)
        summary["annotator_agreement"] = {
            "intersection": agreement.intersection,
            "union": agreement.union,
            "aggregate_iou": agreement.aggregate_iou,
        }
        print(f"annotator agreement (aggregate IoU): {agreement.aggregate_iou}")
    _write_json(out / "mask_eval_summary.json", summary)
    print(f"evaluated {len(names)} mask pairs -> {out}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    gen_cfg = cfg.gen_config()
    ds, store = synthgen.generate(gen_cfg)
    write_embeddings(store.vectors, out / "embeddings.fheb")
    if cfg.write_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
        from dataclasses import replace

        records = []
        for rec in ds.records:
            name = f"{rec.image_id}.png"
            maskops.save_mask(synthgen.ratio_mask(rec.facial_hair_ratio), mask_dir / name)
            records.append(replace(rec, mask_path=f"masks/{name}"))
        from .dataset import build_dataset

        ds = build_dataset(records)
    write_manifest(ds, out / "manifest.csv")
    print(
        f"wrote {len(ds.records)} records ({gen_cfg.n_subjects} subjects, "
        f"dim {gen_cfg.dim}, beta {gen_cfg.hair_axis_strength}) -> {out}"
    )
    return EXIT_OK


def cmd_score(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    ds, store = _load_dataset(cfg)
    groups = cfg.group_list()
    scheme = cfg.scheme()
    all_cells = []
    for scope in _scopes(cfg, ds):
        cells = score_cells(
            ds, store, kinds=("genuine", "impostor"), categories=[None, *groups],
            scope=scope, scheme=scheme,
            tail_frac=cfg.tail_frac if cfg.tail_frac else min(50 * cfg.target_fmr, 1.0),
            bins=cfg.bins, block_size=cfg.block_size, workers=cfg.workers,
        )
        all_cells.extend(cells)
    save_cells(all_cells, out / "scores.fhsc")
    for cell in all_cells:
        cat = cell.category.name if cell.category else "all_pairs"
        write_histogram_csv(
            cell, out / f"hist_{_scope_label(cell.scope)}_{cell.kind}_{cat}.csv"
        )
    print(f"scored {len(all_cells)} cells -> {out / 'scores.fhsc'}")
    return EXIT_OK


def _calibrate_scope(cells, scope: str, target: float) -> ThresholdTable:
    imp = {
        (c.category.name if c.category else None): c.scores
        for c in cells
        if c.kind == "impostor" and (c.scope or "all") == scope
    }
    if None not in imp:
        raise CalibrationError(f"score cache has no all-pairs impostor cell for scope {scope!r}")
    per_category = {}
    for name, scores in sorted((k, v) for k, v in imp.items() if k is not None):
        if scores.count == 0:
            raise CalibrationError(f"cannot calibrate group {name!r}: no impostor pairs (scope {scope!r})")
        per_category[name] = threshold_for_fmr(scores, target)
    return ThresholdTable(
        global_threshold=threshold_for_fmr(imp[None], target),
        per_category=per_category,
    )


def cmd_calibrate(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    if args.cache:
        cells = load_cells(args.cache)
    else:
        ds, store = _load_dataset(cfg)
        groups = cfg.group_list()
        cells = []
        for scope in _scopes(cfg, ds):
            cells.extend(score_cells(
                ds, store, kinds=("impostor",), categories=[None, *groups],
                scope=scope, scheme=cfg.scheme(),
                tail_frac=cfg.tail_frac if cfg.tail_frac else min(50 * cfg.target_fmr, 1.0),
                bins=cfg.bins, block_size=cfg.block_size, workers=cfg.workers,
            ))
    scopes = sorted({c.scope or "all" for c in cells})
    if cfg.scope:
        if cfg.scope not in scopes:
            raise DataError(f"scope {cfg.scope!r} not present in scored cells")
        scopes = [cfg.scope]
    for scope in scopes:
        table = _calibrate_scope(cells, scope, cfg.target_fmr)
        payload = table.to_json_dict()
        payload["scope"] = scope
        payload["target_fmr"] = cfg.target_fmr
        _write_json(out / f"thresholds_{scope}.json", payload)
        print(f"calibrated scope {scope}: global threshold {table.global_threshold!r}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    ds, store = _load_dataset(cfg)
    groups = cfg.group_list()
    scheme = cfg.scheme()
    results = []
    for scope in _scopes(cfg, ds):
        res = run_protocol(
            ds, store, cfg.split_plan(), scope=scope,
            target_fmr=cfg.target_fmr, groups=groups, scheme=scheme,
            tail_frac=cfg.tail_frac, bins=cfg.bins,
            block_size=cfg.block_size, workers=cfg.workers,
        )
        results.append(res)
        _write_json(out / f"protocol_{_scope_label(scope)}.json", res.to_json_dict())
        # whole-scope score distributions for plotting
        cells = score_cells(
            ds, store, kinds=("genuine", "impostor"), categories=[None, *groups],
            scope=scope, scheme=scheme,
            tail_frac=cfg.tail_frac if cfg.tail_frac else min(50 * cfg.target_fmr, 1.0),
            bins=cfg.bins, block_size=cfg.block_size, workers=cfg.workers,
        )
        for cell in cells:
            cat = cell.category.name if cell.category else "all_pairs"
            write_histogram_csv(
                cell, out / f"hist_{_scope_label(scope)}_{cell.kind}_{cat}.csv"
            )
    _write_csv_rows(out / "fmr_by_group.csv", fmr_table_rows(results))
    for line in _render_protocol_tables(results):
        print(line)
    return EXIT_OK


def _render_protocol_tables(results) -> list[str]:
    if not results:
        return []
    group_names = results[0].group_names
    header = ["scope (mode)"] + [f"{g} (x1e-4)" for g in group_names] + ["max/min FMR"]
    rows = [header]
    for res in results:
        for mode in ("global", "adaptive"):
            agg = res.aggregates[mode]
            row = [f"{_scope_label(res.scope)} ({mode})"]
            for g in group_names:
                mean = agg.fmr_mean.get(g)
                std = agg.fmr_std.get(g)
                if mean is None:
                    row.append("undefined")
                elif std is None:
                    row.append(f"{mean * 1e4:.2f}")
                else:
                    row.append(f"{mean * 1e4:.2f} ± {std * 1e4:.2f}")
            if agg.ratio_mean is None:
                row.append("undefined")
            else:
                used = len(agg.ratio_splits_used)
                total = len(res.splits)
                note = "" if used == total else f" ({used} splits)"
                if agg.ratio_std is None:
                    row.append(f"{agg.ratio_mean:.2f}{note}")
                else:
                    row.append(f"{agg.ratio_mean:.2f} ± {agg.ratio_std:.2f}{note}")
            rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return lines


def cmd_report(cfg: RunConfig, args) -> int:
    lines = []
    if args.reference:
        lines.append(format_reference_table())
    for path in args.inputs or []:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        lines.extend(_render_json_protocol(data))
    if not lines:
        raise DataError("nothing to report: pass protocol JSON paths and/or --reference")
    text = "\n".join(lines).rstrip() + "\n"
    sys.stdout.write(text)
    if cfg.out:
        out = _prepare_out(cfg)
        (out / "report.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def _render_json_protocol(data: dict) -> list[str]:
    group_names = data["groups"]
    scope = data.get("scope") or "all"
    header = ["scope (mode)"] + [f"{g} (x1e-4)" for g in group_names] + ["max/min FMR"]
    rows = [header]
    for mode in ("global", "adaptive"):
        agg = data["aggregates"][mode]
        row = [f"{scope} ({mode})"]
        for g in group_names:
            mean = agg["fmr_mean"].get(g)
            std = agg["fmr_std"].get(g)
            if mean is None:
                row.append("undefined")
            elif std is None:
                row.append(f"{mean * 1e4:.2f}")
            else:
                row.append(f"{mean * 1e4:.2f} ± {std * 1e4:.2f}")
        mean = agg["ratio_mean"]
        if mean is None:
            row.append("undefined")
        else:
            used = len(agg["ratio_splits_used"])
            total = len(data["splits"])
            note = "" if used == total else f" ({used} splits)"
            std = agg["ratio_std"]
            row.append(f"{mean:.2f}{note}" if std is None else f"{mean:.2f} ± {std:.2f}{note}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [f"Protocol results: scope {scope}, target FMR {data['target_fmr']:g}, seed {data['seed']}"]
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    lines.append("")
    return lines


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--embeddings", help="FHEB embeddings file")
    p.add_argument("--masks", help="mask directory (base for manifest mask paths)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--splits", type=int, dest="n_splits", help="number of validation/test splits")
    p.add_argument("--target-fmr", type=float, dest="target_fmr", help="FMR target, e.g. 1e-4")
    p.add_argument("--workers", type=int, help="scoring parallelism (never changes results)")
    p.add_argument("--scope", help="demographic tag to evaluate (default: each separately)")
    p.add_argument("--tail-frac", type=float, dest="tail_frac", help="exact score tail fraction")
    p.add_argument("--groups", help="comma-separated pair categories to calibrate")


_CONFIG_KEYS = (
    "manifest", "embeddings", "masks", "out", "seed", "n_splits", "target_fmr",
    "workers", "scope", "tail_frac", "groups", "beta", "n_subjects",
    "images_per_subject", "dim", "write_masks",
)


def build_parser() -> _Parser:
    parser = _Parser(prog="hirsute", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="validate a manifest + embeddings, derive ratios from masks")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mask-eval", help="IoU metrics for predicted vs ground-truth masks")
    _add_common(p)
    p.add_argument("--pred", required=True, help="predicted mask directory")
    p.add_argument("--gt", required=True, help="ground-truth mask directory")
    p.add_argument("--gt2", help="second annotator directory (adds agreement report)")
    p.set_defaults(func=cmd_mask_eval)

    p = sub.add_parser("score", help="score all pairs into cells, write cache + histograms")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", help="calibrate global + per-group thresholds")
    _add_common(p)
    p.add_argument("--cache", help="scores.fhsc produced by the score command")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="run the full split protocol (global vs adaptive)")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--beta", type=float, help="hair-axis confound strength")
    p.add_argument("--n-subjects", type=int, dest="n_subjects", help="number of subjects")
    p.add_argument("--images-per-subject", type=int, dest="images_per_subject")
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--write-masks", action="store_true", default=None, dest="write_masks")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="format protocol results (and/or reference fixtures)")
    _add_common(p)
    p.add_argument("--in", dest="inputs", nargs="*", help="protocol JSON files to format")
    p.add_argument("--reference", action="store_true", help="print built-in reference table")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)}
    try:
        cfg = build_config(args.config, overrides)
    except ValueError as exc:
        parser.error(str(exc))
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    try:
        return args.func(cfg, args)
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except CalibrationError as exc:
        log.error("%s", exc)
        return EXIT_CALIBRATION
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    finally:
        _close_run_logging()


if __name__ == "__main__":
    sys.exit(main())
