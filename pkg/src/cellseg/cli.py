"""Command-line entry point: one binary, reproducible subcommands.

Exit codes: 0 success, 2 input/validation error, 3 internal failure.
A TOML config file may pre-set any subcommand's flags; explicit flags win.
"""

from __future__ import annotations

import functools
import json
import logging
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import augment as aug
from . import cells as cells_mod
from . import dataio, synth
from .ensemble import (
    REUSE_WITH_REPLACEMENT,
    REUSE_WITHOUT_REPLACEMENT,
    EnsembleConfig,
    ensemble_datasets,
    submission_set,
)
from .errors import CellsegError, FewerThanTwoSets, InputError
from .evaluation import EVAL_MODES, MODE_WHOLE_CELL, evaluate_dataset
from .instances import (
    CLASS_CYTOPLASM,
    CLASS_NUCLEUS,
    CLASS_WHOLE_CELL,
    PredictionSet,
)

log = logging.getLogger("cellseg")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INTERNAL = 3


def guarded(fn):
    """Map library errors to exit codes and keep tracebacks out of stderr."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_INPUT)
        except (CellsegError, Exception) as exc:  # noqa: BLE001 - last resort
            click.echo(f"internal error: {exc}", err=True)
            sys.exit(EXIT_INTERNAL)

    return wrapper


def _log_resolved(ctx: click.Context, **params) -> None:
    merged = {**ctx.obj, **params}
    log.info("resolved config: %s", json.dumps(merged, sort_keys=True, default=str))


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="TOML file with per-subcommand flag defaults.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=None,
              help="Worker threads for per-image jobs (default: all cores). "
                   "Never changes results.")
@click.option("--quiet", is_flag=True, default=False)
@click.pass_context
def main(ctx, config, seed, threads, quiet):
    """Instance-mask toolkit: evaluation, ensembling, augmentation, fixtures."""
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if config:
        with open(config, "rb") as f:
            ctx.default_map = tomllib.load(f)
    import os

    ctx.obj = {
        "seed": seed,
        "threads": threads if threads is not None else (os.cpu_count() or 1),
        "quiet": quiet,
    }


def _load_layout(root: str, nucleus_value: int, cytoplasm_value: int) -> dataio.DatasetLayout:
    root_path = Path(root)
    return dataio.DatasetLayout(
        images_dir=root_path / "images",
        masks_dir=root_path / "masks",
        nucleus_value=nucleus_value,
        cytoplasm_value=cytoplasm_value,
    )


@main.command()
@click.option("--gt", required=True, type=click.Path(exists=True, file_okay=False),
              help="Dataset root containing images/ and masks/.")
@click.option("--pred", required=True, type=click.Path(),
              help="Prediction document (JSON).")
@click.option("--mode", type=click.Choice(EVAL_MODES), default=MODE_WHOLE_CELL,
              show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Report JSON path.")
@click.option("--csv", "csv_path", type=click.Path(), default=None,
              help="Per-GT CSV path (default: report path with .csv).")
@click.option("--without-replacement", is_flag=True, default=False,
              help="Greedy ablation mode: each prediction matches at most one GT.")
@click.option("--nucleus-value", type=int, default=dataio.DEFAULT_NUCLEUS_VALUE,
              show_default=True)
@click.option("--cytoplasm-value", type=int, default=dataio.DEFAULT_CYTOPLASM_VALUE,
              show_default=True)
@click.pass_context
@guarded
def evaluate(ctx, gt, pred, mode, out, csv_path, without_replacement,
             nucleus_value, cytoplasm_value):
    """Score a prediction file against a ground-truth dataset."""
    _log_resolved(ctx, gt=gt, pred=pred, mode=mode, out=out)
    layout = _load_layout(gt, nucleus_value, cytoplasm_value)
    gt_sets = dataio.load_ground_truth(layout)
    pred_sets = dataio.read_predictions(Path(pred))
    report = evaluate_dataset(
        gt_sets, pred_sets, mode=mode,
        with_replacement=not without_replacement,
        threads=ctx.obj["threads"],
    )
    dataio.write_report(report, Path(out), Path(csv_path) if csv_path else None)
    click.echo(dataio.format_miou(report.miou))


@main.command("ensemble")
@click.option("--reference", required=True, type=click.Path(),
              help="Reference model prediction file.")
@click.option("--models", "model_files", required=True, multiple=True,
              type=click.Path(), help="Non-reference model prediction files.")
@click.option("--min-iou", type=float, default=0.5, show_default=True)
@click.option("--include-reference/--exclude-reference", default=True, show_default=True,
              help="Whether the reference mask itself votes.")
@click.option("--fallback/--no-fallback", default=True, show_default=True,
              help="Fall back to the reference mask when a vote comes out empty.")
@click.option("--reuse-policy",
              type=click.Choice([REUSE_WITHOUT_REPLACEMENT, REUSE_WITH_REPLACEMENT]),
              default=REUSE_WITHOUT_REPLACEMENT, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@guarded
def ensemble_cmd(ctx, reference, model_files, min_iou, include_reference,
                 fallback, reuse_policy, out):
    """Refine a reference model's cells by majority voting across models."""
    _log_resolved(ctx, reference=reference, models=list(model_files),
                  min_iou=min_iou, out=out)
    if len(model_files) < 1:
        raise FewerThanTwoSets("need at least one non-reference model file")
    ref_sets = dataio.read_predictions(Path(reference))
    if not ref_sets:
        raise InputError(f"reference file {reference} contains no prediction sets")
    ref_source = ref_sets[0].source
    model_sets = [ref_sets] + [dataio.read_predictions(Path(f)) for f in model_files]
    cfg = EnsembleConfig(
        reference_source=ref_source,
        min_iou=min_iou,
        include_reference_in_vote=include_reference,
        fallback_to_reference=fallback,
        reuse_policy=reuse_policy,
    )
    outputs = ensemble_datasets(model_sets, cfg, threads=ctx.obj["threads"])
    submission = [submission_set(o) for _, o in sorted(outputs.items())]
    dataio.write_predictions(submission, Path(out))
    used_map = {
        image_id: {
            rid: [list(c) for c in contribs]
            for rid, contribs in sorted(o.used_map.items())
        }
        for image_id, o in sorted(outputs.items())
    }
    dataio._atomic_write_bytes(
        Path(out).with_suffix(".used.json"),
        (json.dumps(used_map, sort_keys=True, indent=1) + "\n").encode(),
    )
    n_refined = sum(len(o.refined.instances) for o in outputs.values())
    n_pass = sum(len(o.passthrough) for o in outputs.values())
    click.echo(f"ensembled {len(outputs)} images: "
               f"{n_refined} refined instances, {n_pass} passthrough")


@main.command("augment")
@click.option("--gt", required=True, type=click.Path(exists=True, file_okay=False),
              help="Dataset root containing images/ and masks/.")
@click.option("--out", required=True, type=click.Path())
@click.option("--count", type=int, required=True,
              help="Augmented outputs per input image.")
@click.option("--plan-only", is_flag=True, default=False,
              help="Write only the sampled plan, render nothing.")
@click.option("--nucleus-value", type=int, default=dataio.DEFAULT_NUCLEUS_VALUE,
              show_default=True)
@click.option("--cytoplasm-value", type=int, default=dataio.DEFAULT_CYTOPLASM_VALUE,
              show_default=True)
@click.pass_context
@guarded
def augment_cmd(ctx, gt, out, count, plan_only, nucleus_value, cytoplasm_value):
    """Generate a deterministic augmented copy of a dataset."""
    seed = ctx.obj["seed"]
    _log_resolved(ctx, gt=gt, out=out, count=count, plan_only=plan_only)
    layout = _load_layout(gt, nucleus_value, cytoplasm_value)
    gt_sets = dataio.load_ground_truth(layout)
    plan = aug.build_plan(seed, len(gt_sets), count)
    out_root = Path(out)
    out_root.mkdir(parents=True, exist_ok=True)
    dataio._atomic_write_bytes(out_root / "plan.json", plan.to_json().encode())
    if plan_only:
        click.echo(f"{plan.total_outputs}")
        return

    out_layout = dataio.DatasetLayout(
        images_dir=out_root / "images", masks_dir=out_root / "masks",
        nucleus_value=nucleus_value, cytoplasm_value=cytoplasm_value,
    )
    out_layout.images_dir.mkdir(parents=True, exist_ok=True)
    out_layout.masks_dir.mkdir(parents=True, exist_ok=True)
    gt_sets = sorted(gt_sets, key=lambda s: s.image_id)
    images = [
        dataio.read_image(Path(layout.images_dir) / f"{s.image_id}.png") for s in gt_sets
    ]

    def render_one(params: aug.TransformParams):
        gt_set = gt_sets[params.image_index]
        img = images[params.image_index]
        return _render_augmented(img, gt_set, params, out_layout)

    # Originals are part of the output count.
    for gt_set, img in zip(gt_sets, images):
        dataio.write_ground_truth_image(out_layout, img, gt_set)

    threads = ctx.obj["threads"]
    dropped_records = []
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for rec in pool.map(render_one, plan.outputs):
                dropped_records.extend(rec)
    else:
        for params in plan.outputs:
            dropped_records.extend(render_one(params))

    dataio._atomic_write_bytes(
        out_root / "dropped.json",
        (json.dumps(sorted(dropped_records), indent=1) + "\n").encode(),
    )
    click.echo(f"{plan.total_outputs}")


def _render_augmented(
    img: np.ndarray,
    gt_set: PredictionSet,
    params: aug.TransformParams,
    out_layout: dataio.DatasetLayout,
) -> list[str]:
    """Render one augmented output; returns records of dropped instances."""
    by_k: dict[int, dict[str, np.ndarray]] = {}
    for inst in gt_set.instances:
        k_str, _, cls = inst.instance_id.partition(".")
        by_k.setdefault(int(k_str), {})[cls] = inst.mask
    ks = sorted(by_k)
    mask_index: list[tuple[int, str]] = []
    masks: list[np.ndarray] = []
    for k in ks:
        for cls in (CLASS_NUCLEUS, CLASS_CYTOPLASM):
            if cls in by_k[k]:
                mask_index.append((k, cls))
                masks.append(by_k[k][cls])

    out_img, kept_masks, dropped_positions = aug.apply_geometric(
        img, masks, params.geometric
    )
    out_img = aug.apply_photometric(out_img, params.photometric)
    out_img = aug.apply_filtering(out_img, params.filtering)

    image_id = f"{gt_set.image_id}_aug{params.output_index:03d}"
    dropped_records: list[str] = []
    # apply_geometric preserves input order among survivors, so pair tags
    # with kept masks by skipping the dropped positions.
    survivors: dict[int, dict[str, np.ndarray]] = {}
    kept_tags = [t for i, t in enumerate(mask_index) if i not in set(dropped_positions)]
    for (k, cls), m in zip(kept_tags, kept_masks):
        survivors.setdefault(k, {})[cls] = m
    for i in dropped_positions:
        k, cls = mask_index[i]
        dropped_records.append(f"{image_id}:{k}.{cls}")

    new_k = 0
    label_files: list[tuple[int, np.ndarray]] = []
    for k in ks:
        parts = survivors.get(k, {})
        label = np.zeros(out_img.shape[:2], dtype=np.uint8)
        if CLASS_CYTOPLASM in parts:
            label[parts[CLASS_CYTOPLASM]] = out_layout.cytoplasm_value
        if CLASS_NUCLEUS in parts:
            label[parts[CLASS_NUCLEUS]] = out_layout.nucleus_value
        if label.any():
            new_k += 1
            label_files.append((new_k, label))
        else:
            dropped_records.append(f"{image_id}:{k}.{CLASS_WHOLE_CELL}")

    dataio.write_image(Path(out_layout.images_dir) / f"{image_id}.png", out_img)
    for j, label in label_files:
        dataio.write_image(Path(out_layout.masks_dir) / f"{image_id}_{j}.png", label)
    return dropped_records


@main.command("tta-merge")
@click.option("--none", "none_file", required=True, type=click.Path(),
              help="Predictions on the untransformed image.")
@click.option("--horizontal", "h_file", required=True, type=click.Path())
@click.option("--vertical", "v_file", required=True, type=click.Path())
@click.option("--diagonal", "d_file", required=True, type=click.Path())
@click.option("--min-iou", type=float, default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@guarded
def tta_merge(ctx, none_file, h_file, v_file, d_file, min_iou, out):
    """Invert the four flip-variant predictions and fuse them by voting."""
    _log_resolved(ctx, none=none_file, horizontal=h_file, vertical=v_file,
                  diagonal=d_file, out=out)
    variant_files = {
        aug.TTA_NONE: none_file,
        "horizontal": h_file,
        "vertical": v_file,
        "diagonal": d_file,
    }
    model_sets = []
    for variant, path in variant_files.items():
        sets = dataio.read_predictions(Path(path))
        inverted = [
            replace(aug.tta_invert(s, variant), source=f"tta_{variant}") for s in sets
        ]
        model_sets.append(inverted)
    cfg = EnsembleConfig(reference_source=f"tta_{aug.TTA_NONE}", min_iou=min_iou)
    outputs = ensemble_datasets(model_sets, cfg, threads=ctx.obj["threads"])
    submission = [submission_set(o) for _, o in sorted(outputs.items())]
    dataio.write_predictions(submission, Path(out))
    click.echo(f"merged {len(outputs)} images")


@main.command("merge-classes")
@click.option("--pred", required=True, type=click.Path(),
              help="Prediction document with whole_cell and nucleus instances.")
@click.option("--out", required=True, type=click.Path(),
              help="Directory for per-cell label masks and cells.json.")
@click.option("--containment-min", type=float,
              default=cells_mod.DEFAULT_CONTAINMENT_MIN, show_default=True)
@click.option("--nucleus-value", type=int, default=dataio.DEFAULT_NUCLEUS_VALUE,
              show_default=True)
@click.option("--cytoplasm-value", type=int, default=dataio.DEFAULT_CYTOPLASM_VALUE,
              show_default=True)
@click.pass_context
@guarded
def merge_classes_cmd(ctx, pred, out, containment_min, nucleus_value, cytoplasm_value):
    """Pair nuclei with whole cells and emit the two-class label masks."""
    _log_resolved(ctx, pred=pred, out=out, containment_min=containment_min)
    pred_sets = dataio.read_predictions(Path(pred))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metadata = {}
    for pset in sorted(pred_sets, key=lambda s: s.image_id):
        cells = cells_mod.merge_classes(pset, pset, pset, containment_min)
        entries = []
        for j, cell in enumerate(cells, start=1):
            label = np.zeros((pset.height, pset.width), dtype=np.uint8)
            label[cell.cytoplasm_mask] = cytoplasm_value
            label[cell.nucleus_mask] = nucleus_value
            dataio.write_image(out_dir / f"{pset.image_id}_{j}.png", label)
            entries.append({
                "file": f"{pset.image_id}_{j}.png",
                "cell_id": cell.cell_id,
                "nucleus_id": cell.nucleus_id,
                "has_nucleus": cell.has_nucleus,
                "score": cell.score,
            })
        metadata[pset.image_id] = entries
    dataio._atomic_write_bytes(
        out_dir / "cells.json",
        (json.dumps(metadata, sort_keys=True, indent=1) + "\n").encode(),
    )
    n = sum(len(v) for v in metadata.values())
    click.echo(f"wrote {n} cell masks")


@main.command("synth")
@click.option("--out", required=True, type=click.Path())
@click.option("--images", "n_images", type=int, default=20, show_default=True)
@click.option("--height", type=int, default=128, show_default=True)
@click.option("--width", type=int, default=128, show_default=True)
@click.option("--min-cells", type=int, default=1, show_default=True)
@click.option("--max-cells", type=int, default=5, show_default=True)
@click.option("--models", "n_models", type=int, default=0, show_default=True,
              help="Also write this many perturbed pseudo-model prediction files.")
@click.option("--gt-json/--no-gt-json", default=True, show_default=True,
              help="Also write the ground truth as a prediction document.")
@click.option("--jitter-sigma", type=float, default=synth.ModelKnobs.jitter_sigma,
              show_default=True)
@click.option("--dropout-prob", type=float, default=synth.ModelKnobs.dropout_prob,
              show_default=True)
@click.option("--merge-prob", type=float, default=synth.ModelKnobs.merge_prob,
              show_default=True)
@click.pass_context
@guarded
def synth_cmd(ctx, out, n_images, height, width, min_cells, max_cells,
              n_models, gt_json, jitter_sigma, dropout_prob, merge_prob):
    """Generate a synthetic dataset (and optional pseudo-model predictions)."""
    seed = ctx.obj["seed"]
    _log_resolved(ctx, out=out, images=n_images, models=n_models)
    spec = synth.SynthSpec(
        seed=seed, height=height, width=width,
        min_cells=min_cells, max_cells=max_cells,
    )
    out_root = Path(out)
    layout = dataio.DatasetLayout(
        images_dir=out_root / "images", masks_dir=out_root / "masks"
    )
    layout.images_dir.mkdir(parents=True, exist_ok=True)
    layout.masks_dir.mkdir(parents=True, exist_ok=True)

    threads = ctx.obj["threads"]
    indices = list(range(n_images))
    if threads > 1 and n_images > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            generated = list(pool.map(lambda i: synth.gen_image(spec, i), indices))
    else:
        generated = [synth.gen_image(spec, i) for i in indices]

    gt_sets = []
    for img, gt_set in generated:
        dataio.write_ground_truth_image(layout, img, gt_set)
        gt_sets.append(gt_set)
    if gt_json:
        dataio.write_predictions(gt_sets, out_root / "gt.json")

    knobs = synth.ModelKnobs(
        jitter_sigma=jitter_sigma, dropout_prob=dropout_prob, merge_prob=merge_prob
    )
    for m in range(n_models):
        source = f"model_{m:02d}"
        model_sets = []
        for i, gt_set in enumerate(gt_sets):
            pseed = int(np.random.SeedSequence([seed, m, i]).generate_state(1)[0])
            model_sets.append(synth.perturb(gt_set, knobs, pseed, source=source))
        dataio.write_predictions(model_sets, out_root / f"{source}.json")
    click.echo(f"generated {n_images} images, {n_models} pseudo-models")


if __name__ == "__main__":
    main()
