"""Acceptance gate: ten end-to-end properties, one printed pass/fail line each.

Run with plain pytest; the verdict lines are emitted outside the capture so
they always appear:

    python3 -m pytest tests/test_acceptance.py -v
"""

import json
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from cellseg import augment as aug
from cellseg import dataio, masks, synth
from cellseg.cells import merge_classes
from cellseg.cli import main as cli_main
from cellseg.ensemble import EnsembleConfig, ensemble_predictions, submission_set
from cellseg.evaluation import evaluate_dataset, worst_k
from cellseg.instances import CLASS_WHOLE_CELL, Instance, PredictionSet

from conftest import make_set
from oracles import miou_oracle


@pytest.fixture
def criterion(capsys):
    def check(name, ok):
        with capsys.disabled():
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        assert ok, name
    return check


@pytest.fixture(scope="module")
def corpus():
    """200 seeded synthetic images (<=128x128, <=8 cells) plus one
    perturbed pseudo-model prediction set per image."""
    spec = synth.SynthSpec(seed=2024, height=128, width=128, min_cells=1, max_cells=8)
    knobs = synth.ModelKnobs()
    gt_sets, pred_sets = [], []
    for i in range(200):
        _, gt = synth.gen_image(spec, i)
        gt_sets.append(gt)
        pred_sets.append(synth.perturb(gt, knobs, seed=10_000 + i))
    return gt_sets, pred_sets


def test_ac01_metric_oracle_equivalence(criterion, corpus):
    gt_sets, pred_sets = corpus
    t0 = time.perf_counter()
    got = evaluate_dataset(gt_sets, pred_sets).miou
    expected = miou_oracle(gt_sets, pred_sets)
    elapsed = time.perf_counter() - t0
    ok = abs(got - expected) <= 1e-12 and elapsed < 10.0
    criterion(
        f"metric oracle equivalence on 200 images "
        f"(|diff|={abs(got - expected):.1e}, {elapsed:.2f}s)",
        ok,
    )


def test_ac02_spurious_predictions_never_penalize(criterion, corpus):
    gt_sets, pred_sets = corpus
    baseline = evaluate_dataset(gt_sets, pred_sets).miou
    noisy = []
    for pset in pred_sets:
        extra = []
        for j in range(50):
            m = np.zeros((pset.height, pset.width), dtype=bool)
            m[(7 * j) % pset.height, (11 * j) % pset.width] = True
            extra.append(
                Instance(f"spurious.{j}", CLASS_WHOLE_CELL, m, 0.01, pset.source)
            )
        noisy.append(replace(pset, instances=list(pset.instances) + extra))
    polluted = evaluate_dataset(gt_sets, noisy).miou
    criterion(
        f"50 spurious predictions per image change miou by exactly 0 "
        f"(baseline={baseline:.6f})",
        polluted == baseline,
    )


def test_ac03_rle_round_trip(criterion):
    rng = np.random.default_rng(7)
    failures = 0
    for trial in range(1000):
        h = int(rng.integers(1, 40))
        w = int(rng.integers(1, 40))
        if trial == 0:
            m = np.zeros((h, w), bool)       # all background
        elif trial == 1:
            m = np.ones((h, w), bool)        # all foreground
        else:
            m = rng.random((h, w)) < rng.uniform(0.0, 1.0)
        if not np.array_equal(masks.rle_decode(masks.rle_encode(m)), m):
            failures += 1
    criterion(f"RLE decode(encode) identity on 1000 masks ({failures} failures)",
              failures == 0)


def test_ac04_ensemble_consensus_identity_and_conservation(criterion, corpus):
    gt_sets, _ = corpus
    knobs = synth.ModelKnobs()
    identity_ok = True
    conservation_ok = True
    for i, gt in enumerate(gt_sets[:20]):
        # identical inputs under three source names
        copies = [replace(gt, source=s) for s in ("a", "b", "c")]
        out = ensemble_predictions(copies, EnsembleConfig(reference_source="a"))
        ref_by_id = {inst.instance_id: inst for inst in copies[0].instances}
        for inst in out.refined.instances:
            if not np.array_equal(inst.mask, ref_by_id[inst.instance_id].mask):
                identity_ok = False

        # conservation on perturbed fixtures: every non-reference input
        # instance is either voted in (used_map) or passed through
        models = [
            replace(synth.perturb(gt, knobs, seed=777 + 3 * i + m), source=f"m{m}")
            for m in range(3)
        ]
        out = ensemble_predictions(models, EnsembleConfig(reference_source="m0"))
        n_inputs = sum(len(s.instances) for s in models[1:])
        n_used = sum(
            1 for contribs in out.used_map.values()
            for source, _ in contribs if source != "m0"
        )
        if n_used + len(out.passthrough) != n_inputs:
            conservation_ok = False
    criterion(
        "ensemble consensus identity and |used|+|passthrough| == inputs",
        identity_ok and conservation_ok,
    )


def test_ac05_ensemble_improves_over_median_model(criterion):
    spec = synth.SynthSpec(seed=31, height=96, width=96, min_cells=2, max_cells=5)
    knobs = synth.ModelKnobs()
    cfg = EnsembleConfig(reference_source="m0")
    wins = 0
    t0 = time.perf_counter()
    for trial in range(100):
        _, gt = synth.gen_image(spec, trial)
        models = [
            replace(synth.perturb(gt, knobs, seed=100_000 + 5 * trial + m),
                    source=f"m{m}")
            for m in range(5)
        ]
        singles = [evaluate_dataset([gt], [m]).miou for m in models]
        fused = submission_set(ensemble_predictions(models, cfg))
        fused_miou = evaluate_dataset([gt], [fused]).miou
        if fused_miou >= statistics.median(singles):
            wins += 1
    elapsed = time.perf_counter() - t0
    ok = wins >= 90 and elapsed < 60.0
    criterion(
        f"ensemble >= median single model in {wins}/100 trials ({elapsed:.1f}s)",
        ok,
    )


def test_ac06_cell_invariants_on_all_fixtures(criterion, corpus):
    gt_sets, pred_sets = corpus
    violations = 0
    cells_checked = 0
    for pset in list(gt_sets[:50]) + list(pred_sets[:50]):
        for cell in merge_classes(pset, pset):
            cells_checked += 1
            if not np.array_equal(cell.nucleus_mask | cell.cytoplasm_mask,
                                  cell.cell_mask):
                violations += 1
            elif (cell.nucleus_mask & cell.cytoplasm_mask).any():
                violations += 1
    criterion(
        f"nucleus/cytoplasm partition invariants on {cells_checked} cells "
        f"({violations} violations)",
        cells_checked > 0 and violations == 0,
    )


def test_ac07_training_set_arithmetic(criterion):
    ids = [f"img{i:04d}" for i in range(498)]
    train, val = dataio.split_train_val(ids, 0.2, seed=0)
    plan = aug.build_plan(0, len(train), 50)
    ok = len(train) == 398 and len(val) == 100 and plan.total_outputs == 20298
    criterion(
        f"498 images at 20% val -> {len(train)} train; "
        f"50 augmentations -> {plan.total_outputs} outputs",
        ok,
    )


def test_ac08_tta_exactness(criterion, corpus):
    gt_sets, _ = corpus
    invert_ok = True
    for gt in gt_sets[:10]:
        for variant in aug.TTA_VARIANTS:
            flipped = (
                gt if variant == aug.TTA_NONE
                else replace(gt, instances=[
                    inst.with_mask(masks.flip(inst.mask, variant))
                    for inst in gt.instances
                ])
            )
            back = aug.tta_invert(flipped, variant)
            for orig, inst in zip(gt.instances, back.instances):
                if not np.array_equal(inst.mask, orig.mask):
                    invert_ok = False

    merge_ok = True
    cfg = EnsembleConfig(reference_source=f"tta_{aug.TTA_NONE}")
    for gt in gt_sets[:10]:
        copies = [replace(gt, source=f"tta_{v}") for v in aug.TTA_VARIANTS]
        out = ensemble_predictions(copies, cfg)
        orig_by_id = {inst.instance_id: inst for inst in gt.instances}
        if {i.instance_id for i in out.refined.instances} != set(orig_by_id):
            merge_ok = False
            continue
        for inst in out.refined.instances:
            if not np.array_equal(inst.mask, orig_by_id[inst.instance_id].mask):
                merge_ok = False
    criterion(
        "TTA flips invert exactly; merging four unperturbed variants "
        "reproduces the originals",
        invert_ok and merge_ok,
    )


def _run_cli(runner, args):
    result = runner.invoke(cli_main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def _dir_bytes(root):
    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_ac09_cli_determinism_across_runs_and_threads(criterion, tmp_path):
    runner = CliRunner()

    def synth_args(out):
        return ["synth", "--out", str(out), "--images", "3", "--models", "2",
                "--max-cells", "4", "--height", "64", "--width", "64"]

    base = tmp_path / "base"
    _run_cli(runner, ["--seed", "9", "--quiet"] + synth_args(base))
    tta_files = []
    sets = dataio.read_predictions(base / "gt.json")
    for variant in aug.TTA_VARIANTS:
        path = tmp_path / f"tta_{variant}.json"
        dataio.write_predictions([aug.tta_invert(s, variant) for s in sets], path)
        tta_files += [f"--{variant}" if variant != "none" else "--none", str(path)]

    def commands(run_dir):
        run_dir.mkdir()
        return [
            synth_args(run_dir / "synth"),
            ["evaluate", "--gt", str(base), "--pred", str(base / "model_00.json"),
             "--out", str(run_dir / "report.json")],
            ["ensemble", "--reference", str(base / "model_00.json"),
             "--models", str(base / "model_01.json"),
             "--out", str(run_dir / "ens.json")],
            ["augment", "--gt", str(base), "--out", str(run_dir / "aug"),
             "--count", "2"],
            ["tta-merge"] + tta_files + ["--out", str(run_dir / "tta.json")],
            ["merge-classes", "--pred", str(base / "gt.json"),
             "--out", str(run_dir / "mc")],
        ]

    snapshots = []
    for threads, name in ((1, "run1"), (3, "run3")):
        run_dir = tmp_path / name
        for args in commands(run_dir):
            _run_cli(runner, ["--seed", "9", "--threads", str(threads),
                              "--quiet"] + args)
        snapshots.append(_dir_bytes(run_dir))
    criterion(
        "every subcommand is byte-identical across reruns and --threads values",
        snapshots[0] == snapshots[1],
    )


def test_ac10_worst_case_diagnostic(criterion):
    shape = (150, 150)

    def flat(start, count):
        m = np.zeros(shape[0] * shape[1], dtype=bool)
        m[start:start + count] = True
        return m.reshape(shape)

    # predictions are strict subsets of their GT, so IoU == |pred| / |gt|
    layout = [
        ("g1", 0, 1250, 797),       # 0.6376
        ("g2", 1300, 625, 422),     # 0.6752
        ("g3", 2000, 5000, 3803),   # 0.7606
        ("g4", 7100, 5000, 3867),   # 0.7734
        ("g5", 12200, 100, 100),    # 1.0
        ("g6", 12400, 100, 100),    # 1.0
    ]
    gts, preds = [], []
    for name, start, gt_px, pred_px in layout:
        gts.append(Instance(name, CLASS_WHOLE_CELL, flat(start, gt_px), 1.0, "gt"))
        preds.append(Instance(f"p_{name}", CLASS_WHOLE_CELL, flat(start, pred_px),
                              0.9, "m"))
    report = evaluate_dataset(
        [make_set("img", "gt", gts, shape)], [make_set("img", "m", preds, shape)]
    )
    worst = worst_k(report, 4)
    got = [(m.gt_instance_id, m.best_iou) for m in worst]
    expected = [("g1", 797 / 1250), ("g2", 422 / 625),
                ("g3", 3803 / 5000), ("g4", 3867 / 5000)]
    all_others_perfect = all(
        m.best_iou == 1.0 for m in report.per_gt
        if m.gt_instance_id in ("g5", "g6")
    )
    criterion(
        "worst_k lists exactly the four sub-0.8 matches in ascending order",
        got == expected and all_others_perfect,
    )
