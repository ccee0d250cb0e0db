"""End-to-end checks, one per numbered criterion.

Each test funnels its verdict through check_criterion so the terminal
summary prints one pass/fail line per criterion. The two training-based
checks (7 and 8) run for several minutes each on CPU; everything else is
fast. Heavy tests release their graph state afterwards so the peak memory
stays bounded to one model at a time.
"""

import gc
import io
import math
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conftest import build_flat_tree, check_criterion
from mri_bench.dataset import (KAGGLE_CLASS_COUNTS, KAGGLE_STATED_TOTAL,
                               scan_dataset, stratified_split)


def _release_graph_state():
    import keras
    keras.backend.clear_session()
    gc.collect()


def test_criterion_01_dataset_count_verification(tmp_path, capsys):
    # One encoded tile reused for every file; the timed part is the scan
    # plus verification, not the synthesis.
    buf = io.BytesIO()
    Image.fromarray(np.full((16, 16), 128, dtype=np.uint8)).save(buf, "PNG")
    blob = buf.getvalue()
    root = tmp_path / "dataset"
    for split_dir, count_index in (("Training", 1), ("Testing", 2)):
        for name, counts in KAGGLE_CLASS_COUNTS.items():
            class_dir = root / split_dir / name
            class_dir.mkdir(parents=True)
            for i in range(counts[count_index]):
                (class_dir / f"{name}_{i:05d}.png").write_bytes(blob)

    from mri_bench.cli import main

    out = tmp_path / "manifest.csv"
    start = time.monotonic()
    code = main(["prepare", "--root", str(root), "--out", str(out),
                 "--expect-paper", "--strict"])
    elapsed = time.monotonic() - start
    stdout = capsys.readouterr().out

    checks = [
        code == 0,
        elapsed < 60.0,
        "MISMATCH" not in stdout,
        "all counts match" in stdout,
        "expected 7023, actual 7023" in stdout,
        str(KAGGLE_STATED_TOTAL) in stdout,  # the 7022-vs-7023 note
    ]
    for total, train_n, val_n in KAGGLE_CLASS_COUNTS.values():
        checks.append(f"{total}/{total}" in stdout)
        checks.append(f"{train_n}/{train_n}" in stdout)
    check_criterion(1, all(checks), f"exit={code}, {elapsed:.1f}s")


def test_criterion_02_head_shapes_and_parameter_count():
    from mri_bench.model import build_head

    plan = build_head(2048)
    shapes = [p.output_shape for p in plan]
    expected = [(4, 4, 2048), (32768,), (1024,), (1024,), (1024,), (1024,), (4,)]
    # independent oracle: (fan_in + 1) * fan_out for each dense layer
    oracle = (32768 + 1) * 1024 + (1024 + 1) * 1024 + (1024 + 1) * 4
    total = sum(p.params for p in plan)
    ok = shapes == expected and total == oracle == 34_609_156
    check_criterion(2, ok, f"params={total:,}")


def test_criterion_03_augmentation_group_identities():
    from mri_bench.augment import PixelTensor, ValueRange, transform_by_name

    rng = np.random.default_rng(3)
    n_images = 120
    for _ in range(n_images):
        h, w = (int(v) for v in rng.integers(8, 40, size=2))
        img = PixelTensor(
            data=rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8),
            value_range=ValueRange.RAW_0_255)

        def t(name, x):
            return transform_by_name(x, name)

        r90 = t("rot90", img)
        assert np.array_equal(
            t("rot90", t("rot90", t("rot90", r90))).data, img.data)
        assert np.array_equal(t("hflip", t("hflip", img)).data, img.data)
        assert np.array_equal(t("vflip", t("vflip", img)).data, img.data)
        assert np.array_equal(t("rot180", img).data,
                              t("hflip", t("vflip", img)).data)
        assert r90.data.shape == (w, h, 3)  # spatial dims swap, channels stay
        for name in ("rot90", "rot180", "rot270", "hflip", "vflip"):
            assert np.array_equal(np.sort(t(name, img).data, axis=None),
                                  np.sort(img.data, axis=None))
    check_criterion(3, True, f"{n_images} images")


def test_criterion_04_gradient_check():
    from mri_bench.model import HeadSpec, gradient_check

    # 5 variables get the full 20 coordinates, the 4-wide output bias is
    # checked exhaustively: 104 coordinates total
    result = gradient_check(feature_shape=(4, 4, 64), head_spec=HeadSpec(),
                            batch_size=4, samples_per_variable=20, seed=0)
    _release_graph_state()
    ok = result.max_rel_error < 1e-4 and result.coordinates_checked >= 100
    check_criterion(
        4, ok, f"max_rel={result.max_rel_error:.2e}, "
               f"coords={result.coordinates_checked}")


def test_criterion_05_early_stopping_state_machine():
    from mri_bench.train import EarlyStopState, update_early_stop

    def drive(losses, patience):
        state = EarlyStopState(patience=patience)
        checkpointed = []
        stopped_at = None
        for epoch, loss in enumerate(losses, start=1):
            state, should_checkpoint, should_stop = update_early_stop(state, loss)
            if should_checkpoint:
                checkpointed.append(epoch)
            if should_stop:
                stopped_at = epoch
                break
        return state, checkpointed, stopped_at

    # minimum at epoch 21, then strictly rising
    losses = [3.0 - 0.1 * e for e in range(1, 22)]
    losses += [losses[-1] + 0.05 * k for k in range(1, 30)]
    state, checkpointed, stopped_at = drive(losses, patience=9)
    minimum_case = (stopped_at == 30 and state.best_epoch == 21
                    and checkpointed[-1] == 21)

    monotone = [5.0 - 0.05 * e for e in range(1, 51)]
    state, checkpointed, stopped_at = drive(monotone, patience=9)
    monotone_case = (stopped_at is None and state.best_epoch == 50
                     and checkpointed == list(range(1, 51)))

    state, checkpointed, stopped_at = drive([1.0, 1.0, 1.0], patience=9)
    tie_case = checkpointed == [1]  # equality is not an improvement

    check_criterion(5, minimum_case and monotone_case and tie_case)


def test_criterion_06_checkpoint_optimality(manifest_64, tmp_path):
    from mri_bench.augment import AugmentationSpec
    from mri_bench.evaluate import evaluate
    from mri_bench.model import BackboneSpec, HeadSpec, build_model
    from mri_bench.train import DataPipeline, TrainConfig, train

    backbone_spec = BackboneSpec(id="efficientnet_b1", input_size=(64, 64),
                                 weights="random")
    head_spec = HeadSpec(pooled_spatial=(2, 2), dense_widths=(64, 32),
                         dropout_rate=0.5, num_classes=4)
    config = TrainConfig(batch_size=8, max_epochs=5, patience=5, seed=6,
                         input_size=(64, 64))
    pipelines = {
        split: DataPipeline(
            manifest_64, split, backbone_id=backbone_spec.id,
            input_size=(64, 64), batch_size=8,
            augmentation=AugmentationSpec() if split == "train" else None,
            seed=config.seed)
        for split in ("train", "val")
    }
    model = build_model(backbone_spec, head_spec, trainable_scope="all",
                        seed=config.seed, load_pretrained=False)
    run_dir = tmp_path / "run"
    history = train(model, pipelines["train"], pipelines["val"], config,
                    run_dir)
    del model, pipelines
    _release_graph_state()

    recorded_min = min(m.val_loss for m in history.epochs)
    report = evaluate(Path(history.checkpoint_path), manifest_64, split="val")
    _release_graph_state()
    gap = abs(report.val_loss - recorded_min)
    check_criterion(6, gap < 1e-5, f"gap={gap:.2e}")


def test_criterion_07_overfit_smoke(manifest_64, tmp_path):
    from mri_bench.augment import AugmentationSpec
    from mri_bench.evaluate import evaluate
    from mri_bench.model import BackboneSpec, build_model
    from mri_bench.train import DataPipeline, TrainConfig, train

    backbone_spec = BackboneSpec(id="resnet50", input_size=(224, 224),
                                 weights="random")
    config = TrainConfig(batch_size=8, max_epochs=15, patience=15, seed=7,
                         input_size=(224, 224))
    train_pipeline = DataPipeline(
        manifest_64, "train", backbone_id="resnet50", input_size=(224, 224),
        batch_size=8, augmentation=AugmentationSpec(), seed=7)
    val_pipeline = DataPipeline(
        manifest_64, "val", backbone_id="resnet50", input_size=(224, 224),
        batch_size=8, augmentation=None, seed=7)
    model = build_model(backbone_spec, trainable_scope="head_only", seed=7,
                        load_pretrained=False)
    history = train(model, train_pipeline, val_pipeline, config,
                    tmp_path / "run")
    del model, train_pipeline, val_pipeline
    _release_graph_state()

    # dropout keeps the running train accuracy pessimistic, so the criterion
    # is measured the way accuracy is reported: inference mode on the saved
    # checkpoint over the training split
    report = evaluate(Path(history.checkpoint_path), manifest_64,
                      split="train")
    _release_graph_state()
    ok = len(history.epochs) <= 15 and report.train_accuracy >= 0.95
    check_criterion(
        7, ok, f"train_acc={report.train_accuracy:.4f} "
               f"after {len(history.epochs)} epochs")


def test_criterion_08_desk_scale_learning_signal(tmp_path):
    from mri_bench.augment import AugmentationSpec
    from mri_bench.model import BackboneSpec, build_model
    from mri_bench.train import DataPipeline, TrainConfig, train

    root = tmp_path / "images"
    build_flat_tree(root, per_class=100, size=224, seed=11)
    manifest = stratified_split(scan_dataset(root, layout="flat"),
                                ratio=0.8, seed=11)
    counts = manifest.counts()
    assert all(v == (100, 80, 20) for v in counts.values())

    backbone_spec = BackboneSpec(id="efficientnet_b1", input_size=(224, 224),
                                 weights="random")
    config = TrainConfig(batch_size=8, max_epochs=5, patience=5, seed=11,
                         input_size=(224, 224))
    train_pipeline = DataPipeline(
        manifest, "train", backbone_id="efficientnet_b1",
        input_size=(224, 224), batch_size=8,
        augmentation=AugmentationSpec(), seed=11)
    val_pipeline = DataPipeline(
        manifest, "val", backbone_id="efficientnet_b1",
        input_size=(224, 224), batch_size=8, augmentation=None, seed=11)
    model = build_model(backbone_spec, trainable_scope="all", seed=11,
                        load_pretrained=False)
    history = train(model, train_pipeline, val_pipeline, config,
                    tmp_path / "run")
    del model, train_pipeline, val_pipeline
    _release_graph_state()

    best_val_acc = max(m.val_accuracy for m in history.epochs)
    check_criterion(8, best_val_acc > 0.40,
                    f"best val_acc={best_val_acc:.4f} over "
                    f"{len(history.epochs)} epochs (chance 0.25)")


def test_criterion_09_report_fidelity(tmp_path):
    from mri_bench.evaluate import EvaluationReport, emit_results_table, summarize_best

    recorded = (
        ("resnet50", 30, 0.7282, 0.6719, 0.7932, 0.4593),
        ("efficientnet_b7", 39, 0.8419, 0.5129, 0.8818, 0.2807),
        ("efficientnet_v2_b1", 43, 0.8491, 0.5695, 0.8917, 0.2768),
        ("efficientnet_b1", 40, 0.8767, 0.4076, 0.8955, 0.3152),
    )
    reports = [
        EvaluationReport(model_id=mid, split="val", num_samples=0,
                         confusion=(), per_class={}, class_names=(),
                         epochs_trained=epochs, train_accuracy=ta,
                         train_loss=tl, val_accuracy=va, val_loss=vl)
        for mid, epochs, ta, tl, va, vl in recorded
    ]
    out = tmp_path / "results.csv"
    emit_results_table(reports, [], out)
    lines = out.read_text().splitlines()
    expected = [
        "model,epochs,train_accuracy,train_loss,val_accuracy,val_loss",
        "resnet50,30,0.7282,0.6719,0.7932,0.4593",
        "efficientnet_b7,39,0.8419,0.5129,0.8818,0.2807",
        "efficientnet_v2_b1,43,0.8491,0.5695,0.8917,0.2768",
        "efficientnet_b1,40,0.8767,0.4076,0.8955,0.3152",
    ]
    ranking = summarize_best(reports)
    ok = (lines == expected
          and ranking[0] == "efficientnet_b1"
          and ranking[-1] == "resnet50")
    check_criterion(9, ok, f"ranking={ranking}")


def test_criterion_10_readme_documents_long_run_target():
    readme_path = Path(__file__).resolve().parents[1] / "README.md"
    if not readme_path.exists():
        check_criterion(10, False, "README.md missing")
        return
    text = readme_path.read_text()
    required = (
        "0.7932", "0.8818", "0.8917", "0.8955",  # per-model targets
        "±0.03",
        "long-run",
    )
    missing = [token for token in required if token not in text]
    # the tolerance must be framed as an aspirational target, not a gate
    framing = "not" in text.lower() and "gate" in text.lower()
    ok = not missing and framing
    check_criterion(10, ok, f"missing={missing}" if missing else "")
