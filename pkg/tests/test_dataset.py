import numpy as np
import pytest
from PIL import Image

from conftest import build_flat_tree, build_synthetic_tree, make_class_image
from mri_bench.dataset import (CLASS_NAMES, KAGGLE_CLASS_COUNTS,
                               KAGGLE_STATED_TOTAL, DatasetManifest,
                               ImageRecord, load_manifest, save_manifest,
                               scan_dataset, stratified_split, verify_counts)
from mri_bench.errors import ConfigurationError, ManifestError


def test_scan_pre_split_counts_and_labels(tree_64, manifest_64):
    assert len(manifest_64) == 4 * (10 + 4)
    assert manifest_64.skipped == 0
    assert manifest_64.root == str(tree_64)
    counts = manifest_64.counts()
    for name in CLASS_NAMES:
        assert counts[name] == (14, 10, 4)
    for rec in manifest_64.records:
        # labels come from directory names, splits from Training/Testing
        assert rec.path.split("/")[1] == rec.label
        assert rec.split == ("train" if rec.path.startswith("Training") else "val")
        assert (rec.width, rec.height) == (64, 64)


def test_scan_records_are_path_sorted(manifest_64):
    paths = [r.path for r in manifest_64.records]
    assert paths == sorted(paths)


def test_scan_flat_layout_leaves_splits_unassigned(tmp_path):
    build_flat_tree(tmp_path, per_class=3)
    manifest = scan_dataset(tmp_path, layout="flat")
    assert len(manifest) == 12
    assert all(r.split == "unassigned" for r in manifest.records)


def test_scan_rejects_missing_root(tmp_path):
    with pytest.raises(ConfigurationError):
        scan_dataset(tmp_path / "nope", layout="flat")


def test_scan_rejects_unknown_class_directory(tmp_path):
    build_flat_tree(tmp_path, per_class=1)
    (tmp_path / "lesion").mkdir()
    with pytest.raises(ConfigurationError, match="lesion"):
        scan_dataset(tmp_path, layout="flat")


def test_scan_rejects_missing_class_directory(tmp_path):
    build_flat_tree(tmp_path, per_class=1)
    for p in (tmp_path / "notumor").iterdir():
        p.unlink()
    (tmp_path / "notumor").rmdir()
    with pytest.raises(ConfigurationError, match="notumor"):
        scan_dataset(tmp_path, layout="flat")


def test_scan_skips_undecodable_images(tmp_path):
    build_flat_tree(tmp_path, per_class=2)
    (tmp_path / "glioma" / "broken.png").write_bytes(b"not a png at all")
    manifest = scan_dataset(tmp_path, layout="flat")
    assert manifest.skipped == 1
    assert len(manifest) == 8
    assert all("broken" not in r.path for r in manifest.records)


def test_scan_ignores_non_image_files(tmp_path):
    build_flat_tree(tmp_path, per_class=2)
    (tmp_path / "glioma" / "notes.txt").write_text("scratch")
    manifest = scan_dataset(tmp_path, layout="flat")
    assert manifest.skipped == 0
    assert len(manifest) == 8


@pytest.mark.parametrize("per_class", [5, 9, 10, 13])
def test_stratified_split_uses_floor_rule_per_class(tmp_path, per_class):
    build_flat_tree(tmp_path, per_class=per_class)
    manifest = stratified_split(scan_dataset(tmp_path, layout="flat"), 0.8, seed=3)
    expected_train = int(np.floor(0.8 * per_class))
    for name in CLASS_NAMES:
        total, train_n, val_n = manifest.counts()[name]
        assert (total, train_n, val_n) == (
            per_class, expected_train, per_class - expected_train)


def test_stratified_split_is_deterministic_and_seed_sensitive(tmp_path):
    build_flat_tree(tmp_path, per_class=20)
    base = scan_dataset(tmp_path, layout="flat")
    a = stratified_split(base, 0.8, seed=5)
    b = stratified_split(base, 0.8, seed=5)
    c = stratified_split(base, 0.8, seed=6)
    assert [r.split for r in a.records] == [r.split for r in b.records]
    assert [r.split for r in a.records] != [r.split for r in c.records]


def test_stratified_split_requires_reset_once_assigned(tree_64, manifest_64):
    with pytest.raises(ConfigurationError, match="reset"):
        stratified_split(manifest_64, 0.8, seed=1)
    resplit = stratified_split(manifest_64, 0.5, seed=1, reset=True)
    for name in CLASS_NAMES:
        assert resplit.counts()[name] == (14, 7, 7)


def test_stratified_split_rejects_bad_ratio(manifest_64):
    for ratio in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(ConfigurationError):
            stratified_split(manifest_64, ratio, seed=0, reset=True)


def test_manifest_roundtrip(tmp_path, manifest_64):
    split = stratified_split(manifest_64, 0.75, seed=9, reset=True)
    path = tmp_path / "manifest.csv"
    save_manifest(split, path)
    loaded = load_manifest(path)
    # image dimensions are probe-time extras and are not persisted
    assert [(r.path, r.label, r.split) for r in loaded.records] == \
        [(r.path, r.label, r.split) for r in split.records]
    assert loaded.class_names == split.class_names
    assert loaded.seed == 9
    assert loaded.split_ratio == 0.75
    assert loaded.root == split.root
    assert loaded.skipped == split.skipped


def test_manifest_save_is_byte_stable(tmp_path, manifest_64):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    save_manifest(manifest_64, p1)
    save_manifest(manifest_64, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_manifest_names_malformed_line(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("path,label,split\na.png,glioma,train\nb.png,glioma\n")
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(path)


def test_load_manifest_rejects_unknown_label_and_split(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("path,label,split\na.png,lesion,train\n")
    with pytest.raises(ManifestError, match="lesion"):
        load_manifest(path)
    path.write_text("path,label,split\na.png,glioma,holdout\n")
    with pytest.raises(ManifestError, match="holdout"):
        load_manifest(path)


def test_load_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing.csv")


def test_verify_counts_all_match(manifest_64):
    expected = {name: (14, 10, 4) for name in CLASS_NAMES}
    verification = verify_counts(manifest_64, expected)
    assert verification.all_match
    text = verification.render()
    assert "all counts match" in text
    assert "MISMATCH" not in text


def test_verify_counts_flags_mismatch(manifest_64):
    expected = {name: (14, 10, 4) for name in CLASS_NAMES}
    expected["glioma"] = (15, 11, 4)
    verification = verify_counts(manifest_64, expected)
    assert not verification.all_match
    assert "MISMATCH" in verification.render()


def test_verify_counts_reports_stated_total_discrepancy(manifest_64):
    expected = {name: (14, 10, 4) for name in CLASS_NAMES}
    verification = verify_counts(manifest_64, expected, stated_total=55)
    text = verification.render()
    assert "55" in text and "56" in text
    # the discrepancy is reported, never an error
    assert verification.all_match


def test_recorded_count_table_is_internally_consistent():
    # the stated grand total disagrees with the class sums by exactly one;
    # both values are carried as recorded
    total = sum(v[0] for v in KAGGLE_CLASS_COUNTS.values())
    assert total == 7023
    assert KAGGLE_STATED_TOTAL == 7022
    for name, (class_total, train_n, val_n) in KAGGLE_CLASS_COUNTS.items():
        assert class_total == train_n + val_n


def test_manifest_helpers(manifest_64):
    assert manifest_64.class_index("glioma") == 0
    assert manifest_64.class_index("notumor") == 3
    train = manifest_64.records_for_split("train")
    assert len(train) == 40 and all(r.split == "train" for r in train)
    rec = manifest_64.records[0]
    resolved = manifest_64.resolve_path(rec)
    assert resolved.is_file()
    with Image.open(resolved) as img:
        assert img.size == (64, 64)


def test_image_record_rejects_unknown_label_and_split():
    with pytest.raises(ManifestError):
        ImageRecord(path="a.png", label="cyst")
    with pytest.raises(ManifestError):
        ImageRecord(path="a.png", label="glioma", split="holdout")


def test_manifest_rejects_label_outside_class_order():
    record = ImageRecord(path="a.png", label="glioma")
    with pytest.raises(ManifestError):
        DatasetManifest(records=(record,), class_names=("meningioma", "notumor"),
                        root=".")
