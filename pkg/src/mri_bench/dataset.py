"""Dataset ingestion, manifests, stratified splitting and count verification.

The dataset on disk is a directory tree of JPEG/PNG images, either already
partitioned (``root/Training/<class>/``, ``root/Testing/<class>/``) or flat
(``root/<class>/``). Scanning produces an immutable manifest that is the
single source of truth for every downstream run.
"""

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path, PurePosixPath
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ManifestError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

# Fixed class order; label index = position here, used for one-hot encoding
# everywhere downstream.
CLASS_NAMES = ("glioma", "meningioma", "pituitary", "notumor")

SPLITS = ("train", "val", "unassigned")

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png"}

# Published per-class distribution of the Kaggle brain-tumor MRI dataset
# (total, training, validation). The source description states a grand total
# of 7022 images while these per-class totals sum to 7023; verification
# reports both numbers and treats neither as an error.
KAGGLE_CLASS_COUNTS = {
    "glioma": (1621, 1321, 300),
    "meningioma": (1645, 1339, 306),
    "pituitary": (1757, 1457, 300),
    "notumor": (2000, 1595, 405),
}
KAGGLE_STATED_TOTAL = 7022


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image. `path` is relative to the manifest root."""

    path: str
    label: str
    split: str = "unassigned"
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise ManifestError(f"unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable collection of image records plus split bookkeeping."""

    records: tuple
    class_names: tuple = CLASS_NAMES
    root: str = "."
    seed: int = 0
    split_ratio: float = 0.8
    skipped: int = 0

    def __post_init__(self):
        for rec in self.records:
            if rec.label not in self.class_names:
                raise ManifestError(
                    f"record label {rec.label!r} not in class order {self.class_names}"
                )

    def __len__(self):
        return len(self.records)

    def class_index(self, label: str) -> int:
        return self.class_names.index(label)

    def records_for_split(self, split: str):
        return [r for r in self.records if r.split == split]

    def counts(self):
        """Per-class (total, train, val) counts, in class order."""
        out = {}
        for name in self.class_names:
            recs = [r for r in self.records if r.label == name]
            out[name] = (
                len(recs),
                sum(1 for r in recs if r.split == "train"),
                sum(1 for r in recs if r.split == "val"),
            )
        return out

    def resolve_path(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else Path(self.root) / p


def _probe_image(path: Path):
    """Return (width, height) if the file parses as an image, else None."""
    try:
        with Image.open(path) as img:
            return img.size
    except Exception:
        return None


def _list_class_dirs(parent: Path, class_names) -> dict:
    """Map class name -> directory under `parent`, validating the layout."""
    found = {}
    for entry in sorted(parent.iterdir()):
        if not entry.is_dir():
            continue
        if entry.name not in class_names:
            raise ConfigurationError(
                f"unknown class directory {entry} (expected one of {', '.join(class_names)})"
            )
        found[entry.name] = entry
    for name in class_names:
        if name not in found:
            raise ConfigurationError(f"missing class directory {parent / name}")
    return found


def scan_dataset(root, layout: str = "pre_split") -> DatasetManifest:
    """Scan a dataset tree into a manifest.

    `layout="pre_split"` expects ``root/Training`` and ``root/Testing``
    parents and maps them to the train/val splits; `layout="flat"` expects
    class directories directly under `root` and leaves splits unassigned.
    Undecodable files are skipped and counted in the manifest's `skipped`
    field.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    if layout not in ("pre_split", "flat"):
        raise ConfigurationError(f"unknown layout {layout!r}")

    sources = []  # (class_dir, label, split)
    if layout == "pre_split":
        for part, split in (("Training", "train"), ("Testing", "val")):
            parent = root / part
            if not parent.is_dir():
                raise ConfigurationError(f"missing directory {parent} for pre_split layout")
            for name, class_dir in _list_class_dirs(parent, CLASS_NAMES).items():
                sources.append((class_dir, name, split))
    else:
        for name, class_dir in _list_class_dirs(root, CLASS_NAMES).items():
            sources.append((class_dir, name, "unassigned"))

    candidates = []  # (relpath, label, split, abspath)
    for class_dir, label, split in sources:
        files = [
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        ]
        if not files:
            logger.warning("class directory %s contains no images", class_dir)
        for p in files:
            rel = PurePosixPath(p.relative_to(root).as_posix())
            candidates.append((str(rel), label, split, p))
    candidates.sort(key=lambda c: c[0])

    # Probe in parallel; results keep candidate order so the manifest is
    # identical to a sequential scan.
    with ThreadPoolExecutor(max_workers=8) as pool:
        sizes = list(pool.map(lambda c: _probe_image(c[3]), candidates))

    records = []
    skipped = 0
    for (rel, label, split, path), size in zip(candidates, sizes):
        if size is None:
            skipped += 1
            logger.warning("skipping undecodable image %s", path)
            continue
        records.append(
            ImageRecord(path=rel, label=label, split=split, width=size[0], height=size[1])
        )
    if skipped:
        logger.warning("skipped %d undecodable file(s) during scan", skipped)

    return DatasetManifest(records=tuple(records), root=str(root), skipped=skipped)


def stratified_split(manifest: DatasetManifest, ratio: float, seed: int,
                     reset: bool = False) -> DatasetManifest:
    """Assign train/val splits per class at the given ratio.

    Per class, ``floor(ratio * n)`` records go to train and the rest to
    val. The assignment depends only on (seed, sorted record paths); record
    order is preserved. Re-splitting an already-assigned manifest requires
    `reset=True`.
    """
    if not 0 < ratio < 1:
        raise ConfigurationError(f"split ratio must be in (0, 1), got {ratio}")
    assigned = [r for r in manifest.records if r.split != "unassigned"]
    if assigned and not reset:
        raise ConfigurationError(
            f"manifest already has {len(assigned)} assigned record(s); "
            "pass reset=True to re-split"
        )

    new_split = {}
    for name in manifest.class_names:
        class_records = sorted(
            (r for r in manifest.records if r.label == name), key=lambda r: r.path
        )
        n = len(class_records)
        n_train = math.floor(ratio * n)
        rng = np.random.default_rng(derive_seed(seed, "split", name))
        order = rng.permutation(n)
        for rank, idx in enumerate(order):
            new_split[class_records[idx].path] = "train" if rank < n_train else "val"

    records = tuple(replace(r, split=new_split[r.path]) for r in manifest.records)
    return replace(manifest, records=records, seed=seed, split_ratio=ratio)


@dataclass(frozen=True)
class ClassCountCheck:
    name: str
    expected: tuple  # (total, train, val)
    actual: tuple

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


@dataclass(frozen=True)
class CountVerification:
    """Outcome of comparing a manifest against an expected count table."""

    checks: tuple
    expected_sum: int
    actual_sum: int
    stated_total: Optional[int] = None

    @property
    def all_match(self) -> bool:
        return all(c.ok for c in self.checks)

    def render(self) -> str:
        lines = ["class            total (exp/act)   train (exp/act)   val (exp/act)   status"]
        for c in self.checks:
            lines.append(
                "%-16s %5d/%-5d        %5d/%-5d        %4d/%-4d       %s"
                % (
                    c.name,
                    c.expected[0], c.actual[0],
                    c.expected[1], c.actual[1],
                    c.expected[2], c.actual[2],
                    "match" if c.ok else "MISMATCH",
                )
            )
        lines.append(f"sum of class totals: expected {self.expected_sum}, actual {self.actual_sum}")
        if self.stated_total is not None and self.stated_total != self.expected_sum:
            lines.append(
                f"note: source description states {self.stated_total} images in total, "
                f"while the class totals sum to {self.expected_sum}; both are reported "
                "as published and the difference is not treated as an error"
            )
        lines.append("result: " + ("all counts match" if self.all_match else "count mismatches found"))
        return "\n".join(lines)


def verify_counts(manifest: DatasetManifest, expected: dict,
                  stated_total: Optional[int] = None) -> CountVerification:
    """Compare manifest counts against an expected per-class table.

    `expected` maps class name to (total, train, val). This is a reporting
    tool: mismatches are recorded, never raised.
    """
    actual = manifest.counts()
    checks = []
    for name in manifest.class_names:
        exp = tuple(expected.get(name, (0, 0, 0)))
        checks.append(ClassCountCheck(name=name, expected=exp, actual=actual[name]))
    return CountVerification(
        checks=tuple(checks),
        expected_sum=sum(e[0] for e in expected.values()),
        actual_sum=sum(a[0] for a in actual.values()),
        stated_total=stated_total,
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest as CSV records followed by a metadata block."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label", "split"])
    for rec in manifest.records:
        writer.writerow([rec.path, rec.label, rec.split])
    buf.write(f"# seed={manifest.seed}\n")
    buf.write(f"# ratio={manifest.split_ratio}\n")
    buf.write(f"# class_order={','.join(manifest.class_names)}\n")
    buf.write(f"# root={manifest.root}\n")
    buf.write(f"# skipped={manifest.skipped}\n")
    path.write_text(buf.getvalue(), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    """Read a manifest written by `save_manifest`.

    Raises `ManifestError` naming the offending line for malformed rows or
    unknown label/split values.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file {path} does not exist")
    text = path.read_text(encoding="utf-8")

    meta = {}
    data_lines = []  # (lineno, text)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        data_lines.append((lineno, line))

    if not data_lines or data_lines[0][1].strip() != "path,label,split":
        raise ManifestError(f"{path}: line 1: expected header 'path,label,split'")

    class_names = CLASS_NAMES
    if "class_order" in meta:
        class_names = tuple(meta["class_order"].split(","))

    records = []
    for lineno, line in data_lines[1:]:
        row = next(csv.reader([line]))
        if len(row) != 3:
            raise ManifestError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
        rec_path, label, split = row
        if label not in class_names:
            raise ManifestError(f"{path}: line {lineno}: unknown label {label!r}")
        if split not in SPLITS:
            raise ManifestError(f"{path}: line {lineno}: unknown split {split!r}")
        records.append(ImageRecord(path=rec_path, label=label, split=split))

    try:
        seed = int(meta.get("seed", 0))
        ratio = float(meta.get("ratio", 0.8))
        skipped = int(meta.get("skipped", 0))
    except ValueError as exc:
        raise ManifestError(f"{path}: malformed metadata block: {exc}") from exc

    return DatasetManifest(
        records=tuple(records),
        class_names=class_names,
        root=meta.get("root", "."),
        seed=seed,
        split_ratio=ratio,
        skipped=skipped,
    )
