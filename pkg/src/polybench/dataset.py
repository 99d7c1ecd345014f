"""Dihedral augmentation, dataset manifests and the 12-fold 2:1:1 plan."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._util import atomic_write_text, sha256_bytes, sha256_file
from .errors import DigestMismatchError, ManifestError, MissingArtifactError
from .phantom_synth import IMAGE_SIZE, PhantomSpec, PolypClass, TexturalImage


class AugmentationOp(enum.Enum):
    ID = "id"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    FLIP = "flip"
    FLIP_ROT90 = "flip_rot90"
    FLIP_ROT180 = "flip_rot180"
    FLIP_ROT270 = "flip_rot270"

    @property
    def quarter_turns(self) -> int:
        _, _, deg = self.value.rpartition("rot")
        return int(deg) // 90 if deg.isdigit() else 0

    @property
    def flipped(self) -> bool:
        return self.value.startswith("flip")


AUGMENTATION_OPS = tuple(AugmentationOp)


def apply_op(pixels: np.ndarray, op: AugmentationOp) -> np.ndarray:
    """Counter-clockwise rotation by ``op.quarter_turns``, then an up-down flip if requested."""
    out = np.rot90(pixels, op.quarter_turns, axes=(0, 1))
    if op.flipped:
        out = np.flipud(out)
    return np.ascontiguousarray(out)


def augment_image(img: TexturalImage) -> list[tuple[AugmentationOp, TexturalImage]]:
    if not isinstance(img, TexturalImage):
        raise ValueError("augment_image expects a TexturalImage")
    return [(op, TexturalImage(apply_op(img.pixels, op), img.provenance)) for op in AUGMENTATION_OPS]


# --------------------------------------------------------------------------
# manifest

MANIFEST_HEADER = ["sample_id", "base_id", "class", "paris", "geometry", "hardness", "aug_op", "path", "sha256"]


@dataclass(frozen=True)
class Sample:
    sample_id: str
    base_id: str
    aug_op: AugmentationOp
    class_label: PolypClass
    image_path: str
    sha256: str

    @property
    def spec(self) -> PhantomSpec:
        return PhantomSpec.from_base_id(self.base_id)


@dataclass
class DatasetManifest:
    samples: list[Sample]
    master_seed: int = 0
    difficulty: str = "easy"
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.samples = sorted(self.samples, key=lambda s: s.sample_id)
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate sample_id in manifest")
        pairs = {(s.base_id, s.aug_op) for s in self.samples}
        if len(pairs) != len(self.samples):
            raise ManifestError("duplicate (base_id, aug_op) in manifest")
        per_base = defaultdict(int)
        for s in self.samples:
            per_base[s.base_id] += 1
        bad = {b: n for b, n in per_base.items() if n != len(AUGMENTATION_OPS)}
        if bad:
            raise ManifestError(f"base phantoms without exactly 8 samples: {bad}")

    def __len__(self):
        return len(self.samples)

    @property
    def base_ids(self) -> list[str]:
        return sorted({s.base_id for s in self.samples})

    def by_id(self) -> dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.image_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_image(self, sample: Sample) -> TexturalImage:
        with Image.open(self.resolve(sample)) as im:
            return TexturalImage(np.asarray(im.convert("RGB")).copy(), "synthetic")


def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


def build_augmented_dataset(corpus, output_dir, master_seed: int = 0, difficulty: str = "easy") -> DatasetManifest:
    """Write all 8 variants of every corpus image as PNG and return the manifest.

    Image paths in the manifest are relative to ``output_dir`` so that a
    manifest saved there is relocatable.
    """
    output_dir = Path(output_dir)
    corpus = list(corpus)
    seen = set()
    for spec, _ in corpus:
        if spec.base_id in seen:
            raise ValueError(f"duplicate base_id {spec.base_id}")
        seen.add(spec.base_id)
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    for spec, img in sorted(corpus, key=lambda t: t[0].base_id):
        for op, variant in augment_image(img):
            sid = f"{spec.base_id}-{op.value}"
            rel = f"images/{sid}.png"
            data = _png_bytes(variant.pixels)
            target = output_dir / rel
            if not (target.exists() and sha256_file(target) == sha256_bytes(data)):
                target.write_bytes(data)
            samples.append(Sample(sid, spec.base_id, op, spec.polyp_class, rel, sha256_bytes(data)))
    return DatasetManifest(samples, master_seed, difficulty, root=output_dir)


def manifest_to_csv(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    buf.write(f"# master_seed: {manifest.master_seed}\n")
    buf.write(f"# difficulty: {manifest.difficulty}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for s in sorted(manifest.samples, key=lambda s: s.sample_id):
        spec = s.spec
        w.writerow([s.sample_id, s.base_id, s.class_label.name, s.class_label.paris_label,
                    spec.geometry_variant, spec.hardness.name, s.aug_op.value, s.image_path, s.sha256])
    return buf.getvalue()


def save_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write_text(path, manifest_to_csv(manifest))


def load_manifest(path, verify: bool = True) -> DatasetManifest:
    """Parse a manifest CSV; with ``verify`` every referenced PNG is digested."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"manifest not found: {path}")
    meta = {}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
            else:
                lines.append(line)
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}: empty manifest") from None
    if header != MANIFEST_HEADER:
        raise ManifestError(f"{path}: unexpected header {header}")
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        rec = dict(zip(MANIFEST_HEADER, row))
        try:
            cls = PolypClass[rec["class"]]
            spec = PhantomSpec.from_base_id(rec["base_id"])
            op = AugmentationOp(rec["aug_op"])
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if spec.polyp_class is not cls or cls.paris_label != rec["paris"]:
            raise ManifestError(f"{path}:{lineno}: class does not match base_id {rec['base_id']}")
        rows.append(Sample(rec["sample_id"], rec["base_id"], op, cls, rec["path"], rec["sha256"]))
    try:
        manifest = DatasetManifest(rows, int(meta.get("master_seed", 0)), meta.get("difficulty", "easy"),
                                   root=path.parent)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if verify:
        verify_manifest(manifest)
    return manifest


def verify_manifest(manifest: DatasetManifest) -> None:
    for s in manifest.samples:
        p = manifest.resolve(s)
        if not p.exists():
            raise MissingArtifactError(f"sample {s.sample_id}: image not found at {p}")
        actual = sha256_file(p)
        if actual != s.sha256:
            raise DigestMismatchError(f"sample {s.sample_id}: {p} expected sha256 {s.sha256}, got {actual}")


# --------------------------------------------------------------------------
# folds

N_QUARTERS = 4
ROLES = ("train", "val", "test")


@dataclass(frozen=True)
class Fold:
    fold_id: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def split(self, role: str) -> tuple[str, ...]:
        if role not in ROLES:
            raise KeyError(role)
        return getattr(self, role)


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    mode: str
    seed: int

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "seed": self.seed,
            "folds": [{"fold_id": f.fold_id, "train": list(f.train), "val": list(f.val), "test": list(f.test)}
                      for f in self.folds],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        try:
            doc = json.loads(text)
            folds = tuple(Fold(int(f["fold_id"]), tuple(f["train"]), tuple(f["val"]), tuple(f["test"]))
                          for f in doc["folds"])
            plan = cls(folds, str(doc["mode"]), int(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed fold plan: {exc}") from None
        if plan.mode not in ("grouped", "pooled"):
            raise ManifestError(f"malformed fold plan: unknown mode {plan.mode!r}")
        return plan


def stratified_partition(units, labels, n_parts: int, rng: np.random.Generator) -> list[list]:
    """Deal ``units`` into ``n_parts`` parts so every part holds an even share of each label.

    Units are sorted before shuffling so the result does not depend on input
    order. Dealing continues round-robin across labels, so parts differ in
    size by at most one and per-label counts by at most one.
    """
    by_label = defaultdict(list)
    for u, lab in zip(units, labels):
        by_label[lab].append(u)
    parts = [[] for _ in range(n_parts)]
    k = 0
    for lab in sorted(by_label, key=str):
        members = sorted(by_label[lab])
        order = rng.permutation(len(members))
        for i in order:
            parts[k % n_parts].append(members[i])
            k += 1
    return [sorted(p) for p in parts]


def ordered_assignments(n_quarters: int = N_QUARTERS):
    """Yield (train quarters, val quarter, test quarter) for all 12 role orderings."""
    for train in itertools.combinations(range(n_quarters), 2):
        rest = [q for q in range(n_quarters) if q not in train]
        for val, test in (rest, rest[::-1]):
            yield train, val, test


def make_folds(manifest: DatasetManifest, mode: str = "grouped", seed: int = 0) -> FoldPlan:
    if mode not in ("grouped", "pooled"):
        raise ValueError(f"mode must be 'grouped' or 'pooled', got {mode!r}")
    samples = sorted(manifest.samples, key=lambda s: s.sample_id)
    if len(samples) % N_QUARTERS:
        raise ValueError(f"{len(samples)} samples are not divisible into {N_QUARTERS} quarters")
    if mode == "grouped":
        unit_of = {s.sample_id: s.base_id for s in samples}
        label_of = {s.base_id: s.class_label for s in samples}
    else:
        unit_of = {s.sample_id: s.sample_id for s in samples}
        label_of = {s.sample_id: s.class_label for s in samples}
    units = sorted(label_of)
    if len(units) % N_QUARTERS:
        raise ValueError(f"{len(units)} {mode} units are not divisible into {N_QUARTERS} quarters")
    counts = defaultdict(int)
    for u in units:
        counts[label_of[u]] += 1
    short = sorted(c.name for c, n in counts.items() if n < N_QUARTERS)
    if short:
        raise ValueError(f"classes {short} have fewer than {N_QUARTERS} units; cannot stratify")

    rng = np.random.default_rng(seed)
    parts = stratified_partition(units, [label_of[u] for u in units], N_QUARTERS, rng)
    quarter_of_unit = {u: q for q, part in enumerate(parts) for u in part}
    quarters = [[] for _ in range(N_QUARTERS)]
    for s in samples:
        quarters[quarter_of_unit[unit_of[s.sample_id]]].append(s.sample_id)

    folds = []
    for fold_id, (train_q, val_q, test_q) in enumerate(ordered_assignments()):
        train = sorted(quarters[train_q[0]] + quarters[train_q[1]])
        folds.append(Fold(fold_id, tuple(train), tuple(quarters[val_q]), tuple(quarters[test_q])))
    return FoldPlan(tuple(folds), mode, int(seed))


def save_foldplan(plan: FoldPlan, path) -> None:
    atomic_write_text(path, plan.to_json())


def load_foldplan(path, manifest: DatasetManifest | None = None) -> FoldPlan:
    """Read a fold plan; when ``manifest`` is given, check it covers exactly its samples."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"fold plan not found: {path}")
    plan = FoldPlan.from_json(path.read_text(encoding="utf-8"))
    if manifest is not None:
        ids = {s.sample_id for s in manifest.samples}
        for f in plan.folds:
            got = set(f.train) | set(f.val) | set(f.test)
            if got != ids or len(f.train) + len(f.val) + len(f.test) != len(ids):
                raise ManifestError(f"{path}: fold {f.fold_id} does not partition the manifest samples")
    return plan


# --------------------------------------------------------------------------
# external images

def ingest_external_image(raw, crop_box) -> TexturalImage:
    """Crop ``raw`` to ``crop_box`` = (left, top, right, bottom) and resize bilinearly to 224x224."""
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    arr = arr[..., :3]
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    left, top, right, bottom = (int(v) for v in crop_box)
    if right <= left or bottom <= top:
        raise ValueError(f"degenerate crop box {crop_box}")
    if left < 0 or top < 0 or right > w or bottom > h:
        raise ValueError(f"crop box {crop_box} outside image bounds {w}x{h}")
    crop = arr[top:bottom, left:right]
    if crop.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        crop = np.asarray(Image.fromarray(crop).resize((IMAGE_SIZE, IMAGE_SIZE), Image.Resampling.BILINEAR))
    return TexturalImage(np.ascontiguousarray(crop), "ingested")
