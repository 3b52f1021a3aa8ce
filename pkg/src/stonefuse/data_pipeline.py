"""Manifest loading, group-aware splits, patch extraction and whitening.

Patch archives on disk are a directory holding ``patches.bin`` (little-endian
float32, channel-major, one ``3 x P x P`` tensor per record), ``index.jsonl``
(one record metadata object per line, same order as the tensors),
``split.json`` and ``summary.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .errors import DegeneratePatchError, ManifestError, PatchError, SplitError

log = logging.getLogger(__name__)

VIEWS = ("SUR", "SEC")
MANIFEST_HEADER = ("image_id", "path", "view", "class_label", "width", "height")
TRAINVAL, TEST = "TRAINVAL", "TEST"
WHITEN_TOL = 1e-5


def fragment_of(image_id: str) -> str | None:
    """Fragment id encoded as an ``_SUR``/``_SEC`` suffix, or None."""
    for view in VIEWS:
        suffix = "_" + view
        if image_id.endswith(suffix) and len(image_id) > len(suffix):
            return image_id[: -len(suffix)]
    return None


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    path: Path
    view: str
    class_label: str
    width: int
    height: int

    @property
    def fragment_id(self) -> str | None:
        return fragment_of(self.image_id)


@dataclass
class DatasetManifest:
    dataset_id: str
    entries: list[ImageEntry]
    class_names: list[str]

    def validate(self, expected_classes: int | None = 6) -> None:
        if not self.entries:
            raise ManifestError("empty manifest")
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise ManifestError(f"duplicate id {e.image_id!r}")
            seen.add(e.image_id)
            if e.view not in VIEWS:
                raise ManifestError(f"unknown view tag {e.view!r} for {e.image_id}")
            if e.class_label not in self.class_names:
                raise ManifestError(f"class {e.class_label!r} of {e.image_id} not in class_names")
        if len(set(self.class_names)) != len(self.class_names):
            raise ManifestError("class_names contain duplicates")
        if expected_classes is not None and len(self.class_names) != expected_classes:
            raise ManifestError(
                f"manifest has {len(self.class_names)} classes, expected {expected_classes}"
            )

    def by_id(self) -> dict[str, ImageEntry]:
        return {e.image_id: e for e in self.entries}

    @property
    def image_ids(self) -> set[str]:
        return {e.image_id for e in self.entries}


def load_manifest(path, expected_classes: int | None = 6) -> DatasetManifest:
    """Read a manifest file.

    Leading ``# key: value`` lines may set ``dataset_id`` and ``classes``
    (comma-separated, fixes the class order). Otherwise classes are ordered by
    first appearance. Relative image paths resolve against the manifest dir.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    meta = {}
    body = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    rows = list(csv.reader(body))
    if not rows or tuple(c.strip() for c in rows[0]) != MANIFEST_HEADER:
        raise ManifestError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"line {lineno}: expected {len(MANIFEST_HEADER)} fields")
        image_id, img_path, view, label, width, height = (c.strip() for c in row)
        if view not in VIEWS:
            raise ManifestError(f"line {lineno}: unknown view tag {view!r}")
        p = Path(img_path)
        if not p.is_absolute():
            p = path.parent / p
        try:
            entries.append(ImageEntry(image_id, p, view, label, int(width), int(height)))
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: bad dimensions") from exc
    if "classes" in meta:
        class_names = [c.strip() for c in meta["classes"].split(",") if c.strip()]
    else:
        class_names = list(dict.fromkeys(e.class_label for e in entries))
    manifest = DatasetManifest(meta.get("dataset_id", path.parent.name), entries, class_names)
    manifest.validate(expected_classes)
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# dataset_id: {manifest.dataset_id}\n")
        fh.write(f"# classes: {','.join(manifest.class_names)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            try:
                rel = os.path.relpath(e.path, path.parent)
            except ValueError:
                rel = str(e.path)
            writer.writerow([e.image_id, rel, e.view, e.class_label, e.width, e.height])
    return path


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    train_image_ids: frozenset
    val_image_ids: frozenset
    test_image_ids: frozenset
    seed: int

    @property
    def trainval_image_ids(self) -> frozenset:
        return self.train_image_ids | self.val_image_ids

    def role_of(self, image_id: str) -> str:
        if image_id in self.test_image_ids:
            return TEST
        if image_id in self.trainval_image_ids:
            return TRAINVAL
        raise SplitError(f"image {image_id!r} not in split")

    def validate(self, manifest: DatasetManifest) -> None:
        tr, va, te = self.train_image_ids, self.val_image_ids, self.test_image_ids
        if tr & va or tr & te or va & te:
            raise SplitError("split sets are not disjoint")
        if (tr | va | te) != manifest.image_ids:
            raise SplitError("split does not cover the manifest exactly")

    def to_dict(self) -> dict:
        return {
            "train_image_ids": sorted(self.train_image_ids),
            "val_image_ids": sorted(self.val_image_ids),
            "test_image_ids": sorted(self.test_image_ids),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(
            frozenset(d["train_image_ids"]),
            frozenset(d["val_image_ids"]),
            frozenset(d["test_image_ids"]),
            int(d["seed"]),
        )


def _split_units(manifest: DatasetManifest) -> dict[tuple, list[tuple[str, list[str]]]]:
    # A unit is a fragment (all its views) when image ids encode one, else a lone image.
    units: dict[str, list[ImageEntry]] = defaultdict(list)
    for e in manifest.entries:
        units[e.fragment_id or e.image_id].append(e)
    strata: dict[tuple, list[tuple[str, list[str]]]] = defaultdict(list)
    for uid, members in units.items():
        labels = {m.class_label for m in members}
        if len(labels) != 1:
            raise SplitError(f"fragment {uid!r} mixes classes {sorted(labels)}")
        views = "+".join(sorted({m.view for m in members}))
        strata[(labels.pop(), views)].append((uid, sorted(m.image_id for m in members)))
    return strata


def make_split(
    manifest: DatasetManifest,
    train_fraction: float = 0.8,
    val_fraction: float = 0.125,
    seed: int = 0,
) -> SplitAssignment:
    """Stratified group-aware split of source images.

    ``train_fraction`` is the train+val share of each (class, view) stratum;
    ``val_fraction`` is the share of that train+val part held out for
    validation. Images of one fragment always land in the same role.
    """
    if not 0 < train_fraction < 1:
        raise SplitError("train_fraction must lie in (0, 1)")
    if not 0 <= val_fraction < 1:
        raise SplitError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train, val, test = set(), set(), set()
    strata = _split_units(manifest)
    for key in sorted(strata):
        units = sorted(strata[key])
        n = len(units)
        if n < 2:
            raise SplitError(f"stratum {key} has {n} unit(s); need at least 2")
        n_test = max(1, int(round(n * (1 - train_fraction))))
        n_trainval = n - n_test
        n_val = 0 if val_fraction == 0 else max(1, int(round(n_trainval * val_fraction)))
        if n_trainval - n_val < 1:
            raise SplitError(
                f"stratum {key} has {n} unit(s); too small to populate all three roles"
            )
        order = rng.permutation(n)
        for rank, idx in enumerate(order):
            ids = units[idx][1]
            if rank < n_test:
                test.update(ids)
            elif rank < n_test + n_val:
                val.update(ids)
            else:
                train.update(ids)
    split = SplitAssignment(frozenset(train), frozenset(val), frozenset(test), seed)
    split.validate(manifest)
    return split


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------


@dataclass
class PatchRecord:
    patch_id: str
    source_image_id: str
    view: str
    class_label: str
    origin: tuple[int, int]
    pixels: np.ndarray  # (3, P, P) float32
    whitened: bool = False
    channel_mean: tuple[float, float, float] | None = None
    channel_std: tuple[float, float, float] | None = None

    @property
    def fragment_id(self) -> str | None:
        return fragment_of(self.source_image_id)

    @property
    def patch_size(self) -> int:
        return int(self.pixels.shape[-1])

    def meta(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "source_image_id": self.source_image_id,
            "view": self.view,
            "class_label": self.class_label,
            "origin": list(self.origin),
            "whitened": self.whitened,
            "channel_mean": None if self.channel_mean is None else list(self.channel_mean),
            "channel_std": None if self.channel_std is None else list(self.channel_std),
        }


@dataclass
class PatchDataset:
    records: list[PatchRecord]
    role: str
    patches_per_class: int
    class_names: list[str]
    split: SplitAssignment | None = None

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> dict[str, int]:
        out = {c: 0 for c in self.class_names}
        for r in self.records:
            out[r.class_label] += 1
        return out

    def counts_by_view(self) -> dict[str, dict[str, int]]:
        out = {c: {v: 0 for v in VIEWS} for c in self.class_names}
        for r in self.records:
            out[r.class_label][r.view] += 1
        return out

    def source_ids(self) -> set[str]:
        return {r.source_image_id for r in self.records}

    def subset(self, keep) -> "PatchDataset":
        recs = [r for r in self.records if keep(r)]
        per_class = len(recs) // len(self.class_names) if self.class_names else 0
        return PatchDataset(recs, self.role, per_class, list(self.class_names), self.split)

    def select_view(self, view: str) -> "PatchDataset":
        if view == "MIX":
            return self
        if view not in VIEWS:
            raise PatchError(f"unknown view {view!r}")
        return self.subset(lambda r: r.view == view)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.role, self.class_names]).encode())
        for r in self.records:
            h.update(json.dumps(r.meta(), sort_keys=True).encode())
            h.update(np.ascontiguousarray(r.pixels, dtype="<f4").tobytes())
        return h.hexdigest()


def load_image(path) -> np.ndarray:
    """RGB image as float32 ``(H, W, 3)`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise PatchError(f"unreadable image {path}: {exc}") from exc
    return arr / 255.0


def _image_seed(rng_seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([rng_seed, zlib.crc32(image_id.encode())]))


def extract_patches(
    entry: ImageEntry,
    patch_size: int,
    count: int,
    rng_seed: int,
    image: np.ndarray | None = None,
) -> list[PatchRecord]:
    """Crop ``count`` patches at uniformly random offsets."""
    if count < 0:
        raise PatchError("count must be non-negative")
    if count == 0:
        return []
    if image is None:
        image = load_image(entry.path)
    h, w = image.shape[:2]
    if h < patch_size or w < patch_size:
        raise PatchError(
            f"image {entry.image_id} is {h}x{w}, smaller than patch size {patch_size}"
        )
    rng = _image_seed(rng_seed, entry.image_id)
    rows = rng.integers(0, h - patch_size + 1, size=count)
    cols = rng.integers(0, w - patch_size + 1, size=count)
    out = []
    for k, (r, c) in enumerate(zip(rows.tolist(), cols.tolist())):
        crop = image[r : r + patch_size, c : c + patch_size, :]
        out.append(
            PatchRecord(
                patch_id=f"{entry.image_id}:{k:05d}",
                source_image_id=entry.image_id,
                view=entry.view,
                class_label=entry.class_label,
                origin=(r, c),
                pixels=np.ascontiguousarray(crop.transpose(2, 0, 1), dtype=np.float32),
            )
        )
    return out


def _whiten_with(patch: PatchRecord, mean: np.ndarray, std: np.ndarray) -> PatchRecord:
    px = (patch.pixels.astype(np.float64) - mean[:, None, None]) / std[:, None, None]
    return PatchRecord(
        patch.patch_id,
        patch.source_image_id,
        patch.view,
        patch.class_label,
        patch.origin,
        px.astype(np.float32),
        True,
        tuple(float(m) for m in mean),
        tuple(float(s) for s in std),
    )


def whiten_patch(patch: PatchRecord) -> PatchRecord:
    """Standardize each channel of one patch to zero mean and unit std."""
    if patch.whitened:
        raise PatchError(f"patch {patch.patch_id} is already whitened")
    px = patch.pixels.astype(np.float64)
    mean = px.mean(axis=(1, 2))
    std = px.std(axis=(1, 2))
    if np.any(std <= 1e-12):
        raise DegeneratePatchError(f"zero variance channel in patch {patch.patch_id}")
    return _whiten_with(patch, mean, std)


def check_whitened(pixels: np.ndarray, tol: float = WHITEN_TOL) -> bool:
    px = pixels.astype(np.float64)
    m = px.mean(axis=(1, 2))
    s = px.std(axis=(1, 2))
    return bool(np.all(np.abs(m) <= tol) and np.all(np.abs(s - 1) <= tol))


# --------------------------------------------------------------------------
# dataset assembly
# --------------------------------------------------------------------------


def _even_shares(total: int, n: int) -> list[int]:
    base, rem = divmod(total, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def _exact(value: Fraction, what: str) -> int:
    if value.denominator != 1:
        raise PatchError(f"{what} = {float(value):g} is not an integer patch count")
    return int(value)


@dataclass
class PatchPlan:
    """Per-image patch quotas for both roles."""

    quotas: dict[str, list[tuple[ImageEntry, int]]] = field(default_factory=dict)
    per_class: dict[str, int] = field(default_factory=dict)

    def entries(self, role: str) -> list[tuple[ImageEntry, int]]:
        return self.quotas[role]


def plan_patches(
    manifest: DatasetManifest,
    split: SplitAssignment,
    total_patches: int,
    test_fraction: float = 0.2,
) -> PatchPlan:
    split.validate(manifest)
    n_classes = len(manifest.class_names)
    per_class = _exact(Fraction(total_patches) / n_classes, "patches per class")
    tf = Fraction(test_fraction).limit_denominator(10_000)
    per_class_test = _exact(per_class * tf, "test patches per class")
    budgets = {TRAINVAL: per_class - per_class_test, TEST: per_class_test}
    role_ids = {TRAINVAL: split.trainval_image_ids, TEST: split.test_image_ids}
    plan = PatchPlan({TRAINVAL: [], TEST: []}, dict(budgets))
    for cls in manifest.class_names:
        for role in (TRAINVAL, TEST):
            imgs = [e for e in manifest.entries if e.class_label == cls and e.image_id in role_ids[role]]
            if not imgs and budgets[role] > 0:
                raise PatchError(f"class {cls!r} has no images in role {role}")
            views = [v for v in VIEWS if any(e.view == v for e in imgs)]
            for view, view_budget in zip(views, _even_shares(budgets[role], len(views))):
                members = sorted((e for e in imgs if e.view == view), key=lambda e: e.image_id)
                for e, q in zip(members, _even_shares(view_budget, len(members))):
                    plan.quotas[role].append((e, q))
    return plan


def iter_role_patches(
    plan: PatchPlan,
    role: str,
    patch_size: int,
    rng_seed: int,
) -> Iterator[PatchRecord]:
    """Yield raw (unwhitened) patches of one role in plan order."""
    for entry, quota in plan.entries(role):
        if quota == 0:
            continue
        for rec in extract_patches(entry, patch_size, quota, rng_seed):
            yield rec


class _ChannelStats:
    def __init__(self):
        self.n = 0
        self.s = np.zeros(3)
        self.ss = np.zeros(3)

    def add(self, px: np.ndarray) -> None:
        x = px.astype(np.float64).reshape(3, -1)
        self.n += x.shape[1]
        self.s += x.sum(axis=1)
        self.ss += (x * x).sum(axis=1)

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.s / self.n
        std = np.sqrt(np.maximum(self.ss / self.n - mean**2, 0.0))
        if np.any(std <= 1e-12):
            raise DegeneratePatchError("zero variance channel over the dataset")
        return mean, std


def _whitener(plan, patch_size, rng_seed, scope):
    if scope == "patch":
        return whiten_patch
    if scope != "dataset":
        raise PatchError(f"unknown whitening scope {scope!r}")
    stats = _ChannelStats()
    for rec in iter_role_patches(plan, TRAINVAL, patch_size, rng_seed):
        stats.add(rec.pixels)
    mean, std = stats.result()
    return lambda rec: _whiten_with(rec, mean, std)


def iter_patch_dataset(
    manifest: DatasetManifest,
    split: SplitAssignment,
    patch_size: int,
    total_patches: int,
    rng_seed: int,
    test_fraction: float = 0.2,
    whiten_scope: str = "patch",
) -> tuple[PatchPlan, Iterator[tuple[str, PatchRecord]]]:
    """Streaming form of :func:`build_patch_dataset` yielding ``(role, record)``."""
    plan = plan_patches(manifest, split, total_patches, test_fraction)
    whiten = _whitener(plan, patch_size, rng_seed, whiten_scope)

    def gen():
        for role in (TRAINVAL, TEST):
            for rec in iter_role_patches(plan, role, patch_size, rng_seed):
                yield role, whiten(rec)

    return plan, gen()


def build_patch_dataset(
    manifest: DatasetManifest,
    split: SplitAssignment,
    patch_size: int,
    total_patches: int,
    rng_seed: int,
    test_fraction: float = 0.2,
    whiten_scope: str = "patch",
) -> tuple[PatchDataset, PatchDataset]:
    plan, stream = iter_patch_dataset(
        manifest, split, patch_size, total_patches, rng_seed, test_fraction, whiten_scope
    )
    recs = {TRAINVAL: [], TEST: []}
    for role, rec in stream:
        recs[role].append(rec)
    names = list(manifest.class_names)
    return (
        PatchDataset(recs[TRAINVAL], TRAINVAL, plan.per_class[TRAINVAL], names, split),
        PatchDataset(recs[TEST], TEST, plan.per_class[TEST], names, split),
    )


def dataset_summary(trainval: PatchDataset, test: PatchDataset) -> dict:
    """Counts per role, class and view.

    ``test_per_class`` and ``test_per_class_per_view`` are both reported on
    purpose: the balanced-test budget can be read either way.
    """
    tv_view = trainval.counts_by_view()
    te_view = test.counts_by_view()
    test_counts = test.counts()
    return {
        "class_names": list(trainval.class_names),
        "trainval_total": len(trainval),
        "test_total": len(test),
        "total": len(trainval) + len(test),
        "trainval_per_class": trainval.counts(),
        "test_per_class": test_counts,
        "trainval_per_class_per_view": tv_view,
        "test_per_class_per_view": te_view,
        "trainval_images": len(trainval.source_ids()),
        "test_images": len(test.source_ids()),
    }


# --------------------------------------------------------------------------
# archive I/O
# --------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def write_patch_archive(
    out,
    records: Iterable[tuple[str, PatchRecord]],
    split: SplitAssignment,
    class_names: list[str],
    extra_summary: dict | None = None,
) -> dict:
    """Stream ``(role, record)`` pairs to a patch archive; returns the summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {TRAINVAL: defaultdict(lambda: defaultdict(int)), TEST: defaultdict(lambda: defaultdict(int))}
    sources = {TRAINVAL: set(), TEST: set()}
    patch_size = None
    with open(out / "patches.bin", "wb") as fbin, open(out / "index.jsonl", "w", encoding="utf-8") as fidx:
        for i, (role, rec) in enumerate(records):
            patch_size = rec.patch_size
            meta = rec.meta()
            meta["role"] = role
            meta["index"] = i
            fidx.write(json.dumps(meta, sort_keys=True) + "\n")
            fbin.write(np.ascontiguousarray(rec.pixels, dtype="<f4").tobytes())
            counts[role][rec.class_label][rec.view] += 1
            sources[role].add(rec.source_image_id)
    _write_json(out / "split.json", split.to_dict())
    summary = {
        "class_names": list(class_names),
        "patch_size": patch_size,
        "dtype": "float32-le",
        "layout": "N x 3 x P x P",
    }
    for role, key in ((TRAINVAL, "trainval"), (TEST, "test")):
        per_view = {c: {v: counts[role][c][v] for v in VIEWS} for c in class_names}
        summary[f"{key}_per_class_per_view"] = per_view
        summary[f"{key}_per_class"] = {c: sum(per_view[c].values()) for c in class_names}
        summary[f"{key}_total"] = sum(summary[f"{key}_per_class"].values())
        summary[f"{key}_images"] = len(sources[role])
    summary["total"] = summary["trainval_total"] + summary["test_total"]
    if extra_summary:
        summary.update(extra_summary)
    _write_json(out / "summary.json", summary)
    return summary


def save_patch_archive(out, trainval: PatchDataset, test: PatchDataset, extra_summary=None) -> dict:
    stream = [(TRAINVAL, r) for r in trainval.records] + [(TEST, r) for r in test.records]
    return write_patch_archive(out, stream, trainval.split, trainval.class_names, extra_summary)


def load_patch_archive(path) -> tuple[PatchDataset, PatchDataset]:
    """Load an archive; pixel arrays are read-only views into a memory map."""
    path = Path(path)
    for name in ("patches.bin", "index.jsonl", "split.json", "summary.json"):
        if not (path / name).is_file():
            raise PatchError(f"patch archive {path} lacks {name}")
    summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
    split = SplitAssignment.from_dict(json.loads((path / "split.json").read_text(encoding="utf-8")))
    metas = [json.loads(line) for line in (path / "index.jsonl").read_text(encoding="utf-8").splitlines() if line]
    p = summary["patch_size"]
    records = {TRAINVAL: [], TEST: []}
    if metas:
        data = np.memmap(path / "patches.bin", dtype="<f4", mode="r", shape=(len(metas), 3, p, p))
        for i, m in enumerate(metas):
            records[m["role"]].append(
                PatchRecord(
                    m["patch_id"],
                    m["source_image_id"],
                    m["view"],
                    m["class_label"],
                    tuple(m["origin"]),
                    data[i],
                    m["whitened"],
                    None if m["channel_mean"] is None else tuple(m["channel_mean"]),
                    None if m["channel_std"] is None else tuple(m["channel_std"]),
                )
            )
    names = summary["class_names"]
    per = {TRAINVAL: summary["trainval_total"] // len(names), TEST: summary["test_total"] // len(names)}
    return (
        PatchDataset(records[TRAINVAL], TRAINVAL, per[TRAINVAL], names, split),
        PatchDataset(records[TEST], TEST, per[TEST], names, split),
    )
