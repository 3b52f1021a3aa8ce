"""Penultimate-layer embeddings, 2-D reduction and scatter plots."""

from __future__ import annotations

import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ModelCheckpoint
from .data_pipeline import PatchDataset
from .errors import VizError
from .fusion import PairedSample, load_multiview, pair_collate
from .transfer import load_single, stack_pixels

log = logging.getLogger(__name__)

DEFAULT_NEIGHBORS = 15
DEFAULT_MIN_DIST = 0.1


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: list[str]
    views: list[str]
    checkpoint_id: str

    def __post_init__(self):
        n = self.vectors.shape[0]
        if len(self.labels) != n or len(self.views) != n:
            raise VizError("vectors, labels and views differ in length")
        if not np.all(np.isfinite(self.vectors)):
            raise VizError("embedding contains non-finite values")


def _dataset_key(items) -> str:
    import hashlib

    h = hashlib.sha256()
    for it in items:
        if isinstance(it, PairedSample):
            h.update(f"{it.sur_patch.patch_id}|{it.sec_patch.patch_id}".encode())
            h.update(np.ascontiguousarray(it.sur_patch.pixels).tobytes())
            h.update(np.ascontiguousarray(it.sec_patch.pixels).tobytes())
        else:
            h.update(it.patch_id.encode())
            h.update(np.ascontiguousarray(it.pixels).tobytes())
    return h.hexdigest()[:16]


@torch.no_grad()
def extract_embeddings(
    ckpt: ModelCheckpoint,
    dataset: PatchDataset | list[PairedSample],
    batch_size: int = 64,
    cache_dir=None,
) -> EmbeddingSet:
    """Pre-head representation of every item (fused vector for MIX fusion models)."""
    is_fusion = ckpt.model_config.get("kind") == "fusion"
    items = dataset.records if isinstance(dataset, PatchDataset) else list(dataset)
    if not items:
        raise VizError("empty dataset")
    paired = isinstance(items[0], PairedSample)
    if is_fusion and not paired:
        raise VizError("fusion checkpoints need paired samples")
    if not is_fusion and paired:
        raise VizError("single-view checkpoints take a patch dataset, not pairs")
    if not is_fusion and ckpt.view != "MIX":
        other = {r.view for r in items} - {ckpt.view}
        if other:
            raise VizError(f"{ckpt.view} checkpoint given {sorted(other)} patches")
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"{ckpt.checkpoint_id}-{_dataset_key(items)}.npz"
        if cache_path.is_file():
            z = np.load(cache_path, allow_pickle=False)
            return EmbeddingSet(z["vectors"], z["labels"].tolist(), z["views"].tolist(), ckpt.checkpoint_id)
    chunks = []
    if is_fusion:
        model = load_multiview(ckpt)
        collate = pair_collate(model.class_names)
        for b in range(0, len(items), batch_size):
            (xs, xc), _ = collate(items[b : b + batch_size], (), None)
            chunks.append(model.fused_embedding(xs, xc).numpy())
        labels = [p.class_label for p in items]
        views = ["MIX"] * len(items)
    else:
        model = load_single(ckpt)
        for b in range(0, len(items), batch_size):
            chunks.append(model.embed(stack_pixels(items[b : b + batch_size])).numpy())
        labels = [r.class_label for r in items]
        views = [r.view for r in items]
    emb = EmbeddingSet(np.concatenate(chunks).astype(np.float64), labels, views, ckpt.checkpoint_id)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache_path, vectors=emb.vectors, labels=np.array(labels), views=np.array(views))
    return emb


def pca_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0, keepdims=True)
    if not np.any(xc):
        return np.zeros((x.shape[0], 2))
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    # sign convention: largest-magnitude loading of each component is positive
    signs = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)])
    signs[signs == 0] = 1
    pts = xc @ (vt.T * signs)
    out = np.zeros((x.shape[0], 2))
    k = min(2, pts.shape[1])
    out[:, :k] = pts[:, :k]
    return out


def _import_umap():
    # umap's package init probes tensorflow for its parametric variant, which costs
    # many seconds to import and is never used here.
    blocked = "tensorflow" not in sys.modules
    if blocked:
        sys.modules["tensorflow"] = None
    try:
        import umap
    finally:
        if blocked and sys.modules.get("tensorflow") is None:
            del sys.modules["tensorflow"]
    return umap


def reduce_2d(
    emb: EmbeddingSet | np.ndarray,
    method: str = "umap",
    seed: int = 0,
    n_neighbors: int = DEFAULT_NEIGHBORS,
    min_dist: float = DEFAULT_MIN_DIST,
    fallback_to_pca: bool = False,
) -> np.ndarray:
    """``n x 2`` coordinates; ``umap`` is seeded and single-threaded, so repeatable."""
    x = emb.vectors if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float64)
    if method == "pca":
        return pca_2d(x)
    if method != "umap":
        raise VizError(f"unknown reduction method {method!r}")
    n = x.shape[0]
    if n <= n_neighbors:
        if fallback_to_pca:
            log.warning("n=%d <= n_neighbors=%d; falling back to PCA", n, n_neighbors)
            return pca_2d(x)
        raise VizError(f"umap needs more than n_neighbors={n_neighbors} samples, got {n}")
    umap = _import_umap()
    reducer = umap.UMAP(
        n_components=2,
        n_neighbors=n_neighbors,
        min_dist=min_dist,
        metric="euclidean",
        random_state=seed,
        n_jobs=1,
    )
    return np.asarray(reducer.fit_transform(x), dtype=np.float64)


def scatter_figure(points, labels, title: str | None = None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = np.asarray(points)
    if len(points) != len(labels):
        raise VizError("points and labels differ in length")
    classes = list(dict.fromkeys(sorted(set(labels))))
    cmap = plt.get_cmap("tab10" if len(classes) <= 10 else "tab20")
    fig, ax = plt.subplots(figsize=(6, 5), dpi=100)
    lab = np.asarray(labels)
    for i, c in enumerate(classes):
        m = lab == c
        ax.scatter(points[m, 0], points[m, 1], s=8, color=cmap(i % cmap.N), label=c, alpha=0.8)
    ax.legend(title="class", markerscale=2, fontsize=8, loc="best")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def emit_scatter(points, labels, out, title: str | None = None) -> Path:
    import matplotlib.pyplot as plt

    out = Path(out)
    fig = scatter_figure(points, labels, title)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, metadata={"Software": None})
    except OSError as exc:
        raise VizError(f"cannot write figure to {out}: {exc}") from exc
    finally:
        plt.close(fig)
    return out


def write_points(points, labels, views, out) -> Path:
    out = Path(out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label", "view"])
        for (x, y), lab, v in zip(np.asarray(points), labels, views):
            w.writerow([repr(float(x)), repr(float(y)), lab, v])
    return out
