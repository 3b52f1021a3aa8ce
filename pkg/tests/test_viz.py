from __future__ import annotations

import csv

import numpy as np
import pytest

from stonefuse.checkpoint import ModelCheckpoint, serialize_state
from stonefuse.errors import VizError
from stonefuse.fusion import FusionSpec, build_multiview, pair_samples, train_fusion_head
from stonefuse.transfer import TrainConfig, random_init
from stonefuse.viz import (
    EmbeddingSet,
    emit_scatter,
    extract_embeddings,
    pca_2d,
    reduce_2d,
    scatter_figure,
    write_points,
)


def _ckpt(arch, view, classes):
    m = random_init(arch, classes, seed=0)
    return ModelCheckpoint(arch, view, "step1_general", list(classes), serialize_state(m.state_dict()),
                           model_config={"kind": "single", "num_classes": len(classes), "dropout": 0.2})


def _clusters(seed=0, n_per=40, d=50):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 10, (3, d))
    x = np.concatenate([c + rng.normal(0, 1, (n_per, d)) for c in centers])
    y = np.repeat(["a", "b", "c"], n_per)
    return x, y


def test_default_backbone_embedding_shape(small_data):
    tv, _ = small_data["B"]
    ids = {r.patch_id for r in tv.records[:100]}
    emb = extract_embeddings(_ckpt("resnet50", "MIX", tv.class_names), tv.subset(lambda r: r.patch_id in ids))
    assert emb.vectors.shape == (100, 2048)
    assert len(emb.labels) == len(emb.views) == 100


def test_concat_mix_embedding_dim(small_data):
    tv, te = small_data["B"]
    classes = tv.class_names
    model = build_multiview(_ckpt("resnet50", "SUR", classes), _ckpt("resnet50", "SEC", classes), FusionSpec("concat"))
    pairs = pair_samples(tv, tv)[:24]
    ck = train_fusion_head(model, pairs, TrainConfig(epochs=1, learning_rate=0.0, augmentations=[]))
    emb = extract_embeddings(ck, pair_samples(te, te)[:10])
    assert emb.vectors.shape == (10, 4096)
    assert set(emb.views) == {"MIX"}
    with pytest.raises(VizError):
        extract_embeddings(ck, te)


def test_extract_errors_and_cache(trained_store, small_data, tmp_path):
    _, ckpts = trained_store
    sur_ck = ckpts["SUR"][1]
    tv, te = small_data["B"]
    with pytest.raises(VizError):
        extract_embeddings(sur_ck, te.subset(lambda r: False))
    with pytest.raises(VizError, match="SUR checkpoint given"):
        extract_embeddings(sur_ck, te)
    a = extract_embeddings(sur_ck, te.select_view("SUR"), cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.npz"))) == 1
    b = extract_embeddings(sur_ck, te.select_view("SUR"), cache_dir=tmp_path)
    assert np.array_equal(a.vectors, b.vectors) and a.labels == b.labels
    with pytest.raises(VizError):
        EmbeddingSet(np.full((2, 3), np.nan), ["a", "b"], ["SUR", "SUR"], "x")


def test_pca_identical_inputs_at_origin():
    assert not pca_2d(np.ones((10, 5))).any()
    x, _ = _clusters()
    p1, p2 = pca_2d(x), pca_2d(x.copy())
    assert np.array_equal(p1, p2) and p1.shape == (120, 2)


def test_umap_separates_clusters():
    from sklearn.metrics import silhouette_score

    x, y = _clusters()
    pts = reduce_2d(x, "umap", seed=0)
    assert silhouette_score(pts, y) > 0.5


def test_umap_deterministic_under_seed():
    x, _ = _clusters(1)
    a, b = reduce_2d(x, "umap", seed=3), reduce_2d(x, "umap", seed=3)
    assert np.abs(a - b).max() <= 1e-6


def test_umap_too_few_samples():
    x = np.random.default_rng(0).random((2, 5))
    with pytest.raises(VizError, match="n_neighbors"):
        reduce_2d(x, "umap")
    assert reduce_2d(x, "umap", fallback_to_pca=True).shape == (2, 2)
    with pytest.raises(VizError):
        reduce_2d(x, "tsne")


def test_pca_vs_random_projection_report():
    # reported only: Spearman correlation of pairwise distances with the original space
    from scipy.stats import spearmanr
    from scipy.spatial.distance import pdist

    x, _ = _clusters(2)
    d0 = pdist(x)
    rp = x @ np.random.default_rng(0).normal(size=(x.shape[1], 2))
    rho_pca = spearmanr(d0, pdist(pca_2d(x))).statistic
    rho_rp = spearmanr(d0, pdist(rp)).statistic
    print(f"distance-order correlation: pca={rho_pca:.3f} random={rho_rp:.3f}")


def test_scatter_legend_counts(tmp_path):
    rng = np.random.default_rng(0)
    labels = [c for c in ["WW", "WD", "UA", "STR", "BRU", "CYS"] for _ in range(5)]
    fig = scatter_figure(rng.random((30, 2)), labels)
    texts = [t.get_text() for t in fig.axes[0].get_legend().get_texts()]
    assert sorted(texts) == sorted(set(labels)) and len(texts) == 6
    out = emit_scatter(rng.random((4, 2)), ["WW"] * 4, tmp_path / "one.png")
    assert out.is_file() and out.stat().st_size > 0
    with pytest.raises(VizError):
        scatter_figure(rng.random((3, 2)), ["a"])


def test_write_points(tmp_path):
    p = write_points(np.array([[0.5, 1.0], [2.0, -1.0]]), ["a", "b"], ["SUR", "SEC"], tmp_path / "points.csv")
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["x", "y", "label", "view"]
    assert rows[1] == ["0.5", "1.0", "a", "SUR"]


def test_pipeline_determinism(trained_store, small_data):
    _, ckpts = trained_store
    _, te = small_data["B"]
    runs = []
    for _ in range(2):
        emb = extract_embeddings(ckpts["SEC"][1], te.select_view("SEC"))
        runs.append(reduce_2d(emb, "umap", seed=0, n_neighbors=5))
    assert np.abs(runs[0] - runs[1]).max() <= 1e-6
