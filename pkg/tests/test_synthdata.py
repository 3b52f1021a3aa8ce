from __future__ import annotations

import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from stonefuse.data_pipeline import load_image, load_manifest
from stonefuse.synthdata import (
    SIDECAR,
    ClassTexture,
    Degradation,
    SynthSpec,
    default_pair_specs,
    degrade,
    fragment_latents,
    generate_dataset,
    laplacian_variance,
    render_fragment,
    two_domain_pair,
)
from stonefuse.errors import SynthError


def _digests(manifest):
    return {e.image_id: hashlib.sha256(e.path.read_bytes()).hexdigest() for e in manifest.entries}


def test_counts_and_manifest_validity(tmp_path):
    spec = SynthSpec(images_per_class_per_view=10, image_size=(32, 32))
    m = generate_dataset(spec, tmp_path)
    assert len(m.entries) == 120
    assert sum(e.view == "SUR" for e in m.entries) == 60
    reloaded = load_manifest(tmp_path / "manifest.csv")
    assert [e.image_id for e in reloaded.entries] == [e.image_id for e in m.entries]
    # each fragment has one image per view sharing its fragment id
    frags = {}
    for e in reloaded.entries:
        frags.setdefault(e.fragment_id, set()).add(e.view)
    assert len(frags) == 60 and all(v == {"SUR", "SEC"} for v in frags.values())
    side = json.loads((tmp_path / SIDECAR).read_text())
    assert SynthSpec.from_dict(side).resolved() == spec.resolved()


def test_view_correlation_one_shares_latents():
    spec = SynthSpec(image_size=(16, 16), view_correlation=1.0)
    lat = fragment_latents(spec, 2, 3)
    assert np.array_equal(lat["SUR"]["texture"], lat["SEC"]["texture"])
    assert np.array_equal(lat["SUR"]["blobs"], lat["SEC"]["blobs"])
    lat0 = fragment_latents(replace(spec, view_correlation=0.0), 2, 3)
    assert not np.array_equal(lat0["SUR"]["texture"], lat0["SEC"]["texture"])


def test_determinism(tmp_path):
    spec = SynthSpec(images_per_class_per_view=2, image_size=(24, 24), seed=11)
    a = _digests(generate_dataset(spec, tmp_path / "a"))
    b = _digests(generate_dataset(spec, tmp_path / "b"))
    assert a == b
    c = _digests(generate_dataset(replace(spec, seed=12), tmp_path / "c"))
    assert a != c


def test_sec_has_layered_core():
    # rings make SEC differ from SUR even with identical latent draws
    imgs = render_fragment(SynthSpec(image_size=(32, 32), view_correlation=1.0), 0, 0)
    assert not np.allclose(imgs["SUR"], imgs["SEC"])


def test_spec_validation(tmp_path):
    with pytest.raises(SynthError):
        SynthSpec(view_correlation=1.5).validate()
    same = ClassTexture((0.5, 0.5, 0.5), 0.05, (0.05, 0.1), 0.3)
    with pytest.raises(SynthError, match="pairwise distinct"):
        SynthSpec(num_classes=2, texture_params=(same, same)).validate()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SynthError, match="cannot write"):
        generate_dataset(SynthSpec(images_per_class_per_view=1, image_size=(16, 16)), blocker / "sub")


def test_default_pair_b_is_blurrier(tmp_path):
    a, b = default_pair_specs(per_class=9, image_size=(48, 48))
    ma, mb = two_domain_pair(a, b, tmp_path)
    assert len(ma.entries) >= 100 and len(mb.entries) >= 100
    lv_a = np.mean([laplacian_variance(load_image(e.path)) for e in ma.entries])
    lv_b = np.mean([laplacian_variance(load_image(e.path)) for e in mb.entries])
    assert lv_b < lv_a


def test_zero_strength_is_identity():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert degrade(img, Degradation(strength=0), np.random.default_rng(1)) is img
    a, b = default_pair_specs(per_class=1, image_size=(16, 16), strength=0.0)
    same_seed = replace(b, seed=a.seed)
    ra, rb = render_fragment(a, 1, 0), render_fragment(same_seed, 1, 0)
    assert all(np.array_equal(ra[v], rb[v]) for v in ("SUR", "SEC"))


def test_class_count_mismatch(tmp_path):
    with pytest.raises(SynthError, match="class-count mismatch"):
        two_domain_pair(SynthSpec(num_classes=6), SynthSpec(num_classes=5), tmp_path)


def test_color_means_beat_chance(synth_pair):
    # leave-one-out nearest centroid on per-channel image means
    _, ma, _ = synth_pair
    x = np.array([load_image(e.path).mean(axis=(0, 1)) for e in ma.entries])
    y = np.array([e.class_label for e in ma.entries])
    classes = sorted(set(y))
    hits = 0
    for i in range(len(y)):
        keep = np.arange(len(y)) != i
        cents = np.array([x[keep & (y == c)].mean(axis=0) for c in classes])
        hits += classes[int(np.argmin(((cents - x[i]) ** 2).sum(axis=1)))] == y[i]
    assert hits / len(y) > 1 / len(classes)
