from __future__ import annotations

import warnings
from pathlib import Path

import pytest

from stonefuse.checkpoint import CheckpointStore
from stonefuse.data_pipeline import DatasetManifest, ImageEntry, build_patch_dataset, make_split
from stonefuse.synthdata import default_pair_specs, two_domain_pair
from stonefuse.transfer import TrainConfig, two_step_train

CLASSES = ["WW", "WD", "UA", "STR", "BRU", "CYS"]


def fake_manifest(n_frag_per_class: int = 3, classes=CLASSES, views=("SUR", "SEC"), lone: bool = False) -> DatasetManifest:
    """Manifest without image files: enough for split and quota logic."""
    entries = []
    for c in classes:
        for j in range(n_frag_per_class):
            for v in views:
                iid = f"{c}-{j:03d}-{v}" if lone else f"{c}-{j:03d}_{v}"
                entries.append(ImageEntry(iid, Path(f"/nonexistent/{iid}.png"), v, c, 64, 64))
    return DatasetManifest("fake", entries, list(classes))


@pytest.fixture(scope="session")
def synth_pair(tmp_path_factory):
    """Small clean/degraded domain pair on disk (5 fragments per class)."""
    out = tmp_path_factory.mktemp("synth")
    a, b = default_pair_specs(per_class=5, seed=0, image_size=(48, 48))
    ma, mb = two_domain_pair(a, b, out)
    return out, ma, mb


@pytest.fixture(scope="session")
def small_data(synth_pair):
    """(trainval, test) patch datasets for domains A and B, 16 px, 240 patches each."""
    _, ma, mb = synth_pair
    out = {}
    for name, m in (("A", ma), ("B", mb)):
        out[name] = build_patch_dataset(m, make_split(m, 0.8, 0.125, seed=0), 16, 240, 0)
    return out


FAST = TrainConfig(epochs=2, batch_size=32, learning_rate=0.01, seed=0)


@pytest.fixture(scope="session")
def trained_store(tmp_path_factory, small_data):
    """Store with step1+step2 checkpoints for SUR and SEC on the tiny backbone."""
    store = CheckpointStore(tmp_path_factory.mktemp("store"))
    ckpts = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for view in ("SUR", "SEC"):
            ckpts[view] = two_step_train(view, small_data["A"], small_data["B"], (FAST, FAST), store=store,
                                         architecture_id="tiny", return_step1=True)
    return store, ckpts


# acceptance lines, printed as one block at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
