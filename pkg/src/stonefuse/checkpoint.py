"""Checkpoint records, weight serialization and the content-addressed store.

On disk a checkpoint is ``ckpt-<id>/`` with ``weights.bin``, ``meta.json`` and
``trainlog.csv``. The id is a digest over the metadata, which itself carries a
digest of ``weights.bin``, so any change to either is detected.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import struct
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import LineageError

MAGIC = b"SFW1"
TL_STEPS = ("scratch", "step1_general", "step2_domain", "fusion")
CKPT_VIEWS = ("SUR", "SEC", "MIX")


def serialize_state(state: dict) -> bytes:
    """Deterministic byte form of a state dict: header JSON then raw LE tensors."""
    header = {}
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        header[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + b"".join(chunks)


def deserialize_state(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise LineageError("weights blob has a bad magic number")
    (n,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + n])
    base = 12 + n
    out = {}
    for name, h in header.items():
        buf = blob[base + h["offset"] : base + h["offset"] + h["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(h["dtype"])).reshape(h["shape"])
        out[name] = torch.from_numpy(arr.copy())
    return out


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def state_digest(module_or_state) -> str:
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    return sha256(serialize_state(state))


def sub_state(state: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}


@dataclass
class ModelCheckpoint:
    architecture_id: str
    view: str
    tl_step: str
    class_names: list[str]
    weights: bytes = field(repr=False)
    parent_digest: str | None = None
    second_parent_digest: str | None = None
    metrics_at_save: dict | None = None
    model_config: dict = field(default_factory=dict)
    init_provenance: str = "random"
    trainlog: list[dict] = field(default_factory=list, repr=False)
    checkpoint_id: str = ""

    def __post_init__(self):
        if self.view not in CKPT_VIEWS:
            raise LineageError(f"bad checkpoint view {self.view!r}")
        if self.tl_step not in TL_STEPS:
            raise LineageError(f"bad tl_step {self.tl_step!r}")
        if self.tl_step == "scratch" and self.parent_digest is not None:
            raise LineageError("scratch checkpoints cannot have a parent")
        if self.tl_step == "step2_domain" and self.parent_digest is None:
            raise LineageError("step2_domain checkpoints need a parent")
        if self.tl_step == "fusion" and (self.parent_digest is None or self.second_parent_digest is None):
            raise LineageError("fusion checkpoints need both branch parents")
        if not self.checkpoint_id:
            self.checkpoint_id = self.compute_id()

    @property
    def weights_digest(self) -> str:
        return sha256(self.weights)

    def meta(self) -> dict:
        return {
            "architecture_id": self.architecture_id,
            "view": self.view,
            "tl_step": self.tl_step,
            "class_names": list(self.class_names),
            "parent_digest": self.parent_digest,
            "second_parent_digest": self.second_parent_digest,
            "metrics_at_save": self.metrics_at_save,
            "model_config": self.model_config,
            "init_provenance": self.init_provenance,
            "weights_digest": self.weights_digest,
        }

    def compute_id(self, meta: dict | None = None) -> str:
        meta = self.meta() if meta is None else {k: v for k, v in meta.items() if k != "checkpoint_id"}
        return sha256(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())[:16]

    def state(self) -> dict:
        return deserialize_state(self.weights)


class CheckpointStore:
    """Directory of ``ckpt-<id>/`` entries written atomically."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, checkpoint_id: str) -> Path:
        return self.root / f"ckpt-{checkpoint_id}"

    def __contains__(self, checkpoint_id: str) -> bool:
        return (self.path(checkpoint_id) / "meta.json").is_file()

    def ids(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name[len("ckpt-"):] for p in self.root.glob("ckpt-*") if p.is_dir())

    def save(self, ckpt: ModelCheckpoint) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        final = self.path(ckpt.checkpoint_id)
        if ckpt.checkpoint_id in self:
            return final
        tmp = self.root / f".tmp-{ckpt.checkpoint_id}-{uuid.uuid4().hex[:8]}"
        tmp.mkdir()
        (tmp / "weights.bin").write_bytes(ckpt.weights)
        meta = ckpt.meta()
        meta["checkpoint_id"] = ckpt.checkpoint_id
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_trainlog(tmp / "trainlog.csv", ckpt.trainlog)
        try:
            os.rename(tmp, final)
        except OSError:
            # another writer won the race with identical content
            shutil.rmtree(tmp, ignore_errors=True)
        return final

    def load(self, checkpoint_id: str, verify: bool = True) -> ModelCheckpoint:
        return load_checkpoint(self.path(checkpoint_id), verify=verify)


def write_trainlog(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "accuracy"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in ("epoch", "split", "loss", "accuracy")})


def read_trainlog(path: Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "split": r["split"], "loss": float(r["loss"]), "accuracy": float(r["accuracy"])}
            for r in csv.DictReader(fh)
        ]


def load_checkpoint(path, verify: bool = True) -> ModelCheckpoint:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        weights = (path / "weights.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise LineageError(f"unreadable checkpoint {path}: {exc}") from exc
    if verify:
        if sha256(weights) != meta.get("weights_digest"):
            raise LineageError(f"weights digest mismatch in {path}")
    trainlog = read_trainlog(path / "trainlog.csv") if (path / "trainlog.csv").is_file() else []
    ckpt = ModelCheckpoint(
        architecture_id=meta["architecture_id"],
        view=meta["view"],
        tl_step=meta["tl_step"],
        class_names=meta["class_names"],
        weights=weights,
        parent_digest=meta.get("parent_digest"),
        second_parent_digest=meta.get("second_parent_digest"),
        metrics_at_save=meta.get("metrics_at_save"),
        model_config=meta.get("model_config", {}),
        init_provenance=meta.get("init_provenance", "random"),
        trainlog=trainlog,
        checkpoint_id=meta["checkpoint_id"],
    )
    if verify and ckpt.compute_id() != ckpt.checkpoint_id:
        raise LineageError(f"metadata digest mismatch in {path}")
    if verify and path.name != f"ckpt-{ckpt.checkpoint_id}":
        raise LineageError(f"directory name {path.name} does not match id {ckpt.checkpoint_id}")
    return ckpt


@dataclass
class LineageReport:
    checkpoint_id: str
    chain: list[dict]
    branches: dict[str, "LineageReport"] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.chain)

    @property
    def root_step(self) -> str:
        return self.chain[-1]["tl_step"]


def verify_lineage(checkpoint, store: CheckpointStore) -> LineageReport:
    """Walk and verify the parent chain of a checkpoint (id or object)."""
    ckpt_id = checkpoint if isinstance(checkpoint, str) else checkpoint.checkpoint_id
    if ckpt_id not in store:
        raise LineageError(f"checkpoint {ckpt_id} not found in {store.root}")
    ckpt = store.load(ckpt_id, verify=True)
    if ckpt.tl_step == "fusion":
        branches = {}
        for slot, pid, view in (("sur", ckpt.parent_digest, "SUR"), ("sec", ckpt.second_parent_digest, "SEC")):
            if pid not in store:
                raise LineageError(f"fusion checkpoint {ckpt_id}: missing {slot} parent {pid}")
            rep = verify_lineage(pid, store)
            if rep.chain[0]["view"] != view:
                raise LineageError(f"fusion checkpoint {ckpt_id}: {slot} parent has view {rep.chain[0]['view']}")
            branches[slot] = rep
        return LineageReport(ckpt_id, [_link(ckpt)], branches)
    chain = [_link(ckpt)]
    cur = ckpt
    seen = {ckpt_id}
    while cur.parent_digest is not None:
        pid = cur.parent_digest
        if pid in seen:
            raise LineageError(f"lineage cycle at {pid}")
        if pid not in store:
            raise LineageError(f"checkpoint {cur.checkpoint_id}: missing parent {pid}")
        parent = store.load(pid, verify=True)
        if cur.tl_step == "step2_domain" and parent.tl_step != "step1_general":
            raise LineageError(f"step2 checkpoint {cur.checkpoint_id} has a {parent.tl_step} parent")
        chain.append(_link(parent))
        seen.add(pid)
        cur = parent
    return LineageReport(ckpt_id, chain)


def _link(ckpt: ModelCheckpoint) -> dict:
    return {"checkpoint_id": ckpt.checkpoint_id, "tl_step": ckpt.tl_step, "view": ckpt.view}

