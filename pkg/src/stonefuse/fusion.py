"""Two-branch multi-view model with frozen per-view extractors.

Each branch is the backbone of a trained single-view checkpoint. Their pooled
embeddings are fused by concatenation or elementwise max, optionally after
channel-attention gates on the last (and second-last) backbone stages, and
fed to a trainable classifier head.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import AttentionGate, ClassifierHead, build_backbone
from .checkpoint import ModelCheckpoint, serialize_state, state_digest, sub_state
from .data_pipeline import PatchDataset, PatchRecord
from .errors import ConfigError, FusionError, PairingError
from .evaluate import MetricsReport, compute_metrics
from .transfer import TrainConfig, _flip, fit, predict_indices, stack_pixels

log = logging.getLogger(__name__)

METHODS = ("concat", "maxpool")
PLACEMENTS = ("none", "last", "last_and_second_last")
PAIRING_MODES = ("paired", "replicated")
PLACEMENT_ALIASES = {"last2": "last_and_second_last"}


@dataclass
class FusionSpec:
    method: str = "maxpool"
    attention_placement: str = "none"
    pairing_mode: str = "paired"
    head: dict = field(default_factory=lambda: {"dropout": 0.2})
    allow_concat_attention: bool = False
    reduction_ratio: int = 16

    def __post_init__(self):
        self.attention_placement = PLACEMENT_ALIASES.get(self.attention_placement, self.attention_placement)
        if self.method not in METHODS:
            raise FusionError(f"fusion method must be one of {METHODS}")
        if self.attention_placement not in PLACEMENTS:
            raise FusionError(f"attention placement must be one of {PLACEMENTS}")
        if self.pairing_mode not in PAIRING_MODES:
            raise FusionError(f"pairing mode must be one of {PAIRING_MODES}")
        if self.method == "concat" and self.attention_placement != "none" and not self.allow_concat_attention:
            raise FusionError("attention is only defined for maxpool fusion (set allow_concat_attention to override)")

    @property
    def label(self) -> str:
        return f"{self.method}/{self.attention_placement}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        return cls(**d)


def _as_pair(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise FusionError(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")


def fuse_concat(f_sur, f_sec):
    """``[f_sur, f_sec]`` along the last axis."""
    _as_pair(f_sur, f_sec)
    if isinstance(f_sur, torch.Tensor):
        return torch.cat([f_sur, f_sec], dim=-1)
    return np.concatenate([np.asarray(f_sur), np.asarray(f_sec)], axis=-1)


def fuse_maxpool(f_sur, f_sec):
    """Elementwise maximum of the stacked view vectors."""
    _as_pair(f_sur, f_sec)
    if isinstance(f_sur, torch.Tensor):
        return torch.maximum(f_sur, f_sec)
    return np.maximum(np.asarray(f_sur), np.asarray(f_sec))


def gate_stages(stage_names: list[str], placement: str) -> list[str]:
    if placement == "none":
        return []
    if placement == "last":
        return stage_names[-1:]
    return stage_names[-2:]


class MultiViewModel(nn.Module):
    def __init__(self, sur_branch, sec_branch, spec: FusionSpec, class_names, seed: int = 0):
        super().__init__()
        if sur_branch.stage_names != sec_branch.stage_names:
            raise FusionError("branches have different stage layouts")
        self.sur_branch = sur_branch
        self.sec_branch = sec_branch
        self.spec = spec
        self.class_names = list(class_names)
        stages = gate_stages(sur_branch.stage_names, spec.attention_placement)
        d = sur_branch.embedding_dim
        in_dim = 2 * d if spec.method == "concat" else d
        # own RNG stream: initial gates and head must not depend on global torch state
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.gates = nn.ModuleDict(
                {
                    branch: nn.ModuleDict(
                        {s: AttentionGate(sur_branch.stage_channels[s], spec.reduction_ratio) for s in stages}
                    )
                    for branch in ("sur", "sec")
                }
            )
            self.head = ClassifierHead(in_dim, len(self.class_names), spec.head.get("dropout", 0.2))
        for p in list(self.sur_branch.parameters()) + list(self.sec_branch.parameters()):
            p.requires_grad_(False)
        self.sur_branch.eval()
        self.sec_branch.eval()
        self.trained = False
        self.parent_digests: tuple[str | None, str | None] = (None, None)

    @property
    def architecture_id(self) -> str:
        return self.sur_branch.architecture_id

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen extractors keep their normalization statistics
        self.sur_branch.eval()
        self.sec_branch.eval()
        return self

    def branch_embeddings(self, sur_x, sec_x):
        g_sur = dict(self.gates["sur"].items()) or None
        g_sec = dict(self.gates["sec"].items()) or None
        e_sur = self.sur_branch.forward_features(sur_x, g_sur)[1]
        e_sec = self.sec_branch.forward_features(sec_x, g_sec)[1]
        return e_sur, e_sec

    def fused_embedding(self, sur_x, sec_x):
        e_sur, e_sec = self.branch_embeddings(sur_x, sec_x)
        if self.spec.method == "concat":
            return fuse_concat(e_sur, e_sec)
        return fuse_maxpool(e_sur, e_sec)

    def forward(self, sur_x, sec_x):
        return self.head(self.fused_embedding(sur_x, sec_x))

    def branch_digests(self) -> tuple[str, str]:
        return state_digest(self.sur_branch), state_digest(self.sec_branch)

    def trainable_parameter_names(self) -> set[str]:
        return {n for n, p in self.named_parameters() if p.requires_grad}

    def pin_gates_open(self) -> None:
        for branch in self.gates.values():
            for g in branch.values():
                g.pin_open()


def _load_branch(ckpt: ModelCheckpoint):
    bb = build_backbone(ckpt.architecture_id)
    bb.load_state_dict(sub_state(ckpt.state(), "backbone"))
    return bb


def build_multiview(
    sur_ckpt: ModelCheckpoint, sec_ckpt: ModelCheckpoint, spec: FusionSpec, seed: int = 0
) -> MultiViewModel:
    if sur_ckpt.view != "SUR":
        raise FusionError(f"SUR branch checkpoint has view {sur_ckpt.view}")
    if sec_ckpt.view != "SEC":
        raise FusionError(f"SEC branch checkpoint has view {sec_ckpt.view}")
    if sur_ckpt.architecture_id != sec_ckpt.architecture_id:
        raise FusionError(f"architecture mismatch: {sur_ckpt.architecture_id} vs {sec_ckpt.architecture_id}")
    if list(sur_ckpt.class_names) != list(sec_ckpt.class_names):
        raise FusionError("branch checkpoints have different class names")
    model = MultiViewModel(_load_branch(sur_ckpt), _load_branch(sec_ckpt), spec, sur_ckpt.class_names, seed)
    model.parent_digests = (sur_ckpt.checkpoint_id, sec_ckpt.checkpoint_id)
    return model


# --------------------------------------------------------------------------
# pairing
# --------------------------------------------------------------------------


@dataclass
class PairedSample:
    fragment_id: str | None
    sur_patch: PatchRecord
    sec_patch: PatchRecord
    class_label: str

    def __post_init__(self):
        if self.sur_patch.class_label != self.class_label or self.sec_patch.class_label != self.class_label:
            raise PairingError(
                f"pair labels disagree: {self.sur_patch.class_label}/{self.sec_patch.class_label} vs {self.class_label}"
            )


def pair_samples(
    sur_dataset: PatchDataset | None,
    sec_dataset: PatchDataset | None,
    mode: str = "paired",
    seed: int = 0,
) -> list[PairedSample]:
    """Build dual-input samples.

    ``paired`` matches SUR and SEC patches of the same fragment when ids carry
    one, otherwise randomly within a class, truncating to the smaller view.
    ``replicated`` turns every patch ``p`` of either dataset into ``(p, p)``.
    """
    if mode not in PAIRING_MODES:
        raise PairingError(f"pairing mode must be one of {PAIRING_MODES}")
    if mode == "replicated":
        out = []
        for ds in (sur_dataset, sec_dataset):
            if ds is not None:
                out += [PairedSample(r.fragment_id, r, r, r.class_label) for r in ds.records]
        if not out:
            raise PairingError("nothing to pair")
        return out
    if sur_dataset is None or sec_dataset is None:
        raise PairingError("paired mode needs both a SUR and a SEC dataset")
    if list(sur_dataset.class_names) != list(sec_dataset.class_names):
        raise PairingError("SUR and SEC datasets have different class sets")
    rng = np.random.default_rng(seed)
    sur = [r for r in sur_dataset.records if r.view == "SUR"]
    sec = [r for r in sec_dataset.records if r.view == "SEC"]
    out = []
    for cls in sur_dataset.class_names:
        a = sorted((r for r in sur if r.class_label == cls), key=lambda r: r.patch_id)
        b = sorted((r for r in sec if r.class_label == cls), key=lambda r: r.patch_id)
        if bool(a) != bool(b):
            raise PairingError(f"class {cls!r} is present in only one view")
        if not a:
            continue
        frags_a = {r.fragment_id for r in a}
        frags_b = {r.fragment_id for r in b}
        if None not in frags_a and None not in frags_b and frags_a & frags_b:
            dropped = 0
            for frag in sorted(frags_a | frags_b):
                fa = [r for r in a if r.fragment_id == frag]
                fb = [r for r in b if r.fragment_id == frag]
                k = min(len(fa), len(fb))
                dropped += len(fa) + len(fb) - 2 * k
                out += [PairedSample(frag, x, y, cls) for x, y in zip(fa[:k], fb[:k])]
            if dropped:
                log.warning("class %s: %d patches without a same-fragment partner dropped", cls, dropped)
        else:
            ia, ib = rng.permutation(len(a)), rng.permutation(len(b))
            k = min(len(a), len(b))
            if len(a) != len(b):
                warnings.warn(f"class {cls}: {len(a)} SUR vs {len(b)} SEC patches; pairs limited to {k}", stacklevel=2)
            out += [PairedSample(None, a[i], b[j], cls) for i, j in zip(ia[:k], ib[:k])]
    if not out:
        raise PairingError("pairing produced no samples")
    return out


def split_pairs(pairs: list[PairedSample], val_image_ids) -> tuple[list[PairedSample], list[PairedSample]]:
    val_image_ids = set(val_image_ids or ())
    train, val = [], []
    for p in pairs:
        is_val = p.sur_patch.source_image_id in val_image_ids or p.sec_patch.source_image_id in val_image_ids
        (val if is_val else train).append(p)
    return train, val


# --------------------------------------------------------------------------
# training and inference
# --------------------------------------------------------------------------


def pair_collate(class_names):
    index = {c: i for i, c in enumerate(class_names)}

    def collate(pairs, augment, gen):
        xs = stack_pixels([p.sur_patch for p in pairs])
        xc = stack_pixels([p.sec_patch for p in pairs])
        if augment and gen is not None:
            xs = _flip(xs, augment, gen)
            xc = _flip(xc, augment, gen)
        y = torch.tensor([index[p.class_label] for p in pairs], dtype=torch.long)
        return (xs, xc), y

    return collate


def pair_forward(model, inputs):
    return model(*inputs)


def evaluate_pairs(model: MultiViewModel, pairs: list[PairedSample], batch_size: int = 64) -> MetricsReport:
    if not pairs:
        raise PairingError("cannot evaluate on an empty pairing")
    pred, true, _ = predict_indices(model, pairs, pair_collate(model.class_names), pair_forward, batch_size)
    names = model.class_names
    return compute_metrics([names[i] for i in pred], [names[i] for i in true], names)


def train_fusion_head(
    model: MultiViewModel,
    paired_trainval: list[PairedSample],
    config: TrainConfig,
    *,
    paired_val: list[PairedSample] | None = None,
    paired_test: list[PairedSample] | None = None,
) -> ModelCheckpoint:
    """Train only the gates and head; branch weights stay bit-identical."""
    if not paired_trainval:
        raise PairingError("empty pairing")
    before = model.branch_digests()
    result = fit(model, paired_trainval, paired_val or None, config, pair_collate(model.class_names), pair_forward)
    after = model.branch_digests()
    if before != after:
        raise FusionError("frozen branch weights changed during fusion training")
    model.trained = True
    metrics = evaluate_pairs(model, paired_test).to_dict() if paired_test else None
    sur_id, sec_id = model.parent_digests
    return ModelCheckpoint(
        architecture_id=model.architecture_id,
        view="MIX",
        tl_step="fusion",
        class_names=list(model.class_names),
        weights=serialize_state(model.state_dict()),
        parent_digest=sur_id,
        second_parent_digest=sec_id,
        metrics_at_save=metrics,
        model_config={
            "kind": "fusion",
            "fusion": model.spec.to_dict(),
            "train_config": config.to_dict(),
            "branch_digests": list(after),
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "embedding_dim": model.sur_branch.embedding_dim,
        },
        init_provenance="branches",
        trainlog=result.trainlog,
    )


def load_multiview(ckpt: ModelCheckpoint) -> MultiViewModel:
    cfg = ckpt.model_config
    if cfg.get("kind") != "fusion":
        raise ConfigError(f"checkpoint {ckpt.checkpoint_id} is not a fusion model")
    spec = FusionSpec.from_dict(cfg["fusion"])
    model = MultiViewModel(build_backbone(ckpt.architecture_id), build_backbone(ckpt.architecture_id), spec, ckpt.class_names)
    model.load_state_dict(ckpt.state())
    model.parent_digests = (ckpt.parent_digest, ckpt.second_parent_digest)
    model.trained = True
    model.eval()
    return model


def predict(model: MultiViewModel, sample: PairedSample) -> np.ndarray:
    """Class probabilities for one paired sample."""
    if not model.trained:
        raise FusionError("fusion head is untrained")
    (xs, xc), _ = pair_collate(model.class_names)([sample], (), None)
    model.eval()
    with torch.no_grad():
        return torch.softmax(model(xs, xc), dim=-1)[0].numpy()
