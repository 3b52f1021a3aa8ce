"""Single-view training: general-domain init, fine-tuning, two-step schedule."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SingleViewModel, build_backbone, torchvision_key_map
from .checkpoint import (
    CheckpointStore,
    ModelCheckpoint,
    deserialize_state,
    serialize_state,
    sha256,
    state_digest,
    verify_lineage,
)
from .data_pipeline import PatchDataset
from .errors import ConfigError, TrainingError, WeightsError
from .evaluate import MetricsReport, compute_metrics

log = logging.getLogger(__name__)

WEIGHTS_CACHE_ENV = "STONEFUSE_WEIGHTS_CACHE"
FETCH_ENV = "STONEFUSE_FETCH_WEIGHTS"
OPTIMIZERS = ("sgd", "adam")
LR_SCHEDULES = ("constant", "step-decay")
AUGMENTATIONS = ("hflip", "vflip")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_schedule: str = "step-decay"
    optimizer_id: str = "sgd"
    seed: int = 0
    early_stop_patience: int | None = None
    augmentations: list[str] = field(default_factory=lambda: ["hflip", "vflip"])

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        # lr = 0 is accepted so a null update can be run on purpose
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a finite non-negative number")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.optimizer_id not in OPTIMIZERS:
            raise ConfigError(f"optimizer_id must be one of {OPTIMIZERS}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 or null")
        bad = [a for a in self.augmentations if a not in AUGMENTATIONS]
        if bad:
            raise ConfigError(f"unknown augmentations {bad}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


STEP1_DEFAULT = TrainConfig(epochs=30)
STEP2_DEFAULT = TrainConfig(epochs=20)


def set_strict_determinism(enabled: bool = True) -> None:
    """Force deterministic kernels. CPU runs are already deterministic for the
    ops used here; GPU convolutions are not unless this is on."""
    torch.use_deterministic_algorithms(enabled)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = not enabled
        torch.backends.cudnn.deterministic = enabled
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


# --------------------------------------------------------------------------
# general-domain initialization
# --------------------------------------------------------------------------


def weights_cache_dir() -> Path | None:
    d = os.environ.get(WEIGHTS_CACHE_ENV)
    return Path(d) if d else None


def cache_backbone_weights(backbone, cache_dir) -> Path:
    """Store a backbone state in the cache layout read by :func:`init_from_general_domain`."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{backbone.architecture_id}.sfw"
    path.write_bytes(serialize_state(backbone.state_dict()))
    return path


def _fetch_torchvision(architecture_id: str, cache_dir: Path | None):
    import torchvision.models as tvm

    enum = {"resnet50": tvm.ResNet50_Weights, "resnet18": tvm.ResNet18_Weights}.get(architecture_id)
    if enum is None:
        raise WeightsError(f"no downloadable weights for {architecture_id}")
    net = getattr(tvm, architecture_id)(weights=enum.DEFAULT)
    return torchvision_key_map(net.state_dict())


def init_from_general_domain(
    architecture_id: str,
    class_names: Sequence[str],
    seed: int = 0,
    cache_dir=None,
    strict: bool = False,
    fetch: bool | None = None,
    dropout: float = 0.2,
) -> SingleViewModel:
    """Backbone with general-domain (ImageNet) weights and a fresh head.

    Looks for ``<arch>.sfw`` (native serialization) or ``<arch>.pth``
    (torchvision state dict) in the weight cache. Without weights the
    backbone stays seeded-random unless ``strict``. The outcome is stored in
    ``model.init_provenance``.
    """
    torch.manual_seed(seed)
    backbone = build_backbone(architecture_id)
    model = SingleViewModel(backbone, len(class_names), class_names, dropout)
    cache = Path(cache_dir) if cache_dir is not None else weights_cache_dir()
    if fetch is None:
        fetch = os.environ.get(FETCH_ENV, "") not in ("", "0")
    state = None
    provenance = "random"
    if cache is not None and (cache / f"{architecture_id}.sfw").is_file():
        blob = (cache / f"{architecture_id}.sfw").read_bytes()
        state = deserialize_state(blob)
        provenance = f"pretrained:{sha256(blob)}"
    elif cache is not None and (cache / f"{architecture_id}.pth").is_file():
        path = cache / f"{architecture_id}.pth"
        state = torchvision_key_map(torch.load(path, map_location="cpu", weights_only=True))
        provenance = f"pretrained:{sha256(path.read_bytes())}"
    elif fetch:
        try:
            state = _fetch_torchvision(architecture_id, cache)
            provenance = f"pretrained:{state_digest(state)}"
        except Exception as exc:  # network or hub failures
            if strict:
                raise WeightsError(f"failed to fetch weights for {architecture_id}: {exc}") from exc
            log.warning("weight fetch failed (%s)", exc)
    if state is None:
        if strict:
            raise WeightsError(f"no general-domain weights for {architecture_id} (cache: {cache})")
        warnings.warn(
            f"no general-domain weights for {architecture_id}; using seeded random init",
            RuntimeWarning,
            stacklevel=2,
        )
    else:
        try:
            missing, unexpected = backbone.load_state_dict(state, strict=False)
        except RuntimeError as exc:  # shape mismatches
            raise WeightsError(f"weight cache does not fit {architecture_id}: {exc}") from exc
        if missing or unexpected:
            raise WeightsError(f"weight cache does not fit {architecture_id}: missing={missing[:3]} unexpected={unexpected[:3]}")
    model.init_provenance = provenance
    return model


def random_init(architecture_id: str, class_names: Sequence[str], seed: int = 0, dropout: float = 0.2) -> SingleViewModel:
    torch.manual_seed(seed)
    model = SingleViewModel(build_backbone(architecture_id), len(class_names), class_names, dropout)
    model.init_provenance = "random"
    return model


# --------------------------------------------------------------------------
# freezing
# --------------------------------------------------------------------------


def freeze_modules(model: SingleViewModel, freeze: str | None) -> list[nn.Module]:
    """Apply a freeze spec; returns the fully frozen submodules.

    ``freeze`` is ``none``, ``stem``, a stage name (frozen up to and including
    it), ``backbone`` or ``all`` (head too).
    """
    freeze = freeze or "none"
    bb = model.backbone
    order = ["stem"] + bb.stage_names
    if freeze == "none":
        upto = []
    elif freeze in ("backbone", "all"):
        upto = order
    elif freeze in order:
        upto = order[: order.index(freeze) + 1]
    else:
        raise ConfigError(f"unknown freeze spec {freeze!r}; use none, stem, {', '.join(bb.stage_names)}, backbone or all")
    mods = [bb.stem if n == "stem" else bb.stages[n] for n in upto]
    if freeze == "all":
        mods.append(model.head)
    for p in model.parameters():
        p.requires_grad_(True)
    for m in mods:
        for p in m.parameters():
            p.requires_grad_(False)
    return mods


# --------------------------------------------------------------------------
# generic loop
# --------------------------------------------------------------------------


def _flip(x: torch.Tensor, augment: Sequence[str], gen: torch.Generator) -> torch.Tensor:
    if "hflip" in augment:
        m = torch.rand(x.shape[0], generator=gen) < 0.5
        x = torch.where(m[:, None, None, None], x.flip(-1), x)
    if "vflip" in augment:
        m = torch.rand(x.shape[0], generator=gen) < 0.5
        x = torch.where(m[:, None, None, None], x.flip(-2), x)
    return x


def stack_pixels(records) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(r.pixels, dtype=np.float32) for r in records]))


@dataclass
class FitResult:
    best_state: dict
    trainlog: list[dict]
    best_epoch: int
    best_val_accuracy: float | None


def fit(
    model: nn.Module,
    train_items: Sequence,
    val_items: Sequence | None,
    config: TrainConfig,
    collate: Callable,
    forward: Callable,
    frozen_modules: Sequence[nn.Module] = (),
) -> FitResult:
    """Minibatch cross-entropy training with best-validation selection.

    ``collate(items, augment, gen)`` returns ``(inputs, labels)`` and
    ``forward(model, inputs)`` returns logits.
    """
    config.validate()
    if not train_items:
        raise TrainingError("empty training set")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = None
    sched = None
    if params:
        if config.optimizer_id == "sgd":
            opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=0.9)
        else:
            opt = torch.optim.Adam(params, lr=config.learning_rate)
        if config.lr_schedule == "step-decay":
            milestone = max(1, int(round(config.epochs * 2 / 3)))
            sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[milestone], gamma=0.1)
    trainlog = []
    best_state = copy.deepcopy(model.state_dict())
    best_acc = -1.0
    best_epoch = 0
    stale = 0
    n = len(train_items)
    for epoch in range(1, config.epochs + 1):
        model.train()
        for m in frozen_modules:
            m.eval()
        perm = torch.randperm(n, generator=gen).tolist()
        tot_loss = 0.0
        correct = 0
        for b in range(0, n, config.batch_size):
            items = [train_items[i] for i in perm[b : b + config.batch_size]]
            inputs, labels = collate(items, config.augmentations, gen)
            logits = forward(model, inputs)
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                lr = opt.param_groups[0]["lr"] if opt else 0.0
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {b // config.batch_size} (lr={lr:g})"
                )
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            tot_loss += loss.item() * len(items)
            correct += int((logits.argmax(1) == labels).sum())
        if sched is not None:
            sched.step()
        trainlog.append({"epoch": epoch, "split": "train", "loss": tot_loss / n, "accuracy": correct / n})
        if val_items:
            vloss, vacc = evaluate_loss(model, val_items, collate, forward, config.batch_size)
            trainlog.append({"epoch": epoch, "split": "val", "loss": vloss, "accuracy": vacc})
            log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f", epoch, tot_loss / n, vloss, vacc)
            if vacc > best_acc:
                best_acc, best_epoch, stale = vacc, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if config.early_stop_patience is not None and stale >= config.early_stop_patience:
                    break
        else:
            log.info("epoch %d train_loss=%.4f", epoch, tot_loss / n)
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return FitResult(best_state, trainlog, best_epoch, best_acc if val_items else None)


@torch.no_grad()
def predict_indices(model, items, collate, forward, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray, float]:
    model.eval()
    preds, truths = [], []
    tot = 0.0
    for b in range(0, len(items), batch_size):
        inputs, labels = collate(items[b : b + batch_size], (), None)
        logits = forward(model, inputs)
        tot += F.cross_entropy(logits, labels, reduction="sum").item()
        preds.append(logits.argmax(1).numpy())
        truths.append(labels.numpy())
    if not preds:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), float("nan")
    return np.concatenate(preds), np.concatenate(truths), tot / len(items)


def evaluate_loss(model, items, collate, forward, batch_size: int = 64) -> tuple[float, float]:
    pred, true, loss = predict_indices(model, items, collate, forward, batch_size)
    return loss, float((pred == true).mean())


# --------------------------------------------------------------------------
# single-view fine-tuning
# --------------------------------------------------------------------------


def single_collate(class_names):
    index = {c: i for i, c in enumerate(class_names)}

    def collate(records, augment, gen):
        x = stack_pixels(records)
        if augment and gen is not None:
            x = _flip(x, augment, gen)
        y = torch.tensor([index[r.class_label] for r in records], dtype=torch.long)
        return (x,), y

    return collate


def single_forward(model, inputs):
    return model(*inputs)


def _split_trainval(ds: PatchDataset):
    if ds.split is None or not ds.split.val_image_ids:
        return list(ds.records), []
    val_ids = ds.split.val_image_ids
    train = [r for r in ds.records if r.source_image_id not in val_ids]
    val = [r for r in ds.records if r.source_image_id in val_ids]
    return train, val


def evaluate_single(model: SingleViewModel, dataset: PatchDataset, batch_size: int = 64) -> MetricsReport:
    if not dataset.records:
        raise TrainingError("cannot evaluate on an empty dataset")
    _check_classes(model, dataset)
    pred, true, _ = predict_indices(model, dataset.records, single_collate(model.class_names), single_forward, batch_size)
    names = model.class_names
    return compute_metrics([names[i] for i in pred], [names[i] for i in true], names)


def _check_classes(model: SingleViewModel, ds: PatchDataset) -> None:
    if list(ds.class_names) != list(model.class_names):
        raise ConfigError(
            f"dataset classes {list(ds.class_names)} do not match model head classes {list(model.class_names)}"
        )


def fine_tune(
    model: SingleViewModel,
    datasets: tuple[PatchDataset, PatchDataset | None],
    config: TrainConfig,
    freeze: str | None = "none",
    *,
    view: str,
    tl_step: str,
    parent_digest: str | None = None,
) -> ModelCheckpoint:
    """Train ``model`` in place on the train/val part of ``datasets[0]``.

    The best-validation epoch is kept; ``datasets[1]`` (if given) is scored
    into ``metrics_at_save``.
    """
    trainval, test = datasets
    _check_classes(model, trainval)
    config.validate()
    train, val = _split_trainval(trainval)
    frozen = freeze_modules(model, freeze)
    collate = single_collate(model.class_names)
    result = fit(model, train, val, config, collate, single_forward, frozen)
    for p in model.parameters():
        p.requires_grad_(True)
    metrics = evaluate_single(model, test).to_dict() if test is not None and test.records else None
    return ModelCheckpoint(
        architecture_id=model.architecture_id,
        view=view,
        tl_step=tl_step,
        class_names=list(model.class_names),
        weights=serialize_state(model.state_dict()),
        parent_digest=parent_digest,
        metrics_at_save=metrics,
        model_config={
            "kind": "single",
            "num_classes": len(model.class_names),
            "dropout": model.head.dropout_p,
            "patch_size": trainval.records[0].patch_size,
            "freeze": freeze or "none",
            "train_config": config.to_dict(),
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "backbone_digest": state_digest(model.backbone),
        },
        init_provenance=getattr(model, "init_provenance", "random"),
        trainlog=result.trainlog,
    )


def load_single(ckpt: ModelCheckpoint) -> SingleViewModel:
    cfg = ckpt.model_config
    if cfg.get("kind") != "single":
        raise ConfigError(f"checkpoint {ckpt.checkpoint_id} is not a single-view model")
    model = SingleViewModel(build_backbone(ckpt.architecture_id), cfg["num_classes"], ckpt.class_names, cfg["dropout"])
    model.load_state_dict(ckpt.state())
    model.init_provenance = ckpt.init_provenance
    model.eval()
    return model


def _view_pair(datasets, view: str, what: str):
    trainval, test = datasets
    tv = trainval.select_view(view)
    te = test.select_view(view) if test is not None else None
    if not tv.records:
        raise TrainingError(f"{what} has no {view} training patches")
    return tv, te


def two_step_train(
    view: str,
    dataset_a,
    dataset_b,
    configs: tuple[TrainConfig, TrainConfig] = (STEP1_DEFAULT, STEP2_DEFAULT),
    *,
    store: CheckpointStore,
    architecture_id: str = "resnet50",
    freeze: str | None = "none",
    cache_dir=None,
    strict_weights: bool = False,
    return_step1: bool = False,
):
    """General-domain init, fine-tune on domain A, then on domain B.

    Only backbone weights carry over from step 1; the head is re-initialized
    for domain B's classes. Both checkpoints are saved to ``store``.
    """
    step1 = train_step1(view, dataset_a, configs[0], store=store, architecture_id=architecture_id,
                        freeze=freeze, cache_dir=cache_dir, strict_weights=strict_weights)
    step2 = train_step2(view, step1, dataset_b, configs[1], store=store, freeze=freeze)
    return (step1, step2) if return_step1 else step2


def train_step1(view, dataset_a, config, *, store, architecture_id="resnet50", freeze="none",
                cache_dir=None, strict_weights=False) -> ModelCheckpoint:
    tv, te = _view_pair(dataset_a, view, "dataset A")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if not strict_weights else "default", RuntimeWarning)
        model = init_from_general_domain(architecture_id, tv.class_names, config.seed, cache_dir, strict_weights)
    if model.init_provenance == "random":
        log.warning("step 1 for %s starts from random weights (no general-domain cache)", view)
    ckpt = fine_tune(model, (tv, te), config, freeze, view=view, tl_step="step1_general")
    store.save(ckpt)
    return ckpt


def train_step2(view, step1: ModelCheckpoint, dataset_b, config, *, store, freeze="none") -> ModelCheckpoint:
    tv, te = _view_pair(dataset_b, view, "dataset B")
    model = load_single(step1)
    torch.manual_seed(config.seed)
    model.reset_head(tv.class_names)
    model.init_provenance = f"checkpoint:{step1.checkpoint_id}"
    ckpt = fine_tune(model, (tv, te), config, freeze, view=view, tl_step="step2_domain",
                     parent_digest=step1.checkpoint_id)
    store.save(ckpt)
    return ckpt


def train_scratch(view, dataset_b, config, *, store, architecture_id="resnet50") -> ModelCheckpoint:
    tv, te = _view_pair(dataset_b, view, "dataset B")
    model = random_init(architecture_id, tv.class_names, config.seed)
    ckpt = fine_tune(model, (tv, te), config, "none", view=view, tl_step="scratch")
    store.save(ckpt)
    return ckpt


def train_baselines(
    view: str,
    dataset_a,
    dataset_b,
    configs: tuple[TrainConfig, TrainConfig] = (STEP1_DEFAULT, STEP2_DEFAULT),
    *,
    store: CheckpointStore,
    architecture_id: str = "resnet50",
    scratch_config: TrainConfig | None = None,
    cache_dir=None,
) -> dict[str, ModelCheckpoint]:
    """Scratch-on-B, step-1-only (A) and two-step checkpoints for one view.

    Scratch training uses the step-1 budget unless ``scratch_config`` is given.
    """
    step1, step2 = two_step_train(view, dataset_a, dataset_b, configs, store=store,
                                  architecture_id=architecture_id, cache_dir=cache_dir, return_step1=True)
    scratch = train_scratch(view, dataset_b, scratch_config or configs[0], store=store, architecture_id=architecture_id)
    return {"scratch_B": scratch, "step1_only_A": step1, "two_step": step2}


__all__ = [
    "TrainConfig",
    "init_from_general_domain",
    "fine_tune",
    "two_step_train",
    "train_baselines",
    "verify_lineage",
    "load_single",
    "evaluate_single",
]
