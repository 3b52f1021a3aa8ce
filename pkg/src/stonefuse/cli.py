"""``stonefuse`` command line.

Every command exits non-zero on failure and prints a final line of the form
``{"error": "<CODE>", "message": "..."}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointStore, load_checkpoint, verify_lineage
from .data_pipeline import (
    iter_patch_dataset,
    load_manifest,
    load_patch_archive,
    make_split,
    write_patch_archive,
)
from .errors import ConfigError, StonefuseError
from .evaluate import MetricsReport, aggregate_runs, emit_table
from .fusion import FusionSpec, build_multiview, evaluate_pairs, pair_samples, split_pairs, train_fusion_head
from .sweep import ExperimentPlan, describe, run_sweep
from .synthdata import default_pair_specs, generate_dataset, two_domain_pair
from .transfer import (
    STEP1_DEFAULT,
    STEP2_DEFAULT,
    TrainConfig,
    evaluate_single,
    load_single,
    set_strict_determinism,
    train_scratch,
    train_step1,
    train_step2,
)

log = logging.getLogger("stonefuse")

DEFAULT_STORE = "store"
EXIT_ERROR = 1
EXIT_INTERNAL = 70


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("size must look like HxW, e.g. 288x384") from None
    return h, w


def _load_configs(path, seed: int):
    """Config file holds either one TrainConfig or ``{"step1": ..., "step2": ...}``."""
    if path is None:
        return replace(STEP1_DEFAULT, seed=seed), replace(STEP2_DEFAULT, seed=seed)
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "step1" in data or "step2" in data:
        c1 = TrainConfig.from_dict(data.get("step1", {}))
        c2 = TrainConfig.from_dict(data.get("step2", data.get("step1", {})))
    else:
        c1 = c2 = TrainConfig.from_dict(data)
    return replace(c1, seed=seed), replace(c2, seed=seed)


def _store(a, override=None) -> CheckpointStore:
    return CheckpointStore(override or a.store or DEFAULT_STORE)


def _resolve_ckpt(ref: str, store: CheckpointStore):
    p = Path(ref)
    if (p / "meta.json").is_file():
        return load_checkpoint(p)
    return store.load(ref)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_prepare(a) -> None:
    manifest = load_manifest(a.manifest, expected_classes=a.classes or None)
    split = make_split(manifest, a.train_frac, a.val_frac, a.seed)
    plan, stream = iter_patch_dataset(
        manifest, split, a.patch_size, a.total, a.seed, test_fraction=round(1 - a.train_frac, 10),
        whiten_scope=a.whiten_scope,
    )
    summary = write_patch_archive(
        a.out, stream, split, manifest.class_names,
        {"dataset_id": manifest.dataset_id, "seed": a.seed, "whiten_scope": a.whiten_scope,
         "requested_total": a.total},
    )
    _emit({k: summary[k] for k in ("trainval_total", "test_total", "test_per_class", "test_per_class_per_view")})


def cmd_synth(a) -> None:
    h, w = a.size
    spec_a, spec_b = default_pair_specs(a.per_class, a.seed, a.classes, (h, w), a.strength)
    spec_a = replace(spec_a, view_correlation=a.view_correlation)
    spec_b = replace(spec_b, view_correlation=a.view_correlation)
    out = Path(a.out)
    if a.domain == "pair":
        ma, mb = two_domain_pair(spec_a, spec_b, out)
        _emit({"A": len(ma.entries), "B": len(mb.entries), "out": str(out)})
    else:
        m = generate_dataset(spec_a if a.domain == "A" else spec_b, out)
        _emit({a.domain: len(m.entries), "out": str(out)})


def cmd_train(a) -> None:
    store = _store(a, a.out)
    c1, c2 = _load_configs(a.config, a.seed)
    need = {"scratch": ("data_b",), "step1": ("data_a",), "two-step": ("data_a", "data_b")}[a.mode]
    for key in need:
        if getattr(a, key) is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required for mode {a.mode}")
    data_a = load_patch_archive(a.data_a) if a.data_a else None
    data_b = load_patch_archive(a.data_b) if a.data_b else None
    out = {}
    if a.mode == "scratch":
        ck = train_scratch(a.view, data_b, c1, store=store, architecture_id=a.arch)
        out["scratch"] = ck.checkpoint_id
    else:
        ck = train_step1(a.view, data_a, c1, store=store, architecture_id=a.arch, freeze=a.freeze_until,
                         strict_weights=a.strict_weights)
        out["step1"] = ck.checkpoint_id
        if a.mode == "two-step":
            ck = train_step2(a.view, ck, data_b, c2, store=store, freeze=a.freeze_until)
            out["step2"] = ck.checkpoint_id
            out["lineage_length"] = verify_lineage(ck, store).length
    out["checkpoint_id"] = ck.checkpoint_id
    out["test_accuracy"] = ck.metrics_at_save["accuracy"] if ck.metrics_at_save else None
    _emit(out)


def cmd_fuse(a) -> None:
    store = _store(a, a.out)
    sur = _resolve_ckpt(a.sur, store)
    sec = _resolve_ckpt(a.sec, store)
    for ck in (sur, sec):
        store.save(ck)
    spec = FusionSpec(a.method, a.attention, a.pairs)
    _, cfg = _load_configs(a.config, a.seed)
    trainval, test = load_patch_archive(a.data_b)
    model = build_multiview(sur, sec, spec, a.seed)
    pairs = pair_samples(trainval, trainval, spec.pairing_mode, a.seed)
    train, val = split_pairs(pairs, trainval.split.val_image_ids if trainval.split else ())
    test_pairs = pair_samples(test, test, spec.pairing_mode, a.seed)
    ck = train_fusion_head(model, train, cfg, paired_val=val, paired_test=test_pairs)
    store.save(ck)
    _emit({"checkpoint_id": ck.checkpoint_id, "test_accuracy": ck.metrics_at_save["accuracy"],
           "branch_digests": ck.model_config["branch_digests"]})


def _evaluate_ckpt(ckpt, test, seed: int) -> MetricsReport:
    if ckpt.model_config.get("kind") == "fusion":
        from .fusion import load_multiview

        spec = FusionSpec.from_dict(ckpt.model_config["fusion"])
        return evaluate_pairs(load_multiview(ckpt), pair_samples(test, test, spec.pairing_mode, seed))
    return evaluate_single(load_single(ckpt), test.select_view(ckpt.view))


def cmd_eval(a) -> None:
    ckpt = _resolve_ckpt(a.ckpt, _store(a))
    _, test = load_patch_archive(a.test)
    report = _evaluate_ckpt(ckpt, test, a.seed)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if a.table:
        ext = {"text": "txt", "csv": "csv", "latex": "tex"}[a.table]
        emit_table([(ckpt.view, aggregate_runs([report], [ckpt.checkpoint_id]))], out.with_suffix(f".{ext}"), a.table)
    _emit({"accuracy": report.accuracy, "macro_f1": report.macro_f1, "report": str(out)})


def cmd_viz(a) -> None:
    from .viz import emit_scatter, extract_embeddings, reduce_2d, write_points

    ckpt = _resolve_ckpt(a.ckpt, _store(a))
    trainval, test = load_patch_archive(a.data)
    ds = test if a.role == "test" else trainval
    if ckpt.model_config.get("kind") == "fusion":
        spec = FusionSpec.from_dict(ckpt.model_config["fusion"])
        items = pair_samples(ds, ds, spec.pairing_mode, a.seed)
    else:
        items = ds.select_view(ckpt.view)
    cache = Path(a.store or DEFAULT_STORE) / "embeddings"
    emb = extract_embeddings(ckpt, items, cache_dir=cache)
    pts = reduce_2d(emb, a.method, a.seed, a.n_neighbors, a.min_dist, fallback_to_pca=a.pca_fallback)
    fig = emit_scatter(pts, emb.labels, a.out, title=f"{ckpt.view} ({a.method})")
    csv_path = write_points(pts, emb.labels, emb.views, Path(a.out).with_name("points.csv"))
    _emit({"figure": str(fig), "points": str(csv_path), "n": len(emb.labels)})


def cmd_sweep(a) -> None:
    plan = ExperimentPlan.from_json(a.plan)
    if a.store:
        plan = replace(plan, store=a.store)
    outcome = run_sweep(plan, parallel=a.parallel)
    _emit({"report_dir": str(outcome.report_dir), "executed": len(outcome.executed),
           "skipped": len(outcome.skipped), "failed": len(outcome.failed)})
    if outcome.failed:
        raise StonefuseError(f"{len(outcome.failed)} run(s) failed; see {outcome.report_dir / 'sweep_status.json'}")


def cmd_describe(a) -> None:
    for line in describe(a.store or DEFAULT_STORE):
        print(line)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--store", default=d(None), help=f"experiment store directory (default ./{DEFAULT_STORE})")
    p.add_argument("--config", default=d(None), help="JSON config file")
    p.add_argument("--log-level", default=d("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    p.add_argument("--strict", action="store_true", default=d(False), help="strict deterministic kernels")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stonefuse", parents=[_common(True)],
                                     description="Multi-view kidney-stone patch classification pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(False)

    p = sub.add_parser("prepare", parents=[common], help="build a whitened patch archive from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--total", type=int, default=12000)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.125)
    p.add_argument("--whiten-scope", choices=["patch", "dataset"], default="patch")
    p.add_argument("--classes", type=int, default=6, help="expected class count; 0 disables the check")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic paired-view images")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=25)
    p.add_argument("--domain", choices=["A", "B", "pair"], default="pair")
    p.add_argument("--size", type=_size, default=(288, 384), help="image size HxW")
    p.add_argument("--view-correlation", type=float, default=0.5)
    p.add_argument("--strength", type=float, default=1.0, help="domain-B degradation strength")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a single-view model")
    p.add_argument("--view", choices=["SUR", "SEC", "MIX"], required=True)
    p.add_argument("--mode", choices=["scratch", "step1", "two-step"], default="two-step")
    p.add_argument("--data-a")
    p.add_argument("--data-b")
    p.add_argument("--out", help="checkpoint store (defaults to --store)")
    p.add_argument("--arch", default="resnet50")
    p.add_argument("--freeze-until", default="none")
    p.add_argument("--strict-weights", action="store_true", help="fail when no pretrained weights are available")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", parents=[common], help="train a multi-view fusion head")
    p.add_argument("--sur", required=True, help="SUR checkpoint id or directory")
    p.add_argument("--sec", required=True, help="SEC checkpoint id or directory")
    p.add_argument("--method", choices=["concat", "maxpool"], default="maxpool")
    p.add_argument("--attention", choices=["none", "last", "last2"], default="none")
    p.add_argument("--pairs", choices=["paired", "replicated"], default="paired")
    p.add_argument("--data-b", required=True)
    p.add_argument("--out", help="checkpoint store (defaults to --store)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a test archive")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table", choices=["text", "csv", "latex"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", parents=[common], help="2-D embedding scatter of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["umap", "pca"], default="umap")
    p.add_argument("--role", choices=["test", "trainval"], default="test")
    p.add_argument("--n-neighbors", type=int, default=15)
    p.add_argument("--min-dist", type=float, default=0.1)
    p.add_argument("--pca-fallback", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("sweep", parents=[common], help="run an experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("describe", parents=[common], help="list checkpoints and reports in a store")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format=f"%(asctime)s %(levelname)s %(name)s invocation={uuid.uuid4().hex[:8]} cmd={args.command} %(message)s",
        stream=sys.stderr,
    )
    if args.strict:
        set_strict_determinism(True)
    try:
        args.func(args)
    except StonefuseError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # last-resort guard so the error line is always printed
        log.exception("unexpected failure")
        print(json.dumps({"error": "INTERNAL", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
