"""Resumable experiment sweeps and store inventory.

Store layout::

    store/ckpt-<id>/        checkpoints
    store/runs/<key>.json   one record per finished (or failed) run
    store/reports/*.json    aggregated tables and run status
    store/tables/*          text / csv / latex renderings
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .checkpoint import CheckpointStore, load_checkpoint, verify_lineage
from .data_pipeline import load_patch_archive
from .errors import LineageError, PlanError, StonefuseError
from .evaluate import MetricsReport, aggregate_runs, emit_table
from .fusion import FusionSpec, build_multiview, pair_samples, split_pairs, train_fusion_head
from .transfer import TrainConfig, evaluate_single, load_single, train_scratch, train_step1, train_step2

log = logging.getLogger(__name__)

MODES = ("scratch", "step1", "two-step")
TABLE_FORMATS = {"text": "txt", "csv": "csv", "latex": "tex"}


@dataclass
class ExperimentPlan:
    data_a: str
    data_b: str
    store: str
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    views: list[str] = field(default_factory=lambda: ["SUR", "SEC", "MIX"])
    modes: list[str] = field(default_factory=lambda: list(MODES))
    fusion_specs: list[dict] = field(
        default_factory=lambda: [
            {"method": "concat", "attention_placement": "none"},
            {"method": "maxpool", "attention_placement": "none"},
            {"method": "maxpool", "attention_placement": "last"},
            {"method": "maxpool", "attention_placement": "last_and_second_last"},
        ]
    )
    architecture_id: str = "resnet50"
    step1_config: dict = field(default_factory=lambda: TrainConfig(epochs=30).to_dict())
    step2_config: dict = field(default_factory=lambda: TrainConfig(epochs=20).to_dict())
    fusion_config: dict = field(default_factory=lambda: TrainConfig(epochs=20).to_dict())
    scratch_config: dict | None = None

    def validate(self) -> None:
        if not self.seeds:
            raise PlanError("plan needs at least one seed")
        for key in ("data_a", "data_b"):
            p = Path(getattr(self, key))
            if not (p / "index.jsonl").is_file():
                raise PlanError(f"{key} {p} is not a patch archive")
        bad = [v for v in self.views if v not in ("SUR", "SEC", "MIX")]
        if bad:
            raise PlanError(f"unknown views {bad}")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise PlanError(f"unknown modes {bad}")
        for d in (self.step1_config, self.step2_config, self.fusion_config, self.scratch_config):
            if d is not None:
                TrainConfig.from_dict(d)
        for s in self.fusion_specs:
            FusionSpec.from_dict(s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        try:
            return cls(**d)
        except TypeError as exc:
            raise PlanError(f"bad plan: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        path = Path(path)
        if not path.is_file():
            raise PlanError(f"plan file not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def archive_digest(path) -> str:
    h = hashlib.sha256()
    for name in ("index.jsonl", "split.json", "patches.bin"):
        with open(Path(path) / name, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()[:16]


def _atomic_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class SweepOutcome:
    report_dir: Path
    executed: list[str]
    skipped: list[str]
    failed: list[str]


class _Runner:
    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.store = CheckpointStore(plan.store)
        self.runs_dir = Path(plan.store) / "runs"
        self.digests = {"A": archive_digest(plan.data_a), "B": archive_digest(plan.data_b)}
        self._data = {}
        self.executed, self.skipped, self.failed = [], [], []

    def data(self, which: str):
        if which not in self._data:
            self._data[which] = load_patch_archive(self.plan.data_a if which == "A" else self.plan.data_b)
        return self._data[which]

    def cfg(self, kind: str, seed: int) -> TrainConfig:
        p = self.plan
        d = {"step1": p.step1_config, "step2": p.step2_config, "fusion": p.fusion_config,
             "scratch": p.scratch_config or p.step1_config}[kind]
        return replace(TrainConfig.from_dict(d), seed=seed)

    def key(self, desc: dict) -> str:
        return hashlib.sha256(_canon(desc).encode()).hexdigest()[:20]

    def _cached(self, key: str) -> dict | None:
        path = self.runs_dir / f"{key}.json"
        if not path.is_file():
            return None
        rec = json.loads(path.read_text(encoding="utf-8"))
        if rec.get("status") != "ok" or rec["checkpoint_id"] not in self.store:
            return None
        return rec

    def _run(self, desc: dict, body) -> dict:
        key = self.key(desc)
        rec = self._cached(key)
        if rec is not None:
            self.skipped.append(key)
            log.info("run=%s kind=%s seed=%s cached", key, desc["kind"], desc["seed"])
            return rec
        log.info("run=%s kind=%s seed=%s start", key, desc["kind"], desc["seed"])
        try:
            ckpt_id, metrics = body()
            rec = {"key": key, "status": "ok", "checkpoint_id": ckpt_id, "metrics": metrics, **desc}
            self.executed.append(key)
        except Exception as exc:
            log.error("run %s failed: %s", key, exc)
            log.debug("%s", traceback.format_exc())
            code = exc.code if isinstance(exc, StonefuseError) else "INTERNAL"
            rec = {"key": key, "status": "failed", "error": f"{code}: {exc}", "checkpoint_id": None, "metrics": None, **desc}
            self.failed.append(key)
        _atomic_json(self.runs_dir / f"{key}.json", rec)
        return rec

    def _eval_b(self, ckpt, view):
        _, test_b = self.data("B")
        test = test_b.select_view(view)
        model = load_single(ckpt)
        if list(model.class_names) != list(test.class_names):
            # class sets differ between domains: score on the checkpoint's own domain
            return ckpt.metrics_at_save
        return evaluate_single(model, test).to_dict()

    def single(self, view: str, mode: str, seed: int) -> dict:
        p = self.plan
        cfg_kind = {"scratch": "scratch", "step1": "step1", "two-step": "step2"}[mode]
        desc = {
            "kind": "single", "view": view, "mode": mode, "seed": seed, "architecture_id": p.architecture_id,
            "config": self.cfg(cfg_kind, seed).to_dict(),
            "data": self.digests["B"] if mode == "scratch" else self.digests["A"],
        }
        if mode == "two-step":
            parent = self.single(view, "step1", seed)
            desc["parent_run"] = parent["key"]
            desc["data"] = self.digests["B"]

        def body():
            if mode == "scratch":
                ckpt = train_scratch(view, self.data("B"), self.cfg("scratch", seed), store=self.store,
                                     architecture_id=p.architecture_id)
            elif mode == "step1":
                ckpt = train_step1(view, self.data("A"), self.cfg("step1", seed), store=self.store,
                                   architecture_id=p.architecture_id)
            else:
                if parent["status"] != "ok":
                    raise PlanError(f"step1 run for {view}/seed {seed} failed")
                step1 = self.store.load(parent["checkpoint_id"])
                ckpt = train_step2(view, step1, self.data("B"), self.cfg("step2", seed), store=self.store)
            return ckpt.checkpoint_id, self._eval_b(ckpt, view)

        return self._run(desc, body)

    def fusion(self, spec_d: dict, seed: int) -> dict:
        spec = FusionSpec.from_dict(spec_d)
        sur = self.single("SUR", "two-step", seed)
        sec = self.single("SEC", "two-step", seed)
        desc = {
            "kind": "fusion", "spec": spec.to_dict(), "seed": seed, "config": self.cfg("fusion", seed).to_dict(),
            "sur_run": sur["key"], "sec_run": sec["key"], "data": self.digests["B"],
        }

        def body():
            if sur["status"] != "ok" or sec["status"] != "ok":
                raise PlanError("branch runs failed")
            model = build_multiview(self.store.load(sur["checkpoint_id"]), self.store.load(sec["checkpoint_id"]), spec, seed)
            trainval, test = self.data("B")
            pairs = pair_samples(trainval, trainval, spec.pairing_mode, seed)
            train, val = split_pairs(pairs, trainval.split.val_image_ids if trainval.split else ())
            test_pairs = pair_samples(test, test, spec.pairing_mode, seed)
            ckpt = train_fusion_head(model, train, self.cfg("fusion", seed), paired_val=val, paired_test=test_pairs)
            self.store.save(ckpt)
            return ckpt.checkpoint_id, ckpt.metrics_at_save

        return self._run(desc, body)

    def run_singles(self, seed: int, view: str) -> None:
        for mode in self.plan.modes:
            self.single(view, mode, seed)


def _single_job(plan_d: dict, seed: int, view: str):
    runner = _Runner(ExperimentPlan.from_dict(plan_d))
    runner.run_singles(seed, view)
    return runner.executed, runner.skipped, runner.failed


def _rows(records: list[dict], label_of) -> list[tuple[str, list[dict]]]:
    groups: dict[str, list[dict]] = {}
    for r in records:
        groups.setdefault(label_of(r), []).append(r)
    return list(groups.items())


def _write_tables(report_dir: Path, table_dir: Path, name: str, groups) -> list[dict]:
    rows, out = [], []
    for label, recs in groups:
        ok = [r for r in recs if r["status"] == "ok" and r["metrics"]]
        if not ok:
            out.append({"name": label, "aggregate": None, "runs": [r["key"] for r in recs]})
            continue
        agg = aggregate_runs([MetricsReport.from_dict(r["metrics"]) for r in ok], [r["key"] for r in ok])
        rows.append((label, agg))
        out.append({"name": label, "aggregate": agg.to_dict(), "runs": [r["key"] for r in recs]})
    _atomic_json(report_dir / f"{name}.json", {"rows": out})
    if rows:
        for fmt, ext in TABLE_FORMATS.items():
            emit_table(rows, table_dir / f"{name}.{ext}", fmt)
    return out


def run_sweep(plan: ExperimentPlan, parallel: int = 1) -> SweepOutcome:
    """All single-view runs, then all fusion specs, then aggregated tables.

    Finished runs are recognised by a key over their inputs and skipped.
    """
    plan.validate()
    runner = _Runner(plan)
    if parallel > 1:
        jobs = [(s, v) for s in plan.seeds for v in plan.views]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futs = [pool.submit(_single_job, plan.to_dict(), s, v) for s, v in jobs]
            for f in futs:
                ex, sk, fa = f.result()
                runner.executed += ex
                runner.skipped += sk
                runner.failed += fa
    single_recs = []
    for seed in plan.seeds:
        for view in plan.views:
            single_recs += [runner.single(view, m, seed) for m in plan.modes]
    fusion_recs = []
    for seed in plan.seeds:
        for spec in plan.fusion_specs:
            fusion_recs.append(runner.fusion(spec, seed))
    n_ex = len(set(runner.executed))
    root = Path(plan.store)
    report_dir, table_dir = root / "reports", root / "tables"
    _write_tables(report_dir, table_dir, "table2", _rows(single_recs, lambda r: f"{r['view']} {r['mode']}"))
    if fusion_recs:
        _write_tables(report_dir, table_dir, "table3",
                      _rows(fusion_recs, lambda r: FusionSpec.from_dict(r["spec"]).label))
    status = sorted(
        ({"key": r["key"], "kind": r["kind"], "seed": r["seed"], "status": r["status"], "error": r.get("error")}
         for r in {r["key"]: r for r in single_recs + fusion_recs}.values()),
        key=lambda r: r["key"],
    )
    _atomic_json(report_dir / "sweep_status.json", {"runs": status})
    log.info("sweep done: %d executed, %d failed", n_ex, len(set(runner.failed)))
    skipped = sorted(set(runner.skipped) - set(runner.executed))
    return SweepOutcome(report_dir, sorted(set(runner.executed)), skipped, sorted(set(runner.failed)))


def describe(store_path) -> list[str]:
    """One line per checkpoint plus report files; problems become WARNING lines."""
    root = Path(store_path)
    if not root.is_dir():
        raise PlanError(f"store not found: {root}")
    store = CheckpointStore(root)
    lines = []
    for cid in store.ids():
        try:
            ckpt = load_checkpoint(store.path(cid))
        except LineageError as exc:
            lines.append(f"WARNING corrupt checkpoint {cid}: {exc}")
            continue
        parents = [p for p in (ckpt.parent_digest, ckpt.second_parent_digest) if p]
        link = ",".join(parents) if parents else "-"
        acc = ckpt.metrics_at_save["accuracy"] if ckpt.metrics_at_save else None
        acc_s = f" acc={acc:.4f}" if acc is not None else ""
        lines.append(f"{cid} view={ckpt.view} tl_step={ckpt.tl_step} arch={ckpt.architecture_id} parent={link}{acc_s}")
        for p in parents:
            if p not in store:
                lines.append(f"WARNING {cid}: broken parent link {p}")
        if parents and all(p in store for p in parents):
            try:
                verify_lineage(cid, store)
            except LineageError as exc:
                lines.append(f"WARNING {cid}: {exc}")
    for rep in sorted((root / "reports").glob("*.json")) if (root / "reports").is_dir() else []:
        lines.append(f"report {rep.relative_to(root)}")
    return lines
