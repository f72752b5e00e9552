"""Pipeline commands over a run directory.

Layout::

    <run>/manifests/     slide index, patch manifests, fold and run plans
    <run>/checkpoints/   networks (.przk), training histories, slide forests
    <run>/predictions/   patch predictions and slide predictions per run
    <run>/reports/       metrics, tables, ROC points, figures
    <run>/provenance/    one record per command, chained by content hashes

Every command checks that its inputs exist and were produced under the same
settings, then writes its outputs plus a provenance record.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import aggregate as AG
from . import metrics as M
from . import netspec as N
from . import slides as S
from . import trainer as TR
from .config import CLASSIFIERS, PipelineConfig
from .errors import MissingArtifactError, StaleArtifactError, UsageError, ValidationError
from .folds import RunPlan, assign_patient_folds, load_run_plans, make_run_plans, save_run_plans
from .seeding import derive_seed

log = logging.getLogger(__name__)

NUM_CLASSES = S.NUM_CLASSES
LEVELS = ("patch", "slide")
AGG_MODES = ("mean_over_runs", "pooled")

# config sections each command's outputs depend on (matched by prefix)
_BASE = ("synth", "run.seed")
_TRAIN_DEPS = {
    "stage1": _BASE + ("run.folds", "network", "train.pretrain", "train.stage1"),
    "stage2": _BASE + ("run.folds", "network", "train.pretrain", "train.stage1", "train.stage2"),
    "baseline1": _BASE + ("run.folds", "network", "train.baseline1"),
    "baseline2": _BASE + ("run.folds", "network", "train.baseline2"),
}
DEPENDS = {
    "synth": _BASE,
    "tile": _BASE,
    "folds": _BASE + ("run.folds",),
    "pretrain": _BASE + ("network", "train.pretrain"),
    **{f"train-{k}": v for k, v in _TRAIN_DEPS.items()},
    **{f"predict-{k}": v for k, v in _TRAIN_DEPS.items()},
    **{f"aggregate-{k}": v + ("forest",) for k, v in _TRAIN_DEPS.items()},
    **{f"evaluate-{k}": v + ("forest",) for k, v in _TRAIN_DEPS.items()},
    "report": ("",),
}

# which command produces each classifier's checkpoints
TRAIN_COMMAND = {c: f"prorez train --stage {c}" for c in CLASSIFIERS}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg.validate()
        self.run = Path(cfg.run_dir)

    # -- paths ---------------------------------------------------------------

    @property
    def manifests(self) -> Path:
        return self.run / "manifests"

    @property
    def checkpoints(self) -> Path:
        return self.run / "checkpoints"

    @property
    def predictions(self) -> Path:
        return self.run / "predictions"

    @property
    def reports(self) -> Path:
        return self.run / "reports"

    @property
    def provenance(self) -> Path:
        return self.run / "provenance"

    def _rel(self, path: Path) -> str:
        try:
            return Path(path).resolve().relative_to(self.run.resolve()).as_posix()
        except ValueError:
            return Path(path).resolve().as_posix()

    # -- provenance ----------------------------------------------------------

    def _digest(self, command: str) -> str:
        return self.cfg.digest(DEPENDS[command])

    def _require(self, command: str, how: str | None = None) -> dict:
        """Load an upstream provenance record; missing or stale records are errors."""
        path = self.provenance / f"{command}.json"
        how = how or f"prorez {command.replace('-', ' --stage ', 1) if '-' in command else command}"
        if not path.exists():
            raise MissingArtifactError(f"{self._rel(path)} not found: run `{how}` first")
        record = json.loads(path.read_text(encoding="utf-8"))
        if record["config_digest"] != self._digest(command):
            raise StaleArtifactError(
                f"outputs of `{command}` were produced under different settings "
                f"({record['config_digest']} != {self._digest(command)}): rerun `{how}`")
        for rel, digest in record["outputs"].items():
            p = self.run / rel
            if not p.exists():
                raise MissingArtifactError(f"{rel} (from `{command}`) is missing: rerun `{how}`")
        return record

    def _record(self, command: str, upstream: Iterable[str], outputs: Iterable[Path], seeds: dict,
                inputs: Iterable[Path] = ()) -> Path:
        up = {}
        for name in upstream:
            p = self.provenance / f"{name}.json"
            up[name] = sha256_file(p)
        record = {
            "command": command,
            "config_digest": self._digest(command),
            "seeds": seeds,
            "upstream": up,
            "inputs": {self._rel(p): sha256_file(p) for p in sorted(inputs)},
            "outputs": {self._rel(p): sha256_file(p) for p in sorted(set(outputs))},
        }
        path = self.provenance / f"{command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    # -- data ----------------------------------------------------------------

    def synth(self) -> Path:
        s = self.cfg.synth
        seed = self.cfg.stage_seed("synth")
        slides = S.synth_cohort(s.patients_per_class, s.slides_per_patient, s.side, seed, s.tile)
        root = self.cfg.data_root
        index = S.save_slides(slides, root / "slides", self.manifests / "slides.jsonl")
        proxy = S.proxy_cohort(s.proxy_slides_per_class, s.proxy_side, self.cfg.stage_seed("proxy"))
        pindex = S.save_slides(proxy, root / "proxy_slides", self.manifests / "proxy_slides.jsonl")
        outs = [self.manifests / "slides.jsonl", self.manifests / "proxy_slides.jsonl"]
        log.info("synth: %d slides, %d proxy slides", len(index), len(pindex))
        return self._record("synth", [], outs, {"synth": seed, "proxy": self.cfg.stage_seed("proxy")})

    def tile(self) -> Path:
        self._require("synth")
        s, n = self.cfg.synth, self.cfg.network
        root = self.cfg.data_root
        slides = S.load_slides(self.manifests / "slides.jsonl")
        S.build_manifest(slides, s.tile, s.levels, root / "tiles", self.manifests / "patches.jsonl",
                         threads=self.cfg.threads)
        proxy = S.load_slides(self.manifests / "proxy_slides.jsonl")
        S.build_manifest(proxy, s.tile, sorted({n.low_level}), root / "proxy_tiles",
                         self.manifests / "proxy_patches.jsonl", threads=self.cfg.threads)
        return self._record("tile", ["synth"], [self.manifests / "patches.jsonl",
                                                self.manifests / "proxy_patches.jsonl"], {})

    def folds(self) -> Path:
        self._require("tile")
        records = S.read_manifest(self.manifests / "patches.jsonl")
        patients = sorted({r.patient_id for r in records})
        seed = self.cfg.stage_seed("folds")
        plan = assign_patient_folds(patients, self.cfg.folds, seed)
        (self.manifests / "folds.json").write_text(plan.to_json() + "\n", encoding="utf-8")
        save_run_plans(make_run_plans(plan), self.manifests / "runs.json")
        return self._record("folds", ["tile"], [self.manifests / "folds.json", self.manifests / "runs.json"],
                            {"folds": seed})

    def _dataset(self, name="patches") -> TR.PatchDataset:
        return TR.PatchDataset.from_manifest(self.manifests / f"{name}.jsonl")

    def _runs(self) -> list[RunPlan]:
        return load_run_plans(self.manifests / "runs.json")

    # -- training ------------------------------------------------------------

    def pretrain(self) -> Path:
        self._require("tile")
        cfg = self.cfg.train_config("pretrain")
        ck = TR.pretrain_backbone(self.cfg.backbone(), self._dataset("proxy_patches"), cfg)
        out = N.save_checkpoint(ck, self.checkpoints / "pretrain.przk")
        hist = self._save_history("pretrain", {"all": ck.history})
        return self._record("pretrain", ["tile"], [out, hist], {"pretrain": cfg.seed})

    def _save_history(self, stage: str, histories: dict) -> Path:
        # wall-clock timings stay in the log so reruns are byte-identical
        clean = {k: [{kk: vv for kk, vv in e.items() if kk != "seconds"} for e in h]
                 for k, h in histories.items()}
        path = self.checkpoints / stage / "history.json" if stage != "pretrain" \
            else self.checkpoints / "pretrain.history.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(clean, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def ckpt_path(self, stage: str, run_id: str) -> Path:
        return self.checkpoints / stage / f"{run_id}.przk"

    def train(self, stage: str) -> Path:
        if stage not in CLASSIFIERS:
            raise UsageError(f"unknown stage {stage!r}; expected one of {CLASSIFIERS}")
        self._require("folds")
        data, runs = self._dataset(), self._runs()
        cfg = self.cfg.train_config(stage)
        net = self.cfg.network
        outs, histories, upstream = [], {}, ["folds"]
        by_fold: dict[int, list[RunPlan]] = {}
        for r in runs:
            by_fold.setdefault(r.fold, []).append(r)
        if stage == "stage1":
            self._require("pretrain")
            upstream.append("pretrain")
            pre = N.load_checkpoint(self.checkpoints / "pretrain.przk")
            for fold, group in sorted(by_fold.items()):
                # both swaps share the training set, so one trajectory serves both
                cks = TR.train_stage1(pre, data, group, cfg, NUM_CLASSES)
                histories[f"f{fold}"] = cks[0].history
                outs += [N.save_checkpoint(ck, self.ckpt_path(stage, r.run_id)) for ck, r in zip(cks, group)]
        elif stage == "stage2":
            self._require("train-stage1", TRAIN_COMMAND["stage1"])
            upstream.append("train-stage1")
            for r in runs:
                s1 = N.load_checkpoint(self.ckpt_path("stage1", r.run_id))
                ck = TR.train_stage2(s1, data, net.new_blocks, r, cfg)
                histories[r.run_id] = ck.history
                outs.append(N.save_checkpoint(ck, self.ckpt_path(stage, r.run_id)))
        else:
            kind = "plain_highres" if stage == "baseline1" else "stage2_random"
            for fold, group in sorted(by_fold.items()):
                cks = TR.train_baseline(kind, data, group, cfg, self.cfg.backbone(), net.new_blocks, NUM_CLASSES)
                histories[f"f{fold}"] = cks[0].history
                outs += [N.save_checkpoint(ck, self.ckpt_path(stage, r.run_id)) for ck, r in zip(cks, group)]
        outs.append(self._save_history(stage, histories))
        return self._record(f"train-{stage}", upstream, outs, {stage: cfg.seed})

    # -- inference and aggregation -------------------------------------------

    def available(self, step: str) -> list[str]:
        return [c for c in CLASSIFIERS if (self.provenance / f"{step}-{c}.json").exists()]

    def _stages(self, stage: str | None, step: str, prev: str) -> list[str]:
        if stage not in (None, "all"):
            if stage not in CLASSIFIERS:
                raise UsageError(f"unknown stage {stage!r}; expected one of {CLASSIFIERS}")
            return [stage]
        found = self.available(prev)
        if not found:
            raise MissingArtifactError(f"no classifier has `{prev}` outputs yet: run `prorez {prev} "
                                       f"--stage <stage>` before `prorez {step}`")
        return found

    def pred_path(self, stage: str, run_id: str, level: str = "patch") -> Path:
        suffix = "jsonl" if level == "patch" else "slides.jsonl"
        return self.predictions / stage / f"{run_id}.{suffix}"

    def predict(self, stage: str | None = None) -> list[Path]:
        done = []
        for st in self._stages(stage, "predict", "train"):
            self._require(f"train-{st}", TRAIN_COMMAND[st])
            data = self._dataset()
            outs = []
            for r in self._runs():
                ck = N.load_checkpoint(self.ckpt_path(st, r.run_id))
                level = self.cfg.network.low_level if st == "stage1" else self.cfg.network.high_level
                preds = TR.predict_patches(ck, data, level=level)
                outs.append(TR.write_predictions(preds, self.pred_path(st, r.run_id)))
            done.append(self._record(f"predict-{st}", [f"train-{st}"], outs, {}))
        return done

    def aggregate(self, stage: str | None = None) -> list[Path]:
        done = []
        for st in self._stages(stage, "aggregate", "predict"):
            self._require(f"predict-{st}", f"prorez predict --stage {st}")
            records = S.read_manifest(self.manifests / "patches.jsonl")
            slide_label = {r.slide_id: r.class_label for r in records}
            slide_patient = {r.slide_id: r.patient_id for r in records}
            outs = []
            for r in self._runs():
                preds = TR.read_predictions(self.pred_path(st, r.run_id))
                fm = AG.slide_histogram_features(preds, NUM_CLASSES, slide_label)
                fit_ids = [s for s in fm.slide_ids if r.role_of(slide_patient[s]) in ("train", "val")]
                test_ids = [s for s in fm.slide_ids if r.role_of(slide_patient[s]) == "test"]
                train = fm.subset(fit_ids)
                seed = derive_seed(self.cfg.seed, "forest", st, r.run_id)
                forest = AG.fit_slide_forest(train.features, train.labels, self.cfg.forest.n_trees,
                                             self.cfg.forest.max_features, seed, NUM_CLASSES,
                                             threads=self.cfg.threads)
                fpath = self.checkpoints / st / f"{r.run_id}.forest.json"
                fpath.parent.mkdir(parents=True, exist_ok=True)
                fpath.write_text(forest.to_json() + "\n", encoding="utf-8")
                test = fm.subset(test_ids)
                labels, fractions = AG.rf_predict(forest, test.features)
                lines = [json.dumps({"slide_id": s, "label": int(l),
                                     "vote_fractions": [float(v) for v in f]})
                         for s, l, f in zip(test_ids, labels, fractions)]
                spath = self.pred_path(st, r.run_id, "slide")
                spath.write_text("".join(x + "\n" for x in lines), encoding="utf-8")
                outs += [fpath, spath]
            done.append(self._record(f"aggregate-{st}", [f"predict-{st}"], outs,
                                     {"forest_master": self.cfg.seed}))
        return done

    # -- evaluation ----------------------------------------------------------

    def scored_items(self, stage: str, level: str) -> list[tuple[str, M.ScoredItems]]:
        """Test-set items of every run as ``(run_id, ScoredItems)``."""
        records = S.read_manifest(self.manifests / "patches.jsonl")
        slide_label = {r.slide_id: r.class_label for r in records}
        slide_patient = {r.slide_id: r.patient_id for r in records}
        out = []
        for r in self._runs():
            if level == "patch":
                preds = [p for p in TR.read_predictions(self.pred_path(stage, r.run_id))
                         if r.role_of(slide_patient[p.slide_id]) == "test"]
                ids = [f"{p.slide_id}@{p.x},{p.y}" for p in preds]
                y_true = np.array([slide_label[p.slide_id] for p in preds], dtype=np.int64)
                y_pred = np.array([p.label for p in preds], dtype=np.int64)
                probs = np.array([p.probs for p in preds], dtype=np.float64).reshape(len(preds), NUM_CLASSES)
            else:
                rows = [json.loads(x) for x in
                        self.pred_path(stage, r.run_id, "slide").read_text(encoding="utf-8").splitlines() if x]
                ids = [d["slide_id"] for d in rows]
                y_true = np.array([slide_label[s] for s in ids], dtype=np.int64)
                y_pred = np.array([d["label"] for d in rows], dtype=np.int64)
                probs = np.array([d["vote_fractions"] for d in rows], dtype=np.float64).reshape(len(rows), NUM_CLASSES)
            out.append((r.run_id, M.ScoredItems(ids, y_true, y_pred, probs)))
        return out

    def evaluate(self, stage: str | None = None) -> list[Path]:
        done = []
        for st in self._stages(stage, "evaluate", "aggregate"):
            self._require(f"aggregate-{st}", f"prorez aggregate --stage {st}")
            result = {"classifier": st}
            outs = []
            for level in LEVELS:
                items = self.scored_items(st, level)
                entry = {"runs": {rid: json.loads(it.report(NUM_CLASSES).to_json()) for rid, it in items}}
                for mode in AGG_MODES:
                    rep = M.aggregate_runs([it for _, it in items], mode, NUM_CLASSES)
                    entry[mode] = json.loads(rep.to_json())
                    cpath = self.reports / st / f"confusion_{level}_{mode}.csv"
                    cpath.parent.mkdir(parents=True, exist_ok=True)
                    cpath.write_text(M.confusion_to_csv(rep.confusion), encoding="utf-8")
                    outs.append(cpath)
                result[level] = entry
            mpath = self.reports / st / "metrics.json"
            mpath.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            outs.append(mpath)
            done.append(self._record(f"evaluate-{st}", [f"aggregate-{st}"], outs, {}))
        return done

    def load_metrics(self, stage: str) -> dict | None:
        path = self.reports / stage / "metrics.json"
        if not (self.provenance / f"evaluate-{stage}.json").exists() or not path.exists():
            return None
        self._require(f"evaluate-{stage}", f"prorez evaluate --stage {stage}")
        return json.loads(path.read_text(encoding="utf-8"))

    def report(self) -> list[Path]:
        from .report import write_report

        present = self.available("evaluate")
        if not present:
            raise MissingArtifactError("no evaluated classifier: run `prorez evaluate` first")
        outs = write_report(self, present)
        self._record("report", [f"evaluate-{c}" for c in present], outs, {})
        return outs

    # -- everything ----------------------------------------------------------

    def run_all(self) -> list[Path]:
        self.synth()
        self.tile()
        self.folds()
        self.pretrain()
        for stage in ("stage1", "stage2", "baseline1", "baseline2"):
            self.train(stage)
        for stage in ("stage1", "stage2", "baseline1", "baseline2"):
            self.predict(stage)
            self.aggregate(stage)
            self.evaluate(stage)
        return self.report()
