"""Resumable experiment pipeline.

Stages, in order::

    gen-data -> train -> finetune -> attack, extract
             -> baseline -> unlearn-finetune -> unlearn-gkt -> audit -> report

Every stage writes its artifacts under the output directory and a record
``stages/<name>.json`` holding the digests of its inputs and outputs, the
config blocks it read, its seed and its metrics. A stage is skipped when that
record matches the current config and inputs and all outputs are still on
disk, so deleting a stage's outputs and re-running rebuilds exactly those.

``manifest.json`` lists the resolved config, per-stage seeds, artifact
paths with SHA-256 digests and metrics. It contains no wall-clock data (so two
runs with one seed give identical bytes); timings go to ``timings.json``.

Splits: the general cohort is split by record (``data.train_fraction`` for
training, the rest is the general test set). The target patient's first
``target.finetune_records`` records (sorted by id) are used for
personalization and forgetting; its remaining records are the
patient-held-out set. The combined test set is general test plus
patient-held-out.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..adversary import DiscrepancyReport, attack, probe_discrepancy
from ..checkpoint import load_checkpoint, save_checkpoint
from ..dataset import SegmentSet, build_segment_set, split_by_record
from ..model import Model, build_model, evaluate
from ..rng import derive_seed, make_rng
from ..signal import SAMPLING_RATE, class_index, class_names, fft_analyze, load_dataset, write_dataset
from ..synth import SynthConfig, synth_generate
from ..training import Hyper, finetune_hyper, finetune_patient, train
from ..unlearning import (
    ForgetSpec,
    audit_losses,
    gkt_unlearn,
    resolve_forget_set,
    retrain_baseline,
    unlearn_finetune,
)
from .config import ExperimentConfig
from .report import CURVE_COLUMNS, ReportMetrics, emit_report, write_csv

log = logging.getLogger(__name__)

SEGMENT_COLUMNS = ("segment_id", "patient_id", "record_id", "label", "cohort", "split")
PROBE_COLUMNS = ("sample_id", "patient_id", "label", "pred_clean", "pred_adv", "linf")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Stage:
    name: str
    deps: tuple
    blocks: tuple       # config blocks the stage reads
    run: str            # Pipeline method name


STAGES = (
    Stage("gen-data", (), ("seed", "task", "data", "target"), "_gen_data"),
    Stage("train", ("gen-data",), ("seed", "model", "train"), "_train"),
    Stage("finetune", ("train",), ("seed", "train", "finetune"), "_finetune"),
    Stage("attack", ("finetune",), ("attack",), "_attack"),
    Stage("extract", ("finetune",), ("attack",), "_extract"),
    Stage("baseline", ("gen-data",), ("seed", "model", "train"), "_baseline"),
    Stage("unlearn-finetune", ("finetune",), ("seed", "unlearn"), "_unlearn_finetune"),
    Stage("unlearn-gkt", ("train",), ("seed", "gkt"), "_unlearn_gkt"),
    Stage("audit", ("finetune", "baseline", "unlearn-finetune"), ("attack", "audit"), "_audit"),
    Stage("report", ("train", "finetune", "attack", "extract", "unlearn-finetune", "unlearn-gkt",
                     "audit"), ("gkt",), "_report"),
)
STAGE_NAMES = tuple(s.name for s in STAGES)
_BY_NAME = {s.name: s for s in STAGES}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _plain(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _json_bytes(obj) -> bytes:
    return (json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def resolved_config(cfg: ExperimentConfig) -> dict:
    """The config as echoed into the manifest (the output directory is implied)."""
    d = cfg.to_dict()
    d.pop("out", None)
    return d


def stage_seed(cfg: ExperimentConfig, stage: str) -> int:
    return derive_seed(cfg.seed, stage)


# segment storage -------------------------------------------------------------------

def save_segments(parts: dict, task: str, out_dir: Path) -> list[Path]:
    """Store {(cohort, split): SegmentSet} as one .npy array plus a CSV index."""
    rows, arrays = [], []
    for (cohort, split), seg in parts.items():
        names = class_names(seg.task)
        for i in range(len(seg)):
            rows.append((seg.ids[i], seg.patient_ids[i], seg.record_ids[i],
                         names[seg.labels[i]], cohort, split))
        arrays.append(seg.x)
    out_dir.mkdir(parents=True, exist_ok=True)
    x_path, index_path = out_dir / "segments.npy", out_dir / "segments.csv"
    np.save(x_path, np.concatenate(arrays), allow_pickle=False)
    write_csv(index_path, SEGMENT_COLUMNS, rows)
    return [x_path, index_path]


def load_segments(data_dir: Path, task: str) -> dict:
    """Inverse of ``save_segments``: {(cohort, split): SegmentSet}."""
    x = np.load(data_dir / "segments.npy", allow_pickle=False)
    with (data_dir / "segments.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(x):
        raise ValueError("segment index and array disagree in length")
    groups: dict = {}
    for i, r in enumerate(rows):
        groups.setdefault((r["cohort"], r["split"]), []).append(i)
    out = {}
    for key, idx in groups.items():
        out[key] = SegmentSet(x[idx], [class_index(rows[i]["label"], task) for i in idx],
                              [rows[i]["segment_id"] for i in idx],
                              [rows[i]["patient_id"] for i in idx],
                              [rows[i]["record_id"] for i in idx], task)
    return out


# pipeline ---------------------------------------------------------------------------

class Pipeline:
    """Runs stages against one output directory; artifacts are loaded lazily."""

    def __init__(self, cfg: ExperimentConfig, out=None):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self._cache: dict = {}
        self.timings: dict = {}

    # paths and cached artifacts ----------------------------------------------------

    def path(self, rel: str) -> Path:
        return self.out / rel

    def _record_path(self, name: str) -> Path:
        return self.path(f"stages/{name}.json")

    def record(self, name: str) -> dict:
        return json.loads(self._record_path(name).read_text())

    def segments(self, cohort: str, split: str) -> SegmentSet:
        if "segments" not in self._cache:
            self._cache["segments"] = load_segments(self.path("data"), self.cfg.task)
        key = (cohort, split)
        if key not in self._cache["segments"]:
            raise ValueError(f"no {cohort}/{split} segments in {self.path('data')}")
        return self._cache["segments"][key]

    @property
    def target_id(self) -> str:
        return self.segments("target", "finetune").patient_ids[0]

    def combined_test(self) -> SegmentSet:
        return self.segments("general", "test").concat(self.segments("target", "heldout"))

    def probe_set(self) -> SegmentSet:
        return self.segments("target", "finetune").concat(self.segments("general", "test"))

    def model(self, name: str) -> Model:
        key = f"model:{name}"
        if key not in self._cache:
            self._cache[key] = load_checkpoint(self.path(f"models/{name}.ckpt"))
        return self._cache[key]

    def _save_model(self, model: Model, name: str) -> Path:
        p = self.path(f"models/{name}.ckpt")
        save_checkpoint(model, p)
        self._cache[f"model:{name}"] = model
        return p

    def train_hyper(self, seed: int) -> Hyper:
        t = self.cfg.train
        return Hyper(lr=t.lr, momentum=t.momentum, epochs=t.epochs, batch_size=t.batch_size,
                     seed=seed, lr_schedule=t.lr_schedule)

    # bookkeeping ---------------------------------------------------------------------

    def _config_digest(self, stage: Stage) -> dict:
        full = resolved_config(self.cfg)
        return {k: full[k] for k in stage.blocks}

    def _input_digests(self, stage: Stage) -> dict:
        out = {}
        for dep in stage.deps:
            out.update(self.record(dep)["outputs"])
        return out

    def is_current(self, name: str) -> bool:
        stage = _BY_NAME[name]
        try:
            rec = self.record(name)
            if any(not self.is_current(d) for d in stage.deps):
                return False
            if rec["config"] != json.loads(_json_bytes(self._config_digest(stage))):
                return False
            if rec["inputs"] != self._input_digests(stage):
                return False
            return all(self.path(rel).is_file() and sha256_file(self.path(rel)) == digest
                       for rel, digest in rec["outputs"].items())
        except (OSError, ValueError, KeyError):
            return False

    def run(self, name: str, force: bool = False) -> dict:
        """Run ``name`` (and any stale dependency); returns the stage record."""
        if name not in _BY_NAME:
            raise ValueError(f"unknown stage {name!r}; expected one of {', '.join(STAGE_NAMES)}")
        stage = _BY_NAME[name]
        for dep in stage.deps:
            if not self.is_current(dep):
                self.run(dep)
        if not force and self.is_current(name):
            log.info("stage %s is up to date", name)
            return self.record(name)
        log.info("stage %s: running", name)
        t0 = time.perf_counter()
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            paths, metrics = getattr(self, stage.run)(stage_seed(self.cfg, name))
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        rec = {
            "stage": name,
            "seed": stage_seed(self.cfg, name),
            "config": self._config_digest(stage),
            "inputs": self._input_digests(stage),
            "outputs": {p.relative_to(self.out).as_posix(): sha256_file(p) for p in paths},
            "metrics": metrics,
        }
        p = self._record_path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(_json_bytes(rec))
        return json.loads(p.read_text())

    def run_all(self, force: bool = False) -> dict:
        for stage in STAGES:
            self.run(stage.name, force=force)
        return self.write_manifest()

    def write_manifest(self) -> dict:
        stages = {}
        for s in STAGES:
            if self._record_path(s.name).is_file():
                rec = self.record(s.name)
                stages[s.name] = {k: rec[k] for k in ("seed", "outputs", "metrics")}
        manifest = {
            "tool": "ecgunlearn",
            "version": __version__,
            "seed": self.cfg.seed,
            "seed_derivation": "splitmix64(master XOR fnv1a64(stage name))",
            "config": resolved_config(self.cfg),
            "splits": {
                "general": f"by record, {self.cfg.data.train_fraction:g} train / rest test",
                "target": (f"first {self.cfg.target.finetune_records} records (sorted by id) for "
                           "personalization and forgetting, the rest held out"),
                "combined_test": "general test + target held-out",
                "probe": "target personalization segments + general test",
            },
            "stages": stages,
            "timings": "timings.json",
        }
        self.path("manifest.json").write_bytes(_json_bytes(manifest))
        # wall-clock data lives apart from the manifest so the manifest stays reproducible
        timings = {}
        tp = self.path("timings.json")
        if tp.is_file():
            timings = json.loads(tp.read_text())
        timings.update({k: round(v, 3) for k, v in self.timings.items()})
        tp.write_bytes(_json_bytes(timings))
        return manifest

    # stages --------------------------------------------------------------------------

    def _gen_data(self, seed: int):
        cfg, d = self.cfg, self.cfg.data
        if d.path is not None:
            records = load_dataset(d.path, n_leads=d.n_leads)
        else:
            records = synth_generate(SynthConfig(
                n_patients=d.n_patients, records_per_patient=d.records_per_patient,
                class_mix=dict(d.class_mix), n_leads=d.n_leads, seed=derive_seed(seed, "general"),
                noise_sigma=d.noise_sigma))
        general, rejected = build_segment_set(records, cfg.task, d.ma_window)
        t = cfg.target
        if t.patient_id is not None:
            if t.patient_id not in general.patient_ids:
                raise ValueError(f"target patient {t.patient_id!r} is not in the dataset")
            target = general.of_patient(t.patient_id)
            general = general.without_patient(t.patient_id)
            target_records = []
        else:
            target_records = synth_generate(SynthConfig(
                n_patients=1, records_per_patient=t.records, class_mix={"NORM": 1.0},
                n_leads=d.n_leads, seed=derive_seed(seed, "target"), noise_sigma=d.noise_sigma,
                variant_fraction=1.0, patient_prefix="T"))
            target, rej = build_segment_set(target_records, cfg.task, d.ma_window)
            rejected += rej
        rec_ids = sorted(set(target.record_ids))
        if len(rec_ids) <= t.finetune_records:
            raise ValueError(f"target patient has {len(rec_ids)} usable records; need more than "
                             f"finetune_records={t.finetune_records}")
        ft_ids = set(rec_ids[:t.finetune_records])
        ft_mask = np.array([r in ft_ids for r in target.record_ids])
        train_set, test_set = split_by_record(general, make_rng(derive_seed(seed, "split")),
                                              d.train_fraction)
        parts = {("general", "train"): train_set, ("general", "test"): test_set,
                 ("target", "finetune"): target.where(ft_mask),
                 ("target", "heldout"): target.where(~ft_mask)}
        self._cache["segments"] = parts
        paths = save_segments(parts, cfg.task, self.path("data"))
        paths.append(write_csv(self.path("data/rejected.csv"), ("record_id", "reason"), rejected))
        if d.export_records:
            root = write_dataset(list(records) + list(target_records), self.path("data/records"))
            paths += [root / "manifest.tsv"] + sorted((root).glob("*.csv"))
        metrics = {f"{c}_{s}_segments": len(v) for (c, s), v in parts.items()}
        metrics.update(target_patient=parts[("target", "finetune")].patient_ids[0],
                       rejected_records=len(rejected))
        return paths, metrics

    def _train(self, seed: int):
        train_set = self.segments("general", "train")
        init = build_model(self.cfg.model_config(), derive_seed(self.cfg.seed, "model-init"))
        model, history = train(init, train_set, self.segments("general", "test"),
                               self.train_hyper(seed))
        paths = [self._save_model(model, "general"),
                 write_csv(self.path("tables/train_curves.csv"), CURVE_COLUMNS, history.epochs)]
        ev = evaluate(model, self.segments("general", "test"))
        first = history.epochs[0] if history.epochs else {}
        last = history.epochs[-1] if history.epochs else {}
        return paths, {"first_epoch_loss": first.get("train_loss"),
                       "final_train_loss": last.get("train_loss"),
                       "final_train_acc": last.get("train_acc"),
                       "general_test_acc": ev.accuracy,
                       "parameters": model.n_parameters()}

    def _finetune(self, seed: int):
        f = self.cfg.finetune
        hyper = finetune_hyper(self.train_hyper(seed), f.lr_factor, epochs=f.epochs,
                               freeze_spec=None if f.freeze is None else tuple(f.freeze),
                               bn_stats=f.bn_stats)
        gen = self.model("general")
        model = finetune_patient(gen, self.segments("target", "finetune"), hyper,
                                 replay=self.segments("general", "train"),
                                 replay_ratio=f.replay_ratio)
        heldout = self.segments("target", "heldout")
        return [self._save_model(model, "personalized")], {
            "patient_heldout_acc_general": evaluate(gen, heldout).accuracy,
            "patient_heldout_acc_personalized": evaluate(model, heldout).accuracy,
            "combined_test_acc_general": evaluate(gen, self.combined_test()).accuracy,
            "combined_test_acc_personalized": evaluate(model, self.combined_test()).accuracy,
        }

    def _attack(self, seed: int):
        """Attack the general model on the probe set; keep one example waveform."""
        model, data, acfg = self.model("general"), self.probe_set(), self.cfg.attack_config()
        res = attack(model, data.x, data.labels, acfg)
        clean = evaluate(model, data).predictions
        names = class_names(self.cfg.task)
        linf = np.abs(res.adversarial - res.original).reshape(len(data), -1).max(axis=1)
        rows = [(data.ids[i], data.patient_ids[i], names[data.labels[i]], names[clean[i]],
                 names[res.predictions[i]], float(linf[i])) for i in range(len(data))]
        example = np.stack([res.original[0], res.adversarial[0]])
        ex_path = self.path("tables/attack_example.npy")
        np.save(ex_path, example, allow_pickle=False)
        paths = [write_csv(self.path("tables/attack.csv"), PROBE_COLUMNS, rows), ex_path]
        return paths, {"clean_acc": float((clean == data.labels).mean()),
                       "adversarial_acc": float((res.predictions == data.labels).mean()),
                       "max_linf": float(linf.max()), "example_id": data.ids[0]}

    def _probe(self, other: str, name: str):
        rep = probe_discrepancy(self.model("general"), self.model(other), self.probe_set(),
                                self.cfg.attack_config())
        path = rep.to_csv(self.path(f"tables/discrepancy_{name}.csv"))
        pid = self.target_id
        return path, {"acc_general": rep.acc_gen, f"acc_{other}": rep.acc_ft,
                      "delta_acc": rep.delta_acc,
                      "target_extraction_rate": rep.extraction_rate(pid),
                      "false_positive_rate": rep.extraction_rate(pid, member=False)}

    def _extract(self, seed: int):
        path, metrics = self._probe("personalized", "pre")
        return [path], metrics

    def _forget_spec(self):
        data = self.segments("general", "train").concat(self.segments("target", "finetune"))
        return data, resolve_forget_set(data, ForgetSpec("by-patient", (self.target_id,)))

    def _baseline(self, seed: int):
        data, spec = self._forget_spec()
        model, history = retrain_baseline(data, spec, self.cfg.model_config(),
                                          self.train_hyper(seed), derive_seed(seed, "init"))
        paths = [self._save_model(model, "baseline"),
                 write_csv(self.path("tables/baseline_curves.csv"), CURVE_COLUMNS, history.epochs)]
        return paths, {"general_test_acc": evaluate(model, self.segments("general", "test")).accuracy}

    def _unlearn_finetune(self, seed: int):
        data, spec = self._forget_spec()
        _, retain = spec.split(data)
        model = unlearn_finetune(self.model("personalized"), retain, self.cfg.unlearn_config(seed))
        return [self._save_model(model, "unlearned")], {
            "patient_heldout_acc": evaluate(model, self.segments("target", "heldout")).accuracy,
            "combined_test_acc": evaluate(model, self.combined_test()).accuracy,
        }

    def _unlearn_gkt(self, seed: int):
        teacher = self.model("general")
        student, history = gkt_unlearn(teacher, self.cfg.unlearn_config(seed),
                                       self.cfg.gkt.forget_classes)
        paths = [self._save_model(student, "gkt_student"),
                 write_csv(self.path("tables/gkt_rounds.csv"),
                           ("round", "kl_generator", "kl_student", "acceptance", "epsilon_f"),
                           history.rounds),
                 write_csv(self.path("tables/gkt_events.csv"), ("round", "event", "from", "to"),
                           history.events)]
        fa, ra = self._class_accuracies(student)
        ft, rt = self._class_accuracies(teacher)
        return paths, {"forget_class_acc": fa, "retain_class_acc": ra,
                       "teacher_forget_class_acc": ft, "teacher_retain_class_acc": rt,
                       "chance": 1.0 / teacher.config.n_classes,
                       "escalations": len(history.events)}

    def _class_accuracies(self, model: Model) -> tuple[float, float]:
        test = self.segments("general", "test")
        forget = {class_index(c, self.cfg.task) for c in self.cfg.gkt.forget_classes}
        pred = evaluate(model, test).predictions
        hit = pred == test.labels
        in_forget = np.array([int(y) in forget for y in test.labels])
        acc = lambda m: float(hit[m].mean()) if m.any() else float("nan")  # noqa: E731
        return acc(in_forget), acc(~in_forget)

    def _audits(self) -> dict:
        splits = {"forget": self.segments("target", "finetune"),
                  "retain": self.segments("general", "train"),
                  "test": self.segments("general", "test")}
        base = {k: evaluate(self.model("baseline"), v).losses for k, v in splits.items()}
        a = self.cfg.audit
        reports = {}
        for name in ("unlearned", "personalized"):
            m = self.model(name)
            losses = {k: (v.ids, evaluate(m, v).losses, base[k]) for k, v in splits.items()}
            reports[name] = audit_losses(losses, (name, "baseline"), a.delta, a.bins)
        return reports

    def _audit(self, seed: int):
        reports = self._audits()
        paths = []
        metrics = {}
        for name, rep in reports.items():
            paths += rep.to_csv(self.path(f"tables/audit_{name}_losses.csv"),
                                self.path(f"tables/audit_{name}_summary.csv"))
            for split, s in rep.splits.items():
                metrics[f"{name}_{split}_ks"] = s.ks
                metrics[f"{name}_{split}_epsilon_hat"] = s.epsilon_hat
                metrics[f"{name}_{split}_mean_loss"] = s.mean_a
            metrics["baseline_forget_mean_loss"] = rep.splits["forget"].mean_b
        path, post = self._probe("unlearned", "post")
        paths.append(path)
        metrics.update({f"post_{k}": v for k, v in post.items()})
        return paths, metrics

    def summary_rows(self) -> list[dict]:
        heldout, test, comb = (self.segments("target", "heldout"), self.segments("general", "test"),
                               self.combined_test())
        rows = []
        for label, name in (("generalized", "general"), ("personalized", "personalized"),
                            ("unlearned-finetune", "unlearned"), ("unlearned-gkt", "gkt_student")):
            m = self.model(name)
            fa, ra = self._class_accuracies(m)
            rows.append({"model": label, "patient_heldout_acc": evaluate(m, heldout).accuracy,
                         "general_test_acc": evaluate(m, test).accuracy,
                         "combined_test_acc": evaluate(m, comb).accuracy,
                         "forget_class_acc": fa, "retain_class_acc": ra})
        return rows

    def _report(self, seed: int):
        with self.path("tables/train_curves.csv").open(newline="") as fh:
            curves = [{k: float(v) if v != "" else float("nan") for k, v in r.items()}
                      for r in csv.DictReader(fh)]
        for c in curves:
            c["epoch"] = int(c["epoch"])
        reports = self._audits()
        pers, unl = reports["personalized"], reports["unlearned"]
        histograms = {
            "forget_personalized_vs_unlearned": {
                "personalized": pers.splits["forget"].losses_a,
                "unlearned": unl.splits["forget"].losses_a},
            "test_general_vs_unlearned": {
                "general": evaluate(self.model("general"), self.segments("general", "test")).losses,
                "unlearned": unl.splits["test"].losses_a},
        }
        ex = np.load(self.path("tables/attack_example.npy"), allow_pickle=False)
        so, sp = fft_analyze(ex[0]), fft_analyze(ex[1])
        waveform = {"t": (np.arange(ex.shape[-1]) / SAMPLING_RATE).tolist(), "original": ex[0, 0].tolist(),
                    "perturbed": ex[1, 0].tolist(), "freqs": so.freqs.tolist(),
                    "mag_original": so.magnitude[0].tolist(), "mag_perturbed": sp.magnitude[0].tolist()}
        with self.path("tables/gkt_rounds.csv").open(newline="") as fh:
            gkt_rounds = [{k: (int(v) if k == "round" else float(v) if v != "" else float("nan"))
                           for k, v in r.items()} for r in csv.DictReader(fh)]
        summary = self.summary_rows()
        metrics = ReportMetrics(curves=curves, summary=summary, audits=reports,
                                histograms=histograms, waveform=waveform, gkt_rounds=gkt_rounds)
        paths = emit_report(metrics, self.path("report"))
        return paths, {"summary": {r["model"]: {k: v for k, v in r.items() if k != "model"}
                                   for r in summary}}


def run_experiment(cfg: ExperimentConfig, out=None, force: bool = False) -> dict:
    """Run every stage (skipping current ones) and return the manifest."""
    return Pipeline(cfg, out).run_all(force=force)


def read_discrepancy(path) -> DiscrepancyReport:
    return DiscrepancyReport.from_csv(path)
