"""``neuroquant`` command line: one subcommand per pipeline stage.

Every stage reads a JSON run config.  Relative paths resolve against the
config file's directory.  Outputs land under ``paths.output_root``::

    preprocessed/<exam_id>/{t1w,flair}.nii.gz, provenance.json
    quant/manifest.csv, quant/quant.json
    split/manifest.csv, split/demographics.txt
    train/<model>/fold<k>.ckpt, epochs.csv, scores_{validation,test}.csv, summary.json
    evaluate/report.{json,txt}      compare/report.{json,txt}
    occlude/<model>/<exam_id>/...

Exit codes: 0 success, 1 total failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import assign_splits, demographics_table, read_manifest, write_manifest
from .errors import ConfigError, DegenerateGroup, NeuroquantError
from .metrics import ScoreTable, read_scores, write_scores, youden_threshold
from .nifti import load_nifti, save_nifti
from .occlusion import NetworkScorer, case_report, occlusion_map
from .phantom import PhantomSpec, generate_cohort
from .quant import load_calibration_profiles, profile_for, quantify
from .registration import ExtractionConfig, RegistrationConfig, extract_brain, rigid_register
from .report import MetricsReport, compare_models, model_rows
from .volume import BrainMask, fit_volume, percentile_normalize, reorient_to_lpi, resample_isotropic, resample_to_grid
from .volume3d import Volume3D

log = logging.getLogger("neuroquant")

COMMANDS = ("preprocess", "quant", "split", "train", "evaluate", "compare", "occlude", "synth")
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


# -- configuration -----------------------------------------------------------------------------

@dataclass
class PreprocessOptions:
    target_spacing_mm: float = 1.0
    lo_pct: float = 5.0
    hi_pct: float = 95.0
    register: bool = True
    extract_brain: bool = True
    closing_radius_mm: float = 2.0
    grid: tuple = (32, 32, 32)


@dataclass
class CalibrationOptions:
    profiles_path: str | None = None
    profile: str | None = None
    target_mask: str = "masks/target.nii.gz"
    reference_mask: str = "masks/reference.nii.gz"


@dataclass
class SplitOptions:
    fractions: tuple = (0.64, 0.16, 0.20)
    folds: int = 5


@dataclass
class ModelOptions:
    name: str
    channels: int


@dataclass
class NetworkOptions:
    preset: str = "tiny"
    models: list = field(default_factory=lambda: [ModelOptions("t1w", 1), ModelOptions("t1w_flair", 2)])
    overrides: dict = field(default_factory=dict)


@dataclass
class EvaluationOptions:
    n_boot: int = 2000
    level: float = 0.95
    aggregate: str = "mean"
    group_column: str = "cognitive_status"
    scores: list = field(default_factory=list)     # [{"name", "test", "validation"?, "threshold"?}]


@dataclass
class OcclusionOptions:
    model: str | None = None
    exams: object = "extremes"
    kernel: int = 7
    stride: int = 1
    channels: object = "all"


@dataclass
class RunConfig:
    manifest: Path | None
    data_root: Path
    output_root: Path
    preprocess: PreprocessOptions
    calibration: CalibrationOptions
    split: SplitOptions
    network: NetworkOptions
    training: dict
    evaluation: EvaluationOptions
    occlusion: OcclusionOptions
    phantom: dict
    seed: int = 0
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        canon = json.dumps({**self.raw, "seed": self.seed}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "version": __version__}

    @property
    def stamp(self) -> str:
        return f"config_hash={self.config_hash} seed={self.seed} version={__version__}"


TOP_KEYS = {"paths", "preprocess", "calibration", "split", "network", "training", "evaluation", "occlusion",
            "phantom", "seed"}


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base = path.resolve().parent
    paths = raw.get("paths", {})

    def resolve(p):
        return None if p is None else (base / p).resolve()

    if "data_root" not in paths or "output_root" not in paths:
        raise ConfigError("paths.data_root and paths.output_root are required")
    net_raw = dict(raw.get("network", {}))
    if "models" in net_raw:
        try:
            net_raw["models"] = [ModelOptions(**m) for m in net_raw["models"]]
        except TypeError as exc:
            raise ConfigError(f"[network.models]: {exc}") from exc
    pre = _section(PreprocessOptions, raw.get("preprocess"), "preprocess")
    pre.grid = tuple(int(n) for n in pre.grid)
    sp = _section(SplitOptions, raw.get("split"), "split")
    sp.fractions = tuple(float(f) for f in sp.fractions)
    cfg = RunConfig(
        manifest=resolve(paths.get("manifest")),
        data_root=resolve(paths["data_root"]),
        output_root=resolve(paths["output_root"]),
        preprocess=pre,
        calibration=_section(CalibrationOptions, raw.get("calibration"), "calibration"),
        split=sp,
        network=_section(NetworkOptions, net_raw, "network"),
        training=dict(raw.get("training", {})),
        evaluation=_section(EvaluationOptions, raw.get("evaluation"), "evaluation"),
        occlusion=_section(OcclusionOptions, raw.get("occlusion"), "occlusion"),
        phantom=dict(raw.get("phantom", {})),
        seed=int(raw.get("seed", 0) if seed is None else seed),
        raw=raw,
    )
    if cfg.calibration.profiles_path is not None:
        cfg.calibration.profiles_path = str(resolve(cfg.calibration.profiles_path))
    cfg.evaluation.scores = [dict(e) if isinstance(e, dict) else e for e in cfg.evaluation.scores]
    for entry in cfg.evaluation.scores:
        if not isinstance(entry, dict) or "name" not in entry or "test" not in entry:
            raise ConfigError("evaluation.scores entries need 'name' and 'test'")
        for key in ("test", "validation"):
            if entry.get(key) is not None:
                entry[key] = resolve(entry[key])
    for m in cfg.network.models:
        if m.channels not in (1, 2):
            raise ConfigError(f"model {m.name}: channels must be 1 or 2")
    if len({m.name for m in cfg.network.models}) != len(cfg.network.models):
        raise ConfigError("model names must be unique")
    return cfg


def _require(path: Path | None, what: str) -> Path:
    if path is None or not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- preprocess ------------------------------------------------------------------------------------

def preprocess_exam(t1: Volume3D, flair: Volume3D, opts: PreprocessOptions) -> tuple[Volume3D, Volume3D, dict]:
    """reorient -> register FLAIR to T1w -> brain mask -> isotropic resample -> normalize -> fixed grid."""
    t1 = reorient_to_lpi(t1)
    flair = reorient_to_lpi(flair)
    prov: dict = {}
    if opts.register:
        reg = rigid_register(flair, t1, RegistrationConfig())
        flair = resample_to_grid(flair, t1.affine, t1.shape, reg.transform, t1.center_world)
        prov["flair_to_t1w"] = {"params": list(reg.transform.params), "final_mse": reg.final_mse,
                                "converged": reg.converged}
    elif not flair.same_grid(t1):
        flair = resample_to_grid(flair, t1.affine, t1.shape)
    if opts.extract_brain:
        mask = extract_brain(t1, ExtractionConfig(opts.closing_radius_mm))
    else:
        mask = BrainMask(np.ones(t1.shape), t1.affine)
    t1 = resample_isotropic(t1, opts.target_spacing_mm)
    flair = resample_isotropic(flair, opts.target_spacing_mm)
    mask_r = resample_isotropic(mask, opts.target_spacing_mm)
    mask = BrainMask(mask_r.data >= 0.5, mask_r.affine)
    prov["mask_voxels"] = mask.count
    out = []
    for name, vol in (("t1w", t1), ("flair", flair)):
        sel = vol.data[mask.bool_data]
        lo, hi = np.percentile(sel, [opts.lo_pct, opts.hi_pct])
        prov[f"{name}_percentiles"] = [float(lo), float(hi)]
        out.append(fit_volume(percentile_normalize(vol, mask, opts.lo_pct, opts.hi_pct), opts.grid))
    return out[0], out[1], prov


def cmd_preprocess(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    records = read_manifest(_require(cfg.manifest, "manifest"))
    out_root = cfg.output_root / "preprocessed"
    opts_hash = hashlib.sha256(json.dumps(cfg.raw.get("preprocess", {}), sort_keys=True).encode()).hexdigest()[:16]

    def run(rec):
        dest = out_root / rec.exam_id
        try:
            t1p, flp = cfg.data_root / rec.t1w_path, cfg.data_root / rec.flair_path
            if not t1p.is_file() or not flp.is_file():
                raise FileNotFoundError(f"missing input {t1p if not t1p.is_file() else flp}")
            inputs = {"t1w": _sha256(t1p), "flair": _sha256(flp)}
            prov_path = dest / "provenance.json"
            if not force and prov_path.exists() and (dest / "t1w.nii.gz").exists() and (dest / "flair.nii.gz").exists():
                old = json.loads(prov_path.read_text())
                if old.get("inputs") == inputs and old.get("options_hash") == opts_hash:
                    return "skipped", None
            t1, fl, prov = preprocess_exam(load_nifti(t1p), load_nifti(flp), cfg.preprocess)
            desc = f"nq {cfg.config_hash} s{cfg.seed} v{__version__}"
            save_nifti(t1, dest / "t1w.nii.gz", "float64", desc)
            save_nifti(fl, dest / "flair.nii.gz", "float64", desc)
            _write_json(prov_path, {"exam_id": rec.exam_id, "inputs": inputs, "options_hash": opts_hash,
                                    **prov, "provenance": cfg.provenance})
            return "done", None
        except (NeuroquantError, OSError, ValueError) as exc:
            return "failed", f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(run, records))
    counts = {k: sum(r[0] == k for r in results) for k in ("done", "skipped", "failed")}
    for rec, (status, why) in zip(records, results):
        if status == "failed":
            log.warning("preprocess %s skipped: %s", rec.exam_id, why)
    log.info("preprocess: %(done)d processed, %(skipped)d up to date, %(failed)d failed", counts)
    return EXIT_FAILURE if records and counts["failed"] == len(records) else EXIT_OK


# -- quant ------------------------------------------------------------------------------------------

def cmd_quant(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    records = read_manifest(_require(cfg.manifest, "manifest"))
    profiles_path = None if cfg.calibration.profiles_path is None else _require(
        Path(cfg.calibration.profiles_path), "calibration profiles")
    profiles = load_calibration_profiles(profiles_path)
    # resolve every profile before touching any volume
    cals = []
    for r in records:
        if cfg.calibration.profile is not None:
            if cfg.calibration.profile not in profiles:
                raise ConfigError(f"calibration profile {cfg.calibration.profile!r} not defined")
            cals.append(profiles[cfg.calibration.profile])
        else:
            cals.append(profile_for(r.dataset, r.tracer, profiles))
    target = BrainMask(load_nifti(_require(cfg.data_root / cfg.calibration.target_mask, "target mask")).data)
    reference = BrainMask(load_nifti(_require(cfg.data_root / cfg.calibration.reference_mask, "reference mask")).data)
    out, results, failed = [], [], 0
    for r, cal in zip(records, cals):
        try:
            pet = load_nifti(cfg.data_root / r.pet_path)
            res = quantify(pet, BrainMask(target.data, pet.affine), BrainMask(reference.data, pet.affine), cal)
        except (NeuroquantError, OSError) as exc:
            failed += 1
            log.warning("quant %s skipped: %s", r.exam_id, exc)
            continue
        out.append(replace(r, centiloid=res.centiloid, label=res.status.value))
        results.append({"exam_id": r.exam_id, "suvr": res.suvr, "centiloid": res.centiloid,
                        "status": res.status.value, "tracer": res.tracer.value, "cutoff_cl": cal.cutoff_cl})
    write_manifest(out, cfg.output_root / "quant" / "manifest.csv", comment=cfg.stamp)
    _write_json(cfg.output_root / "quant" / "quant.json", {"provenance": cfg.provenance, "exams": results})
    log.info("quant: %d exams quantified, %d failed", len(out), failed)
    return EXIT_FAILURE if records and not out else EXIT_OK


# -- split ------------------------------------------------------------------------------------------

def _labeled_manifest(cfg: RunConfig) -> Path:
    q = cfg.output_root / "quant" / "manifest.csv"
    return q if q.exists() else _require(cfg.manifest, "manifest")


def cmd_split(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    records = read_manifest(_labeled_manifest(cfg))
    unlabeled = [r.exam_id for r in records if r.label is None]
    if unlabeled:
        raise ConfigError(f"{len(unlabeled)} exams lack labels; run quant first")
    out = assign_splits(records, cfg.split.fractions, cfg.split.folds, cfg.seed)
    write_manifest(out, cfg.output_root / "split" / "manifest.csv", comment=cfg.stamp)
    lines = [f"# {cfg.stamp}"]
    for part in ("train", "validation", "test"):
        sub = [r for r in out if r.partition == part]
        lines.append(f"{part}: {len(sub)} exams, {len({r.subject_id for r in sub})} subjects, "
                     f"{np.mean([r.label_int for r in sub]) if sub else float('nan'):.2f} positive")
    try:
        lines += ["", demographics_table(out).to_text()]
    except (DegenerateGroup, ValueError) as exc:
        lines += ["", f"demographics unavailable: {exc}"]
    (cfg.output_root / "split" / "demographics.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------------------------

def _load_inputs(cfg: RunConfig, records, channels: int):
    xs, kept = [], []
    for r in records:
        d = cfg.output_root / "preprocessed" / r.exam_id
        try:
            vols = [load_nifti(d / "t1w.nii.gz"), load_nifti(d / "flair.nii.gz")][:channels]
        except (NeuroquantError, OSError) as exc:
            log.warning("exam %s has no usable preprocessed input: %s", r.exam_id, exc)
            continue
        xs.append(np.stack([v.data for v in vols]))
        kept.append(r)
    return (np.asarray(xs) if xs else np.zeros((0, channels, *cfg.preprocess.grid))), kept


def _training_config(cfg: RunConfig):
    from .network import TrainingConfig
    try:
        return TrainingConfig(**{**cfg.training, "seed": cfg.seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[training]: {exc}") from exc


def _network_config(cfg: RunConfig, channels: int):
    from .network import preset
    try:
        return preset(cfg.network.preset, channels, **{"input_shape": cfg.preprocess.grid, **cfg.network.overrides})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"[network]: {exc}") from exc


def _score_table(records, scores, group_column: str) -> ScoreTable:
    return ScoreTable([r.exam_id for r in records], np.asarray(scores, dtype=float),
                      np.array([r.label_int for r in records]),
                      [str(getattr(r, group_column, "") or "all") for r in records])


def cmd_train(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    from .network import aggregate_fold_scores, train, write_checkpoint, write_epoch_log
    tcfg = _training_config(cfg)
    net_cfgs = {m.name: _network_config(cfg, m.channels) for m in cfg.network.models}
    records = read_manifest(_require(cfg.output_root / "split" / "manifest.csv", "split manifest"))
    parts = {p: [r for r in records if r.partition == p] for p in ("train", "validation", "test")}
    for m in cfg.network.models:
        x_tr, tr = _load_inputs(cfg, parts["train"], m.channels)
        x_va, va = _load_inputs(cfg, parts["validation"], m.channels)
        x_te, te = _load_inputs(cfg, parts["test"], m.channels)
        if not tr:
            log.error("model %s: no training inputs (run preprocess first)", m.name)
            return EXIT_FAILURE
        y_tr = np.array([r.label_int for r in tr])
        y_va = np.array([r.label_int for r in va]) if va else None
        log.info("model %s: training on %d exams, %d validation, %d test", m.name, len(tr), len(va), len(te))
        res = train(x_tr, y_tr, [r.fold for r in tr], net_cfgs[m.name], tcfg,
                    x_va if va else None, y_va, x_te if te else None)
        out = cfg.output_root / "train" / m.name
        out.mkdir(parents=True, exist_ok=True)
        for k, params in enumerate(res.checkpoints):
            write_checkpoint(params, out / f"fold{k}.ckpt")
        write_epoch_log(res.log, out / "epochs.csv")
        summary = {"provenance": cfg.provenance, "model": m.name, "channels": m.channels,
                   "network": net_cfgs[m.name].to_dict(), "training": tcfg.to_dict(),
                   "selected_epochs": res.selected_epochs, "n_train": len(tr), "n_validation": len(va),
                   "n_test": len(te)}
        group = cfg.evaluation.group_column
        if res.val_scores is not None:
            val = aggregate_fold_scores(res.val_scores)
            write_scores(out / "scores_validation.csv", _score_table(va, val, group), cfg.stamp)
            try:
                summary["threshold"], summary["youden_j"] = youden_threshold(val, y_va)
            except NeuroquantError as exc:
                log.warning("no Youden threshold for %s: %s", m.name, exc)
        if res.test_scores is not None:
            write_scores(out / "scores_test.csv", _score_table(te, aggregate_fold_scores(res.test_scores), group),
                         cfg.stamp)
        _write_json(out / "summary.json", summary)
    return EXIT_OK


# -- evaluate / compare ------------------------------------------------------------------------------

def _score_sources(cfg: RunConfig) -> list:
    if cfg.evaluation.scores:
        return [{"name": e["name"], "test": _require(e["test"], "score file"),
                 "validation": e.get("validation"), "threshold": e.get("threshold")}
                for e in cfg.evaluation.scores]
    out = []
    for m in cfg.network.models:
        d = cfg.output_root / "train" / m.name
        val = d / "scores_validation.csv"
        out.append({"name": m.name, "test": _require(d / "scores_test.csv", f"test scores of {m.name}"),
                    "validation": val if val.exists() else None, "threshold": None})
    return out


def _threshold(src: dict, cfg: RunConfig) -> tuple[float, list]:
    if src.get("threshold") is not None:
        return float(src["threshold"]), []
    if src.get("validation"):
        val = read_scores(_require(Path(src["validation"]), "validation score file"))
        try:
            thr, _ = youden_threshold(val.score_a, val.labels)
            return float(thr), []
        except NeuroquantError:
            pass
    return 0.5, ["threshold_default_0.5"]


def _build_report(cfg: RunConfig, compare: bool) -> MetricsReport:
    report = MetricsReport(cfg.provenance)
    ev = cfg.evaluation
    tables, thresholds = {}, {}
    for src in _score_sources(cfg):
        table = read_scores(src["test"])
        thr, flags = _threshold(src, cfg)
        tables[src["name"]], thresholds[src["name"]] = table, thr
        rows = model_rows(src["name"], "test", table.score_a, table.labels, thr, table.groups, ev.n_boot, cfg.seed,
                          ev.level)
        for r in rows:
            r.flags += flags
        report.rows += rows
        if table.score_b is not None:
            name_b = f"{src['name']}:score_b"
            tables[name_b], thresholds[name_b] = ScoreTable(table.exam_ids, table.score_b, table.labels,
                                                            table.groups), thr
            report.rows += model_rows(name_b, "test", table.score_b, table.labels, thr, table.groups, ev.n_boot,
                                      cfg.seed, ev.level)
    if compare:
        names = list(tables)
        if len(names) < 2:
            raise ConfigError("compare needs two models (two score sources or a score_b column)")
        a, b = names[0], names[1]
        ta, tb = tables[a], tables[b]
        if ta.exam_ids != tb.exam_ids or not np.array_equal(ta.labels, tb.labels):
            raise ConfigError(f"models {a} and {b} were scored on different exams")
        groups = np.array(ta.groups)
        subsets = [("all", np.ones(len(groups), dtype=bool))]
        subsets += [(g, groups == g) for g in sorted(set(ta.groups)) if set(ta.groups) != {"all"}]
        for name, sel in subsets:
            report.comparisons.append(compare_models(a, b, "test", name, ta.score_a[sel], tb.score_a[sel],
                                                     ta.labels[sel], thresholds[a], thresholds[b]))
        # echo the paired p-values on model b's rows
        by_group = {c.subgroup: c for c in report.comparisons}
        for r in report.rows:
            if r.model == b and r.subgroup in by_group:
                r.p_delong, r.p_mcnemar = by_group[r.subgroup].p_delong, by_group[r.subgroup].p_mcnemar
    return report


def cmd_evaluate(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    _build_report(cfg, compare=False).write(cfg.output_root / "evaluate")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    _build_report(cfg, compare=True).write(cfg.output_root / "compare")
    return EXIT_OK


# -- occlude ----------------------------------------------------------------------------------------------

def cmd_occlude(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    from .network import MBConvNet, read_checkpoint
    oc = cfg.occlusion
    models = {m.name: m for m in cfg.network.models}
    name = oc.model or cfg.network.models[-1].name
    if name not in models:
        raise ConfigError(f"occlusion.model {name!r} is not a configured model")
    net_cfg = _network_config(cfg, models[name].channels)
    tdir = cfg.output_root / "train" / name
    ckpts = sorted(tdir.glob("fold*.ckpt"))
    if not ckpts:
        raise ConfigError(f"no checkpoints under {tdir}; run train first")
    net = MBConvNet(net_cfg)
    scorer = NetworkScorer(net, [read_checkpoint(p, net_cfg) for p in ckpts])
    records = {r.exam_id: r for r in read_manifest(_require(cfg.output_root / "split" / "manifest.csv",
                                                            "split manifest"))}
    if oc.exams == "extremes":
        scores = read_scores(_require(tdir / "scores_test.csv", "test scores"))
        order = np.argsort(scores.score_a, kind="stable")
        exam_ids = [scores.exam_ids[order[-1]], scores.exam_ids[order[0]]]
    else:
        exam_ids = list(oc.exams)
    done = 0
    for eid in exam_ids:
        if eid not in records:
            log.warning("occlude: unknown exam %s", eid)
            continue
        d = cfg.output_root / "preprocessed" / eid
        vols = [load_nifti(d / "t1w.nii.gz"), load_nifti(d / "flair.nii.gz")][:models[name].channels]
        amap = occlusion_map(vols, scorer, oc.kernel, oc.stride, oc.channels)
        pet = load_nifti(cfg.data_root / records[eid].pet_path)
        pet = resample_to_grid(pet, vols[0].affine, vols[0].shape)
        written = case_report(vols, pet, amap, cfg.output_root / "occlude" / name / eid,
                              names=("t1w", "flair")[:len(vols)])
        _write_json(cfg.output_root / "occlude" / name / eid / "map.json",
                    {"provenance": cfg.provenance, "exam_id": eid, "baseline": amap.baseline, "kernel": amap.kernel,
                     "stride": amap.stride, "degenerate": amap.degenerate,
                     "files": {k: v.name for k, v in written.items()}})
        done += 1
    return EXIT_OK if done else EXIT_FAILURE


# -- synth -------------------------------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, jobs: int = 1, force: bool = False) -> int:
    try:
        spec = PhantomSpec(**{**cfg.phantom, "seed": cfg.seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[phantom]: {exc}") from exc
    cohort = generate_cohort(spec, out_dir=cfg.data_root)
    manifest = cfg.manifest or cfg.data_root / "manifest.csv"
    # unlabeled copy: labels come from the quant stage
    plain = [replace(r, centiloid=None, label=None) for r in cohort.records]
    write_manifest(plain, manifest, comment=cfg.stamp)
    write_manifest(cohort.records, cfg.data_root / "truth.csv", comment=cfg.stamp)
    _write_json(cfg.data_root / "phantom.json", {"provenance": cfg.provenance, "spec": spec.to_dict()})
    return EXIT_OK


HANDLERS = {
    "preprocess": cmd_preprocess, "quant": cmd_quant, "split": cmd_split, "train": cmd_train,
    "evaluate": cmd_evaluate, "compare": cmd_compare, "occlude": cmd_occlude, "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuroquant", description="MRI-based amyloid status pipeline")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker bound for parallel stages")
    p.add_argument("--force", action="store_true", help="redo up-to-date outputs")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        return HANDLERS[args.command](cfg, jobs=args.jobs, force=args.force)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NeuroquantError as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
