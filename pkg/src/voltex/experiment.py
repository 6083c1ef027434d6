"""Experiment harness: corruption grid, model grid, end-to-end runs.

A run materializes everything on disk under one output root so each
stage is independently inspectable and resumable:

    cohort/            clean normalized subjects (the t2norm source)
    datasets/<name>/   one corrupted variant per test condition
    models/<name>.json trained models
    matrix.json        full-precision robustness matrix
    matrix.csv         4-decimal report (emit_report 'csv')
    report.md          markdown report with highlight marks
    summary.json       config echo + per-cell foreground means

Every stage seed derives from the master seed, so reruns are
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .filters import NoiseSpec, corrupt_dataset
from .metrics import RobustnessMatrix, dice_per_class
from .phantom import PhantomSpec, generate_cohort, read_manifest, subjects_in_split
from .segmenter import (
    FeatureRecipe,
    ModelParams,
    TrainConfig,
    extract_features,
    predict_from_features,
    train,
)
from .volume import VoltexError
from . import io as vio
from .report import emit_report

# Training-set combinations, one model per row of the experiment design.
MODEL_COMBINATIONS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("MODEL_T2Norm", ("t2norm",)),
    ("MODEL_GAUS1", ("gaus1",)),
    ("MODEL_GAUS3", ("gaus3",)),
    ("MODEL_GAUS4", ("gaus4",)),
    ("MODEL_GAUS134", ("gaus1", "gaus3", "gaus4")),
    ("MODEL_SNP01", ("snp01",)),
    ("MODEL_SNP05", ("snp05",)),
    ("MODEL_SNP10", ("snp10",)),
    ("MODEL_SNP010510", ("snp01", "snp05", "snp10")),
    ("MODEL_GAUS134_SNP010510", ("gaus1", "gaus3", "gaus4", "snp01", "snp05", "snp10")),
    ("MODEL_MEDIAN5", ("median5",)),
)

# All sixteen test conditions, in report row order.
TEST_CONDITIONS: tuple[str, ...] = (
    "t2norm",
    "gaus1",
    "gaus2",
    "gaus3",
    "gaus4",
    "gaus5",
    "snp01",
    "snp03",
    "snp05",
    "snp07",
    "snp10",
    "snp15",
    "snp20",
    "median2",
    "median5",
    "median8",
)

# Corruption settings reserved purely for testing; never trained on.
UNSEEN_CONDITIONS: tuple[str, ...] = (
    "gaus2",
    "gaus5",
    "snp03",
    "snp07",
    "snp15",
    "snp20",
    "median2",
    "median8",
)

FAILED_MARKER = "FAILED"


class StageError(VoltexError):
    """A pipeline stage failed; partial outputs are kept and marked."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(*parts) -> int:
    """Stable 64-bit sub-seed from a master seed plus string tokens."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ExperimentConfig:
    cohort_count: int = 20
    cohort_dims: tuple[int, int, int] = (64, 64, 64)
    num_classes: int = 10
    cohort_path: str | None = None  # reuse an existing cohort instead of generating
    conditions: tuple[str, ...] = TEST_CONDITIONS
    models: tuple[tuple[str, tuple[str, ...]], ...] = MODEL_COMBINATIONS
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 256
    samples_per_volume: int = 4096
    l2: float = 1e-4
    seed: int = 0
    output: str = "voltex-run"
    jobs: int = 1
    resume: bool = False

    def __post_init__(self):
        self.conditions = tuple(self.conditions)
        self.models = tuple((name, tuple(combo)) for name, combo in self.models)
        self.cohort_dims = tuple(int(d) for d in self.cohort_dims)
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        condition_set = set(self.conditions)
        for name, combo in self.models:
            missing = [d for d in combo if d not in condition_set]
            if missing:
                raise ValueError(
                    f"model {name} trains on {missing} which are not in the "
                    f"condition grid, so they would never be materialized"
                )

    def to_dict(self) -> dict:
        return {
            "cohort_count": self.cohort_count,
            "cohort_dims": list(self.cohort_dims),
            "num_classes": self.num_classes,
            "cohort_path": self.cohort_path,
            "conditions": list(self.conditions),
            "models": {name: list(combo) for name, combo in self.models},
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "samples_per_volume": self.samples_per_volume,
            "l2": self.l2,
            "seed": self.seed,
            "output": self.output,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = dict(d)
        if "models" in kwargs:
            models = kwargs["models"]
            if isinstance(models, dict):
                kwargs["models"] = tuple((k, tuple(v)) for k, v in models.items())
            else:
                kwargs["models"] = tuple((k, tuple(v)) for k, v in models)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(kwargs) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _hash_tree(paths: list[Path]) -> dict[str, str]:
    out = {}
    for p in sorted(paths):
        out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _stage_marker(root: Path, stage: str) -> Path:
    return root / f".stage_{stage}.json"


def _stage_done(root: Path, stage: str) -> bool:
    marker = _stage_marker(root, stage)
    if not marker.exists():
        return False
    try:
        doc = json.loads(marker.read_text())
    except json.JSONDecodeError:
        return False
    for rel, digest in doc.get("files", {}).items():
        p = root / rel
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != digest:
            return False
    return True


def _mark_stage(root: Path, stage: str, files: list[Path]) -> None:
    doc = {"files": {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
                     for p in sorted(files)}}
    _stage_marker(root, stage).write_text(json.dumps(doc, indent=2) + "\n")


def _dataset_files(ds_dir: Path) -> list[Path]:
    return [p for p in ds_dir.iterdir() if p.suffix in (".nii", ".json", ".gz")]


def run_experiment(cfg: ExperimentConfig) -> RobustnessMatrix:
    """Run the full pipeline; deterministic in the master seed.

    Stages: cohort generation, corruption of every condition, model
    training, evaluation of every model on every condition's test split,
    report emission. A failing stage leaves its partial outputs in place
    along with a FAILED marker naming the stage, then raises StageError.
    With ``resume`` set, stages whose recorded content hashes still
    verify are skipped.
    """
    root = Path(cfg.output)
    root.mkdir(parents=True, exist_ok=True)
    failed = root / FAILED_MARKER

    def stage(name, fn):
        if cfg.resume and _stage_done(root, name):
            return
        try:
            outputs = fn()
            _mark_stage(root, name, outputs)
        except Exception as exc:
            failed.write_text(f"{name}: {exc}\n")
            raise StageError(name, exc) from exc

    # stage 1: cohort
    cohort_dir = Path(cfg.cohort_path) if cfg.cohort_path else root / "cohort"

    def do_cohort():
        if cfg.cohort_path:
            read_manifest(cohort_dir)  # validate it exists and is a cohort
            return []
        spec = PhantomSpec(dims=cfg.cohort_dims, num_classes=cfg.num_classes)
        generate_cohort(cfg.cohort_count, spec, derive_seed(cfg.seed, "cohort"), cohort_dir)
        return list(cohort_dir.iterdir())

    stage("cohort", do_cohort)

    # stage 2: corrupt every condition
    datasets_dir = root / "datasets"

    def do_corrupt():
        datasets_dir.mkdir(exist_ok=True)

        def one(name):
            spec = NoiseSpec.from_name(name, seed=derive_seed(cfg.seed, "corrupt", name))
            corrupt_dataset(cohort_dir, spec, datasets_dir / name)

        if cfg.jobs > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                list(pool.map(one, cfg.conditions))
        else:
            for name in cfg.conditions:
                one(name)
        files = []
        for name in cfg.conditions:
            files.extend(_dataset_files(datasets_dir / name))
        return files

    stage("corrupt", do_corrupt)

    # stage 3: train every model (shared sample cache: the sampling seed
    # depends only on (seed, dataset, volume), not on the model)
    models_dir = root / "models"
    train_seed = derive_seed(cfg.seed, "train")

    def do_train():
        models_dir.mkdir(exist_ok=True)
        cache: dict = {}
        outputs = []
        for name, combo in cfg.models:
            tc = TrainConfig(
                datasets=combo,
                learning_rate=cfg.learning_rate,
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                samples_per_volume=cfg.samples_per_volume,
                seed=train_seed,
                l2=cfg.l2,
            )
            model = train(tc, datasets_dir, sample_cache=cache)
            model.metadata["model_name"] = name
            path = models_dir / f"{name}.json"
            model.save(path)
            outputs.append(path)
        return outputs

    stage("train", do_train)

    # stage 4: evaluate every model on every condition's test split
    matrix_path = root / "matrix.json"

    def do_evaluate():
        models = {name: ModelParams.load(models_dir / f"{name}.json")
                  for name, _ in cfg.models}
        recipe_cache: dict[tuple, FeatureRecipe] = {}
        m = len(cfg.models)
        k = len(cfg.conditions)
        c = cfg.num_classes
        model_names = [name for name, _ in cfg.models]
        values = np.empty((m, k, c))
        per_subject = {name: {} for name in model_names}
        for ki, cond in enumerate(cfg.conditions):
            ds_dir = datasets_dir / cond
            num_classes = int(read_manifest(ds_dir)["num_classes"])
            subjects = sorted(subjects_in_split(ds_dir, "test"))
            if not subjects:
                raise VoltexError(f"no test subjects in {ds_dir}")
            rows = {name: [] for name in model_names}
            for sid in subjects:
                vol = vio.load_volume(ds_dir / f"{sid}_vol.nii")
                gt = vio.load_labelmap(ds_dir / f"{sid}_seg.nii", num_classes=num_classes)
                feats_by_recipe = {}
                for name in model_names:
                    model = models[name]
                    key = model.recipe.features
                    if key not in feats_by_recipe:
                        feats_by_recipe[key] = extract_features(vol, model.recipe)
                    pred = predict_from_features(model, feats_by_recipe[key], vol.dims)
                    rows[name].append(dice_per_class(pred, gt).values)
            for mi, name in enumerate(model_names):
                arr = np.vstack(rows[name])
                values[mi, ki] = arr.mean(axis=0)
                per_subject[name][cond] = arr
        matrix = RobustnessMatrix(
            models=tuple(model_names),
            conditions=cfg.conditions,
            num_classes=c,
            values=values,
            per_subject={(mn, cn): arr for mn, sub in per_subject.items()
                         for cn, arr in sub.items()},
        )
        matrix.save(matrix_path)
        return [matrix_path]

    stage("evaluate", do_evaluate)

    # stage 5: reports
    def do_report():
        matrix = RobustnessMatrix.load(matrix_path)
        csv_path = root / "matrix.csv"
        md_path = root / "report.md"
        csv_path.write_text(emit_report(matrix, "csv"))
        md_path.write_text(emit_report(matrix, "md"))
        summary = {
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "foreground_mean": {
                model: {
                    cond: matrix.foreground_mean(model, cond)
                    for cond in matrix.conditions
                }
                for model in matrix.models
            },
        }
        summary_path = root / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2) + "\n")
        return [csv_path, md_path, summary_path]

    stage("report", do_report)

    if failed.exists():
        failed.unlink()
    return RobustnessMatrix.load(matrix_path)
