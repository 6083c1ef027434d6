"""Per-class Dice similarity and aggregation into robustness matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as vio
from .phantom import read_manifest, subjects_in_split
from .segmenter import ModelParams, extract_features, predict_from_features
from .volume import LabelMap, VoltexError

FLAG_NORMAL = "normal"
FLAG_BOTH_EMPTY = "both-empty"
FLAG_ONE_EMPTY = "one-empty"


@dataclass(frozen=True, eq=False)
class DiceVector:
    """Per-class Dice values in [0, 1] with emptiness flags."""

    values: np.ndarray
    flags: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(self.flags) != v.shape[0]:
            raise ValueError("values and flags must have equal length")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "flags", tuple(self.flags))


def dice_per_class(pred: LabelMap, gt: LabelMap) -> DiceVector:
    """DSC_c = 2|pred=c ∧ gt=c| / (|pred=c| + |gt=c|) for every class.

    Both maps empty for a class scores 1.0 (flagged both-empty); exactly
    one empty scores 0.0 (flagged one-empty).
    """
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    if pred.num_classes != gt.num_classes:
        raise ValueError(
            f"class-count mismatch: {pred.num_classes} vs {gt.num_classes}"
        )
    c = pred.num_classes
    p = pred.ravel()
    g = gt.ravel()
    count_p = np.bincount(p, minlength=c)[:c]
    count_g = np.bincount(g, minlength=c)[:c]
    agree = p == g
    inter = np.bincount(p[agree], minlength=c)[:c]
    values = np.empty(c, dtype=np.float64)
    flags = []
    for k in range(c):
        if count_p[k] == 0 and count_g[k] == 0:
            values[k] = 1.0
            flags.append(FLAG_BOTH_EMPTY)
        elif count_p[k] == 0 or count_g[k] == 0:
            values[k] = 0.0
            flags.append(FLAG_ONE_EMPTY)
        else:
            values[k] = 2.0 * inter[k] / (count_p[k] + count_g[k])
            flags.append(FLAG_NORMAL)
    return DiceVector(values, tuple(flags))


@dataclass
class RobustnessMatrix:
    """models x test-conditions x classes Dice tensor.

    ``values`` holds the per-cell mean over test subjects;
    ``per_subject`` holds the underlying per-subject vectors.
    """

    models: tuple[str, ...]
    conditions: tuple[str, ...]
    num_classes: int
    values: np.ndarray  # (M, K, C)
    per_subject: dict = field(default_factory=dict)  # (model, condition) -> (S, C) array
    skipped: set = field(default_factory=set)  # (model, condition) pairs

    def __post_init__(self):
        self.models = tuple(self.models)
        self.conditions = tuple(self.conditions)
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (len(self.models), len(self.conditions), self.num_classes)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")

    def cell(self, model: str, condition: str) -> np.ndarray:
        return self.values[self.models.index(model), self.conditions.index(condition)]

    def foreground_mean(self, model: str, condition: str) -> float:
        """Mean Dice over the non-background classes (1..C-1)."""
        return float(self.cell(model, condition)[1:].mean())

    @property
    def complete(self) -> bool:
        return not self.skipped and np.isfinite(self.values).all()

    def to_json(self) -> str:
        doc = {
            "models": list(self.models),
            "conditions": list(self.conditions),
            "num_classes": self.num_classes,
            "values": self.values.tolist(),
            "per_subject": {
                f"{m}|{c}": arr.tolist() for (m, c), arr in sorted(self.per_subject.items())
            },
            "skipped": sorted(list(p) for p in self.skipped),
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RobustnessMatrix":
        doc = json.loads(text)
        per_subject = {}
        for key, arr in doc.get("per_subject", {}).items():
            m, c = key.split("|", 1)
            per_subject[(m, c)] = np.array(arr, dtype=np.float64)
        return cls(
            models=tuple(doc["models"]),
            conditions=tuple(doc["conditions"]),
            num_classes=int(doc["num_classes"]),
            values=np.array(doc["values"], dtype=np.float64),
            per_subject=per_subject,
            skipped={tuple(p) for p in doc.get("skipped", [])},
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RobustnessMatrix":
        return cls.from_json(Path(path).read_text())


def evaluate_on_condition(
    model: ModelParams, condition_dir
) -> tuple[list[str], np.ndarray, list[tuple[str, ...]]]:
    """Dice of one model against one condition's test split.

    Returns (subject ids, per-subject (S, C) Dice array, per-subject flags).
    """
    condition_dir = Path(condition_dir)
    manifest = read_manifest(condition_dir)
    num_classes = int(manifest["num_classes"])
    if num_classes != model.num_classes:
        raise VoltexError(
            f"model has {model.num_classes} classes but {condition_dir} has {num_classes}"
        )
    subjects = sorted(subjects_in_split(condition_dir, "test"))
    if not subjects:
        raise VoltexError(f"no test subjects in {condition_dir}")
    rows = []
    flags = []
    for sid in subjects:
        gt_path = condition_dir / f"{sid}_seg.nii"
        if not gt_path.exists():
            raise VoltexError(f"missing ground truth {gt_path}")
        vol = vio.load_volume(condition_dir / f"{sid}_vol.nii")
        gt = vio.load_labelmap(gt_path, num_classes=num_classes)
        feats = extract_features(vol, model.recipe)
        pred = predict_from_features(model, feats, vol.dims)
        dv = dice_per_class(pred, gt)
        rows.append(dv.values)
        flags.append(dv.flags)
    return subjects, np.vstack(rows), flags


def evaluate_model(model: ModelParams, condition_dirs) -> RobustnessMatrix:
    """Evaluate one model across many condition directories.

    Produces a single-model RobustnessMatrix whose cells are per-class
    means over the test subjects of each condition.
    """
    condition_dirs = [Path(d) for d in condition_dirs]
    names = [d.name for d in condition_dirs]
    values = np.empty((1, len(names), model.num_classes))
    per_subject = {}
    model_name = "model"
    for k, d in enumerate(condition_dirs):
        _, rows, _ = evaluate_on_condition(model, d)
        values[0, k] = rows.mean(axis=0)
        per_subject[(model_name, names[k])] = rows
    return RobustnessMatrix(
        models=(model_name,),
        conditions=tuple(names),
        num_classes=model.num_classes,
        values=values,
        per_subject=per_subject,
    )
