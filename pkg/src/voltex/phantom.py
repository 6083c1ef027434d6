"""Synthetic multi-class labeled phantoms.

Subjects are nested ellipsoidal shells around a jittered center, plus a
few small off-center ellipsoids standing in for small structures, so the
class volumes are strongly unequal. Intensities come from a per-class
table with seeded per-class jitter and per-voxel acquisition noise; the
volume is then normalized to zero mean / unit variance. Everything is a
pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as vio
from .volume import LabelMap, Volume3D, VoltexError, normalize_zmuv

MIN_CLASS_VOXELS = 32
MAX_GENERATION_RETRIES = 8

# hand-picked so several class pairs sit only 0.3 apart pre-normalization,
# while spatially adjacent shells stay well separated
DEFAULT_INTENSITIES_10 = (0.0, 2.1, 1.2, 2.8, 0.8, 1.8, 2.5, 1.5, 3.1, 0.5)


def default_intensity_table(num_classes: int) -> tuple[float, ...]:
    if num_classes == 10:
        return DEFAULT_INTENSITIES_10
    levels = np.linspace(0.5, 3.1, num_classes - 1)
    order = np.random.default_rng(0).permutation(num_classes - 1)
    return (0.0,) + tuple(float(levels[i]) for i in order)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    num_classes: int = 10
    subject_scale: float = 1.0
    intensity_table: tuple[float, ...] = field(default=None)
    intensity_jitter_sd: float = 0.05
    acquisition_noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not (0.75 <= self.subject_scale <= 1.25):
            raise ValueError("subject_scale must lie in [0.75, 1.25]")
        if self.intensity_jitter_sd < 0 or self.acquisition_noise_sd < 0:
            raise ValueError("noise standard deviations must be >= 0")
        table = self.intensity_table or default_intensity_table(self.num_classes)
        if len(table) != self.num_classes:
            raise ValueError("intensity_table length must equal num_classes")
        object.__setattr__(self, "intensity_table", tuple(float(v) for v in table))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        min_dim = min(self.dims)
        if min_dim < max(12, round(1.6 * self.num_classes)):
            raise ValueError(
                f"dims {self.dims} too small to fit {self.num_classes} classes "
                f"(need >= {max(12, round(1.6 * self.num_classes))} per axis)"
            )


def _num_small_classes(num_classes: int) -> int:
    if num_classes >= 8:
        return 3
    if num_classes >= 5:
        return 1
    return 0


def _build_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    nx, ny, nz = spec.dims
    c = spec.num_classes
    n_small = _num_small_classes(c)
    n_shells = (c - 1) - n_small

    center = np.array([nx, ny, nz], dtype=np.float64) / 2.0 + rng.uniform(-2.0, 2.0, 3)
    anis = rng.uniform(0.85, 1.15, 3)
    radius = 0.45 * min(spec.dims) * spec.subject_scale
    semi = radius * anis

    xs = np.arange(nx, dtype=np.float64).reshape(nx, 1, 1)
    ys = np.arange(ny, dtype=np.float64).reshape(1, ny, 1)
    zs = np.arange(nz, dtype=np.float64).reshape(1, 1, nz)
    rho = np.sqrt(
        ((xs - center[0]) / semi[0]) ** 2
        + ((ys - center[1]) / semi[1]) ** 2
        + ((zs - center[2]) / semi[2]) ** 2
    )

    labels = np.zeros(spec.dims, dtype=np.int32, order="F")
    bounds = np.linspace(1.0, 0.0, n_shells + 1)
    for k in range(1, n_shells + 1):
        shell = (rho < bounds[k - 1]) & (rho >= bounds[k])
        labels[shell] = k

    for j in range(n_small):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        frac = rng.uniform(0.40, 0.60)
        pos = center + direction * frac * semi
        r_small = rng.uniform(2.6, 3.4) * np.sqrt(spec.subject_scale)
        dist = np.sqrt(
            (xs - pos[0]) ** 2 + (ys - pos[1]) ** 2 + (zs - pos[2]) ** 2
        )
        labels[(dist < r_small) & (rho < 1.0)] = n_shells + 1 + j
    return labels


def _generate_once(spec: PhantomSpec) -> tuple[Volume3D, LabelMap]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & (2**64 - 1), 0x9A11]))
    labels = _build_labels(spec, rng)
    table = np.array(spec.intensity_table, dtype=np.float64)
    jitter = rng.normal(0.0, 1.0, spec.num_classes) * spec.intensity_jitter_sd
    intensity = (table + jitter)[labels]
    noise = rng.normal(0.0, 1.0, spec.dims) * spec.acquisition_noise_sd
    vol = Volume3D(intensity + noise)
    return normalize_zmuv(vol), LabelMap(labels, spec.num_classes)


def _class_counts_ok(lm: LabelMap, num_classes: int) -> bool:
    counts = np.bincount(lm.ravel(), minlength=num_classes)
    return bool((counts[:num_classes] >= MIN_CLASS_VOXELS).all())


def _generate_valid(spec: PhantomSpec) -> tuple[Volume3D, LabelMap, int]:
    """Generate, retrying with seed+1 while any class is starved."""
    for attempt in range(MAX_GENERATION_RETRIES):
        trial = PhantomSpec(
            dims=spec.dims,
            num_classes=spec.num_classes,
            subject_scale=spec.subject_scale,
            intensity_table=spec.intensity_table,
            intensity_jitter_sd=spec.intensity_jitter_sd,
            acquisition_noise_sd=spec.acquisition_noise_sd,
            seed=spec.seed + attempt,
        )
        vol, lm = _generate_once(trial)
        if _class_counts_ok(lm, spec.num_classes):
            return vol, lm, attempt + 1
    raise VoltexError(
        f"could not populate all {spec.num_classes} classes with >= "
        f"{MIN_CLASS_VOXELS} voxels after {MAX_GENERATION_RETRIES} attempts "
        f"(dims {spec.dims})"
    )


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, LabelMap]:
    """Deterministic labeled phantom for the given spec."""
    vol, lm, _ = _generate_valid(spec)
    return vol, lm


def split_counts(n: int) -> tuple[int, int, int]:
    """70/15/15 split with floor rounding and a minimum of 1 each."""
    if n < 3:
        raise ValueError("cohort needs at least 3 subjects")
    train = int(n * 0.70)
    val = max(1, int(n * 0.15))
    test = n - train - val
    if test < 1:
        train -= 1 - test
        test = 1
    if train < 1:
        raise ValueError(f"cannot split {n} subjects into three non-empty sets")
    return train, val, test


def generate_cohort(n: int, spec_base: PhantomSpec, seed: int, out_dir) -> Path:
    """Write an n-subject cohort with a deterministic train/val/test split.

    Subject i uses seed ``seed + i`` and a subject scale drawn uniformly
    from [0.75, 1.25]. Returns the cohort directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = split_counts(n)
    subjects = []
    for i in range(n):
        scale_rng = np.random.default_rng(np.random.SeedSequence([seed + i, 0x5CA1E]))
        scale = float(scale_rng.uniform(0.75, 1.25))
        spec = PhantomSpec(
            dims=spec_base.dims,
            num_classes=spec_base.num_classes,
            subject_scale=scale,
            intensity_table=spec_base.intensity_table,
            intensity_jitter_sd=spec_base.intensity_jitter_sd,
            acquisition_noise_sd=spec_base.acquisition_noise_sd,
            seed=seed + i,
        )
        vol, lm, attempts = _generate_valid(spec)
        sid = f"sub-{i:03d}"
        vio.save_volume(vol, out_dir / f"{sid}_vol.nii")
        vio.save_labelmap(lm, out_dir / f"{sid}_seg.nii")
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        subjects.append(
            {"id": sid, "seed": seed + i, "scale": scale, "split": split, "attempts": attempts}
        )
    manifest = {
        "kind": "cohort",
        "seed": seed,
        "count": n,
        "dims": list(spec_base.dims),
        "num_classes": spec_base.num_classes,
        "split_counts": {"train": n_train, "val": n_val, "test": n_test},
        "subjects": subjects,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise VoltexError(f"no manifest.json in {dataset_dir}; not a cohort/dataset directory")
    return json.loads(path.read_text())


def subjects_in_split(dataset_dir, split: str) -> list[str]:
    manifest = read_manifest(dataset_dir)
    return [s["id"] for s in manifest["subjects"] if s["split"] == split]
