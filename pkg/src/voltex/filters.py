"""Textural corruption filters: Gaussian blur, median smoothing, and
salt-and-pepper speckle, plus batch dataset corruption."""

from __future__ import annotations

import json
import math
import re
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .volume import Volume3D, VoltexError
from . import io as vio

KERNEL_TRUNCATE = 4.0  # kernel radius = ceil(4 * sigma)

U64_MASK = (1 << 64) - 1

# canonical dataset names
IDENTITY_NAME = "t2norm"


@dataclass(frozen=True)
class NoiseSpec:
    """Tagged corruption descriptor; also names datasets canonically.

    ``kind`` is one of ``identity``, ``gaussian``, ``median``, ``snp``.
    """

    kind: str
    sigma: float | None = None
    size: int | None = None
    prob: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "identity":
            pass
        elif self.kind == "gaussian":
            if self.sigma is None or self.sigma <= 0:
                raise ValueError(f"gaussian sigma must be > 0, got {self.sigma}")
        elif self.kind == "median":
            if self.size is None or int(self.size) < 2:
                raise ValueError(f"median size must be an integer >= 2, got {self.size}")
            object.__setattr__(self, "size", int(self.size))
        elif self.kind == "snp":
            if self.prob is None or not (0.0 <= self.prob <= 0.5):
                raise ValueError(f"snp prob must lie in [0, 0.5], got {self.prob}")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        object.__setattr__(self, "seed", int(self.seed) & U64_MASK)

    @classmethod
    def identity(cls) -> "NoiseSpec":
        return cls("identity")

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseSpec":
        return cls("gaussian", sigma=float(sigma))

    @classmethod
    def median(cls, size: int) -> "NoiseSpec":
        return cls("median", size=size)

    @classmethod
    def salt_pepper(cls, prob: float, seed: int = 0) -> "NoiseSpec":
        return cls("snp", prob=float(prob), seed=seed)

    @property
    def name(self) -> str:
        """Canonical dataset name: t2norm, gausK, medianK, or snpPP."""
        if self.kind == "identity":
            return IDENTITY_NAME
        if self.kind == "gaussian":
            if float(self.sigma).is_integer():
                return f"gaus{int(self.sigma)}"
            return f"gaus{self.sigma:g}"
        if self.kind == "median":
            return f"median{self.size}"
        return f"snp{round(self.prob * 100):02d}"

    @classmethod
    def from_name(cls, name: str, seed: int = 0) -> "NoiseSpec":
        """Parse a canonical dataset name back into a spec."""
        if name == IDENTITY_NAME:
            return cls.identity()
        m = re.fullmatch(r"gaus(\d+(?:\.\d+)?)", name)
        if m:
            return cls.gaussian(float(m.group(1)))
        m = re.fullmatch(r"median(\d+)", name)
        if m:
            return cls.median(int(m.group(1)))
        m = re.fullmatch(r"snp(\d{2,})", name)
        if m:
            return cls.salt_pepper(int(m.group(1)) / 100.0, seed=seed)
        raise ValueError(f"unrecognized dataset name {name!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "gaussian":
            d["sigma"] = self.sigma
        elif self.kind == "median":
            d["size"] = self.size
        elif self.kind == "snp":
            d["prob"] = self.prob
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(
            d["kind"],
            sigma=d.get("sigma"),
            size=d.get("size"),
            prob=d.get("prob"),
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True, eq=False)
class Kernel1D:
    """Normalized symmetric 1D kernel; the 3D kernel is its triple outer
    product."""

    radius: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] != 2 * self.radius + 1:
            raise ValueError("weights length must be 2*radius + 1")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if not np.array_equal(w, w[::-1]):
            raise ValueError("weights must be symmetric")
        object.__setattr__(self, "weights", w)


def gaussian_kernel_1d(sigma: float) -> Kernel1D:
    """Sampled Gaussian truncated at radius ceil(4*sigma), normalized."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(KERNEL_TRUNCATE * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    # offsets**2 is exactly symmetric, so the weights are too
    w = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    w /= w.sum()
    return Kernel1D(radius, w)


def gaussian_blur(vol: Volume3D, sigma: float) -> Volume3D:
    """Separable Gaussian blur (x, then y, then z) with nearest-edge
    (clamp) boundary handling."""
    kern = gaussian_kernel_1d(sigma)
    k = backend.kernels()
    data = vol.data
    for axis in (0, 1, 2):
        data = k.conv1d(data, kern.weights, axis)
    return Volume3D(data, vol.spacing)


def median_filter(vol: Volume3D, size: int) -> Volume3D:
    """Cubic-window median of edge length ``size``.

    The window covers per-axis offsets [-(size-1)//2, +size//2]; borders
    use symmetric reflection (a b c | c b a); the output is the element
    at 0-based rank floor(size**3 / 2) of the sorted window.
    """
    if int(size) < 2:
        raise ValueError(f"median size must be an integer >= 2, got {size}")
    out = backend.kernels().median3d(vol.data, int(size))
    return Volume3D(out, vol.spacing)


def salt_pepper(
    vol: Volume3D,
    prob: float,
    seed: int,
    black: float | None = None,
    white: float | None = None,
) -> Volume3D:
    """Paint voxels black (u < prob) or white (u > 1-prob).

    The uniform u for a voxel depends only on (seed, linear index), so
    the result is reproducible regardless of parallelism. On normalized
    real-valued volumes black/white default to the per-volume min/max;
    pass explicit values to override.
    """
    if not (0.0 <= prob <= 0.5):
        raise ValueError(f"prob must lie in [0, 0.5], got {prob}")
    b = float(vol.data.min()) if black is None else float(black)
    w = float(vol.data.max()) if white is None else float(white)
    out = backend.kernels().salt_pepper_paint(
        vol.data, float(prob), np.uint64(int(seed) & U64_MASK), b, w
    )
    return Volume3D(out, vol.spacing)


def apply_noise(vol: Volume3D, spec: NoiseSpec) -> Volume3D:
    """Apply a corruption spec to one volume."""
    if spec.kind == "identity":
        return Volume3D(vol.data.copy(order="F"), vol.spacing)
    if spec.kind == "gaussian":
        return gaussian_blur(vol, spec.sigma)
    if spec.kind == "median":
        return median_filter(vol, spec.size)
    return salt_pepper(vol, spec.prob, spec.seed)


VOLUME_SUFFIX = "_vol"
LABEL_SUFFIX = "_seg"
DATASET_MANIFEST = "dataset.json"
COHORT_MANIFEST = "manifest.json"


def _find_pairs(input_dir: Path) -> list[tuple[Path, Path | None]]:
    vols = sorted(
        p for p in input_dir.iterdir()
        if p.name.endswith((f"{VOLUME_SUFFIX}.nii", f"{VOLUME_SUFFIX}.nii.gz",
                            f"{VOLUME_SUFFIX}{vio.RAW_SIDECAR_SUFFIX}"))
    )
    pairs = []
    for v in vols:
        name = v.name
        for ext in (".nii.gz", ".nii", vio.RAW_SIDECAR_SUFFIX):
            if name.endswith(ext):
                stem = name[: -len(ext)]
                label = input_dir / (stem[: -len(VOLUME_SUFFIX)] + LABEL_SUFFIX + ext)
                pairs.append((v, label if label.exists() else None))
                break
    return pairs


def corrupt_dataset(input_dir, spec: NoiseSpec, output_dir, base_seed: int | None = None) -> int:
    """Corrupt every volume in a dataset directory.

    Volumes (``*_vol.*``) are filtered per ``spec`` and written under the
    same base filename; label maps (``*_seg.*``) and the cohort manifest
    are copied through verbatim. For salt-and-pepper, volume i (in sorted
    filename order) uses seed ``base_seed + i`` so cohort corruption is
    reproducible file by file. Returns the number of volumes written.
    """
    input_dir = Path(input_dir)
    output_dir = Path(output_dir)
    pairs = _find_pairs(input_dir)
    if not pairs:
        raise VoltexError(f"no volumes found in {input_dir}")
    output_dir.mkdir(parents=True, exist_ok=True)
    if base_seed is None:
        base_seed = spec.seed
    files = []
    for i, (vol_path, lab_path) in enumerate(pairs):
        vol = vio.load_volume(vol_path)
        per_vol_spec = spec
        if spec.kind == "snp":
            per_vol_spec = NoiseSpec.salt_pepper(spec.prob, seed=(base_seed + i) & U64_MASK)
        out = apply_noise(vol, per_vol_spec)
        vio.save_volume(out, output_dir / vol_path.name)
        files.append(vol_path.name)
        if lab_path is not None:
            shutil.copyfile(lab_path, output_dir / lab_path.name)
            files.append(lab_path.name)
    cohort_manifest = input_dir / COHORT_MANIFEST
    if cohort_manifest.exists():
        shutil.copyfile(cohort_manifest, output_dir / COHORT_MANIFEST)
    manifest = {
        "name": spec.name,
        "spec": spec.to_dict(),
        "source": str(input_dir),
        "base_seed": int(base_seed),
        "files": files,
    }
    (output_dir / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return len(pairs)
