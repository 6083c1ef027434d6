"""Per-voxel reference segmenter: multinomial logistic regression over a
small multi-scale feature stack, trained with seeded mini-batch SGD.

Deliberately simple and framework-free. Multi-scale smoothed features
give the model local context at several resolutions; normalized voxel
coordinates give it a weak handle on global position. Quality is never
compared against full CNN segmenters; the model exists so corruption
robustness experiments run end to end at desk scale.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as vio
from .filters import gaussian_blur, median_filter
from .phantom import read_manifest, subjects_in_split
from .volume import LabelMap, Volume3D, VoltexError

DEFAULT_FEATURES = (
    "intensity",
    "gauss:1",
    "gauss:2",
    "gauss:4",
    "median:3",
    "gradmag:1",
    "coord:x",
    "coord:y",
    "coord:z",
)


@dataclass(frozen=True)
class FeatureRecipe:
    """Ordered per-voxel feature list; serialized with every model."""

    features: tuple[str, ...] = DEFAULT_FEATURES

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        for f in self.features:
            _parse_feature(f)

    @property
    def num_features(self) -> int:
        return len(self.features)

    def to_dict(self) -> dict:
        return {"features": list(self.features)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureRecipe":
        return cls(tuple(d["features"]))


def _parse_feature(feat: str) -> tuple[str, str | float | None]:
    kind, _, arg = feat.partition(":")
    if kind == "intensity" and not arg:
        return kind, None
    if kind in ("gauss", "gradmag"):
        return kind, float(arg)
    if kind == "median":
        return kind, int(arg)
    if kind == "coord" and arg in ("x", "y", "z"):
        return kind, arg
    raise ValueError(f"unknown feature spec {feat!r}")


def _gradient_magnitude(a: np.ndarray) -> np.ndarray:
    """Central differences in the interior, one-sided at the faces."""
    total = np.zeros_like(a)
    for axis in range(3):
        g = np.empty_like(a)
        n = a.shape[axis]
        if n == 1:
            g[...] = 0.0
        else:
            src = np.moveaxis(a, axis, 0)
            dst = np.moveaxis(g, axis, 0)
            dst[1:-1] = (src[2:] - src[:-2]) * 0.5
            dst[0] = src[1] - src[0]
            dst[-1] = src[-1] - src[-2]
        total += g * g
    return np.sqrt(total)


def extract_features(vol: Volume3D, recipe: FeatureRecipe) -> np.ndarray:
    """Per-voxel feature matrix of shape (num_voxels, D), x-fastest order."""
    nx, ny, nz = vol.dims
    n = vol.num_voxels
    smoothed: dict[float, np.ndarray] = {}

    def smooth(sigma: float) -> np.ndarray:
        if sigma not in smoothed:
            smoothed[sigma] = gaussian_blur(vol, sigma).data
        return smoothed[sigma]

    cols = []
    for feat in recipe.features:
        kind, arg = _parse_feature(feat)
        if kind == "intensity":
            col = vol.data
        elif kind == "gauss":
            col = smooth(arg)
        elif kind == "median":
            col = median_filter(vol, arg).data
        elif kind == "gradmag":
            col = _gradient_magnitude(smooth(arg))
        else:  # coord
            axis = "xyz".index(arg)
            shape = [1, 1, 1]
            shape[axis] = vol.dims[axis]
            ramp = np.arange(vol.dims[axis], dtype=np.float64) / vol.dims[axis]
            col = np.broadcast_to(ramp.reshape(shape), vol.dims)
        cols.append(np.asfortranarray(col).ravel(order="F"))
    return np.column_stack(cols)


@dataclass(frozen=True)
class TrainConfig:
    datasets: tuple[str, ...]
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 256
    samples_per_volume: int = 4096
    seed: int = 0
    l2: float = 1e-4
    recipe: FeatureRecipe = field(default_factory=FeatureRecipe)

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if not self.datasets:
            raise ValueError("at least one training dataset is required")
        for name, value in (
            ("learning_rate", self.learning_rate),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("samples_per_volume", self.samples_per_volume),
        ):
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")

    def to_dict(self) -> dict:
        return {
            "datasets": list(self.datasets),
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "samples_per_volume": self.samples_per_volume,
            "seed": self.seed,
            "l2": self.l2,
            "recipe": self.recipe.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        if "recipe" in kwargs:
            kwargs["recipe"] = FeatureRecipe.from_dict(kwargs["recipe"])
        kwargs["datasets"] = tuple(kwargs["datasets"])
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Trained weights plus everything needed to reproduce predictions."""

    weights: np.ndarray  # (C, D+1), bias last
    recipe: FeatureRecipe
    feature_mean: np.ndarray
    feature_sd: np.ndarray
    num_classes: int
    metadata: dict

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if not np.isfinite(w).all():
            raise ValueError("model weights must be finite")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if w.shape != (self.num_classes, self.recipe.num_features + 1):
            raise ValueError(
                f"weights shape {w.shape} does not match "
                f"(C={self.num_classes}, D+1={self.recipe.num_features + 1})"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "feature_mean", np.asarray(self.feature_mean, dtype=np.float64))
        object.__setattr__(self, "feature_sd", np.asarray(self.feature_sd, dtype=np.float64))

    def save(self, path) -> None:
        doc = {
            "weights": self.weights.tolist(),
            "recipe": self.recipe.to_dict(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_sd": self.feature_sd.tolist(),
            "num_classes": self.num_classes,
            "config": self.metadata,
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        doc = json.loads(Path(path).read_text())
        return cls(
            weights=np.array(doc["weights"], dtype=np.float64),
            recipe=FeatureRecipe.from_dict(doc["recipe"]),
            feature_mean=np.array(doc["feature_mean"], dtype=np.float64),
            feature_sd=np.array(doc["feature_sd"], dtype=np.float64),
            num_classes=int(doc["num_classes"]),
            metadata=doc.get("config", {}),
        )


def loss_and_grad(
    weights: np.ndarray,
    xb: np.ndarray,
    yb: np.ndarray,
    l2: float,
    active: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy with L2 on non-bias weights.

    ``xb`` is (B, D+1) with the bias column of ones last; ``active``
    masks classes absent from all training data (their rows stay zero).
    """
    scores = xb @ weights.T
    if active is not None:
        scores[:, ~active] = -np.inf
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    denom = e.sum(axis=1)
    b = xb.shape[0]
    rows = np.arange(b)
    nll = np.log(denom) + m[:, 0] - scores[rows, yb]
    loss = float(nll.mean()) + 0.5 * l2 * float((weights[:, :-1] ** 2).sum())
    p = e / denom[:, None]
    p[rows, yb] -= 1.0
    grad = (p.T @ xb) / b
    grad[:, :-1] += l2 * weights[:, :-1]
    if active is not None:
        grad[~active] = 0.0
    return loss, grad


def _sample_seed(seed: int, dataset: str, volume_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(dataset.encode()), volume_index])


def _sample_voxels(
    features: np.ndarray,
    labels_flat: np.ndarray,
    count: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced draw: equal per present class, remainder uniform."""
    present = np.unique(labels_flat)
    per_class = count // len(present)
    picks = []
    for c in present:
        pool = np.flatnonzero(labels_flat == c)
        picks.append(pool[rng.integers(0, len(pool), size=per_class)])
    remainder = count - per_class * len(present)
    if remainder:
        picks.append(rng.integers(0, len(labels_flat), size=remainder))
    idx = np.concatenate(picks)
    return features[idx], labels_flat[idx]


def collect_samples(
    data_root,
    dataset: str,
    config: TrainConfig,
    cache: dict | None = None,
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Sampled (subject, X, y) blocks from a dataset's train split.

    The sampling seed depends only on (config.seed, dataset, volume
    index), so a cache may be shared by models trained with the same
    seed and recipe.
    """
    ds_dir = Path(data_root) / dataset
    if not ds_dir.is_dir():
        raise VoltexError(f"training dataset {dataset!r} not found under {data_root}")
    manifest = read_manifest(ds_dir)
    num_classes = int(manifest["num_classes"])
    subjects = subjects_in_split(ds_dir, "train")
    blocks = []
    for j, sid in enumerate(sorted(subjects)):
        key = (dataset, sid, config.seed, config.samples_per_volume, config.recipe.features)
        if cache is not None and key in cache:
            blocks.append((sid,) + cache[key])
            continue
        vol = vio.load_volume(ds_dir / f"{sid}_vol.nii")
        lm = vio.load_labelmap(ds_dir / f"{sid}_seg.nii", num_classes=num_classes)
        feats = extract_features(vol, config.recipe)
        rng = np.random.default_rng(_sample_seed(config.seed, dataset, j))
        x, y = _sample_voxels(feats, lm.ravel(), config.samples_per_volume, rng)
        if cache is not None:
            cache[key] = (x, y)
        blocks.append((sid, x, y))
    return blocks


def train(config: TrainConfig, data_root, sample_cache: dict | None = None) -> ModelParams:
    """Train on the union of the named datasets' train splits.

    Deterministic in (config, data): sampling, standardization, epoch
    shuffles and SGD order all derive from config.seed. Volumes are
    interleaved round-robin across datasets within each epoch.
    """
    per_dataset = {
        ds: collect_samples(data_root, ds, config, cache=sample_cache)
        for ds in config.datasets
    }
    num_classes = int(read_manifest(Path(data_root) / config.datasets[0])["num_classes"])

    xs, ys, block_slices = [], [], {}
    offset = 0
    for ds in config.datasets:
        for j, (sid, x, y) in enumerate(per_dataset[ds]):
            xs.append(x)
            ys.append(y)
            block_slices[(ds, j)] = (offset, offset + len(y))
            offset += len(y)
    x_all = np.concatenate(xs, axis=0)
    y_all = np.concatenate(ys, axis=0).astype(np.int64)

    mean = x_all.mean(axis=0)
    sd = x_all.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    x_std = (x_all - mean) / sd
    x_std = np.concatenate([x_std, np.ones((len(x_std), 1))], axis=1)

    active = np.zeros(num_classes, dtype=bool)
    active[np.unique(y_all)] = True
    absent = [int(c) for c in np.flatnonzero(~active)]
    if absent:
        warnings.warn(
            f"classes {absent} absent from all training volumes; their weights stay zero",
            stacklevel=2,
        )

    d1 = config.recipe.num_features + 1
    weights = np.zeros((num_classes, d1))
    mask = None if not absent else active
    epoch_losses = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE90C, epoch]))
        # round-robin volume order across datasets, volumes shuffled per dataset
        orders = {
            ds: rng.permutation(len(per_dataset[ds])) for ds in config.datasets
        }
        stream = []
        max_len = max(len(v) for v in orders.values())
        for t in range(max_len):
            for ds in config.datasets:
                if t < len(orders[ds]):
                    lo, hi = block_slices[(ds, int(orders[ds][t]))]
                    stream.append(lo + rng.permutation(hi - lo))
        order = np.concatenate(stream)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grad = loss_and_grad(weights, x_std[batch], y_all[batch], config.l2, mask)
            weights -= config.learning_rate * grad
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))

    scores = x_std @ weights.T
    if mask is not None:
        scores[:, ~active] = -np.inf
    train_accuracy = float((scores.argmax(axis=1) == y_all).mean())

    metadata = dict(config.to_dict())
    metadata.update(
        {
            "absent_classes": absent,
            "epoch_losses": epoch_losses,
            "train_accuracy": train_accuracy,
            "num_samples": int(len(y_all)),
        }
    )
    return ModelParams(
        weights=weights,
        recipe=config.recipe,
        feature_mean=mean,
        feature_sd=sd,
        num_classes=num_classes,
        metadata=metadata,
    )


def predict_from_features(model: ModelParams, features: np.ndarray, dims) -> LabelMap:
    """Argmax class per voxel from a precomputed feature matrix."""
    x = (features - model.feature_mean) / model.feature_sd
    scores = x @ model.weights[:, :-1].T + model.weights[:, -1]
    labels = scores.argmax(axis=1).astype(np.int32)
    return LabelMap(labels.reshape(tuple(dims), order="F"), model.num_classes)


def predict(model: ModelParams, vol: Volume3D) -> LabelMap:
    """Segment a volume; ties break toward the lowest class index."""
    feats = extract_features(vol, model.recipe)
    return predict_from_features(model, feats, vol.dims)
