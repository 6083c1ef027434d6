"""Report emitters (CSV / markdown tables) and PNG slice export."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import RobustnessMatrix
from .volume import LabelMap, Volume3D

HIGHLIGHT_THRESHOLD = 0.9  # rows where every class beats this get a check mark

# fixed categorical palette for label slices (cycled when C > 20)
LABEL_PALETTE = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 190),
    (0, 128, 128),
    (230, 190, 255),
    (170, 110, 40),
    (255, 250, 200),
    (128, 0, 0),
    (170, 255, 195),
    (128, 128, 0),
    (255, 215, 180),
    (0, 0, 128),
)

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


def emit_report(matrix: RobustnessMatrix, format: str) -> str:
    """Render the matrix as text, one table per model.

    ``csv``: per model, a header row ``condition,class_1..class_C`` then
    one row per test condition, values with 4 decimal places; model
    blocks appear in matrix order separated by a blank line. ``md``:
    markdown tables titled by model name, with a leading check mark on
    rows where every class exceeds 0.9.
    """
    if format not in ("csv", "md"):
        raise ValueError(f"format must be 'csv' or 'md', got {format!r}")
    if not matrix.complete:
        raise ValueError("matrix is incomplete (skipped cells or non-finite values)")
    c = matrix.num_classes
    lines = []
    for mi, model in enumerate(matrix.models):
        if format == "csv":
            if mi:
                lines.append("")
            lines.append("condition," + ",".join(f"class_{k + 1}" for k in range(c)))
            for ki, cond in enumerate(matrix.conditions):
                vals = matrix.values[mi, ki]
                lines.append(cond + "," + ",".join(f"{v:.4f}" for v in vals))
        else:
            if mi:
                lines.append("")
            lines.append(f"## {model}")
            lines.append("")
            lines.append("| condition | " + " | ".join(f"class_{k + 1}" for k in range(c)) + " |")
            lines.append("|---" * (c + 1) + "|")
            for ki, cond in enumerate(matrix.conditions):
                vals = matrix.values[mi, ki]
                mark = "✓ " if (vals > HIGHLIGHT_THRESHOLD).all() else ""
                lines.append(
                    f"| {mark}{cond} | " + " | ".join(f"{v:.4f}" for v in vals) + " |"
                )
    return "\n".join(lines) + "\n"


def parse_matrix_csv(text: str, num_classes: int) -> list[list[tuple[str, list[float]]]]:
    """Parse emit_report('csv') output back into per-model blocks.

    Blocks come back in emission order (the matrix's model order); each
    block is a list of (condition, values) rows.
    """
    blocks = []
    current = None
    header = "condition," + ",".join(f"class_{k + 1}" for k in range(num_classes))
    for line in text.splitlines():
        if not line:
            continue
        if line == header:
            current = []
            blocks.append(current)
            continue
        if current is None:
            raise ValueError("csv data before header row")
        parts = line.split(",")
        current.append((parts[0], [float(v) for v in parts[1:]]))
    return blocks


def _slice_plane(arr: np.ndarray, axis_name: str, index: int) -> np.ndarray:
    try:
        axis = AXES[axis_name]
    except KeyError:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis_name!r}") from None
    if not (0 <= index < arr.shape[axis]):
        raise ValueError(f"slice index {index} out of range for axis {axis_name} "
                         f"(size {arr.shape[axis]})")
    plane = np.take(arr, index, axis=axis)
    # rows = second remaining axis, columns = first, so x runs left-right
    return plane.T


def export_slice(obj: Volume3D | LabelMap, axis: str, index: int, path) -> None:
    """Write one slice as PNG: min-max windowed grayscale for volumes, a
    fixed categorical palette for label maps. Output bytes are
    deterministic."""
    if isinstance(obj, LabelMap):
        plane = _slice_plane(obj.labels, axis, index)
        palette = np.array(
            [LABEL_PALETTE[k % len(LABEL_PALETTE)] for k in range(obj.num_classes)],
            dtype=np.uint8,
        )
        img = palette[plane]
    else:
        plane = _slice_plane(obj.data, axis, index)
        lo, hi = float(plane.min()), float(plane.max())
        if hi - lo < 1e-300:
            img = np.full(plane.shape, 128, dtype=np.uint8)
        else:
            img = np.clip((plane - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(img)).save(Path(path), format="PNG")
