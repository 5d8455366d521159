"""Sparse point labels, their validation rules, and the labels.json schema.

A point label set carries (x, y, class_id) clicks under one of two modes:
"1C1C" (at most one point per class) or "1C10C" (at most ten). Synthetic
datasets additionally label the background class 0.

labels.json (bundle of one or more frames)::

    {"frames": [{"frame_id": "<id>", "mode": "1C1C",
                 "points": [{"x": 3, "y": 7, "class_id": 2}, ...]}]}

Pixel coordinates are integer, 0-indexed, row-major (x = column, y = row).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MODE_LIMITS = {"1C1C": 1, "1C10C": 10}
IGNORE = 255


class LabelValidationError(ValueError):
    """One or more label constraints violated; .violations lists them all."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class PointLabel:
    x: int
    y: int
    class_id: int


@dataclass(frozen=True)
class PointLabelSet:
    points: tuple[PointLabel, ...]
    mode: str = "1C1C"

    def __post_init__(self):
        violations = validate_points(
            [(p.x, p.y, p.class_id) for p in self.points], self.mode)
        if violations:
            raise LabelValidationError(violations)

    def __len__(self):
        return len(self.points)

    def classes(self) -> set[int]:
        return {p.class_id for p in self.points}

    def arrays(self):
        """(xs, ys, cs) int64 columns."""
        xs = np.array([p.x for p in self.points], dtype=np.int64)
        ys = np.array([p.y for p in self.points], dtype=np.int64)
        cs = np.array([p.class_id for p in self.points], dtype=np.int64)
        return xs, ys, cs


def make_label_set(points, mode="1C1C") -> PointLabelSet:
    return PointLabelSet(tuple(PointLabel(int(x), int(y), int(c))
                               for x, y, c in points), mode)


def validate_points(points, mode, width=None, height=None,
                    class_ids=None) -> list[str]:
    """Return a list of human-readable constraint violations (empty = valid)."""
    problems = []
    if mode not in MODE_LIMITS:
        return [f"unknown mode {mode!r}"]
    limit = MODE_LIMITS[mode]
    per_class: dict[int, int] = {}
    seen_xy = set()
    for x, y, c in points:
        per_class[c] = per_class.get(c, 0) + 1
        if (x, y) in seen_xy:
            problems.append(f"duplicate point at ({x}, {y})")
        seen_xy.add((x, y))
        if c < 0 or c == IGNORE:
            problems.append(f"illegal class id {c}")
        elif class_ids is not None and c not in class_ids:
            problems.append(f"class id {c} not in palette")
        if width is not None and not (0 <= x < width and 0 <= y < height):
            problems.append(f"point ({x}, {y}) out of bounds {width}x{height}")
    for c, n in sorted(per_class.items()):
        if n > limit:
            problems.append(f"class {c} has {n} points, {mode} allows {limit}")
    return problems


def labels_to_record(labels: PointLabelSet, frame_id: str) -> dict:
    return {"frame_id": frame_id, "mode": labels.mode,
            "points": [{"x": p.x, "y": p.y, "class_id": p.class_id}
                       for p in labels.points]}


def record_to_labels(record: dict) -> PointLabelSet:
    return make_label_set([(p["x"], p["y"], p["class_id"])
                           for p in record["points"]], record.get("mode", "1C1C"))


def write_labels_json(records: list[dict], path) -> None:
    with open(path, "w") as f:
        json.dump({"frames": records}, f, indent=1, sort_keys=True)
        f.write("\n")


def read_labels_json(path) -> dict[str, dict]:
    """Load a labels.json bundle as {frame_id: record}, re-validating each."""
    with open(path) as f:
        bundle = json.load(f)
    out = {}
    for record in bundle["frames"]:
        record_to_labels(record)  # raises on constraint violations
        out[record["frame_id"]] = record
    return out


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    color: str  # '#rrggbb' display color


# Default 11-class driving palette for the annotation service; synthetic
# datasets write their own palette.json instead.
DRIVING_PALETTE = (
    ClassInfo(0, "sky", "#87ceeb"),
    ClassInfo(1, "building", "#b03060"),
    ClassInfo(2, "fence", "#daa520"),
    ClassInfo(3, "person", "#ff4500"),
    ClassInfo(4, "pole", "#708090"),
    ClassInfo(5, "road", "#804080"),
    ClassInfo(6, "sidewalk", "#f4a261"),
    ClassInfo(7, "vegetation", "#228b22"),
    ClassInfo(8, "car", "#00008b"),
    ClassInfo(9, "wall", "#9a6324"),
    ClassInfo(10, "traffic-sign", "#ffd700"),
)

_SYNTH_COLORS = ("#c0c0c0", "#e6194b", "#3cb44b", "#4363d8", "#f58231",
                 "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#fabebe")


def synthetic_palette(class_count: int) -> tuple[ClassInfo, ...]:
    names = ["background"] + [f"object-{c}" for c in range(1, class_count)]
    return tuple(ClassInfo(c, names[c], _SYNTH_COLORS[c % len(_SYNTH_COLORS)])
                 for c in range(class_count))


def palette_to_json(palette) -> list[dict]:
    return [{"id": c.id, "name": c.name, "color": c.color} for c in palette]


def palette_from_json(items) -> tuple[ClassInfo, ...]:
    return tuple(ClassInfo(int(i["id"]), i["name"], i["color"]) for i in items)
