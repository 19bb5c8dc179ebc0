"""Per-quadrant lesion tallies and their text rendering.

The image plane is centred at the image midpoint with +x to the right and
+y up, so image row 0 lies in the upper half::

          II  |  I
        ------+------
         III  |  IV

A lesion belongs to the quadrant containing its box centre. Points on an axis
go to the positive side: x == 0 counts as +x and y == 0 counts as +y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .detector import BBox
from .lesions import LesionClass, parse_lesion_class


class Quadrant(Enum):
    I = "I"
    II = "II"
    III = "III"
    IV = "IV"


class QuadrantError(ValueError):
    pass


def assign_quadrant(box: BBox, image_w: float, image_h: float) -> Quadrant:
    if not (0.0 <= box.cx <= image_w and 0.0 <= box.cy <= image_h):
        raise QuadrantError(f"box centre ({box.cx}, {box.cy}) outside {image_w}x{image_h} image")
    x = box.cx - image_w / 2.0
    y = image_h / 2.0 - box.cy
    if x >= 0:
        return Quadrant.I if y >= 0 else Quadrant.IV
    return Quadrant.II if y >= 0 else Quadrant.III


def _empty_counts() -> dict:
    return {q: {c: 0 for c in LesionClass} for q in Quadrant}


@dataclass
class QuadrantReport:
    counts: dict = field(default_factory=_empty_counts)  # Quadrant -> LesionClass -> int
    assignments: list = field(default_factory=list)  # [(detection, Quadrant)]

    @property
    def totals(self) -> dict:
        return {c: sum(self.counts[q][c] for q in Quadrant) for c in LesionClass}

    @property
    def total(self) -> int:
        return sum(self.totals.values())

    def quadrant_total(self, q: Quadrant) -> int:
        return sum(self.counts[q].values())

    @property
    def rendered_text(self) -> str:
        return render_text(self)


def aggregate(detections, image_w: float, image_h: float) -> QuadrantReport:
    """``detections``: iterable of ``(BBox, LesionClass, score)`` or objects with ``as_tuple``."""
    report = QuadrantReport()
    for det in detections:
        box, cls, _ = det.as_tuple() if hasattr(det, "as_tuple") else det
        q = assign_quadrant(box, image_w, image_h)
        report.counts[q][cls] += 1
        report.assignments.append((det, q))
    return report


def _phrase(n: int, cls: LesionClass) -> str:
    return f"{n} {cls.value if n == 1 else cls.plural}"


def render_text(report: QuadrantReport) -> str:
    lines = []
    for q in Quadrant:
        parts = [_phrase(n, c) for c, n in report.counts[q].items() if n]
        body = ", ".join(parts) if parts else "no lesions detected"
        lines.append(f"Quadrant {q.value}: {body}.")
    n = report.total
    parts = [_phrase(k, c) for c, k in report.totals.items() if k]
    summary = f"Summary: {n} lesion{'' if n == 1 else 's'} detected"
    lines.append(summary + (f" ({', '.join(parts)})." if parts else "."))
    return "\n".join(lines) + "\n"


def serialize(report: QuadrantReport) -> str:
    """Structured form, one ``quadrant.class_key=count`` line per cell plus totals."""
    lines = [f"{q.value}.{c.key}={report.counts[q][c]}" for q in Quadrant for c in LesionClass]
    lines += [f"total.{c.key}={n}" for c, n in report.totals.items()]
    lines.append(f"total={report.total}")
    return "\n".join(lines) + "\n"


def parse_serialized(text: str) -> QuadrantReport:
    """Inverse of ``serialize`` for the count structure (assignments are not stored)."""
    report = QuadrantReport()
    expected_total = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not value.strip().isdigit():
            raise ValueError(f"line {lineno}: expected key=count, got {line!r}")
        n = int(value)
        where, _, cls_key = key.partition(".")
        if where == "total":
            if not cls_key:
                expected_total = n
            continue
        try:
            q = Quadrant(where)
            cls = parse_lesion_class(cls_key)
        except ValueError:
            raise ValueError(f"line {lineno}: unknown key {key!r}") from None
        report.counts[q][cls] = n
    if expected_total is not None and expected_total != report.total:
        raise ValueError(f"total={expected_total} disagrees with cell sum {report.total}")
    return report
