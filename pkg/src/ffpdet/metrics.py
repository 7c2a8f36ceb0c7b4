"""Image-level correct / false / missed detection rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence

from .boxes import Detection
from .config import CLASS_NAMES
from .errors import DataError


def classify_image(detections: Iterable[Detection], score_threshold: float,
                   fault_classes: Sequence[int] = (1, 2)) -> bool:
    """True iff some fault-class detection scores at least ``score_threshold``."""
    fault_classes = set(fault_classes)
    return any(d.class_id in fault_classes and d.score >= score_threshold for d in detections)


@dataclass
class MetricReport:
    m: int          # fault test images
    n: int          # non-fault test images
    a: int          # predicted fault
    b: int          # predicted fault, actually normal
    c: int          # predicted normal
    d: int          # predicted normal, actually faulty
    class_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.m + self.n

    @property
    def fdr(self) -> float:
        return self.b / self.total

    @property
    def mdr(self) -> float:
        return self.d / self.total

    @property
    def cdr(self) -> float:
        return 1.0 - self.fdr - self.mdr

    def check(self) -> None:
        if self.a + self.c != self.total or self.b > self.a or self.d > self.c:
            raise DataError(f"inconsistent confusion counts {self}")

    def rows(self) -> List[tuple]:
        rows = [("m", self.m), ("n", self.n), ("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d),
                ("CDR", f"{self.cdr:.6f}"), ("FDR", f"{self.fdr:.6f}"), ("MDR", f"{self.mdr:.6f}")]
        rows += [(f"detections_{k}", v) for k, v in self.class_counts.items()]
        return rows


def report_from_counts(m: int, n: int, b: int, d: int) -> MetricReport:
    """Build a report from the fault/normal totals and the two error counts."""
    a = b + (m - d)
    c = d + (n - b)
    r = MetricReport(m, n, a, b, c, d)
    r.check()
    return r


def compute_metrics(predicted: Mapping[str, bool], truth: Mapping[str, bool],
                    detections: Mapping[str, Sequence[Detection]] = None) -> MetricReport:
    """Compare image-level fault flags keyed by image id."""
    missing = sorted(set(truth) - set(predicted))
    extra = sorted(set(predicted) - set(truth))
    if missing or extra:
        raise DataError(f"prediction/ground-truth id mismatch: missing {missing[:10]}, unexpected {extra[:10]}")
    if not truth:
        raise DataError("no test images to score")
    m = sum(1 for v in truth.values() if v)
    n = len(truth) - m
    b = sum(1 for k, v in predicted.items() if v and not truth[k])
    d = sum(1 for k, v in predicted.items() if not v and truth[k])
    report = report_from_counts(m, n, b, d)
    counts = {name: 0 for name in CLASS_NAMES}
    for dets in (detections or {}).values():
        for det in dets:
            name = CLASS_NAMES[det.class_id] if det.class_id < len(CLASS_NAMES) else str(det.class_id)
            counts[name] = counts.get(name, 0) + 1
    report.class_counts = counts
    return report
