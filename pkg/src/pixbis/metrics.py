"""ISO/IEC 30107-3 error rates, HTER, EER thresholding, ROC sweeps and
score-file I/O.

Convention: higher score = more bonafide; a presentation is accepted as
bonafide when ``score >= threshold``. Rates are fractions in [0, 1].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABELS = ("bonafide", "attack")


class MetricsError(ValueError):
    """Score data unusable for the requested metric."""


@dataclass(frozen=True)
class ScoreRecord:
    video_id: str
    label: str
    pai: str
    score: float
    frame_index: int | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise MetricsError(f"unknown label {self.label!r}")
        if (self.label == "bonafide") != (self.pai == "none"):
            raise MetricsError(f"label {self.label!r} inconsistent with pai {self.pai!r}")
        if not math.isfinite(self.score):
            raise MetricsError(f"non-finite score for {self.video_id}")


@dataclass
class MetricsReport:
    threshold: float
    apcer_per_pai: dict = field(default_factory=dict)
    apcer: float = 0.0
    bpcer: float = 0.0
    acer: float = 0.0
    far: float = 0.0
    frr: float = 0.0
    hter: float = 0.0
    eer: float = float("nan")

    def rows(self) -> list:
        """(key, fraction) pairs in report order."""
        out = [("threshold", self.threshold), ("eer", self.eer)]
        out += [(f"apcer[{pai}]", v) for pai, v in sorted(self.apcer_per_pai.items())]
        out += [
            ("apcer", self.apcer),
            ("bpcer", self.bpcer),
            ("acer", self.acer),
            ("far", self.far),
            ("frr", self.frr),
            ("hter", self.hter),
        ]
        return out


def _split(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    bona = np.array([r.label == "bonafide" for r in records], dtype=bool)
    return scores, bona


def _require_both(records):
    scores, bona = _split(records)
    if not bona.any() or bona.all():
        raise MetricsError("need at least one bonafide and one attack record")
    return scores, bona


def aggregate_video_scores(frame_records) -> list:
    """Mean frame score per video, in first-seen video order."""
    groups = {}
    for r in frame_records:
        g = groups.setdefault(r.video_id, [r.label, r.pai, []])
        if (g[0], g[1]) != (r.label, r.pai):
            raise MetricsError(f"video {r.video_id} mixes {g[0]}/{g[1]} with {r.label}/{r.pai}")
        g[2].append(r.score)
    return [ScoreRecord(vid, lab, pai, float(np.mean(sc))) for vid, (lab, pai, sc) in groups.items()]


def far_frr(records, threshold: float) -> tuple:
    scores, bona = _require_both(records)
    far = float(np.mean(scores[~bona] >= threshold))
    frr = float(np.mean(scores[bona] < threshold))
    return far, frr


def hter(records, threshold: float) -> float:
    far, frr = far_frr(records, threshold)
    return (far + frr) / 2


def apcer_bpcer_acer(records, threshold: float) -> MetricsReport:
    scores, bona = _split(records)
    if bona.all():
        raise MetricsError("no attack records")
    if not bona.any():
        raise MetricsError("no bonafide records")
    pais = np.array([r.pai for r in records])
    per_pai = {}
    for pai in sorted(set(pais[~bona])):
        per_pai[str(pai)] = float(np.mean(scores[pais == pai] >= threshold))
    apcer = max(per_pai.values())
    bpcer = float(np.mean(scores[bona] < threshold))
    far = float(np.mean(scores[~bona] >= threshold))
    return MetricsReport(
        threshold=threshold,
        apcer_per_pai=per_pai,
        apcer=apcer,
        bpcer=bpcer,
        acer=(apcer + bpcer) / 2,
        far=far,
        frr=bpcer,
        hter=(far + bpcer) / 2,
    )


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints of consecutive distinct scores, one below the minimum and
    one above the maximum, ascending."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = u[:-1] + (u[1:] - u[:-1]) / 2
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def _sweep_counts(scores, bona, thresholds):
    """Counts of accepted attacks and rejected bonafide at each threshold."""
    att = np.sort(scores[~bona])
    bon = np.sort(scores[bona])
    accepted = len(att) - np.searchsorted(att, thresholds, side="left")
    rejected = np.searchsorted(bon, thresholds, side="left")
    return accepted, rejected, len(att), len(bon)


def roc_points(records) -> list:
    """(threshold, far, frr) at every candidate threshold, ascending."""
    scores, bona = _require_both(records)
    th = candidate_thresholds(scores)
    acc, rej, na, nb = _sweep_counts(scores, bona, th)
    return [(float(t), a / na, r / nb) for t, a, r in zip(th, acc, rej)]


def eer_threshold(dev_records) -> tuple:
    """Threshold minimizing |FAR - FRR| on ``dev_records`` and the EER there.

    Ties go to the smaller (FAR + FRR) / 2, then to the lower threshold.
    Comparisons run on integer counts, so equal rates compare equal.
    """
    scores, bona = _require_both(dev_records)
    th = candidate_thresholds(scores)
    acc, rej, na, nb = _sweep_counts(scores, bona, th)
    # |a/na - r/nb| and (a/na + r/nb) scaled by na*nb
    gap = np.abs(acc.astype(np.int64) * nb - rej.astype(np.int64) * na)
    total = acc.astype(np.int64) * nb + rej.astype(np.int64) * na
    best = np.lexsort((th, total, gap))[0]
    far, frr = acc[best] / na, rej[best] / nb
    return float(th[best]), (far + frr) / 2


def evaluate(dev_records, eval_records) -> MetricsReport:
    """Threshold at the dev EER, all rates on the eval records."""
    tau, eer = eer_threshold(dev_records)
    _require_both(eval_records)
    report = apcer_bpcer_acer(eval_records, tau)
    report.eer = eer
    return report


# -- files -----------------------------------------------------------------------

def format_score(x: float) -> str:
    return f"{x:.9g}"


def write_scores(records, path) -> None:
    """CSV ``video_id,label,pai,score`` (``frame_index`` added for frame rows)."""
    records = list(records)
    framed = any(r.frame_index is not None for r in records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if framed:
            w.writerow(["video_id", "frame_index", "label", "pai", "score"])
            for r in records:
                w.writerow([r.video_id, r.frame_index, r.label, r.pai, format_score(r.score)])
        else:
            w.writerow(["video_id", "label", "pai", "score"])
            for r in records:
                w.writerow([r.video_id, r.label, r.pai, format_score(r.score)])


def read_scores(path) -> list:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise MetricsError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header == ["video_id", "label", "pai", "score"]:
            framed = False
        elif header == ["video_id", "frame_index", "label", "pai", "score"]:
            framed = True
        else:
            raise MetricsError(f"{path}:1: unexpected header {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(header):
                    raise MetricsError(f"expected {len(header)} fields, got {len(row)}")
                if framed:
                    vid, fi, label, pai, score = row
                    out.append(ScoreRecord(vid, label, pai, float(score), int(fi)))
                else:
                    vid, label, pai, score = row
                    out.append(ScoreRecord(vid, label, pai, float(score)))
            except (MetricsError, ValueError) as exc:
                raise MetricsError(f"{path}:{lineno}: {exc}") from None
    return out


def write_roc(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr"])
        for t, far, frr in points:
            w.writerow([format_score(t), format_score(far), format_score(frr)])


def format_report(report: MetricsReport, title: str = "", notes=()) -> str:
    """``key: value`` lines; rates as percentages with two decimals."""
    lines = []
    if title:
        lines.append(f"# {title}")
    lines.extend(f"# {n}" for n in notes)
    for key, value in report.rows():
        if key == "threshold":
            lines.append(f"threshold: {format_score(value)}")
        else:
            lines.append(f"{key}: {100 * value:.2f}%")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, stem, title: str = "", notes=()) -> tuple:
    """Write ``<stem>.txt`` and ``<stem>.csv``; return both paths."""
    stem = Path(stem)
    txt, csv_path = stem.with_suffix(".txt"), stem.with_suffix(".csv")
    txt.write_text(format_report(report, title, notes))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, value in report.rows():
            w.writerow([key, format_score(value)])
    return txt, csv_path
