"""Evaluation metrics: AUC, GAUC, RelaImpr, PCOC, Cal-N, and the grouped
report with overall / new / limited / multi slices.

AUC uses the rank-sum estimator with ties credited 0.5, computed in
O(n log n); the test suite verifies it against the exhaustive pairwise
count.  GAUC weights per-user AUCs by impression count, skipping users
whose impressions are single-class.  Cal-N aggregates per-partition PCOC
errors, with the error asymmetric around 1 (pcoc-1 above, 1/pcoc-1 below).

Partition ids come from a seeded hash of (user_id, item_id) so every
number in a report can be reproduced from the stored prediction file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

N_PARTITIONS = 10

GROUPS = ("overall", "new", "limited", "multi")


class MetricsError(Exception):
    """Malformed prediction files or incompatible report inputs."""


def partition_of(user_id: int, item_id: int, seed: int = 0,
                 n_partitions: int = N_PARTITIONS) -> int:
    """Stable partition assignment by seeded hash of (user, item)."""
    digest = hashlib.sha256(f"{seed}|{user_id}|{item_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % n_partitions


@dataclasses.dataclass(frozen=True)
class PredictionRecord:
    user_id: int
    item_id: int
    p: float
    y: int
    is_new: bool
    is_limited: bool
    partition_id: int


# ----------------------------------------------------------------------
# scalar metrics


def auc(records: Sequence[PredictionRecord]) -> float | None:
    """Probability a random positive outranks a random negative, ties 0.5.

    Undefined (None) when either class is missing.
    """
    if not records:
        return None
    p = np.array([r.p for r in records])
    y = np.array([r.y for r in records])
    return auc_from_arrays(p, y)


def auc_from_arrays(p: np.ndarray, y: np.ndarray) -> float | None:
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(p.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(p, method="average")
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def gauc(records: Sequence[PredictionRecord]) -> float | None:
    """Impression-weighted mean of per-user AUCs.

    Users with single-class impressions are excluded from the numerator
    and the denominator.
    """
    by_user: dict[int, list[PredictionRecord]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    weighted = 0.0
    weight = 0
    for user_records in by_user.values():
        a = auc(user_records)
        if a is None:
            continue
        weighted += len(user_records) * a
        weight += len(user_records)
    if weight == 0:
        return None
    return weighted / weight


def rela_impr(auc_measured: float, auc_base: float) -> float | None:
    """Relative improvement in percent, normalized by the distance of the
    base model from random guessing (0.5).  Undefined at base == 0.5."""
    if auc_base == 0.5:
        return None
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def pcoc(records: Sequence[PredictionRecord]) -> float | None:
    """Predicted clicks over observed clicks; undefined with zero clicks."""
    clicks = sum(r.y for r in records)
    if clicks == 0:
        return None
    return sum(r.p for r in records) / clicks


def calibration_error(pcoc_value: float) -> float:
    """Asymmetric per-partition error: pcoc-1 at or above 1, 1/pcoc-1
    below, so over- and under-prediction by the same factor score the
    same."""
    if pcoc_value >= 1.0:
        return pcoc_value - 1.0
    return 1.0 / pcoc_value - 1.0


def pcoc_by_partition(records: Sequence[PredictionRecord],
                      n_partitions: int = N_PARTITIONS
                      ) -> dict[int, float | None]:
    parts: dict[int, list[PredictionRecord]] = {
        i: [] for i in range(n_partitions)}
    for r in records:
        parts[r.partition_id % n_partitions].append(r)
    return {i: pcoc(rs) for i, rs in parts.items()}


def cal_n(records: Sequence[PredictionRecord],
          n_partitions: int = N_PARTITIONS) -> tuple[float | None, int]:
    """Root mean square of per-partition calibration errors.

    Clickless partitions are excluded; the returned tuple is
    (value or None, number of partitions counted).
    """
    per_part = pcoc_by_partition(records, n_partitions)
    errors = [calibration_error(v) for v in per_part.values()
              if v is not None]
    if not errors:
        return None, 0
    value = math.sqrt(sum(e * e for e in errors) / len(errors))
    return value, len(errors)


def partition_aucs(records: Sequence[PredictionRecord],
                   n_partitions: int = N_PARTITIONS) -> list[float]:
    """AUC per partition, skipping partitions without both classes."""
    parts: dict[int, list[PredictionRecord]] = {
        i: [] for i in range(n_partitions)}
    for r in records:
        parts[r.partition_id % n_partitions].append(r)
    out = []
    for i in range(n_partitions):
        a = auc(parts[i])
        if a is not None:
            out.append(a)
    return out


def paired_partition_ttest(aucs_a: Sequence[float],
                           aucs_b: Sequence[float]) -> float | None:
    """Two-sided paired t-test p-value over matched partition AUCs."""
    if len(aucs_a) != len(aucs_b) or len(aucs_a) < 2:
        return None
    if np.allclose(aucs_a, aucs_b):
        return 1.0
    return float(stats.ttest_rel(aucs_a, aucs_b).pvalue)


# ----------------------------------------------------------------------
# grouped report


@dataclasses.dataclass
class GroupMetrics:
    n: int
    n_pos: int
    auc_avg: float | None = None
    auc_std: float | None = None
    auc_partitions: int = 0
    gauc: float | None = None
    pcoc: float | None = None
    cal_n: float | None = None
    cal_partitions: int = 0
    rela_impr_auc: float | None = None
    rela_impr_gauc: float | None = None
    absent: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GroupMetrics":
        return cls(**d)


@dataclasses.dataclass
class MetricReport:
    metadata: dict
    groups: dict[str, GroupMetrics]

    def to_dict(self) -> dict:
        return {"format": "report-v1",
                "metadata": self.metadata,
                "groups": {k: v.to_dict() for k, v in self.groups.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("format") != "report-v1":
            raise MetricsError(f"unsupported report format {d.get('format')!r}")
        return cls(metadata=d["metadata"],
                   groups={k: GroupMetrics.from_dict(v)
                           for k, v in d["groups"].items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))


def group_members(records: Sequence[PredictionRecord],
                  group: str) -> list[PredictionRecord]:
    if group == "overall":
        return list(records)
    if group == "new":
        return [r for r in records if r.is_new]
    if group == "limited":
        return [r for r in records if r.is_limited]
    if group == "multi":
        return [r for r in records if not r.is_limited]
    raise MetricsError(f"unknown group {group!r}")


def grouped_report(records: Sequence[PredictionRecord],
                   baseline: "MetricReport | None" = None,
                   metadata: dict | None = None,
                   n_partitions: int = N_PARTITIONS) -> MetricReport:
    """All metrics per group; AUC reported as mean and std over the
    hash partitions; RelaImpr columns appear per group when a baseline
    report is supplied."""
    meta = dict(metadata or {})
    meta.setdefault("n_partitions", n_partitions)
    meta.setdefault("group_definitions", {
        "new": "item created at most 1 day before the impression",
        "limited": "item with initial stock exactly 1",
        "multi": "item with initial stock greater than 1",
    })
    meta.setdefault("gauc_rule",
                    "single-class users excluded from numerator and denominator")
    meta.setdefault("auc_tie_rule", "tied pairs credited 0.5")
    meta.setdefault("embedding_sharing",
                    "target and sequence items share one id table")
    groups: dict[str, GroupMetrics] = {}
    for name in GROUPS:
        members = group_members(records, name)
        if not members:
            groups[name] = GroupMetrics(n=0, n_pos=0, absent=True,
                                        note="empty group")
            continue
        paucs = partition_aucs(members, n_partitions)
        cal, cal_parts = cal_n(members, n_partitions)
        gm = GroupMetrics(
            n=len(members),
            n_pos=sum(r.y for r in members),
            auc_avg=float(np.mean(paucs)) if paucs else None,
            auc_std=float(np.std(paucs)) if paucs else None,
            auc_partitions=len(paucs),
            gauc=gauc(members),
            pcoc=pcoc(members),
            cal_n=cal,
            cal_partitions=cal_parts,
        )
        if baseline is not None:
            base_gm = baseline.groups.get(name)
            if base_gm is not None and not base_gm.absent:
                if gm.auc_avg is not None and base_gm.auc_avg is not None:
                    gm.rela_impr_auc = rela_impr(gm.auc_avg, base_gm.auc_avg)
                if gm.gauc is not None and base_gm.gauc is not None:
                    gm.rela_impr_gauc = rela_impr(gm.gauc, base_gm.gauc)
        groups[name] = gm
    return MetricReport(metadata=meta, groups=groups)


# ----------------------------------------------------------------------
# prediction files

PREDICTION_FIELDS = ("user_id", "item_id", "p", "y", "is_new", "is_limited",
                     "partition_id")
PREDICTION_HEADER = "#predictions-v1\t" + "\t".join(PREDICTION_FIELDS)


def write_predictions(records: Iterable[PredictionRecord], path: str | Path,
                      meta: dict | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(PREDICTION_HEADER + "\n")
        if meta:
            pairs = "\t".join(f"{k}={meta[k]}" for k in sorted(meta))
            fh.write(f"#meta\t{pairs}\n")
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.p!r}\t{r.y}\t"
                     f"{int(r.is_new)}\t{int(r.is_limited)}\t"
                     f"{r.partition_id}\n")


def read_predictions(path: str | Path
                     ) -> tuple[list[PredictionRecord], dict]:
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"prediction file not found: {path}")
    records: list[PredictionRecord] = []
    meta: dict = {}
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != PREDICTION_HEADER:
            raise MetricsError(f"{path}: unrecognized prediction header")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#meta\t"):
                for pair in line.split("\t")[1:]:
                    k, _, v = pair.partition("=")
                    meta[k] = v
                continue
            parts = line.split("\t")
            if len(parts) != len(PREDICTION_FIELDS):
                raise MetricsError(
                    f"line {lineno}: expected {len(PREDICTION_FIELDS)} "
                    f"fields, got {len(parts)}")
            try:
                records.append(PredictionRecord(
                    user_id=int(parts[0]), item_id=int(parts[1]),
                    p=float(parts[2]), y=int(parts[3]),
                    is_new=bool(int(parts[4])),
                    is_limited=bool(int(parts[5])),
                    partition_id=int(parts[6])))
            except ValueError as exc:
                raise MetricsError(f"line {lineno}: {exc}") from exc
    return records, meta


# ----------------------------------------------------------------------
# rendering


def _fmt(x: float | None, digits: int = 4) -> str:
    if x is None:
        return "-"
    return f"{x:.{digits}f}"


def _fmt_pct(x: float | None) -> str:
    if x is None:
        return "-"
    return f"{x:+.2f}%"


def render_report(report: MetricReport, title: str = "") -> str:
    """Fixed-width human-readable table."""
    lines = []
    if title:
        lines.append(title)
    header = (f"{'group':<9}{'n':>8}{'pos':>7}{'AUC':>9}{'std':>8}"
              f"{'RI':>9}{'GAUC':>9}{'RI':>9}{'PCOC':>9}{'Cal-N':>10}")
    lines.append(header)
    lines.append("-" * len(header))
    for name in GROUPS:
        gm = report.groups.get(name)
        if gm is None:
            continue
        if gm.absent:
            lines.append(f"{name:<9}{'absent: ' + gm.note}")
            continue
        lines.append(
            f"{name:<9}{gm.n:>8}{gm.n_pos:>7}{_fmt(gm.auc_avg):>9}"
            f"{_fmt(gm.auc_std):>8}{_fmt_pct(gm.rela_impr_auc):>9}"
            f"{_fmt(gm.gauc):>9}{_fmt_pct(gm.rela_impr_gauc):>9}"
            f"{_fmt(gm.pcoc):>9}{_fmt(gm.cal_n, 5):>10}")
    interesting = ("arch", "config_hash", "dataset_hash", "baseline")
    extras = [f"{k}={report.metadata[k]}" for k in interesting
              if k in report.metadata]
    if extras:
        lines.append("")
        lines.append("  ".join(extras))
    return "\n".join(lines) + "\n"


def render_attention_table(table_dict: dict) -> str:
    """2x2 mean pre-softmax attention scores (rows: target stock type,
    columns: sequence-item stock type)."""
    corner = "target / seq"
    lines = ["attention scores (pre-softmax means)",
             f"{corner:<16}{'multi':>12}{'limited':>12}"]
    for t in ("multi", "limited"):
        cells = []
        for s in ("multi", "limited"):
            cell = table_dict.get(f"{t}->{s}", {})
            mean = cell.get("mean")
            cells.append("absent" if mean is None else f"{mean:.4f}")
        lines.append(f"{t:<16}{cells[0]:>12}{cells[1]:>12}")
    return "\n".join(lines) + "\n"
