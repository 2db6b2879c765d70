# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Exact binomial intervals, bootstrap intervals and report emission.

Every report object handed to emit_report() provides:

    to_dict()   full-fidelity plain data, written as .json
    rows()      flat list of dicts, written as .csv
    curves()    list of Curve, drawn into .svg (may be empty)

plus a `metadata` mapping (tool_version, config_digest, checkpoint_digest,
seed, ...) that is embedded in every emitted file.
"""

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

import matplotlib
import numpy as np
from defaults import Defaults
from errors import AnalysisError
from scipy.stats import beta

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "patchlab"
matplotlib.rcParams["svg.fonttype"] = "none"

REPORT_FORMATS = ("json", "csv", "svg")
PROVENANCE_KEYS = ("tool_version", "config_digest", "checkpoint_digest", "seed")


@dataclass(frozen=True)
class BinomialSummary:
    successes: int
    trials: int
    estimate: float
    lower: float
    upper: float
    level: float

    def to_dict(self):
        return asdict(self)


def _check_level(level):
    if not 0.0 < level < 1.0:
        raise AnalysisError(f"confidence level must be in (0, 1), got {level}")


def exact_binomial_ci(successes, trials, level=Defaults.CONFIDENCE_LEVEL):
    """Clopper-Pearson interval; the boundary cases use their closed forms."""
    _check_level(level)
    if int(trials) != trials or trials < 1:
        raise AnalysisError(f"trials must be a positive integer, got {trials}")
    if int(successes) != successes or not 0 <= successes <= trials:
        raise AnalysisError(f"successes must be an integer in 0..{trials}, got {successes}")
    s, n = int(successes), int(trials)
    tail = (1.0 - level) / 2.0
    if s == 0:
        lower = 0.0
    elif s == n:
        lower = tail ** (1.0 / n)
    else:
        lower = float(beta.ppf(tail, s, n - s + 1))
    if s == n:
        upper = 1.0
    elif s == 0:
        upper = 1.0 - tail ** (1.0 / n)
    else:
        upper = float(beta.ppf(1.0 - tail, s + 1, n - s))
    return BinomialSummary(s, n, s / n, lower, upper, level)


@dataclass(frozen=True)
class Interval:
    estimate: float
    lower: float
    upper: float
    level: float
    resamples: int


def bootstrap_ci(outcomes, statistic=np.mean, resamples=Defaults.BOOTSTRAP_RESAMPLES,
                 seed=Defaults.SEED, level=Defaults.CONFIDENCE_LEVEL, chunk=1000):
    """
    Percentile bootstrap. statistic is called as statistic(samples, axis=1)
    on a (chunk, n) array of resampled outcomes.
    """
    _check_level(level)
    data = np.asarray(outcomes, dtype=np.float64)
    if data.size == 0:
        raise AnalysisError("bootstrap needs at least one outcome")
    if resamples < 100:
        raise AnalysisError(f"bootstrap needs at least 100 resamples, got {resamples}")
    rng = np.random.default_rng(seed)
    n = data.shape[0]
    stats = []
    done = 0
    while done < resamples:
        size = min(chunk, resamples - done)
        idx = rng.integers(0, n, size=(size, n))
        stats.append(np.asarray(statistic(data[idx], axis=1), dtype=np.float64))
        done += size
    stats = np.concatenate(stats)
    tail = (1.0 - level) / 2.0
    lower, upper = np.percentile(stats, [100.0 * tail, 100.0 * (1.0 - tail)])
    return Interval(float(statistic(data, axis=0)), float(lower), float(upper), level, resamples)


@dataclass
class Curve:
    name: str
    xs: list
    ys: list
    step: bool = True
    xlabel: str = ""
    ylabel: str = "rate"


@dataclass
class GridPoint:
    """Outcome counts at one grid point; `goal` names the outcome counted as success."""
    key: dict
    correct: int = 0
    bug: int = 0
    incoherent: int = 0
    goal: str = "correct"
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.correct, self.bug, self.incoherent) < 0:
            raise AnalysisError(f"negative outcome count at {self.key}")

    @property
    def trials(self):
        return self.correct + self.bug + self.incoherent

    @property
    def successes(self):
        return getattr(self, self.goal)

    def rate(self, outcome=None):
        if self.trials == 0:
            return None
        return getattr(self, outcome or self.goal) / self.trials

    def summary(self, level=Defaults.CONFIDENCE_LEVEL):
        if self.trials == 0:
            return None
        return exact_binomial_ci(self.successes, self.trials, level)

    def add(self, outcome):
        setattr(self, outcome, getattr(self, outcome) + 1)


@dataclass
class SweepReport:
    protocol: str
    points: list
    metadata: dict = field(default_factory=dict)
    level: float = Defaults.CONFIDENCE_LEVEL
    axis: str = ""
    plotted: tuple = ()

    def point(self, **key):
        for p in self.points:
            if all(p.key.get(k) == v for k, v in key.items()):
                return p
        return None

    def rates(self):
        return [p.rate() for p in self.points]

    def rows(self):
        out = []
        for p in self.points:
            ci = p.summary(self.level)
            row = dict(p.key)
            row.update({
                "goal": p.goal,
                "trials": p.trials,
                "correct": p.correct,
                "bug": p.bug,
                "incoherent": p.incoherent,
                "success_rate": p.rate(),
                "ci_lower": None if ci is None else ci.lower,
                "ci_upper": None if ci is None else ci.upper,
            })
            out.append(row)
        return out

    def to_dict(self):
        rows = self.rows()
        for row, p in zip(rows, self.points):
            if p.detail:
                row["detail"] = p.detail
        return {
            "schema": "patchlab.sweep/1",
            "protocol": self.protocol,
            "axis": self.axis,
            "plotted": list(self.plotted),
            "level": self.level,
            "metadata": self.metadata,
            "points": rows,
        }

    @staticmethod
    def from_dict(d):
        points = []
        for row in d["points"]:
            key = {k: v for k, v in row.items() if k not in _POINT_FIELDS}
            points.append(GridPoint(key=key, correct=row["correct"], bug=row["bug"], incoherent=row["incoherent"],
                                    goal=row["goal"], detail=row.get("detail", {})))
        return SweepReport(protocol=d["protocol"], points=points, metadata=d["metadata"], level=d["level"], axis=d["axis"],
                           plotted=tuple(d.get("plotted", ())))

    def curves(self):
        if not self.axis or not self.points:
            return []
        pts = [p for p in self.points if p.trials > 0 and isinstance(p.key.get(self.axis), (int, float))]
        out = []
        if self.plotted:
            for outcome in self.plotted:
                out.append(Curve(name=f"{outcome} rate", xs=[p.key[self.axis] for p in pts],
                                 ys=[p.rate(outcome) for p in pts], xlabel=self.axis))
            return out
        for goal in sorted({p.goal for p in pts}):
            sel = [p for p in pts if p.goal == goal]
            out.append(Curve(name=f"{self.protocol} {goal}", xs=[p.key[self.axis] for p in sel],
                             ys=[p.rate() for p in sel], xlabel=self.axis))
        return out


_POINT_FIELDS = {"goal", "trials", "correct", "bug", "incoherent", "success_rate", "ci_lower", "ci_upper", "detail"}


@dataclass
class TableReport:
    """Plain table report for non-sweep artifacts (lens curves, scores, feature tables)."""
    kind: str
    table: list
    metadata: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    plots: list = field(default_factory=list)

    def rows(self):
        return self.table

    def to_dict(self):
        return {"schema": f"patchlab.{self.kind}/1", "metadata": self.metadata, "rows": self.table, **self.extra}

    def curves(self):
        return self.plots


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value, sort_keys=True)
    return value


def render_json(report):
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, default=str) + "\n"


def render_csv(report, metadata):
    buf = io.StringIO()
    for key in sorted(metadata):
        value = metadata[key]
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        buf.write(f"# {key}: {value}\n")
    rows = report.rows()
    columns = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_cell(row.get(k)) for k in columns})
    return buf.getvalue()


def render_svg(report, path, metadata):
    curves = report.curves()
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        if c.step:
            ax.step(c.xs, c.ys, where="post", marker="o", label=c.name)
        else:
            ax.plot(c.xs, c.ys, marker="o", label=c.name)
    if curves:
        ax.set_xlabel(curves[0].xlabel)
        ax.set_ylabel(curves[0].ylabel)
        ax.legend(loc="best")
    ax.set_title(getattr(report, "protocol", None) or getattr(report, "kind", ""))
    description = " ".join(f"{k}={metadata.get(k)}" for k in PROVENANCE_KEYS)
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    plt.close(fig)


def emit_report(report, formats, path):
    """
    Write report to path + '.json' / '.csv' / '.svg'. The svg is skipped
    when the report has no curves. Returns the written file names.
    """
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise AnalysisError(f"unknown report formats: {', '.join(sorted(unknown))}")
    metadata = dict(getattr(report, "metadata", {}) or {})
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    written = []
    for fmt in REPORT_FORMATS:
        if fmt not in formats:
            continue
        target = f"{path}.{fmt}"
        if fmt == "json":
            with open(target, "wt") as f:
                f.write(render_json(report))
        elif fmt == "csv":
            with open(target, "wt", newline="") as f:
                f.write(render_csv(report, metadata))
        else:
            if not report.curves():
                continue
            render_svg(report, target, metadata)
        written.append(target)
    return written