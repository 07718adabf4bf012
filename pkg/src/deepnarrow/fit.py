"""Power-law fits of performance against compute, and upstream/downstream inversions."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .runs import RunRecord

DOWNSTREAM_TASKS = ("glue", "sglue", "squad")
NEIGHBORHOOD_RATIO = 2.0


@dataclass(frozen=True)
class PowerLawFit:
    """performance = a * compute ** b, fitted by least squares in log-log space."""

    a: float
    b: float
    r_squared: float
    n_points: int
    axes: tuple[str, str] = ("compute", "performance")

    def predict(self, x):
        return self.a * np.asarray(x, dtype=float) ** self.b

    def to_dict(self) -> dict:
        d = asdict(self)
        d["axes"] = list(self.axes)
        return d


def fit_power_law(points: Iterable[tuple[float, float]],
                  axes: tuple[str, str] = ("compute", "performance")) -> PowerLawFit:
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least 2 (compute, performance) points")
    if np.any(pts <= 0):
        raise ValueError("power laws need strictly positive compute and performance values")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("all compute values are equal; exponent is undetermined")
    b = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - b * x.mean())
    resid = y - (intercept + b * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(resid @ resid)
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    r2 = min(1.0, max(0.0, r2))
    return PowerLawFit(float(np.exp(intercept)), b, r2, len(pts), tuple(axes))


def _performance(rec: RunRecord, axis: str) -> float:
    v = rec.get(axis)
    # negative log-perplexity -> positive loss proxy
    return -v if axis == "ppl" else v


def fit_runs(runs: Sequence[RunRecord], compute_axis: str = "params",
             performance_axis: str = "ppl") -> PowerLawFit:
    usable = [r for r in runs if r.get(compute_axis) is not None and r.get(performance_axis) is not None]
    label = "loss" if performance_axis == "ppl" else performance_axis
    return fit_power_law([(r.get(compute_axis), _performance(r, performance_axis)) for r in usable],
                         axes=(compute_axis, label))


@dataclass(frozen=True)
class FitComparison:
    upstream: PowerLawFit
    downstream: PowerLawFit

    @property
    def r_squared_gap(self) -> float:
        return self.upstream.r_squared - self.downstream.r_squared

    def to_dict(self) -> dict:
        return {"upstream": self.upstream.to_dict(), "downstream": self.downstream.to_dict(),
                "r_squared_gap": self.r_squared_gap}


def compare_fit_quality(runs: Sequence[RunRecord], compute_axis: str = "params",
                        downstream_axis: str = "sglue") -> FitComparison:
    """Fit upstream loss and a downstream score against the same compute axis."""
    usable = [r for r in runs if all(r.get(a) is not None for a in (compute_axis, "ppl", downstream_axis))]
    if len(usable) < 2:
        raise ValueError(f"need at least 2 records with {compute_axis}, ppl and {downstream_axis}")
    return FitComparison(fit_runs(usable, compute_axis, "ppl"),
                         fit_runs(usable, compute_axis, downstream_axis))


@dataclass(frozen=True)
class Inversion:
    better_upstream: RunRecord
    better_downstream: RunRecord
    upstream_gap: float
    downstream_gaps: dict[str, float]


@dataclass
class InversionReport:
    pairs: list[Inversion] = field(default_factory=list)
    tasks: tuple[str, ...] = DOWNSTREAM_TASKS
    neighborhood_ratio: float = NEIGHBORHOOD_RATIO

    def names(self) -> list[tuple[str, str]]:
        return [(p.better_upstream.name, p.better_downstream.name) for p in self.pairs]

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "neighborhood_ratio": self.neighborhood_ratio,
            "pairs": [
                {"better_upstream": p.better_upstream.name,
                 "better_downstream": p.better_downstream.name,
                 "upstream_gap": p.upstream_gap,
                 "downstream_gaps": p.downstream_gaps}
                for p in self.pairs
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def find_inversions(runs: Sequence[RunRecord], tasks: Sequence[str] = DOWNSTREAM_TASKS,
                    neighborhood_ratio: float = NEIGHBORHOOD_RATIO) -> InversionReport:
    """Pairs of similarly sized runs where better perplexity comes with worse scores on every task.

    Only pairs whose parameter counts are within ``neighborhood_ratio`` of each
    other are compared.
    """
    tasks = tuple(tasks)
    for r in runs:
        missing = [a for a in ("params", "ppl") + tasks if r.get(a) is None]
        if missing:
            raise ValueError(f"record {r.name!r} is missing {', '.join(missing)}")
    pairs = []
    for a, b in itertools.permutations(runs, 2):
        if max(a.params, b.params) > neighborhood_ratio * min(a.params, b.params):
            continue
        if a.ppl > b.ppl and all(a.get(t) < b.get(t) for t in tasks):
            pairs.append(Inversion(a, b, a.ppl - b.ppl, {t: b.get(t) - a.get(t) for t in tasks}))
    return InversionReport(pairs, tasks, neighborhood_ratio)


def plot_series_csv(runs: Sequence[RunRecord], fit: PowerLawFit) -> str:
    """(x, y, predicted) rows for external plotting, on the fit's own axes."""
    compute_axis, perf_label = fit.axes
    perf_axis = "ppl" if perf_label == "loss" else perf_label
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "x", "y", "predicted"])
    for r in runs:
        x, y = r.get(compute_axis), r.get(perf_axis)
        if x is None or y is None:
            continue
        w.writerow([r.name, repr(float(x)), repr(float(_performance(r, perf_axis))),
                    repr(float(fit.predict(x)))])
    return buf.getvalue()
