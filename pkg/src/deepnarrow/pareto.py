"""Pareto dominance, frontiers, DeepNarrow ladders and efficient-alternative search.

Dominance is judged on one cost axis and one quality axis.  ``params`` and
``tflops`` are lower-is-better costs; ``steps_per_s`` is a cost where higher
is better.  All quality axes are higher-is-better (``ppl`` is stored as
negative log-perplexity).
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .config import ModelConfig, ScaledSpec, ScalingOp, normalize_ops, spec_of
from .cost import ParamBreakdown, count_params, train_step_flops
from .runs import REGIONS, RunRecord

COST_AXES = ("params", "tflops", "steps_per_s")
QUALITY_AXES = ("ppl", "glue", "sglue", "squad", "avg")
HIGHER_IS_CHEAPER = {"steps_per_s"}
DEPTH_CAP = 36


class MissingMetricError(ValueError):
    pass


def _check_axes(cost_axis: str, quality_axis: str) -> None:
    if cost_axis not in COST_AXES:
        raise ValueError(f"unknown cost axis {cost_axis!r}; expected one of {COST_AXES}")
    if quality_axis not in QUALITY_AXES:
        raise ValueError(f"unknown quality axis {quality_axis!r}; expected one of {QUALITY_AXES}")


def _value(rec: RunRecord, axis: str) -> float:
    v = rec.get(axis)
    if v is None:
        raise MissingMetricError(f"record {rec.name!r} has no {axis!r} value")
    return v


def effective_cost(rec: RunRecord, cost_axis: str) -> float:
    """Cost oriented so that lower is always cheaper."""
    v = _value(rec, cost_axis)
    return -v if cost_axis in HIGHER_IS_CHEAPER else v


def dominates(a: RunRecord, b: RunRecord, cost_axis: str = "params",
              quality_axis: str = "sglue") -> bool:
    _check_axes(cost_axis, quality_axis)
    ca, cb = effective_cost(a, cost_axis), effective_cost(b, cost_axis)
    qa, qb = _value(a, quality_axis), _value(b, quality_axis)
    return ca <= cb and qa >= qb and (ca < cb or qa > qb)


def dominates_vector(a: RunRecord, b: RunRecord, cost_axes: Sequence[str],
                     quality_axes: Sequence[str]) -> bool:
    """Dominance over several cost and quality axes at once (no better-or-equal trade-offs)."""
    mine = [effective_cost(a, c) for c in cost_axes] + [-_value(a, q) for q in quality_axes]
    theirs = [effective_cost(b, c) for c in cost_axes] + [-_value(b, q) for q in quality_axes]
    return all(x <= y for x, y in zip(mine, theirs)) and any(x < y for x, y in zip(mine, theirs))


@dataclass(frozen=True)
class Frontier:
    cost_axis: str
    quality_axis: str
    members: tuple[RunRecord, ...]
    excluded: tuple[str, ...] = ()

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.members]

    def __contains__(self, name: str) -> bool:
        return name in self.names


def _usable(records: Iterable[RunRecord], axes: Sequence[str]):
    keep, dropped = [], []
    for r in records:
        (keep if all(r.get(a) is not None for a in axes) else dropped).append(r)
    return keep, dropped


def frontier(records: Iterable[RunRecord], cost_axis: str = "params",
             quality_axis: str = "sglue") -> Frontier:
    """Non-dominated records, sorted by ascending cost.

    Records lacking either axis are skipped and listed in ``excluded``.
    Exact ties on both axes are all kept.
    """
    _check_axes(cost_axis, quality_axis)
    usable, dropped = _usable(records, (cost_axis, quality_axis))
    if not usable:
        raise ValueError(f"no records carry both {cost_axis!r} and {quality_axis!r}")

    order = sorted(usable, key=lambda r: (effective_cost(r, cost_axis), -r.get(quality_axis), r.name))
    members: list[RunRecord] = []
    best_cheaper = float("-inf")
    i = 0
    while i < len(order):
        cost = effective_cost(order[i], cost_axis)
        j = i
        while j < len(order) and effective_cost(order[j], cost_axis) == cost:
            j += 1
        group = order[i:j]
        top = group[0].get(quality_axis)
        if top > best_cheaper:
            members.extend(r for r in group if r.get(quality_axis) == top)
        best_cheaper = max(best_cheaper, top)
        i = j
    return Frontier(cost_axis, quality_axis, tuple(members), tuple(r.name for r in dropped))


def vector_frontier(records: Iterable[RunRecord], cost_axes: Sequence[str],
                    quality_axes: Sequence[str]) -> list[RunRecord]:
    usable, _ = _usable(records, tuple(cost_axes) + tuple(quality_axes))
    return [r for r in usable
            if not any(dominates_vector(o, r, cost_axes, quality_axes) for o in usable)]


def recommend_alternatives(target: RunRecord, measured: Iterable[RunRecord],
                           cost_axis: str = "params", quality_axis: str = "sglue") -> list[RunRecord]:
    """Every measured record that dominates ``target``, cheapest first."""
    _check_axes(cost_axis, quality_axis)
    _value(target, cost_axis)
    _value(target, quality_axis)
    better = [r for r in measured
              if r.get(cost_axis) is not None and r.get(quality_axis) is not None
              and dominates(r, target, cost_axis, quality_axis)]
    return sorted(better, key=lambda r: (effective_cost(r, cost_axis), r.name))


@dataclass(frozen=True)
class LadderRung:
    spec: ScaledSpec
    config: ModelConfig
    params: ParamBreakdown
    step_flops: int


def deepnarrow_ladder(start: ModelConfig, layer_values: Sequence[int], cap: int = DEPTH_CAP,
                      batch: int = 1) -> list[LadderRung]:
    """One NL-scaled variant of ``start`` per requested depth.

    Depth gains flatten out around 32-36 layers, so values above ``cap`` are refused.
    """
    values = list(layer_values)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"layer values must be strictly increasing, got {values}")
    for v in values:
        if v <= start.depth:
            raise ValueError(f"{v} layers does not deepen {start.name} (depth {start.depth})")
        if v > cap:
            raise ValueError(
                f"{v} layers exceeds the depth cap of {cap}; Pareto gains from depth "
                f"converge at 32 to 36 layers")
    base_spec = spec_of(start)
    rungs = []
    for v in values:
        spec = ScaledSpec(base_spec.base, normalize_ops(base_spec.ops + (ScalingOp("NL", v),)))
        cfg = spec.resolve()
        rungs.append(LadderRung(spec, cfg, count_params(cfg), train_step_flops(cfg, batch)))
    return rungs


def knob_signature(rec: RunRecord) -> str:
    """Knobs a record's code applies, e.g. ``NL`` or ``EL+FF``; ``canonical`` if none."""
    ops = rec.spec.ops
    return "+".join(sorted({op.knob for op in ops})) if ops else "canonical"


@dataclass
class RegionReport:
    frontiers: dict[str, Frontier]
    on_frontier: dict[str, list[str]] = field(default_factory=dict)
    off_frontier: dict[str, list[str]] = field(default_factory=dict)
    non_transferring: list[str] = field(default_factory=list)


def region_frontiers(records: Iterable[RunRecord], region_tags: Optional[Mapping[str, str]] = None,
                     cost_axis: str = "params", quality_axis: str = "sglue") -> RegionReport:
    """Independent frontiers per compute region plus a knob-transfer summary.

    ``on_frontier[knob]`` lists regions where a record using that knob sits on
    the frontier; ``off_frontier[knob]`` lists regions where the knob was tried
    but no such record made the frontier.  Knobs in both are non-transferring.
    """
    grouped: dict[str, list[RunRecord]] = defaultdict(list)
    for r in records:
        tag = region_tags.get(r.name) if region_tags is not None else r.compute_region
        if tag is None or tag not in REGIONS:
            raise ValueError(f"record {r.name!r} has unknown region tag {tag!r}")
        grouped[tag].append(r)

    frontiers = {reg: frontier(grouped[reg], cost_axis, quality_axis)
                 for reg in REGIONS if reg in grouped}
    on: dict[str, list[str]] = defaultdict(list)
    off: dict[str, list[str]] = defaultdict(list)
    for reg, fr in frontiers.items():
        names = set(fr.names)
        tried: dict[str, bool] = {}
        for r in grouped[reg]:
            k = knob_signature(r)
            tried[k] = tried.get(k, False) or r.name in names
        for k, hit in tried.items():
            (on if hit else off)[k].append(reg)
    non_transferring = sorted(k for k in on if k in off)
    return RegionReport(frontiers, dict(on), dict(off), non_transferring)


def frontier_csv(records: Iterable[RunRecord], fr: Frontier) -> str:
    """CSV of (name, code, cost, quality, on_frontier) for every usable record."""
    usable, _ = _usable(records, (fr.cost_axis, fr.quality_axis))
    members = set(fr.names)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "code", "cost", "quality", "on_frontier"])
    for r in sorted(usable, key=lambda r: (effective_cost(r, fr.cost_axis), r.name)):
        w.writerow([r.name, r.code, repr(r.get(fr.cost_axis)), repr(r.get(fr.quality_axis)),
                    str(r.name in members).lower()])
    return buf.getvalue()


def records_from_frontier_csv(text: str, cost_axis: str, quality_axis: str) -> list[RunRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        cost = float(row["cost"])
        if cost_axis == "params":
            cost = int(cost)
        out.append(RunRecord(name=row["name"], code=row["code"],
                             **{cost_axis: cost, quality_axis: float(row["quality"])}))
    return out


def _fmt_params(n: Optional[int]) -> str:
    if n is None:
        return ""
    if n >= 1e9:
        return f"{n / 1e9:.1f}B"
    return f"{n / 1e6:.0f}M"


def _fmt(v) -> str:
    return "" if v is None else f"{v:g}"


def markdown_table(records: Iterable[RunRecord], fr: Optional[Frontier] = None) -> str:
    """Markdown table in the published column order; frontier members are starred."""
    members = set(fr.names) if fr else set()
    lines = ["| Model | #Params | #TFlops | Steps/s | Ppl (C4) | GLUE | SGLUE | SQuAD | AVG |",
             "|---|---|---|---|---|---|---|---|---|"]
    for r in records:
        name = f"{r.name} *" if r.name in members else r.name
        cells = [name, _fmt_params(r.params), _fmt(r.tflops), _fmt(r.steps_per_s), _fmt(r.ppl),
                 _fmt(r.glue), _fmt(r.sglue), _fmt(r.squad), _fmt(r.avg)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
