"""Run records and the runs/manifest file formats."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from .config import CodeParseError, ScaledSpec, parse_code

RUNS_HEADER = ("name", "code", "params", "tflops", "steps_per_s", "ppl",
               "glue", "sglue", "squad", "avg", "region")
SCORE_FIELDS = ("glue", "sglue", "squad", "avg")
REGIONS = ("small", "base", "large", "xl", "xxl")
AVG_TOLERANCE = 0.05


class RunsValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RunRecord:
    """One measured configuration.  ``ppl`` is negative log-perplexity (higher is better)."""

    name: str
    code: str
    params: Optional[int] = None
    tflops: Optional[float] = None
    steps_per_s: Optional[float] = None
    ppl: Optional[float] = None
    glue: Optional[float] = None
    sglue: Optional[float] = None
    squad: Optional[float] = None
    avg: Optional[float] = None
    compute_region: Optional[str] = None

    def __post_init__(self):
        if self.params is not None and self.params < 1:
            raise RunsValidationError(f"{self.name}: params must be >= 1")
        for f in SCORE_FIELDS:
            v = getattr(self, f)
            if v is not None and not 0 <= v <= 100:
                raise RunsValidationError(f"{self.name}: {f}={v} outside [0, 100]")
        if self.compute_region is not None and self.compute_region not in REGIONS:
            raise RunsValidationError(f"{self.name}: unknown region {self.compute_region!r}")
        parts = (self.glue, self.sglue, self.squad)
        if self.avg is not None and None not in parts:
            mean = sum(parts) / 3
            if abs(mean - self.avg) > AVG_TOLERANCE + 1e-9:
                raise RunsValidationError(
                    f"{self.name}: avg {self.avg} differs from mean(glue, sglue, squad)"
                    f" = {mean:.3f} by more than {AVG_TOLERANCE}")

    def get(self, axis: str):
        if axis == "region":
            return self.compute_region
        return getattr(self, axis)

    @property
    def spec(self) -> ScaledSpec:
        return parse_code(self.code)


_INT_FIELDS = {"params"}
_FLOAT_FIELDS = {"tflops", "steps_per_s", "ppl", "glue", "sglue", "squad", "avg"}


def _parse_cell(col: str, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    if col in _INT_FIELDS:
        return int(raw)
    if col in _FLOAT_FIELDS:
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {raw!r}")
        return v
    return raw


def parse_runs(text: str, source: str = "<string>") -> list[RunRecord]:
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1)
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise RunsValidationError(f"{source}: missing header")
    header_lineno, header = lines[0]
    cols = tuple(c.strip() for c in next(csv.reader([header])))
    if cols != RUNS_HEADER:
        raise RunsValidationError(
            f"{source}:{header_lineno}: header must be {','.join(RUNS_HEADER)}, got {','.join(cols)}")
    records: list[RunRecord] = []
    seen: set[str] = set()
    for lineno, ln in lines[1:]:
        cells = next(csv.reader([ln]))
        if len(cells) != len(RUNS_HEADER):
            raise RunsValidationError(
                f"{source}:{lineno}: expected {len(RUNS_HEADER)} columns, got {len(cells)}")
        try:
            values = {c: _parse_cell(c, v) for c, v in zip(RUNS_HEADER, cells)}
            values["compute_region"] = values.pop("region")
            if not values["name"]:
                raise RunsValidationError("empty name")
            if values["name"] in seen:
                raise RunsValidationError(f"duplicate name {values['name']!r}")
            parse_code(values["code"] or "")
            rec = RunRecord(**values)
        except (ValueError, CodeParseError) as e:
            raise RunsValidationError(f"{source}:{lineno}: {e}") from None
        seen.add(rec.name)
        records.append(rec)
    return records


def load_runs(path: str | os.PathLike | None = None) -> list[RunRecord]:
    """Load and validate a runs file; ``None`` loads the bundled reference table."""
    if path is None:
        return parse_runs(bundled_runs_text(), "published_runs.csv")
    p = Path(path)
    return parse_runs(p.read_text(encoding="utf-8"), str(p))


def bundled_runs_text() -> str:
    return resources.files("deepnarrow.data").joinpath("published_runs.csv").read_text(encoding="utf-8")


def _format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_runs(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNS_HEADER)
    for r in records:
        w.writerow([_format_cell(r.get(c)) for c in RUNS_HEADER])
    return buf.getvalue()


def write_runs(records: Iterable[RunRecord], path: str | os.PathLike) -> None:
    Path(path).write_text(format_runs(records), encoding="utf-8")


def find_record(records: Iterable[RunRecord], name: str) -> RunRecord:
    for r in records:
        if r.name == name:
            return r
    for r in records:
        if r.name.lower() == name.lower() or r.code.upper() == name.upper():
            return r
    raise KeyError(f"no run named {name!r}")


# checkpoint manifests

@dataclass(frozen=True)
class ManifestEntry:
    name: str
    code: str
    url: str
    pretrain_steps: int
    spec: ScaledSpec


def load_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Read a JSON-lines manifest of released checkpoints."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                obj = json.loads(line)
                name, code = obj["name"], obj["code"]
                url, steps = obj["url"], int(obj["pretrain_steps"])
                spec = parse_code(code)
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise RunsValidationError(f"{path}:{lineno}: malformed entry ({e})") from None
            except ValueError as e:
                raise RunsValidationError(f"{path}:{lineno}: bad code: {e}") from None
            if name in seen:
                raise RunsValidationError(f"{path}:{lineno}: duplicate name {name!r}")
            seen.add(name)
            entries.append(ManifestEntry(name, code, url, steps, spec))
    return entries
