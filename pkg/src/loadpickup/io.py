"""Network files (JSON) and run reports."""

from __future__ import annotations

import io as _io
import json
import math
import re
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema

from .network import Mode, Network, per_unit_ingest, to_engineering, validate_network

PathLike = Union[str, Path]

TABLE_COLUMNS = (
    "Iteration number",
    "Accumulated modeling and solving time (s)",
    "Objective function value",
    "E_p^m (%)",
    "E_q^m (%)",
)


class NetworkFileError(ValueError):
    """Unreadable, schema-invalid or physically invalid network file."""

    def __init__(self, path: str, problems: list[str]):
        super().__init__(f"{path}:\n  " + "\n  ".join(problems))
        self.path = path
        self.problems = problems


def schema() -> dict:
    text = resources.files("loadpickup").joinpath("data/network.schema.json").read_text()
    return json.loads(text)


def fixture_path(name: str = "fixture13.json") -> Path:
    return Path(str(resources.files("loadpickup").joinpath(f"data/{name}")))


def _line_of_item(text: str, section: str, index: int) -> Optional[int]:
    """Line where item ``index`` of the top-level array ``section`` starts."""
    m = re.search(rf'"{section}"\s*:\s*\[', text)
    if not m:
        return None
    depth, count, pos = 0, -1, m.end()
    while pos < len(text):
        ch = text[pos]
        if ch == '"':
            pos += 1
            while pos < len(text) and text[pos] != '"':
                pos += 2 if text[pos] == "\\" else 1
        elif ch in "[{":
            if depth == 0:
                count += 1
                if count == index:
                    return text.count("\n", 0, pos) + 1
            depth += 1
        elif ch in "]}":
            if depth == 0:
                return None
            depth -= 1
        pos += 1
    return None


def _where(text: str, path) -> str:
    parts = list(path)
    field = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in parts).lstrip(".")
    line = None
    if len(parts) >= 2 and parts[0] in ("buses", "feeders") and isinstance(parts[1], int):
        line = _line_of_item(text, parts[0], parts[1])
    field = field or "<document>"
    return f"line {line}, field {field}" if line else f"field {field}"


def check_document(doc: Any, text: str = "") -> list[str]:
    """Schema and identifier problems of a parsed document."""
    problems = []
    validator = jsonschema.Draft202012Validator(schema())
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        problems.append(f"{_where(text, err.absolute_path)}: {err.message}")
    if problems or not isinstance(doc, dict):
        return problems
    for section in ("buses", "feeders"):
        seen: dict[str, int] = {}
        for k, item in enumerate(doc[section]):
            key = str(item["id"])
            if key in seen:
                problems.append(f"{_where(text, [section, k, 'id'])}: duplicate "
                                f"{section[:-1] if section == 'feeders' else 'bus'} id {key!r} "
                                f"(first defined as item {seen[key]})")
            else:
                seen[key] = k
    return problems


def parse_network(text: str, origin: str = "<string>") -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFileError(origin, [f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    problems = check_document(doc, text)
    if problems:
        raise NetworkFileError(origin, problems)
    try:
        net = per_unit_ingest(doc)
    except ValueError as exc:
        raise NetworkFileError(origin, [str(exc)]) from None
    report = validate_network(net)
    if not report.ok:
        raise NetworkFileError(origin, [str(v) for v in report])
    return net


def load_network(path: PathLike) -> Network:
    """Read, check, convert to per-unit and validate a network file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise NetworkFileError(str(path), [exc.strerror or str(exc)]) from None
    return parse_network(text, str(path))


def dump_network(net: Network, path: Optional[PathLike] = None) -> str:
    """Serialize in per-unit so a reload reproduces ``net`` exactly."""
    doc = to_engineering(net, impedance="pu", current="pu")
    text = json.dumps(doc, indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# ------------------------------------------------------------------ reports

def _clean(obj: Any) -> Any:
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def report_document(report, timing: bool = True) -> dict:
    doc = report.as_dict(timing=timing)
    doc["summary_table"] = summary_rows(report, timing=timing)
    if report.config.mode is Mode.RESTORATION and report.final is not None and report.final.feasible:
        doc["restoration_counts"] = restoration_counts(report)
    return _clean(doc)


def report_json(report, timing: bool = True) -> str:
    return json.dumps(report_document(report, timing), sort_keys=True, indent=2) + "\n"


def summary_rows(report, timing: bool = True) -> list[list]:
    rows = []
    acc = 0.0
    for rec in report.iterations:
        acc += rec.wall_time
        rows.append([rec.g, round(acc, 4) if timing else None, rec.solution.objective,
                     rec.e_p_mean, rec.e_q_mean])
    return rows


def restoration_counts(report) -> dict:
    sol = report.final
    forest_trees = report.validation.forest.n_trees if report.validation else None
    return {
        "restored_feeders": len(sol.energized_feeders),
        "restored_buses": len(sol.energized_buses),
        "islands": forest_trees,
        "served_load_p": math.fsum(sol.p_load[b] for b in sol.energized_buses),
    }


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return "nan" if not math.isfinite(x) else f"{x:.6f}"
    return str(x)


def summary_table(report, timing: bool = True) -> str:
    """Tab-separated per-iteration table."""
    out = _io.StringIO()
    out.write("\t".join(TABLE_COLUMNS) + "\n")
    for row in summary_rows(report, timing):
        out.write("\t".join(_fmt(v) for v in row) + "\n")
    if report.config.mode is Mode.RESTORATION and report.final is not None and report.final.feasible:
        counts = restoration_counts(report)
        out.write("\nThe number of restored feeders\tThe number of restored buses\tThe number of islands\n")
        out.write(f"{counts['restored_feeders']}\t{counts['restored_buses']}\t{_fmt(counts['islands'])}\n")
    return out.getvalue()


def write_report(report, path: PathLike, fmt: str = "json", timing: bool = True) -> None:
    """Write the report as ``json`` or the tab-separated ``table``."""
    if fmt == "json":
        text = report_json(report, timing)
    elif fmt == "table":
        text = summary_table(report, timing)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text)
