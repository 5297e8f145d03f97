"""
CSV reports and run manifests.

Every report is a CSV with a fixed header; values are written as already
formatted strings so reruns produce byte-identical files.  `summarize`
folds the verify.csv files under a run directory into one table.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from eaaw.errors import FormatError, PathError

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
VERIFY_FIELDS = (
    "case", "trigger_kind", "benign_acc", "benign_ppl", "k", "wsr", "chi2", "log10_p", "alpha", "decision",
)
SUMMARY_FIELDS = ("case", "trigger_kind", "runs", "benign_acc", "benign_ppl", "log10_p", "wsr")


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Mapping[str, str]]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(header), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: row[key] for key in header})
    target.write_text(buffer.getvalue())
    return target


def read_csv(path: str | Path, header: Sequence[str]) -> list[dict[str, str]]:
    """Rows of a report, checking the header and every row's width."""
    source = Path(path)
    if not source.is_file():
        raise PathError(f"report not found: {source}")
    reader = csv.reader(io.StringIO(source.read_text()))
    rows = list(reader)
    if not rows or tuple(rows[0]) != tuple(header):
        raise FormatError(f"{source}: expected header {','.join(header)}", line=1)
    records = []
    for lineno, values in enumerate(rows[1:], start=2):
        if not values:
            continue
        if len(values) != len(header):
            raise FormatError(f"{source}: expected {len(header)} fields, got {len(values)}", line=lineno)
        records.append(dict(zip(header, values)))
    return records


def format_table(header: Sequence[str], rows: Sequence[Mapping[str, str]]) -> str:
    """Fixed-width text table for stdout."""
    widths = [max([len(h)] + [len(str(r[h])) for r in rows]) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.extend("  ".join(str(r[h]).ljust(w) for h, w in zip(header, widths)) for r in rows)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def _as_float(value: str, source: Path, column: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise FormatError(f"{source}: column {column} is not a number: {value!r}") from exc


def summarize(run_dir: str | Path) -> list[dict[str, str]]:
    """Mean benign accuracy, perplexity, log10 p and WSR per (case, trigger kind) over all runs.

    benign_ppl is averaged over the rows that carry one and left blank when none do.
    """
    root = Path(run_dir)
    if not root.is_dir():
        raise PathError(f"run directory not found: {root}")
    grouped: dict[tuple[str, str], list[tuple[float, float, float]]] = {}
    perplexities: dict[tuple[str, str], list[float]] = {}
    for path in sorted(root.rglob("verify.csv")):
        for row in read_csv(path, VERIFY_FIELDS):
            group = (row["case"], row["trigger_kind"])
            grouped.setdefault(group, []).append((
                _as_float(row["benign_acc"], path, "benign_acc"),
                _as_float(row["log10_p"], path, "log10_p"),
                _as_float(row["wsr"], path, "wsr"),
            ))
            if row["benign_ppl"]:
                perplexities.setdefault(group, []).append(_as_float(row["benign_ppl"], path, "benign_ppl"))
    summary = []
    for group in sorted(grouped):
        values = np.array(grouped[group])
        acc, log10_p, wsr = values.mean(axis=0)
        ppl = perplexities.get(group)
        summary.append({
            "case": group[0],
            "trigger_kind": group[1],
            "runs": str(len(values)),
            "benign_acc": f"{acc:.6f}",
            "benign_ppl": f"{np.mean(ppl):.6f}" if ppl else "",
            "log10_p": f"{log10_p:.6f}",
            "wsr": f"{wsr:.6f}",
        })
    return summary


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION

    def write(self, out_dir: str | Path) -> Path:
        target = Path(out_dir) / "manifest.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        previous = load_manifest(out_dir) if target.is_file() else {}
        artifacts = dict(previous.get("artifacts", {}))
        artifacts.update(self.artifacts)
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "artifacts": dict(sorted(artifacts.items())),
            "tool_version": self.tool_version,
        }
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return target


def load_manifest(out_dir: str | Path) -> dict:
    source = Path(out_dir) / "manifest.json"
    if not source.is_file():
        raise PathError(f"manifest not found: {source}")
    try:
        return json.loads(source.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: invalid JSON: {exc.msg}", line=exc.lineno) from exc
