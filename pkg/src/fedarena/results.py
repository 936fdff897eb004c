"""Result persistence: manifest, per-round records, summary table.

A completed experiment cell is a directory holding

    manifest.json   config hash + code version + resolved config text
    rounds.jsonl    one record per (seed, trajectory, round), append-only
    summary.csv     one row per impact report
    report.json     full reports including wall times

The manifest is written last, so its presence marks the cell complete;
interrupted cells are rerun, never trusted.  Everything except report.json
contains only deterministic fields and reproduces byte-identically when
the same config and seed are rerun (wall times live in report.json only).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os

from . import __version__
from .scenarios import ImpactReport

MANIFEST_NAME = "manifest.json"
ROUNDS_NAME = "rounds.jsonl"
SUMMARY_NAME = "summary.csv"
REPORT_NAME = "report.json"

SUMMARY_COLUMNS = ("ratio", "attack", "defense", "seed", "impact", "psi_clean", "psi_attacked")


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _check_finite(value, context: str):
    if value != value or value in (float("inf"), float("-inf")):
        raise ValueError(f"non-finite value in {context}; refusing to serialize")
    return value


def summary_row(report: ImpactReport) -> dict:
    return {
        "ratio": _check_finite(report.ratio, "summary ratio"),
        "attack": report.attack,
        "defense": report.defense,
        "seed": report.seed,
        "impact": _check_finite(report.impact, "summary impact"),
        "psi_clean": _check_finite(report.psi_clean, "summary psi_clean"),
        "psi_attacked": _check_finite(report.psi_attacked, "summary psi_attacked"),
    }


def round_lines(report: ImpactReport):
    """Deterministic per-round records for one report, as dicts."""
    for trajectory, records in (("clean", report.clean_rounds), ("attacked", report.attacked_rounds)):
        for r in records:
            yield {
                "seed": report.seed,
                "attack": report.attack,
                "defense": report.defense,
                "trajectory": trajectory,
                "round": r.round_index,
                "accuracy": _check_finite(r.test_accuracy, "round accuracy"),
                "chosen": r.chosen_defense,
                "accepted": list(r.accepted_ids),
            }


def _format_cell(value) -> str:
    # repr keeps the full double so the CSV carries exactly what ran
    return repr(value) if isinstance(value, float) else str(value)


def summary_csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow([_format_cell(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def read_summary_csv(path) -> list:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for raw in reader:
            rows.append(
                {
                    "ratio": float(raw["ratio"]),
                    "attack": raw["attack"],
                    "defense": raw["defense"],
                    "seed": int(raw["seed"]),
                    "impact": float(raw["impact"]),
                    "psi_clean": float(raw["psi_clean"]),
                    "psi_attacked": float(raw["psi_attacked"]),
                }
            )
    return rows


class ResultStore:
    """One directory holding a completed (or in-progress) cell."""

    def __init__(self, directory):
        self.dir = str(directory)

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def is_complete(self, expected_hash: str) -> bool:
        try:
            with open(self.path(MANIFEST_NAME), "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError):
            return False
        return manifest.get("hash") == expected_hash

    def write(self, config_text: str, reports) -> None:
        """Persist reports; the manifest lands last to mark completion."""
        reports = list(reports)
        os.makedirs(self.dir, exist_ok=True)
        with open(self.path(ROUNDS_NAME), "w", encoding="utf-8") as f:
            for report in reports:
                for line in round_lines(report):
                    f.write(json.dumps(line, allow_nan=False) + "\n")
        with open(self.path(SUMMARY_NAME), "w", encoding="utf-8", newline="") as f:
            f.write(summary_csv_text(summary_row(r) for r in reports))
        with open(self.path(REPORT_NAME), "w", encoding="utf-8") as f:
            json.dump([r.to_dict() for r in reports], f, allow_nan=False, indent=1)
        manifest = {
            "hash": config_hash(config_text),
            "version": __version__,
            "config": config_text,
        }
        with open(self.path(MANIFEST_NAME), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1)

    def read_reports(self) -> list:
        with open(self.path(REPORT_NAME), "r", encoding="utf-8") as f:
            return [ImpactReport.from_dict(d) for d in json.load(f)]

    def read_rows(self) -> list:
        return read_summary_csv(self.path(SUMMARY_NAME))


def find_cells(root) -> list:
    """Completed cell directories under root: a summary next to a manifest."""
    cells = []
    for dirpath, _, filenames in os.walk(root):
        if MANIFEST_NAME in filenames and SUMMARY_NAME in filenames:
            cells.append(dirpath)
    return sorted(cells)
