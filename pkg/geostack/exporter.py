"""Ablation report export as sorted-key JSON or as a CSV table."""
import csv
import json
import logging
from pathlib import Path

from .exceptions import FileError

logger = logging.getLogger(__name__)

HEADERS = ("Variant", "Mode", "Taps", "Plan", "Status", "Low-Level", "High-Level", "Overall", "Distance MRA", "Seeds", "Steps")


def _fmt(value):
    return "" if value is None else f"{value:.4f}"


def report_rows(report: dict):
    """Header row, then one row per variant in report order."""
    yield list(HEADERS)

    for entry in report["variants"]:
        yield [
            entry["name"],
            entry["plan"]["mode"],
            " ".join(str(tap) for tap in entry["taps"]),
            " ".join(f"{tap}->{layer}" for tap, layer in entry["plan"]["pairs"]),
            entry["status"],
            _fmt(entry["low"]),
            _fmt(entry["high"]),
            _fmt(entry["overall"]),
            _fmt(entry["distance"]),
            " ".join(str(seed) for seed in entry["seeds"]),
            entry["steps"],
        ]


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_report_json(report: dict, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report_json(report))
    except OSError as e:
        raise FileError(f"cannot write report {path}: {e}")
    logger.info("wrote report %s", path)


def write_report_csv(report: dict, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            csv.writer(f).writerows(report_rows(report))
    except OSError as e:
        raise FileError(f"cannot write report {path}: {e}")
    logger.info("wrote report %s", path)
