#!/usr/bin/env python3
"""
Render a markdown summary of an experiment CSV: mean, std and count per
(experiment, sweep value, metric) plus the failed-run count.
"""

import argparse
import csv
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from jinja2 import Template

from config import REPORT_TEMPLATE, RESULT_FIELDS

logger = logging.getLogger(__name__)


def load_rows(csv_path) -> List[Dict]:
    """Read a result CSV, checking its header against the ResultRow schema."""
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULT_FIELDS:
            raise ValueError(f"{csv_path}: unexpected columns {reader.fieldnames}")
        rows = []
        for raw in reader:
            rows.append({
                "experiment": raw["experiment"],
                "seed": int(raw["seed"]),
                "sweep_value": float(raw["sweep_value"]),
                "metric": raw["metric"],
                "value": float(raw["value"]),
                "wall_time": float(raw["wall_time"]),
                "status": raw["status"],
            })
    return rows


def summarize(rows: Sequence[Dict]) -> List[Dict]:
    """Group successful rows; NaN values are left out of the statistics."""
    groups = defaultdict(list)
    for row in rows:
        if row["status"] != "ok":
            continue
        groups[(row["experiment"], row["sweep_value"], row["metric"])].append(row["value"])

    experiments = defaultdict(list)
    for (experiment, sweep_value, metric), values in sorted(groups.items()):
        finite = np.array([v for v in values if not math.isnan(v)])
        experiments[experiment].append({
            "sweep_value": sweep_value,
            "metric": metric,
            "mean": float(finite.mean()) if finite.size else math.nan,
            "std": float(finite.std()) if finite.size else math.nan,
            "count": int(finite.size),
        })
    return [{"name": name, "rows": entries} for name, entries in experiments.items()]


def render_report(rows: Sequence[Dict], template_path: Path, source: str = "") -> str:
    template = Template(Path(template_path).read_text(encoding="utf-8"))
    failed = sum(1 for row in rows if row["status"] == "failed")
    return template.render(source=source, total_rows=len(rows), failed=failed,
                           experiments=summarize(rows))


def generate(csv_path: Path, output_path: Path, template_path: Path):
    """Read the CSV and write the rendered summary."""
    rows = load_rows(csv_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(render_report(rows, template_path, str(csv_path)), encoding="utf-8")
    logger.info(f"Report with {len(rows)} rows written to {output_path}")


def main(argv: Optional[Sequence[str]] = None):
    logging.basicConfig(level=logging.INFO, format='%(levelname)s: %(message)s')
    base_dir = Path(__file__).resolve().parent
    parser = argparse.ArgumentParser(description="Summarise an experiment CSV as markdown.")
    parser.add_argument("csv_path", help="Result CSV written by run_experiment.py")
    parser.add_argument("--out", help="Output markdown path (default: alongside the CSV)")
    parser.add_argument("--template", default=str(base_dir / REPORT_TEMPLATE), help="Jinja2 template")
    args = parser.parse_args(argv)

    csv_path = Path(args.csv_path)
    output_path = Path(args.out) if args.out else csv_path.with_suffix(".md")
    try:
        generate(csv_path, output_path, Path(args.template))
    except (OSError, ValueError) as e:
        logger.error(f"Failed to render report: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
