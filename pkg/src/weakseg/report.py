"""Consolidate a run directory's metric files into plot-ready CSVs."""

from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path


class NoMetricsError(FileNotFoundError):
    pass


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_report(run_dir) -> list[Path]:
    """Write ``<run>/report/*.csv`` and return the files produced."""
    run = Path(run_dir)
    found = {name: run / name for name in ("metrics.csv", "predictions.csv", "confusion.csv",
                                            "per_label.csv", "ranking.json", "grid.csv")
             if (run / name).is_file()}
    if not found:
        raise NoMetricsError(f"no metrics found in {run}")
    out = run / "report"
    out.mkdir(exist_ok=True)
    written = []

    if "predictions.csv" in found:
        rows = _read_csv(found["predictions.csv"])
        path = out / "regression.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "label", "prediction"])
            for r in rows:
                w.writerow([r["split"], r["label"], r["prediction"]])
        written.append(path)
    for name in ("confusion.csv", "per_label.csv", "metrics.csv", "grid.csv"):
        if name in found:
            shutil.copyfile(found[name], out / name)
            written.append(out / name)
    if "ranking.json" in found:
        ranking = json.loads(found["ranking.json"].read_text())["ranking"]
        path = out / "hypothesis_ranking.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "hypothesis", "val_mse", "monotonicity", "constant"])
            for r in ranking:
                w.writerow([r["rank"], r["hypothesis"], repr(float(r["val_mse"])), r["monotonicity"], r["constant"]])
        written.append(path)
    return written
