"""Plot-ready CSV tables assembled from finished run directories.

A run directory holds ``config.echo``, ``metrics.jsonl``, ``ledger.csv`` and
``result.json``. Broken or missing runs are listed and skipped.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

ACCURACY_HEADER = ["run", "variant", "iter", "acc_t", "acc_s"]
PSEUDO_HEADER = ["run", "variant", "iter", "pl_count", "pl_correct", "pl_acc"]
CLASS_HEADER = ["run", "variant", "group", "rank", "class", "accuracy"]
ABLATION_HEADER = ["variant", "n", "mean", "std", "head_mean", "tail_mean"]
SUMMARY_HEADER = ["variant", "seed", "target_acc", "head_acc", "tail_acc", "pl_count", "pl_acc"]
LEDGER_SUMMARY_HEADER = ["iter", "proposer", "proposed", "accepted", "correct", "pl_acc"]


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else format(v, ".17g")
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def load_run(run_dir):
    """``(result dict, metric rows)``; raises ``ValueError`` on a broken run."""
    run_dir = Path(run_dir)
    try:
        result = json.loads((run_dir / "result.json").read_text(encoding="utf-8"))
        lines = (run_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
        metrics = [json.loads(line) for line in lines if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{run_dir}: {exc}") from None
    for key in ("variant", "target_acc", "per_class_acc"):
        if key not in result:
            raise ValueError(f"{run_dir}: result.json lacks {key!r}")
    return result, metrics


def ledger_summary(ledger_path):
    """Accepted and correct counts per ``(iter, proposer)`` from a ledger CSV.

    Rows with an empty ``correct`` field count as accepted but not scored.
    """
    acc = defaultdict(lambda: [0, 0, 0])
    with open(ledger_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cell = acc[(int(row["iter"]), row["proposer"])]
            cell[0] += 1
            if row["status"] == "accepted":
                cell[1] += 1
                cell[2] += row["correct"] == "1"
    out = []
    for (it, prop), (n, a, c) in sorted(acc.items()):
        out.append((it, prop, n, a, c, (c / a) if a else None))
    return out


def head_tail_rows(result, n_each: int = 5):
    """Per-class rows for the ``n_each`` most and least frequent source classes."""
    rank = result.get("class_rank") or list(range(len(result["per_class_acc"])))
    n_each = min(n_each, len(rank) // 2)
    picks = [("head", i, c) for i, c in enumerate(rank[:n_each])]
    picks += [("tail", len(rank) - n_each + i, c) for i, c in enumerate(rank[len(rank) - n_each:])]
    return [(g, r, c, result["per_class_acc"][c]) for g, r, c in picks]


def ablation_rows(results):
    by_variant = defaultdict(list)
    for r in results:
        by_variant[r["variant"]].append(r)
    rows = []
    for v, rs in by_variant.items():
        acc = np.array([r["target_acc"] for r in rs])
        rows.append((v, len(rs), float(acc.mean()), float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                     float(np.mean([r["head_acc"] for r in rs])), float(np.mean([r["tail_acc"] for r in rs]))))
    return rows


def build_report(run_dirs, out_dir):
    """Write the four report tables into ``out_dir``; returns the list of
    ``(run_dir, reason)`` that were skipped."""
    out_dir = Path(out_dir)
    acc_rows, pl_rows, class_rows, results, skipped = [], [], [], [], []
    for d in sorted(Path(p) for p in run_dirs):
        try:
            result, metrics = load_run(d)
        except ValueError as exc:
            skipped.append((str(d), str(exc)))
            continue
        name, variant = d.name, result["variant"]
        results.append(result)
        for m in metrics:
            acc_rows.append((name, variant, m["iter"], m["acc_t"], m.get("acc_s")))
            if "pl_count" in m:
                pl_rows.append((name, variant, m["iter"], m["pl_count"], m.get("pl_correct"), m.get("pl_acc")))
        class_rows += [(name, variant, *row) for row in head_tail_rows(result)]
    write_csv(out_dir / "accuracy_series.csv", ACCURACY_HEADER, acc_rows)
    write_csv(out_dir / "pseudo_label_series.csv", PSEUDO_HEADER, pl_rows)
    write_csv(out_dir / "head_tail.csv", CLASS_HEADER, class_rows)
    write_csv(out_dir / "ablation_table.csv", ABLATION_HEADER, ablation_rows(results))
    if skipped:
        write_csv(out_dir / "skipped.csv", ["run", "reason"], skipped)
    return skipped
