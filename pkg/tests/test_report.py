import csv
import json

import pytest

from cake.report import (
    ABLATION_HEADER, build_report, fmt, head_tail_rows, ledger_summary, load_run, write_csv,
)

# ten rows; counted by hand below
TOY_LEDGER = """iter,id,proposer,proposed,peer_conf,recip_conf,status,correct
0,1,target_model,2,0.9,0.8,accepted,1
0,2,target_model,1,0.7,0.6,accepted,0
0,3,target_model,0,0.4,0.3,rejected_peer_threshold,1
0,4,source_model,2,0.8,0.9,accepted,1
0,5,source_model,3,0.6,0.2,rejected_recipient_threshold,0
10,1,target_model,2,0.95,0.9,accepted,1
10,2,target_model,1,0.9,0.7,accepted,1
10,3,target_model,0,0.8,0.7,accepted,0
10,4,source_model,2,0.9,0.8,accepted,1
10,5,source_model,3,0.3,0.2,rejected_peer_threshold,
"""


def test_ledger_summary_hand_count(tmp_path):
    path = tmp_path / "ledger.csv"
    path.write_text(TOY_LEDGER, encoding="utf-8")
    got = {(it, prop): (n, a, c, acc) for it, prop, n, a, c, acc in ledger_summary(path)}
    assert got[(0, "target_model")] == (3, 2, 1, 0.5)
    assert got[(0, "source_model")] == (2, 1, 1, 1.0)
    assert got[(10, "target_model")] == (3, 3, 2, pytest.approx(2 / 3))
    assert got[(10, "source_model")] == (2, 1, 1, 1.0)


def test_ledger_summary_no_accepted(tmp_path):
    path = tmp_path / "ledger.csv"
    path.write_text(TOY_LEDGER.splitlines()[0] + "\n0,3,target_model,0,0.4,0.3,rejected_peer_threshold,1\n")
    assert ledger_summary(path) == [(0, "target_model", 1, 0, 0, None)]


def test_fmt_is_round_trip_exact():
    v = 0.1 + 0.2
    assert float(fmt(v)) == v
    assert fmt(None) == "" and fmt(float("nan")) == "nan" and fmt(3) == "3"


def test_write_csv_quotes_fields(tmp_path):
    path = write_csv(tmp_path / "x.csv", ["a", "b"], [("has,comma", 1.5), ('say "hi"', None)])
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["a", "b"], ["has,comma", "1.5"], ['say "hi"', ""]]


def _result(variant, acc, per_class, rank=None, head=0.0, tail=0.0):
    return {"variant": variant, "target_acc": acc, "per_class_acc": per_class,
            "class_rank": rank or list(range(len(per_class))), "head_acc": head, "tail_acc": tail}


def test_head_tail_rows_pick_five_and_five():
    per_class = [i / 10 for i in range(10)]
    rank = [3, 1, 4, 0, 5, 9, 2, 6, 8, 7]
    rows = head_tail_rows(_result("full", 0.5, per_class, rank))
    assert [r[0] for r in rows] == ["head"] * 5 + ["tail"] * 5
    assert [r[2] for r in rows] == rank
    assert all(r[3] == per_class[r[2]] for r in rows)
    assert [r[1] for r in rows] == list(range(10))


def test_head_tail_rows_few_classes():
    rows = head_tail_rows(_result("full", 0.5, [0.1, 0.2, 0.3, 0.4]))
    assert [(g, c) for g, _, c, _ in rows] == [("head", 0), ("head", 1), ("tail", 2), ("tail", 3)]


def _fake_run(root, name, result, metrics):
    d = root / name
    d.mkdir(parents=True)
    (d / "result.json").write_text(json.dumps(result))
    (d / "metrics.jsonl").write_text("".join(json.dumps(m) + "\n" for m in metrics))
    return d


def test_build_report_tables(tmp_path):
    metrics = [{"iter": 0, "acc_t": 0.1, "acc_s": 0.2, "pl_count": 0, "pl_correct": 0, "pl_acc": None},
               {"iter": 10, "acc_t": 0.6, "acc_s": 0.7, "pl_count": 8, "pl_correct": 6, "pl_acc": 0.75}]
    runs = [_fake_run(tmp_path, "full_seed0", _result("full", 0.6, [0.5] * 10, head=0.7, tail=0.5), metrics),
            _fake_run(tmp_path, "full_seed1", _result("full", 0.8, [0.5] * 10, head=0.9, tail=0.7), metrics),
            _fake_run(tmp_path, "st_seed0", _result("s+t", 0.4, [0.4] * 10), [{"iter": 0, "acc_t": 0.3}])]
    skipped = build_report(runs + [tmp_path / "missing"], tmp_path / "rep")
    assert [s[0] for s in skipped] == [str(tmp_path / "missing")]
    rep = tmp_path / "rep"

    def rows(name):
        with open(rep / name, newline="") as fh:
            return list(csv.DictReader(fh))
    acc = rows("accuracy_series.csv")
    assert len(acc) == 5 and acc[-1]["acc_s"] == ""
    pl = rows("pseudo_label_series.csv")
    assert len(pl) == 4 and pl[1]["pl_acc"] == "0.75"
    assert len(rows("head_tail.csv")) == 30
    table = rows("ablation_table.csv")
    assert list(table[0]) == ABLATION_HEADER
    full = next(r for r in table if r["variant"] == "full")
    assert float(full["mean"]) == pytest.approx(0.7) and float(full["std"]) == pytest.approx(0.1414213562, rel=1e-8)
    assert float(full["head_mean"]) == pytest.approx(0.8) and full["n"] == "2"


def test_load_run_rejects_incomplete(tmp_path):
    d = _fake_run(tmp_path, "r", {"variant": "full"}, [])
    with pytest.raises(ValueError):
        load_run(d)
