"""CSV tables joined from run records.

Every table is a pure function of record files read in sorted order with
fixed float formatting, so identical records give byte-identical tables.
"""
from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Optional

import numpy as np

from .config import TEST_SETTINGS
from .runs import RunStore

SETTING_LABEL = dict(TEST_SETTINGS)


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def _csv(header: list, rows: Iterable[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_eval(store: RunStore, name: str) -> dict:
    """Macro scores and summary line of one ``eval-*`` record."""
    out = {"per_question": []}
    for line in (store.path(name) / "metrics.jsonl").read_text().splitlines():
        row = json.loads(line)
        if "qs" not in row:
            out["summary"] = row
        elif row["question"] == "__macro__":
            out[row["qs"]] = row
        else:
            out["per_question"].append(row)
    return out


def _source_of(setting: str) -> str:
    return "noisy" if setting.startswith("noisy") else setting


def ablation_csv(store: RunStore, cells: list) -> str:
    """One row per (dropout rate, test setting); scores are means (and std) over seeds.

    ``cells`` holds ``(p, seed, cue_source, eval record name)`` tuples.
    """
    groups: dict = {}
    for p, seed, src, name in cells:
        groups.setdefault((p, src), []).append(read_eval(store, name))
    order = [s for s, _ in TEST_SETTINGS]
    rows = []
    for (p, src) in sorted(groups, key=lambda k: (k[0], order.index(k[1]))):
        runs = groups[(p, src)]

        def stat(getter):
            vals = [v for v in (getter(r) for r in runs) if v is not None]
            if not vals:
                return None, None
            return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

        q1 = stat(lambda r: r["QS1"]["f1"])
        q2 = stat(lambda r: r["QS2"]["f1"])
        q3 = stat(lambda r: r["QS3"]["f1"])
        bl = stat(lambda r: r["summary"]["bleu_mean"])
        st = stat(lambda r: r["summary"]["mean_S_text"])
        rows.append([f"{p:g}", SETTING_LABEL[src], len(runs), _fmt(q1[0]), _fmt(q1[1]), _fmt(q2[0]), _fmt(q3[0]),
                     _fmt(bl[0]), _fmt(st[0])])
    return _csv(["dropout", "test_setting", "n_seeds", "QS1_f1_mean", "QS1_f1_std", "QS2_f1_mean", "QS3_f1_mean",
                 "bleu_mean", "mean_S_text"], rows)


def report_tables(store: RunStore) -> dict[str, str]:
    """All publication-shaped tables available from the records present."""
    files: dict[str, str] = {}
    if store.exists("data"):
        files["class_distribution.csv"] = (store.path("data") / "dataset" / "class_distribution.csv").read_text()
    if store.exists("probe"):
        rows = [json.loads(line) for line in (store.path("probe") / "metrics.jsonl").read_text().splitlines()]
        files["probe_metrics.csv"] = _csv(
            ["qs", "question", "precision", "recall", "f1", "auroc"],
            [[r["qs"], r["question"], _fmt(r["precision"]), _fmt(r["recall"]), _fmt(r["f1"]), _fmt(r["auroc"])]
             for r in rows])
    evals = store.records("eval-")
    if not evals:
        return files
    gen_rows, rel_rows, per_q, hier = [], [], [], []
    for name in evals:
        ev = read_eval(store, name)
        s = ev["summary"]
        model, setting = s["model"], s["setting"]
        gen_rows.append([model, setting, SETTING_LABEL.get(_source_of(setting), setting)]
                        + [_fmt(ev[q]["f1"]) for q in ("QS1", "QS2", "QS3")]
                        + [_fmt(ev["QS1"]["precision"]), _fmt(ev["QS1"]["recall"]), _fmt(s["bleu_mean"]),
                           _fmt(s["consistency"]), s["unparsed_sentences"]])
        if s["mean_S_text"] is not None:
            rel_rows.append([f"{model}/{setting}", _fmt(s["mean_S_text"]), _fmt(s["std_S_text"])])
        per_q.extend([model, setting, r["qs"], r["question"], _fmt(r["f1"])] for r in ev["per_question"])
        lines = (store.path(name) / "hierarchy.csv").read_text().splitlines()[1:]
        hier.extend([model, setting] + next(csv.reader([line])) for line in lines)
    files["generation_metrics.csv"] = _csv(
        ["model", "setting", "row_label", "QS1_f1", "QS2_f1", "QS3_f1", "QS1_precision", "QS1_recall", "bleu_mean",
         "hierarchy_consistency", "unparsed_sentences"], gen_rows)
    files["reliance.csv"] = _csv(["setting", "mean_S_text", "std_S_text"], rel_rows)
    files["per_question_f1.csv"] = _csv(["model", "setting", "qs", "question", "f1"], per_q)
    files["hierarchy.csv"] = _csv(["model", "setting", "finding", "QS1", "QS2", "QS3", "QS1->QS2", "QS2->QS3"], hier)
    return files
