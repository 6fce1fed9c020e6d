"""Exact-match precision / recall / F1 over extractions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .decoder import Extraction


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass
class EvalReport:
    by_task: dict[str, Counts] = field(default_factory=dict)
    overall: Counts = field(default_factory=Counts)
    exact_match: dict[str, float] = field(default_factory=dict)
    drop_accuracy: dict[str, float] | None = None

    @property
    def f1(self) -> float:
        return self.overall.f1

    def to_dict(self) -> dict:
        out = {"overall": self.overall.to_dict(),
               "by_task": {k: v.to_dict() for k, v in sorted(self.by_task.items())}}
        if self.exact_match:
            out["exact_match"] = dict(self.exact_match)
        if self.drop_accuracy is not None:
            out["drop_accuracy"] = dict(self.drop_accuracy)
        return out

    def table(self) -> str:
        rows = [("task", "P", "R", "F1", "tp", "fp", "fn")]
        for name, c in sorted(self.by_task.items()) + [("overall", self.overall)]:
            rows.append((name, f"{c.precision:.4f}", f"{c.recall:.4f}", f"{c.f1:.4f}",
                         str(c.tp), str(c.fp), str(c.fn)))
        widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        for name, em in sorted(self.exact_match.items()):
            lines.append(f"{name} exact match: {em:.4f}")
        if self.drop_accuracy is not None:
            acc = ", ".join(f"{k}={v:.4f}" for k, v in self.drop_accuracy.items())
            lines.append(f"label-drop accuracy: {acc}")
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def match(pred: Extraction, gold: Extraction) -> bool:
    return (pred.task == gold.task and pred.label == gold.label and pred.role == gold.role
            and tuple(pred.spans) == tuple(gold.spans))


def category(x: Extraction) -> str:
    if x.task == "ee":
        return "ee_argument" if x.role is not None else "ee_trigger"
    return x.task


def instance_counts(preds: Iterable[Extraction], golds: Iterable[Extraction]) -> dict[str, Counts]:
    pred_set, gold_set = set(preds), set(golds)
    out: dict[str, Counts] = {}
    for x in pred_set:
        c = out.setdefault(category(x), Counts())
        if x in gold_set:
            c.tp += 1
        else:
            c.fp += 1
    for x in gold_set - pred_set:
        out.setdefault(category(x), Counts()).fn += 1
    return out


def evaluate(preds: Mapping[str, Sequence[Extraction]], golds: Mapping[str, Sequence[Extraction]],
             tasks: Mapping[str, str] | None = None) -> EvalReport:
    """Micro-averaged report. ``tasks`` (id -> task) registers tasks with no extractions."""
    if set(preds) != set(golds):
        missing = sorted(set(golds) - set(preds))[:5]
        extra = sorted(set(preds) - set(golds))[:5]
        raise ValueError(f"prediction / gold ids differ (missing {missing}, unexpected {extra})")
    report = EvalReport()
    em_hits: dict[str, list[bool]] = {}
    for key in sorted(golds):
        for cat, c in instance_counts(preds[key], golds[key]).items():
            report.by_task.setdefault(cat, Counts()).add(c)
            report.overall.add(c)
        task = (tasks or {}).get(key)
        if task is not None:
            if task == "ee":
                report.by_task.setdefault("ee_trigger", Counts())
                report.by_task.setdefault("ee_argument", Counts())
            else:
                report.by_task.setdefault(task, Counts())
        if task == "mrc" or any(g.task == "mrc" for g in golds[key]):
            em_hits.setdefault("mrc", []).append(set(preds[key]) == set(golds[key]))
    report.exact_match = {k: sum(v) / len(v) for k, v in em_hits.items()}
    return report
