"""Random-drop sweep: corrupt gated matrices and re-score decodes."""

from __future__ import annotations

from typing import Sequence

from .decoder import gold_extractions
from .labeldrop import random_drop
from .metrics import evaluate
from .model import ExtractionModel, forward_matrices, predict
from .schema import Instance

DEFAULT_RATES = tuple(round(0.1 * k, 1) for k in range(1, 11))


def ablate_drop(model: ExtractionModel, instances: Sequence[Instance],
                rates: Sequence[float] = DEFAULT_RATES, seed: int = 0) -> list[dict]:
    """One row {rate, P, R, F1} per drop rate.

    The forward pass runs once; instance ``k`` is corrupted with seed ``seed + k``
    so every rate sees the same draw order.
    """
    mats = forward_matrices(model, instances)
    golds = {x.id: gold_extractions(x.input, x.gold) for x in instances}
    tasks = {x.id: x.input.task for x in instances}
    rows = []
    for rate in rates:
        dropped = {x.id: {"P": random_drop(mats[x.id]["P"], rate, seed + k)}
                   for k, x in enumerate(instances)}
        rep = evaluate(predict(model, instances, dropped), golds, tasks)
        rows.append({"rate": float(rate), "P": rep.overall.precision,
                     "R": rep.overall.recall, "F1": rep.f1})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    lines = [f"{'rate':>6} {'P':>8} {'R':>8} {'F1':>8}"]
    for row in rows:
        lines.append(f"{row['rate']:>6.2f} {row['P']:>8.4f} {row['R']:>8.4f} {row['F1']:>8.4f}")
    return "\n".join(lines)
