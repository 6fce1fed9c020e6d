"""Helpers shared by the test modules."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from spancycle.config import Config
from spancycle.schema import GoldAnswer, GoldTuple, Instance, build_input

FIXTURES = Path(__file__).parent / "fixtures"

WORDS = ["tom", "paris", "met", "at", "the", "acme", "lab", "and", "bob", "runs", "fast", "."]
LABELS = ["person", "place", "org", "kind"]
TASKS = ("ner", "ner_tp", "re", "ee", "absa", "cls", "mrc")


def tiny_config(**kw) -> Config:
    base = dict(d_h=8, n_layers=1, n_heads=2, d_i=4, d_v=4, max_len=16, image_size=64, patch_size=32)
    base.update(kw)
    return Config(**base)


def random_input(rng: np.random.Generator, max_len: int = 12, task: str | None = None):
    """A random unified input of at most ``max_len`` tokens, any task."""
    task = task or TASKS[int(rng.integers(len(TASKS)))]
    instruction = ""
    if task in ("ner", "ner_tp", "mrc"):
        schema = {"ent": list(rng.choice(LABELS, size=int(rng.integers(1, 3)), replace=False))}
        if task != "ner":
            schema = {}
    elif task in ("re", "absa"):
        schema = {"rel": list(rng.choice(LABELS, size=int(rng.integers(1, 3)), replace=False))}
        if rng.random() < 0.5:
            schema["ent"] = ["thing"]
    elif task == "ee":
        schema = {"ent": ["event"], "rel": ["role"]}
    else:
        schema = {"cls": ["yes", "no"]}
    real_task = "ner" if task == "ner_tp" else task
    head = 2 + sum(1 + 1 for k in ("ent", "rel", "cls") for _ in schema.get(k, ()))
    n_text = int(rng.integers(1, max(2, max_len - head + 1)))
    text = " ".join(rng.choice(WORDS, size=n_text))
    return build_input(instruction, schema, text, real_task)


def random_gated(rng: np.random.Generator, n: int, density: float | None = None) -> np.ndarray:
    density = rng.uniform(0.05, 0.6) if density is None else density
    hot = rng.random((3, n, n)) < density
    return np.where(hot, rng.uniform(0.5, 1.0, (3, n, n)), rng.uniform(0.0, 0.5, (3, n, n)))


def instance(record_id: str, inp, tuples=(), image=None) -> Instance:
    return Instance(record_id, inp, GoldAnswer(inp.task, tuple(GoldTuple(*t) for t in tuples)), image)
