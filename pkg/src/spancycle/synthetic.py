"""Small generated corpora for smoke tests and overfitting checks."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

PERSONS = ["Tom", "Jerry Smith", "Alice", "Bob Stone", "Maria Lopez", "Chen Wei", "Omar", "Ivy Park"]
LOCATIONS = ["Paris", "New York", "Berlin", "Lagos", "Kyoto", "Lima", "Cape Town", "Oslo"]
ORGANIZATIONS = ["Acme", "Globex Corp", "Initech", "Umbrella", "Stark Industries", "Hooli"]
TEMPLATES = [
    "{person} moved to {location} last year .",
    "{person} works for {organization} in {location} .",
    "{organization} opened an office in {location} .",
    "Yesterday {person} met {person2} at {organization} .",
    "{person} is a friend of {person2} .",
    "The team from {organization} visited {location} and {location2} .",
]
NER_INSTRUCTION = "Please identify possible entities from the given text and determine their types"


def _fill(template: str, rng: np.random.Generator) -> tuple[str, list[dict]]:
    pools = {"person": PERSONS, "location": LOCATIONS, "organization": ORGANIZATIONS}
    used: dict[str, list[str]] = {}
    text, answers = "", []
    rest = template
    while "{" in rest:
        pre, rest = rest.split("{", 1)
        slot, rest = rest.split("}", 1)
        kind = slot.rstrip("0123456789")
        choices = [c for c in pools[kind] if c not in used.get(kind, [])]
        value = choices[int(rng.integers(len(choices)))]
        used.setdefault(kind, []).append(value)
        text += pre
        answers.append({"label": kind, "spans": [[len(text), len(text) + len(value)]]})
        text += value
    text += rest
    return text, answers


def make_ner_corpus(n: int = 20, seed: int = 0, prefix: str = "syn") -> list[dict]:
    """``n`` NER records over three entity types, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n):
        template = TEMPLATES[k % len(TEMPLATES)]
        text, answers = _fill(template, rng)
        records.append({
            "id": f"{prefix}-{k:03d}",
            "task": "ner",
            "instruction": NER_INSTRUCTION,
            "schema": {"ent": ["person", "location", "organization"], "rel": [], "cls": []},
            "text": text,
            "answers": answers,
        })
    return records


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write a generated NER corpus as JSON lines.")
    parser.add_argument("out")
    parser.add_argument("-n", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    write_jsonl(make_ner_corpus(args.n, args.seed), args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
