"""Threshold gated matrices and read answers off closed relation loops."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .schema import A2A, AS, RELATIONS, TA, GoldAnswer, Piece, UnifiedInput, gold_cycles

logger = logging.getLogger(__name__)

ORACLE_MAX_LEN = 16


@dataclass(frozen=True, order=True)
class RawTuple:
    trigger: int
    pieces: tuple[Piece, ...]
    confidence: float = field(default=1.0, compare=False)


@dataclass(frozen=True)
class Extraction:
    task: str
    label: str
    spans: tuple[Piece, ...]
    role: str | None = None
    confidence: float = field(default=1.0, compare=False)

    def to_record(self, inp: UnifiedInput | None = None) -> dict:
        out = {"task": self.task, "label": self.label, "spans": [list(p) for p in self.spans]}
        if self.role is not None:
            out["role"] = self.role
        out["confidence"] = self.confidence
        if inp is not None and self.task != "cls":
            out["char_spans"] = [list(inp.piece_chars(p)) for p in self.spans]
            out["text"] = [inp.piece_text(p) for p in self.spans]
        return out


def threshold_edges(P: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Boolean edge tensor, strictly ``P > tau``."""
    return np.asarray(P) > tau


def _piece_ends(AS_edges: np.ndarray, allowed: np.ndarray, max_span_len: int) -> list[list[int]]:
    n = len(allowed)
    ends: list[list[int]] = [[] for _ in range(n)]
    for s in np.flatnonzero(allowed):
        hi = min(n, s + max_span_len)
        for e in range(s, hi):
            if allowed[e] and AS_edges[s, e]:
                ends[s].append(e)
    return ends


class DecodeBudgetExceeded(RuntimeError):
    pass


def find_cycles(
    edges: np.ndarray,
    inp: UnifiedInput,
    max_pieces: int = 4,
    max_span_len: int = 16,
    budget: int | None = None,
) -> list[RawTuple]:
    """Depth-first search for every closed TA/AS/A2A loop.

    ``budget`` bounds the number of piece expansions; exceeding it raises
    :class:`DecodeBudgetExceeded` (used to guard decoding of untrained models).
    """
    if max_pieces < 1:
        raise ValueError("max_pieces must be >= 1")
    ta, a2a, as_ = edges[TA], edges[A2A], edges[AS]
    allowed = inp.span_positions()
    ends = _piece_ends(as_, allowed, max_span_len)
    next_starts = [np.flatnonzero(a2a[e] & allowed).tolist() for e in range(len(inp))]
    found: list[RawTuple] = []
    expansions = 0

    def extend(t: int, pieces: list[Piece], s: int) -> None:
        nonlocal expansions
        for e in ends[s]:
            if any(ps <= e and s <= pe for ps, pe in pieces):
                continue
            expansions += 1
            if budget is not None and expansions > budget:
                raise DecodeBudgetExceeded(f"more than {budget} piece expansions")
            pieces.append((s, e))
            if ta[e, t]:
                found.append(RawTuple(t, tuple(pieces)))
            if len(pieces) < max_pieces:
                for s2 in next_starts[e]:
                    extend(t, pieces, s2)
            pieces.pop()

    for t in inp.trigger_positions():
        for s in np.flatnonzero(ta[t] & allowed):
            extend(t, [], int(s))
    return sorted(set(found))


def cycle_confidence(P: np.ndarray, trigger: int, pieces: Sequence[Piece]) -> float:
    vals = [P[TA, trigger, pieces[0][0]], P[TA, pieces[-1][1], trigger]]
    for m, (s, e) in enumerate(pieces):
        vals.append(P[AS, s, e])
        if m + 1 < len(pieces):
            vals.append(P[A2A, e, pieces[m + 1][0]])
    return float(min(vals))


def brute_force_cycles(
    P: np.ndarray,
    inp: UnifiedInput,
    tau: float = 0.5,
    max_pieces: int = 4,
    max_span_len: int = 16,
) -> list[RawTuple]:
    """Evaluate the loop predicate on every (trigger, piece sequence) at once.

    All candidate pieces are enumerated up front and the predicate is
    evaluated over the full Cartesian product of pieces for each length,
    without any search or pruning.
    """
    n = len(inp)
    if n > ORACLE_MAX_LEN:
        raise ValueError(f"oracle decoding supports |x| <= {ORACLE_MAX_LEN}, got {n}")
    P = np.asarray(P)
    allowed = inp.span_positions()
    cand = [(s, e) for s in range(n) for e in range(s, min(n, s + max_span_len))
            if allowed[s] and allowed[e]]
    if not cand:
        return []
    S = np.array([c[0] for c in cand])
    E = np.array([c[1] for c in cand])
    m = len(cand)
    as_ok = P[AS][S, E] > tau
    link = (P[A2A][E[:, None], S[None, :]] > tau) & as_ok[None, :]
    disjoint = (E[:, None] < S[None, :]) | (E[None, :] < S[:, None])
    out: list[RawTuple] = []
    for t in inp.trigger_positions():
        opened = (P[TA][t, S] > tau) & as_ok
        closed = P[TA][E, t] > tau
        chain = opened  # chain[p1, ..., pk]: loop prefix valid and pieces pairwise disjoint
        for k in range(1, max_pieces + 1):
            if k > 1:
                chain = chain[..., None] & link.reshape((1,) * (k - 2) + (m, m))
                for axis in range(k - 1):
                    shape = [1] * k
                    shape[axis] = m
                    shape[k - 1] = m
                    chain = chain & disjoint.reshape(shape)
            hits = chain & closed.reshape((1,) * (k - 1) + (m,))
            for idx in zip(*np.nonzero(hits)):
                out.append(RawTuple(t, tuple(cand[i] for i in idx)))
    return sorted(set(out))


# ---------------------------------------------------------------------------
# assembly


def assemble(raw: Sequence[RawTuple], inp: UnifiedInput) -> tuple[list[Extraction], int]:
    """Map raw loops to typed extractions; returns (extractions, dropped count)."""
    task = inp.task
    out: list[Extraction] = []
    dropped = 0
    if task == "ee":
        return _assemble_events(raw, inp)
    if task == "cls":
        best = None
        for r in raw:
            a = inp.anchor_at(r.trigger)
            if a is None or a.kind != "LC" or r.pieces != ((inp.mode_position, inp.mode_position),):
                dropped += 1
                continue
            if best is None or r.confidence > best[1]:
                best = (a.label, r.confidence)
        if best is not None:
            out.append(Extraction(task, best[0], (), None, best[1]))
        return out, dropped
    for r in raw:
        if inp.mode == "TP" and r.trigger == inp.mode_position:
            out.append(Extraction(task, "", r.pieces, None, r.confidence))
            continue
        a = inp.anchor_at(r.trigger)
        if a is None:
            dropped += 1
        elif a.kind == "LM":
            out.append(Extraction(task, a.label, r.pieces, None, r.confidence))
        elif a.kind == "LR" and len(r.pieces) == 2:
            out.append(Extraction(task, a.label, r.pieces, None, r.confidence))
        else:
            dropped += 1
    return _dedupe(out), dropped


def _assemble_events(raw: Sequence[RawTuple], inp: UnifiedInput) -> tuple[list[Extraction], int]:
    events: list[RawTuple] = []
    roles: dict[Piece, list[tuple[str, float]]] = {}
    args: dict[int, list[tuple[Piece, float]]] = {}
    dropped = 0
    for r in raw:
        a = inp.anchor_at(r.trigger)
        if len(r.pieces) != 1:
            dropped += 1
        elif a is not None and a.kind == "LM":
            events.append(r)
        elif a is not None and a.kind == "LR":
            roles.setdefault(r.pieces[0], []).append((a.label, r.confidence))
        elif a is None:
            args.setdefault(r.trigger, []).append((r.pieces[0], r.confidence))
        else:
            dropped += 1
    heads = {ev.pieces[0][0] for ev in events}
    dropped += sum(len(v) for t, v in args.items() if t not in heads)
    out: list[Extraction] = []
    for ev in events:
        label = inp.anchor_at(ev.trigger).label
        trig = ev.pieces[0]
        out.append(Extraction("ee", label, (trig,), None, ev.confidence))
        for arg, conf in args.get(trig[0], ()):
            for role, rconf in roles.get(arg, ()):
                out.append(Extraction("ee", label, (trig, arg), role, min(ev.confidence, conf, rconf)))
    return _dedupe(out), dropped


def _dedupe(items: list[Extraction]) -> list[Extraction]:
    seen = {}
    for x in items:
        if x not in seen or x.confidence > seen[x].confidence:
            seen[x] = x
    return list(seen.values())


def _with_confidence(raw: list[RawTuple], P: np.ndarray) -> list[RawTuple]:
    return [RawTuple(r.trigger, r.pieces, cycle_confidence(P, r.trigger, r.pieces)) for r in raw]


def decode(
    P: np.ndarray,
    inp: UnifiedInput,
    tau: float = 0.5,
    max_pieces: int = 4,
    max_span_len: int = 16,
    budget: int | None = None,
) -> list[Extraction]:
    P = np.asarray(P, dtype=np.float64)
    raw = find_cycles(threshold_edges(P, tau), inp, max_pieces, max_span_len, budget)
    extractions, dropped = assemble(_with_confidence(raw, P), inp)
    if dropped:
        logger.debug("dropped %d loops without a valid trigger", dropped)
    return extractions


def brute_force_decode(
    P: np.ndarray,
    inp: UnifiedInput,
    tau: float = 0.5,
    max_pieces: int = 4,
    max_span_len: int = 16,
) -> list[Extraction]:
    P = np.asarray(P, dtype=np.float64)
    raw = brute_force_cycles(P, inp, tau, max_pieces, max_span_len)
    return assemble(_with_confidence(raw, P), inp)[0]


def gold_extractions(inp: UnifiedInput, gold: GoldAnswer) -> list[Extraction]:
    """The extractions a perfect decoder should emit for ``gold``."""
    out = []
    for tup in gold.tuples:
        if inp.task == "ee":
            trig = tup.pieces[0]
            out.append(Extraction("ee", tup.label, (trig,)))
            for role, arg in zip(tup.roles or (), tup.pieces[1:]):
                out.append(Extraction("ee", tup.label, (trig, arg), role))
        else:
            out.append(Extraction(inp.task, tup.label, tup.pieces))
    return _dedupe(out)


def gold_raw_tuples(inp: UnifiedInput, gold: GoldAnswer) -> list[RawTuple]:
    return sorted({RawTuple(t, tuple(p)) for t, p in gold_cycles(inp, gold)})


# ---------------------------------------------------------------------------
# matrix dumps

DUMP_FORMAT = "spancycle-matrices"
DUMP_VERSION = 1


def write_matrices(path: str | Path, matrices: Mapping[str, np.ndarray]) -> None:
    """Write {instance id: (3, n, n) array} as a JSON matrix dump."""
    body = {}
    for key in sorted(matrices):
        arr = np.asarray(matrices[key], dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3 or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"matrix for {key!r} must have shape (3, n, n), got {arr.shape}")
        entry = {"length": int(arr.shape[1])}
        for r, name in enumerate(RELATIONS):
            entry[name] = [float(v) for v in arr[r].ravel()]
        body[key] = entry
    doc = {"format": DUMP_FORMAT, "version": DUMP_VERSION, "matrices": body}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def read_matrices(path: str | Path) -> dict[str, np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read matrix dump {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != DUMP_FORMAT:
        raise DataError(f"{path} is not a matrix dump")
    if doc.get("version") != DUMP_VERSION:
        raise DataError(f"unsupported matrix dump version {doc.get('version')!r}")
    out = {}
    for key, entry in doc["matrices"].items():
        n = entry["length"]
        try:
            out[key] = np.stack([np.asarray(entry[name], dtype=np.float64).reshape(n, n)
                                 for name in RELATIONS])
        except (KeyError, ValueError) as exc:
            raise DataError(f"matrix dump entry {key!r} is malformed: {exc}") from None
    return out
