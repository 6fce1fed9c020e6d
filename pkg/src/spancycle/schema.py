"""Unified instruction + schema + text inputs and their graph labels.

Token layout of an assembled input::

    [I] instruction... ([LM]|[LR]|[LC] label...)* ([TL]|[TP]|[B]) text...

Every answer tuple is encoded as a closed loop over three relation
matrices (row = source, column = target):

    TA(t, s1)  AS(s1, e1)  A2A(e1, s2)  AS(s2, e2) ...  TA(ek, t)

where ``t`` is the trigger position and ``(s_m, e_m)`` are the pieces of
the answer. The closing TA edge runs from the last piece end back to the
trigger, so a single-token span under one label never closes a loop for a
different label that only shares its start token.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

SPECIAL_TOKENS = ("[PAD]", "[I]", "[LM]", "[LR]", "[LC]", "[TL]", "[TP]", "[B]")
PAD_ID, I_ID, LM_ID, LR_ID, LC_ID, TL_ID, TP_ID, B_ID = range(len(SPECIAL_TOKENS))
UNK = "[UNK]"
UNK_ID = len(SPECIAL_TOKENS)
SPECIAL_IDS = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}

RELATIONS = ("TA", "A2A", "AS")
TA, A2A, AS = range(3)

TASKS = ("ner", "re", "ee", "absa", "cls", "mrc")
ANCHOR_KINDS = {"ent": "LM", "rel": "LR", "cls": "LC"}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    surface: tuple[str, ...]
    char_spans: tuple[tuple[int, int], ...]
    text: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def separators(self) -> list[str]:
        """Gaps between tokens; ``len(self) + 1`` entries including both ends."""
        cuts = [0] + [c for span in self.char_spans for c in span] + [len(self.text)]
        return [self.text[cuts[k]:cuts[k + 1]] for k in range(0, len(cuts), 2)]

    def reconstruct(self) -> str:
        seps = self.separators()
        out = [seps[0]]
        for tok, sep in zip(self.surface, seps[1:]):
            out.append(tok)
            out.append(sep)
        return "".join(out)


class Vocab:
    """Lowercased word vocabulary with the special tokens at fixed ids 0-7."""

    def __init__(self, words: Iterable[str] = ()):
        extra = sorted({w.lower() for w in words} - set(SPECIAL_TOKENS) - {UNK.lower()})
        self.itos = list(SPECIAL_TOKENS) + [UNK] + extra
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        if token in SPECIAL_IDS:
            return SPECIAL_IDS[token]
        return self.stoi.get(token.lower(), UNK_ID)

    def encode(self, surface: Sequence[str]) -> list[int]:
        return [self.id(t) for t in surface]

    @classmethod
    def from_inputs(cls, inputs: Iterable["UnifiedInput"]) -> "Vocab":
        return cls(w for inp in inputs for w in inp.seq.surface)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[: len(SPECIAL_TOKENS) + 1]) != SPECIAL_TOKENS + (UNK,):
            raise DataError("vocabulary does not start with the reserved special tokens")
        vocab = cls()
        vocab.itos = list(itos)
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        return vocab


def tokenize(text: str, vocab: Vocab | None = None) -> TokenSeq:
    """Split ``text`` into word and punctuation tokens with character offsets.

    Without a vocabulary every token id is the OOV id.
    """
    matches = list(_TOKEN_RE.finditer(text))
    surface = tuple(m.group() for m in matches)
    ids = tuple(vocab.encode(surface)) if vocab is not None else (UNK_ID,) * len(surface)
    return TokenSeq(ids, surface, tuple(m.span() for m in matches), text)


@dataclass(frozen=True)
class Schema:
    ent: tuple[str, ...] = ()
    rel: tuple[str, ...] = ()
    cls: tuple[str, ...] = ()

    @classmethod
    def coerce(cls, schema: "Schema | Mapping[str, Sequence[str]] | None") -> "Schema":
        if schema is None:
            return cls()
        if isinstance(schema, Schema):
            return schema
        unknown = set(schema) - set(ANCHOR_KINDS)
        if unknown:
            raise DataError(f"unknown schema kinds: {sorted(unknown)}")
        return cls(*(tuple(schema.get(k) or ()) for k in ANCHOR_KINDS))

    def is_empty(self) -> bool:
        return not (self.ent or self.rel or self.cls)

    def to_dict(self) -> dict[str, list[str]]:
        return {"ent": list(self.ent), "rel": list(self.rel), "cls": list(self.cls)}


@dataclass(frozen=True)
class Anchor:
    kind: str  # LM, LR or LC
    position: int
    label_span: tuple[int, int]  # token range of the label text, end exclusive
    label: str


@dataclass(frozen=True)
class UnifiedInput:
    seq: TokenSeq
    segments: dict[str, tuple[int, int]]
    anchors: tuple[Anchor, ...]
    mode: str  # TL, TP or B
    mode_position: int
    task: str
    text_seq: TokenSeq
    schema: Schema = Schema()

    def __len__(self) -> int:
        return len(self.seq)

    def __hash__(self) -> int:
        return hash((self.seq, self.task))

    @property
    def text_start(self) -> int:
        return self.segments["text"][0]

    def text_positions(self) -> range:
        return range(*self.segments["text"])

    def span_positions(self) -> np.ndarray:
        """Mask of positions that may belong to an answer piece."""
        mask = np.zeros(len(self), dtype=bool)
        if self.mode == "B":
            mask[self.mode_position] = True
        else:
            mask[slice(*self.segments["text"])] = True
        return mask

    def trigger_positions(self) -> list[int]:
        out = [a.position for a in self.anchors]
        if self.mode == "TP":
            out.append(self.mode_position)
        if self.task == "ee":
            out.extend(self.text_positions())
        return sorted(out)

    def anchor_at(self, position: int) -> Anchor | None:
        for a in self.anchors:
            if a.position == position:
                return a
        return None

    def anchor_for(self, label: str, kind: str | None = None) -> Anchor | None:
        for a in self.anchors:
            if a.label == label and (kind is None or a.kind == kind):
                return a
        return None

    def piece_text(self, piece: tuple[int, int]) -> str:
        """Source text covered by an inclusive token interval of the text segment."""
        s, e = piece
        k0 = self.text_start
        return self.text_seq.text[self.text_seq.char_spans[s - k0][0]:self.text_seq.char_spans[e - k0][1]]

    def piece_chars(self, piece: tuple[int, int]) -> tuple[int, int]:
        s, e = piece
        k0 = self.text_start
        return self.text_seq.char_spans[s - k0][0], self.text_seq.char_spans[e - k0][1]

    def rendered(self) -> str:
        return " ".join(self.seq.surface)


def _check_label(label: str) -> None:
    if not isinstance(label, str) or not label.strip():
        raise DataError(f"schema label must be a non-empty string, got {label!r}")
    for tok in SPECIAL_TOKENS + (UNK,):
        if tok in label:
            raise DataError(f"schema label {label!r} contains reserved token {tok}")
    if not _TOKEN_RE.search(label):
        raise DataError(f"schema label {label!r} has no tokens")


def _check_schema_for_task(task: str, schema: Schema) -> None:
    if task not in TASKS:
        raise DataError(f"unknown task kind {task!r}; expected one of {', '.join(TASKS)}")
    rules = {
        "ner": dict(rel=False, cls=False),
        "re": dict(rel=True, cls=False),
        "absa": dict(rel=True, cls=False),
        "ee": dict(ent=True, cls=False),
        "cls": dict(ent=False, rel=False, cls=True),
        "mrc": dict(ent=False, rel=False, cls=False),
    }[task]
    for kind, required in rules.items():
        present = bool(getattr(schema, kind))
        if required and not present:
            raise DataError(f"task {task} requires {ANCHOR_KINDS[kind]} labels in schema.{kind}")
        if not required and present:
            raise DataError(f"task {task} does not accept schema.{kind} labels")
    names = schema.ent + schema.rel + schema.cls
    for label in names:
        _check_label(label)
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DataError(f"duplicate schema labels: {dupes}")


def mode_for(task: str, schema: Schema) -> str:
    if task == "cls":
        return "B"
    if schema.is_empty():
        return "TP"
    return "TL"


def build_input(
    instruction: str,
    schema: Schema | Mapping[str, Sequence[str]] | None,
    text: str,
    task: str,
    vocab: Vocab | None = None,
    max_len: int = 256,
) -> UnifiedInput:
    schema = Schema.coerce(schema)
    _check_schema_for_task(task, schema)
    text_seq = tokenize(text, vocab)
    if not len(text_seq):
        raise DataError("text segment is empty")

    surface: list[str] = []
    anchors: list[Anchor] = []

    surface.append("[I]")
    surface.extend(tokenize(instruction).surface)
    instr_end = len(surface)
    for kind_key, kind in ANCHOR_KINDS.items():
        for label in getattr(schema, kind_key):
            pos = len(surface)
            surface.append(f"[{kind}]")
            words = tokenize(label).surface
            surface.extend(words)
            anchors.append(Anchor(kind, pos, (pos + 1, pos + 1 + len(words)), label))
    schema_end = len(surface)
    mode = mode_for(task, schema)
    mode_position = len(surface)
    surface.append(f"[{mode}]")
    text_start = len(surface)
    surface.extend(text_seq.surface)

    if len(surface) > max_len:
        raise DataError(f"input has {len(surface)} tokens, exceeding max_len={max_len}")

    spans = []
    cursor = 0
    for tok in surface:
        spans.append((cursor, cursor + len(tok)))
        cursor += len(tok) + 1
    rendered = " ".join(surface)
    ids = tuple(vocab.encode(surface)) if vocab is not None else tuple(
        SPECIAL_IDS.get(t, UNK_ID) for t in surface)
    seq = TokenSeq(ids, tuple(surface), tuple(spans), rendered)
    segments = {
        "instruction": (0, instr_end),
        "schema": (instr_end, schema_end),
        "text": (text_start, len(surface)),
    }
    return UnifiedInput(seq, segments, tuple(anchors), mode, mode_position, task, text_seq, schema)


# ---------------------------------------------------------------------------
# gold answers

Piece = tuple[int, int]  # inclusive token interval in input coordinates


@dataclass(frozen=True)
class GoldTuple:
    label: str
    pieces: tuple[Piece, ...]
    roles: tuple[str, ...] | None = None


@dataclass(frozen=True)
class GoldAnswer:
    task: str
    tuples: tuple[GoldTuple, ...] = ()


def _overlaps(a: Piece, b: Piece) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def validate_gold(inp: UnifiedInput, gold: GoldAnswer) -> None:
    if gold.task != inp.task:
        raise DataError(f"gold task {gold.task!r} does not match input task {inp.task!r}")
    lo, hi = inp.segments["text"]
    for tup in gold.tuples:
        for s, e in tup.pieces:
            if not (lo <= s <= e < hi):
                raise DataError(f"span ({s}, {e}) lies outside the text segment [{lo}, {hi})")
        for k, a in enumerate(tup.pieces):
            for b in tup.pieces[k + 1:]:
                if _overlaps(a, b):
                    raise DataError(f"pieces {a} and {b} of {tup.label!r} overlap")
        kind = None
        if inp.mode != "TP":
            anchor = inp.anchor_for(tup.label)
            if anchor is None:
                raise DataError(f"label {tup.label!r} is not in the schema")
            kind = anchor.kind
        n = len(tup.pieces)
        task = inp.task
        if task == "cls":
            if n:
                raise DataError("classification answers carry no spans")
        elif task == "ee":
            if kind != "LM":
                raise DataError(f"event type {tup.label!r} must be an ent label")
            roles = tup.roles or ()
            if n < 1 or len(roles) != n - 1:
                raise DataError("event answers need a trigger span plus one span per role")
            for role in roles:
                if inp.anchor_for(role, "LR") is None:
                    raise DataError(f"role {role!r} is not in schema.rel")
        elif kind == "LR":
            if n != 2:
                raise DataError(f"{task} answer {tup.label!r} needs exactly two spans")
        elif n < 1:
            raise DataError(f"answer {tup.label!r} has no spans")
        if task != "ee" and tup.roles:
            raise DataError("roles are only allowed for event extraction")


Edge = tuple[int, int, int, Piece, Piece]  # relation, row, col, row unit, col unit


def cycle_edges(trigger: int, pieces: Sequence[Piece]) -> list[Edge]:
    """Edges of the closed loop licensing ``(trigger, pieces)``.

    Each edge carries the intervals its endpoints belong to, which is what
    the keep-vector construction marks.
    """
    t_unit = (trigger, trigger)
    edges: list[Edge] = [(TA, trigger, pieces[0][0], t_unit, pieces[0])]
    for m, (s, e) in enumerate(pieces):
        edges.append((AS, s, e, (s, e), (s, e)))
        if m + 1 < len(pieces):
            nxt = pieces[m + 1]
            edges.append((A2A, e, nxt[0], (s, e), nxt))
    edges.append((TA, pieces[-1][1], trigger, pieces[-1], t_unit))
    return edges


def gold_cycles(inp: UnifiedInput, gold: GoldAnswer) -> list[tuple[int, tuple[Piece, ...]]]:
    """Every (trigger, pieces) loop the gold answer induces."""
    loops = []
    for tup in gold.tuples:
        if inp.task == "cls":
            anchor = inp.anchor_for(tup.label, "LC")
            loops.append((anchor.position, ((inp.mode_position, inp.mode_position),)))
        elif inp.mode == "TP":
            loops.append((inp.mode_position, tup.pieces))
        elif inp.task == "ee":
            trigger = tup.pieces[0]
            loops.append((inp.anchor_for(tup.label, "LM").position, (trigger,)))
            for role, arg in zip(tup.roles or (), tup.pieces[1:]):
                loops.append((trigger[0], (arg,)))
                loops.append((inp.anchor_for(role, "LR").position, (arg,)))
        else:
            loops.append((inp.anchor_for(tup.label).position, tup.pieces))
    return loops


def _gold_edges(inp: UnifiedInput, gold: GoldAnswer) -> list[Edge]:
    validate_gold(inp, gold)
    return [edge for t, pieces in gold_cycles(inp, gold) for edge in cycle_edges(t, pieces)]


def build_graph_labels(inp: UnifiedInput, gold: GoldAnswer) -> np.ndarray:
    """Binary label tensor of shape (3, |x|, |x|) indexed by relation TA, A2A, AS."""
    n = len(inp)
    G = np.zeros((3, n, n), dtype=np.float64)
    for r, i, j, _, _ in _gold_edges(inp, gold):
        G[r, i, j] = 1.0
    return G


def build_label_vectors(inp: UnifiedInput, gold: GoldAnswer) -> np.ndarray:
    """Gold keep vectors of shape (3, |x|).

    A position is 1 for relation r when it lies in a gold piece touched by
    an r-edge, or is the trigger position of such an edge. Label-text tokens
    after an anchor stay 0.
    """
    n = len(inp)
    L = np.zeros((3, n), dtype=np.float64)
    for r, _, _, u, v in _gold_edges(inp, gold):
        L[r, u[0]:u[1] + 1] = 1.0
        L[r, v[0]:v[1] + 1] = 1.0
    return L


# ---------------------------------------------------------------------------
# dataset files


@dataclass(frozen=True)
class Instance:
    id: str
    input: UnifiedInput
    gold: GoldAnswer
    image: str | None = None
    record: dict = field(default_factory=dict, compare=False, hash=False, repr=False)


def _char_to_piece(inp: UnifiedInput, start: int, end: int) -> Piece:
    spans = inp.text_seq.char_spans
    text_len = len(inp.text_seq.text)
    if not (0 <= start < end <= text_len):
        raise DataError(f"character span [{start}, {end}) is out of range for text of length {text_len}")
    starts = {s: k for k, (s, _) in enumerate(spans)}
    ends = {e: k for k, (_, e) in enumerate(spans)}
    if start not in starts or end not in ends:
        raise DataError(f"character span [{start}, {end}) does not align with token boundaries")
    ks, ke = starts[start], ends[end]
    if ks > ke:
        raise DataError(f"character span [{start}, {end}) is empty after tokenization")
    return inp.text_start + ks, inp.text_start + ke


def parse_record(record: Mapping, vocab: Vocab | None = None, max_len: int = 256) -> Instance:
    if not isinstance(record, Mapping):
        raise DataError("record must be a JSON object")
    missing = [k for k in ("id", "task", "text") if k not in record]
    if missing:
        raise DataError(f"missing fields: {missing}")
    task = record["task"]
    text = record["text"]
    if not isinstance(text, str):
        raise DataError("text must be a string")
    inp = build_input(record.get("instruction") or "", record.get("schema"), text, task, vocab, max_len)
    tuples = []
    for ans in record.get("answers") or ():
        if not isinstance(ans, Mapping):
            raise DataError("answers must be objects")
        spans = ans.get("spans") or []
        try:
            pieces = tuple(_char_to_piece(inp, int(s), int(e)) for s, e in spans)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed spans {spans!r}") from None
        label = "" if inp.mode == "TP" else ans.get("label")
        roles = ans.get("roles")
        tuples.append(GoldTuple(label, pieces, tuple(roles) if roles is not None else None))
    gold = GoldAnswer(task, tuple(tuples))
    validate_gold(inp, gold)
    image = record.get("image")
    return Instance(str(record["id"]), inp, gold, image, dict(record))


def load_dataset(path: str | Path, vocab: Vocab | None = None, max_len: int = 256) -> list[Instance]:
    """Read a line-delimited JSON dataset; errors carry 1-based line numbers."""
    instances: list[Instance] = []
    seen: dict[str, int] = {}
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from None
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", lineno) from None
            try:
                inst = parse_record(record, vocab, max_len)
            except DataError as exc:
                raise DataError(str(exc), lineno) from None
            if inst.id in seen:
                raise DataError(f"duplicate id {inst.id!r} (first seen on line {seen[inst.id]})", lineno)
            seen[inst.id] = lineno
            instances.append(inst)
    return instances
