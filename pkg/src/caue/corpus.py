"""Clinical corpus ingestion, note preprocessing and vocabularies.

One (patient, visit) pair becomes one patient entity. Notes are lowercased,
tokenized with a rule-based splitter, numbers and dates are replaced with
placeholders, and notes shorter than ``MIN_NOTE_TOKENS`` are dropped.
"""
from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

logger = logging.getLogger(__name__)

MIN_NOTE_TOKENS = 40
NUM = "[NUM]"
DATE = "[DATE]"
PAD = "<pad>"
UNK = "<unk>"
STORE_FORMAT_VERSION = 1

MIMIC_CATEGORY = "discharge summary"


class CorpusError(ValueError):
    """Raised on malformed input; carries the offending row when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RawRecord:
    patient_key: str
    visit_key: str
    text: str
    labels: frozenset[str] = frozenset()
    mortality: bool | None = None
    doc_index: int = 0


@dataclass
class ClinicalNote:
    note_id: int
    patient_id: int
    tokens: list[str]


@dataclass
class Patient:
    patient_id: int
    key: tuple[str, str]
    note_ids: list[int] = field(default_factory=list)
    labels: frozenset[int] = frozenset()
    mortality: bool | None = None


class Vocabulary:
    """Frozen token -> index map with reserved PAD (0) and UNK (1)."""

    def __init__(self, tokens: Sequence[str], max_size: int):
        self.max_size = max_size
        self.itos = [PAD, UNK, *tokens]
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    pad_index = 0
    unk_index = 1

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.unk_index)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_index) for t in tokens]

    def to_dict(self) -> dict:
        return {"max_size": self.max_size, "tokens": self.itos[2:]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocabulary":
        return cls(data["tokens"], data["max_size"])


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------


def _assign_doc_indices(raw: Iterable[tuple[int, dict]]) -> Iterator[RawRecord]:
    seen: set[tuple[str, str, int]] = set()
    next_doc: Counter = Counter()
    for row, item in raw:
        patient, visit, text = item["patient"], item["visit"], item["text"]
        if not isinstance(text, str) or not text.strip():
            raise CorpusError("empty text field", row)
        if "doc" in item and item["doc"] is not None:
            doc = int(item["doc"])
        else:
            doc = next_doc[(patient, visit)]
        next_doc[(patient, visit)] = max(next_doc[(patient, visit)], doc + 1)
        if (patient, visit, doc) in seen:
            raise CorpusError(f"duplicate record ({patient!r}, {visit!r}, doc {doc})", row)
        seen.add((patient, visit, doc))
        mortality = item.get("mortality")
        yield RawRecord(
            patient_key=patient,
            visit_key=visit,
            text=text,
            labels=frozenset(str(label) for label in item.get("labels") or ()),
            mortality=None if mortality is None else bool(mortality),
            doc_index=doc,
        )


def _jsonl_items(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for row, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid JSON: {exc.msg}", row) from None
        if not isinstance(item, dict):
            raise CorpusError("expected a JSON object", row)
        for key in ("patient", "visit", "text"):
            if key not in item:
                raise CorpusError(f"missing field {key!r}", row)
        item["patient"], item["visit"] = str(item["patient"]), str(item["visit"])
        labels = item.get("labels")
        if labels is not None and not isinstance(labels, list):
            raise CorpusError("'labels' must be a list", row)
        yield row, item


def _mimic_items(
    lines: Iterable[str],
    labels: Mapping[tuple[str, str], Iterable[str]] | None,
    mortality: Mapping[tuple[str, str], bool] | None,
) -> Iterator[tuple[int, dict]]:
    reader = csv.DictReader(lines)
    required = {"SUBJECT_ID", "HADM_ID", "CATEGORY", "TEXT"}
    missing = required - set(reader.fieldnames or ())
    if missing:
        raise CorpusError(f"NOTEEVENTS header lacks columns {sorted(missing)}", 1)
    # header is row 1
    for row, rec in enumerate(reader, start=2):
        if None in rec:
            raise CorpusError("too many fields", row)
        if (rec["CATEGORY"] or "").strip().lower() != MIMIC_CATEGORY:
            continue
        key = (rec["SUBJECT_ID"].strip(), rec["HADM_ID"].strip())
        if not key[0] or not key[1]:
            raise CorpusError("missing SUBJECT_ID or HADM_ID", row)
        yield row, {
            "patient": key[0],
            "visit": key[1],
            "text": rec["TEXT"],
            "labels": list((labels or {}).get(key, ())),
            "mortality": (mortality or {}).get(key),
        }


def ingest(
    source: str | Path | Iterable[str],
    format: str = "jsonl",
    *,
    labels: Mapping[tuple[str, str], Iterable[str]] | None = None,
    mortality: Mapping[tuple[str, str], bool] | None = None,
) -> list[RawRecord]:
    """Read raw records from a JSONL file or a MIMIC-III NOTEEVENTS.csv.

    ``source`` is a path or an iterable of lines. For the MIMIC adapter only
    discharge summaries are kept; ``labels``/``mortality`` optionally map
    ``(SUBJECT_ID, HADM_ID)`` to annotations since NOTEEVENTS carries none.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return ingest(fh, format, labels=labels, mortality=mortality)
    if format == "jsonl":
        items = _jsonl_items(source)
    elif format == "mimic_noteevents_csv":
        items = _mimic_items(source, labels, mortality)
    else:
        raise ValueError(f"unknown input format {format!r}")
    return list(_assign_doc_indices(items))


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

_MONTH = (
    r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?"
    r"|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)"
)
_DATE_RE = re.compile(
    r"\b(?:"
    r"\d{1,2}/\d{1,2}/\d{2,4}"
    r"|\d{1,2}-\d{1,2}-\d{2,4}"
    r"|\d{4}-\d{1,2}-\d{1,2}"
    rf"|{_MONTH}\.? \d{{1,2}}(?:st|nd|rd|th)?,? \d{{4}}"
    rf"|\d{{1,2}}(?:st|nd|rd|th)? {_MONTH}\.?,? \d{{4}}"
    r")\b"
)
_DECIMAL_RE = re.compile(r"\b\d+\.\d+")
_TOKEN_RE = re.compile(r"\[num\]|\[date\]|[^\W_]+|[^\w\s]|_")
_PLACEHOLDERS = {"[num]": NUM, "[date]": DATE}


def tokenize(text: str) -> list[str]:
    """Lowercase, placeholder-substitute and split ``text`` into tokens."""
    text = text.lower()
    text = _DATE_RE.sub(" [date] ", text)
    text = _DECIMAL_RE.sub(" [num] ", text)
    tokens: list[str] = []
    for tok in _TOKEN_RE.findall(text):
        tok = _PLACEHOLDERS.get(tok, tok)
        if tok.isdigit():
            tok = NUM
        # collapse runs of one punctuation mark
        if tokens and tok == tokens[-1] and len(tok) == 1 and not tok.isalnum():
            continue
        tokens.append(tok)
    return tokens


class Preprocessor:
    """Turns RawRecords into ClinicalNotes, counting short-note drops.

    ``scrubber`` is an optional text -> text hook applied before tokenizing
    (e.g. a name remover); inputs are otherwise assumed de-identified.
    """

    def __init__(
        self,
        min_tokens: int = MIN_NOTE_TOKENS,
        scrubber: Callable[[str], str] | None = None,
    ):
        self.min_tokens = min_tokens
        self.scrubber = scrubber
        self.dropped = 0

    def __call__(self, record: RawRecord, note_id: int = -1, patient_id: int = -1) -> ClinicalNote | None:
        text = self.scrubber(record.text) if self.scrubber else record.text
        tokens = tokenize(text)
        if len(tokens) < self.min_tokens:
            self.dropped += 1
            return None
        return ClinicalNote(note_id=note_id, patient_id=patient_id, tokens=tokens)


def preprocess(record: RawRecord, min_tokens: int = MIN_NOTE_TOKENS) -> ClinicalNote | None:
    return Preprocessor(min_tokens)(record)


def build_vocab(notes: Sequence[ClinicalNote], max_size: int = 15000) -> Vocabulary:
    if max_size < 1:
        raise ValueError(f"max_size must be >= 1, got {max_size}")
    if not notes:
        raise ValueError("cannot build a vocabulary from zero notes")
    counts = Counter(tok for note in notes for tok in note.tokens)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ranked[:max_size]], max_size)


# --------------------------------------------------------------------------
# corpus store
# --------------------------------------------------------------------------


@dataclass
class Corpus:
    notes: list[ClinicalNote]
    patients: list[Patient]
    label_names: list[str]
    dropped_notes: int = 0

    def patient_notes(self, patient_id: int) -> list[ClinicalNote]:
        return [self.notes[i] for i in self.patients[patient_id].note_ids]

    def patient_tokens(self, patient_id: int) -> list[str]:
        return [tok for note in self.patient_notes(patient_id) for tok in note.tokens]

    @property
    def has_mortality(self) -> bool:
        return any(p.mortality is not None for p in self.patients)

    def to_dict(self) -> dict:
        return {
            "format_version": STORE_FORMAT_VERSION,
            "label_names": self.label_names,
            "dropped_notes": self.dropped_notes,
            "patients": [
                {
                    "patient_id": p.patient_id,
                    "key": list(p.key),
                    "note_ids": p.note_ids,
                    "labels": sorted(p.labels),
                    "mortality": p.mortality,
                }
                for p in self.patients
            ],
            "notes": [
                {"note_id": n.note_id, "patient_id": n.patient_id, "tokens": n.tokens}
                for n in self.notes
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Corpus":
        version = data.get("format_version")
        if version != STORE_FORMAT_VERSION:
            raise CorpusError(f"unsupported corpus store version {version!r}")
        patients = [
            Patient(
                patient_id=p["patient_id"],
                key=tuple(p["key"]),
                note_ids=list(p["note_ids"]),
                labels=frozenset(p["labels"]),
                mortality=p["mortality"],
            )
            for p in data["patients"]
        ]
        notes = [ClinicalNote(n["note_id"], n["patient_id"], list(n["tokens"])) for n in data["notes"]]
        return cls(notes, patients, list(data["label_names"]), data.get("dropped_notes", 0))

    def save(self, path: str | Path) -> None:
        write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_corpus(records: Iterable[RawRecord], preprocessor: Preprocessor | None = None) -> Corpus:
    """Group records per (patient, visit), preprocess and index them.

    Patients whose every note was dropped are removed, so each surviving
    patient owns at least one note.
    """
    pre = preprocessor or Preprocessor()
    grouped: dict[tuple[str, str], list[RawRecord]] = {}
    for rec in records:
        grouped.setdefault((rec.patient_key, rec.visit_key), []).append(rec)

    label_names = sorted({lab for recs in grouped.values() for r in recs for lab in r.labels})
    label_index = {name: i for i, name in enumerate(label_names)}

    notes: list[ClinicalNote] = []
    patients: list[Patient] = []
    for key, recs in grouped.items():
        pid = len(patients)
        note_ids = []
        for rec in recs:
            note = pre(rec, note_id=len(notes), patient_id=pid)
            if note is not None:
                notes.append(note)
                note_ids.append(note.note_id)
        if not note_ids:
            continue
        labels = frozenset(label_index[lab] for r in recs for lab in r.labels)
        flags = {r.mortality for r in recs if r.mortality is not None}
        patients.append(Patient(pid, key, note_ids, labels, (True in flags) if flags else None))
    if pre.dropped:
        logger.info("dropped %d notes shorter than %d tokens", pre.dropped, pre.min_tokens)
    return Corpus(notes, patients, label_names, pre.dropped)


def write_json_atomic(path: str | Path, payload) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    tmp.replace(path)
