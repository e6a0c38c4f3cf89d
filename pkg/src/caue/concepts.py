"""Lexicon-based medical concept extraction and TF-IDF patient features."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .corpus import ClinicalNote, Corpus, write_json_atomic, tokenize

DEFAULT_EXCLUDED_TYPES = frozenset({"temporal", "language", "quantitative"})
MENTION_FORMAT_VERSION = 1


@dataclass
class LexiconEntry:
    concept_id: str
    semantic_type: str
    surface_forms: list[tuple[str, ...]] = field(default_factory=list)


@dataclass(frozen=True)
class ConceptMention:
    concept_id: str
    note_id: int
    start: int
    length: int


@dataclass
class FeatureVector:
    kind: str
    weights: dict[int, float]
    size: int


def load_lexicon(path: str | Path) -> list[LexiconEntry]:
    """Read a TSV of ``concept_id, semantic_type, surface form`` rows.

    Several rows may share a concept id (one per surface form); forms are run
    through the note tokenizer so they match preprocessed text.
    """
    entries: dict[str, LexiconEntry] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row, fields in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not fields or fields[0].startswith("#"):
                continue
            if len(fields) != 3:
                raise ValueError(f"lexicon row {row}: expected 3 tab-separated fields, got {len(fields)}")
            cid, stype, surface = (f.strip() for f in fields)
            form = tuple(tokenize(surface))
            if not cid or not form:
                raise ValueError(f"lexicon row {row}: empty concept id or surface form")
            entry = entries.setdefault(cid, LexiconEntry(cid, stype))
            if entry.semantic_type != stype:
                raise ValueError(f"lexicon row {row}: conflicting semantic type for {cid}")
            if form not in entry.surface_forms:
                entry.surface_forms.append(form)
    return list(entries.values())


def write_lexicon(entries: Iterable[LexiconEntry], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for entry in entries:
            for form in entry.surface_forms:
                writer.writerow([entry.concept_id, entry.semantic_type, " ".join(form)])


def is_excluded(semantic_type: str, excluded: Iterable[str] = DEFAULT_EXCLUDED_TYPES) -> bool:
    words = set(semantic_type.lower().replace("_", " ").split())
    return any(word in words for word in excluded)


class ConceptMatcher:
    """Greedy longest-match scanner over a fixed lexicon."""

    def __init__(self, lexicon: Sequence[LexiconEntry], excluded: Iterable[str] = DEFAULT_EXCLUDED_TYPES):
        self.excluded = frozenset(excluded)
        self.forms: dict[tuple[str, ...], LexiconEntry] = {}
        for entry in lexicon:
            for form in entry.surface_forms:
                # first entry claiming a surface form wins
                self.forms.setdefault(tuple(form), entry)
        self.max_len = max((len(f) for f in self.forms), default=0)

    def __call__(self, note: ClinicalNote) -> list[ConceptMention]:
        tokens = note.tokens
        mentions = []
        i = 0
        while i < len(tokens):
            for length in range(min(self.max_len, len(tokens) - i), 0, -1):
                entry = self.forms.get(tuple(tokens[i : i + length]))
                if entry is not None:
                    # excluded types still consume their span
                    if not is_excluded(entry.semantic_type, self.excluded):
                        mentions.append(ConceptMention(entry.concept_id, note.note_id, i, length))
                    i += length
                    break
            else:
                i += 1
        return mentions


def extract(
    note: ClinicalNote,
    lexicon: Sequence[LexiconEntry],
    excluded: Iterable[str] = DEFAULT_EXCLUDED_TYPES,
) -> list[ConceptMention]:
    return ConceptMatcher(lexicon, excluded)(note)


def extract_corpus(
    corpus: Corpus,
    lexicon: Sequence[LexiconEntry],
    excluded: Iterable[str] = DEFAULT_EXCLUDED_TYPES,
) -> dict[int, list[ConceptMention]]:
    matcher = ConceptMatcher(lexicon, excluded)
    return {note.note_id: matcher(note) for note in corpus.notes}


def patient_concepts(note_ids: Iterable[int], mentions: Mapping[int, Sequence[ConceptMention]]) -> Counter:
    """Multiset of concept ids over a patient's notes."""
    bag: Counter = Counter()
    for nid in note_ids:
        bag.update(m.concept_id for m in mentions.get(nid, ()))
    return bag


def all_patient_concepts(corpus: Corpus, mentions: Mapping[int, Sequence[ConceptMention]]) -> list[Counter]:
    return [patient_concepts(p.note_ids, mentions) for p in corpus.patients]


def save_mentions(mentions: Mapping[int, Sequence[ConceptMention]], path: str | Path) -> None:
    payload = {
        "format_version": MENTION_FORMAT_VERSION,
        "mentions": {
            str(nid): [[m.concept_id, m.start, m.length] for m in ms] for nid, ms in sorted(mentions.items())
        },
    }
    write_json_atomic(path, payload)


def load_mentions(path: str | Path) -> dict[int, list[ConceptMention]]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format_version") != MENTION_FORMAT_VERSION:
        raise ValueError(f"unsupported mention store version {data.get('format_version')!r}")
    return {
        int(nid): [ConceptMention(cid, int(nid), start, length) for cid, start, length in ms]
        for nid, ms in data["mentions"].items()
    }


# --------------------------------------------------------------------------
# TF-IDF features
# --------------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n_max: int) -> Iterable[tuple[str, ...]]:
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            yield tuple(tokens[i : i + n])


def tfidf_features(
    corpus: Corpus,
    kind: str,
    mentions: Mapping[int, Sequence[ConceptMention]] | None = None,
    ngram_max: int = 3,
) -> list[FeatureVector]:
    """Per-patient TF-IDF vectors over n-grams or concept ids.

    TF is the raw count in the patient's concatenated notes and
    IDF = ln(N / (1 + df)) + 1.
    """
    if kind == "ngram":
        bags = [Counter(_ngrams(corpus.patient_tokens(p.patient_id), ngram_max)) for p in corpus.patients]
    elif kind == "concept":
        if mentions is None:
            raise ValueError("concept features need extracted mentions")
        bags = all_patient_concepts(corpus, mentions)
        if not any(bags):
            raise ValueError("no concept mentions anywhere in the corpus")
    else:
        raise ValueError(f"unknown feature kind {kind!r}")

    df: Counter = Counter()
    for bag in bags:
        df.update(bag.keys())
    index = {feat: i for i, feat in enumerate(sorted(df))}
    n = len(bags)
    idf = {feat: math.log(n / (1 + count)) + 1.0 for feat, count in df.items()}
    return [
        FeatureVector(kind, {index[f]: c * idf[f] for f, c in sorted(bag.items())}, len(index))
        for bag in bags
    ]


def feature_matrix(vectors: Sequence[FeatureVector]) -> sparse.csr_matrix:
    size = vectors[0].size if vectors else 0
    rows, cols, vals = [], [], []
    for r, vec in enumerate(vectors):
        for c, w in vec.weights.items():
            rows.append(r)
            cols.append(c)
            vals.append(w)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(vectors), size), dtype=np.float64)
