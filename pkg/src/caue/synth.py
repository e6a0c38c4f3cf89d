"""Synthetic clinical corpora with planted label -> concept -> token structure.

Every label owns a block of concepts and a Zipf-weighted token distribution.
A note slot holds, with probabilities scaled by ``signal_strength``, a
concept surface form or a label token from one of the patient's labels, and
otherwise a background token. The lexicon additionally carries a few
background concepts (ordinary background words, so they occur regardless of
labels) and excluded-type distractors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .concepts import LexiconEntry, write_lexicon

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _CONSONANTS for v in _VOWELS]
_PLANTED_TYPES = ("Disease or Syndrome", "Sign or Symptom", "Pharmacologic Substance", "Finding")
_DISTRACTOR_TYPES = ("Temporal Concept", "Quantitative Concept", "Language")


@dataclass
class SynthConfig:
    n_patients: int = 200
    n_labels: int = 6
    n_concepts: int = 60
    vocab_size: int = 2000
    notes_per_patient: tuple[int, int] = (1, 2)
    note_length: tuple[int, int] = (40, 80)
    labels_per_patient: tuple[int, int] = (1, 3)
    signal_strength: float = 0.8
    seed: int = 0
    label_tokens: int = 40
    concept_rate: float = 0.12
    label_token_rate: float = 0.05
    background_concepts: int = 10
    distractor_concepts: int = 10
    punctuation_rate: float = 0.08
    zipf_exponent: float = 1.0

    def __post_init__(self):
        self.notes_per_patient = tuple(self.notes_per_patient)
        self.note_length = tuple(self.note_length)
        self.labels_per_patient = tuple(self.labels_per_patient)
        for name in ("notes_per_patient", "note_length", "labels_per_patient"):
            lo, hi = getattr(self, name)
            if lo < 1 or lo > hi:
                raise ValueError(f"{name} must be a non-empty range of positive integers, got {(lo, hi)}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")
        if self.labels_per_patient[1] > self.n_labels:
            raise ValueError("labels_per_patient exceeds n_labels")
        if self.n_concepts < self.n_labels:
            raise ValueError("need at least one concept per label")
        if self.concept_rate + self.label_token_rate > 1.0:
            raise ValueError("concept_rate + label_token_rate must not exceed 1")
        if self.n_patients < 2:
            raise ValueError("need at least two patients")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("notes_per_patient", "note_length", "labels_per_patient"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "SynthConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)


def pseudo_word(i: int) -> str:
    """Deterministic lowercase non-word for index ``i`` (at least two syllables)."""
    n = len(_SYLLABLES)
    parts = [_SYLLABLES[i % n]]
    i //= n
    parts.append(_SYLLABLES[i % n])
    i //= n
    while i:
        parts.append(_SYLLABLES[i % n])
        i //= n
    return "".join(parts)


def _zipf_cdf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    return cdf


def _draw(cdf: np.ndarray, rng: np.random.Generator) -> int:
    return int(np.searchsorted(cdf, rng.random(), side="right"))


@dataclass
class SynthCorpus:
    records: list[dict]
    lexicon: list[LexiconEntry]
    manifest: dict

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": out / "corpus.jsonl",
            "lexicon": out / "lexicon.tsv",
            "manifest": out / "manifest.json",
        }
        with open(paths["corpus"], "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        write_lexicon(self.lexicon, paths["lexicon"])
        with open(paths["manifest"], "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return paths


def generate(config: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(config.seed)
    L, C = config.n_labels, config.n_concepts

    # concept blocks: concept c belongs to label c % L; 1-3 unique tokens each
    concept_label = [c % L for c in range(C)]
    concept_len = rng.integers(1, 4, size=C)
    n_concept_tokens = int(concept_len.sum())
    n_label_tokens = L * config.label_tokens
    n_background = config.vocab_size - n_concept_tokens - n_label_tokens
    min_background = 50 + config.background_concepts + config.distractor_concepts
    if n_background < min_background:
        raise ValueError(
            f"vocab_size {config.vocab_size} too small: label and concept tokens need "
            f"{n_concept_tokens + n_label_tokens}, leaving {n_background} < {min_background} background words"
        )
    words = [pseudo_word(i) for i in range(config.vocab_size)]
    order = rng.permutation(config.vocab_size)
    words = [words[i] for i in order]
    cursor = 0
    concept_tokens = []
    for c in range(C):
        concept_tokens.append(words[cursor : cursor + concept_len[c]])
        cursor += concept_len[c]
    label_vocab = [words[cursor + l * config.label_tokens : cursor + (l + 1) * config.label_tokens] for l in range(L)]
    cursor += n_label_tokens
    background = words[cursor:]

    concept_ids = [f"C{c:05d}" for c in range(C)]
    lexicon = [
        LexiconEntry(concept_ids[c], _PLANTED_TYPES[c % len(_PLANTED_TYPES)], [tuple(concept_tokens[c])])
        for c in range(C)
    ]
    # mid-frequency background words double as label-independent concepts and distractors
    extra = background[20 : 20 + config.background_concepts + config.distractor_concepts]
    for i, word in enumerate(extra[: config.background_concepts]):
        lexicon.append(LexiconEntry(f"B{i:05d}", "Finding", [(word,)]))
    for i, word in enumerate(extra[config.background_concepts :]):
        lexicon.append(LexiconEntry(f"X{i:05d}", _DISTRACTOR_TYPES[i % len(_DISTRACTOR_TYPES)], [(word,)]))

    label_names = [f"phen_{l:02d}" for l in range(L)]
    label_cdf = _zipf_cdf(config.label_tokens, config.zipf_exponent)
    bg_cdf = _zipf_cdf(len(background), config.zipf_exponent)
    per_label_concepts = [[c for c in range(C) if concept_label[c] == l] for l in range(L)]
    concept_cdf = [_zipf_cdf(len(block), config.zipf_exponent) for block in per_label_concepts]
    s = config.signal_strength
    p_concept = s * config.concept_rate
    p_label = p_concept + s * config.label_token_rate

    records, patients = [], []
    injected_concepts = np.zeros(C, dtype=np.int64)
    for pid in range(config.n_patients):
        k = int(rng.integers(config.labels_per_patient[0], config.labels_per_patient[1] + 1))
        labels = sorted(rng.choice(L, size=k, replace=False).tolist())
        mortality = bool(rng.random() < (0.5 if 0 in labels else 0.1))
        n_notes = int(rng.integers(config.notes_per_patient[0], config.notes_per_patient[1] + 1))
        patient_key = f"p{pid:05d}"
        for doc in range(n_notes):
            length = int(rng.integers(config.note_length[0], config.note_length[1] + 1))
            tokens: list[str] = []
            while len(tokens) < length:
                u = rng.random()
                if u < p_concept:
                    lab = labels[int(rng.integers(len(labels)))]
                    block = per_label_concepts[lab]
                    c = block[_draw(concept_cdf[lab], rng)]
                    tokens.extend(concept_tokens[c])
                    injected_concepts[c] += 1
                elif u < p_label:
                    lab = labels[int(rng.integers(len(labels)))]
                    tokens.append(label_vocab[lab][_draw(label_cdf, rng)])
                else:
                    tokens.append(background[_draw(bg_cdf, rng)])
                if len(tokens) < length and rng.random() < config.punctuation_rate:
                    tokens.append("." if rng.random() < 0.7 else ",")
            records.append(
                {
                    "patient": patient_key,
                    "visit": "v1",
                    "doc": doc,
                    "text": " ".join(tokens),
                    "labels": [label_names[l] for l in labels],
                    "mortality": mortality,
                }
            )
        patients.append({"patient": patient_key, "visit": "v1", "labels": [label_names[l] for l in labels],
                         "notes": n_notes, "mortality": mortality})

    per_label = {label_names[l]: int(sum(injected_concepts[c] for c in per_label_concepts[l])) for l in range(L)}
    manifest = {
        "config": config.to_dict(),
        "label_names": label_names,
        "concept_label": {concept_ids[c]: label_names[concept_label[c]] for c in range(C)},
        "injected": {
            "per_label": per_label,
            "per_concept": {concept_ids[c]: int(injected_concepts[c]) for c in range(C)},
            "total": int(injected_concepts.sum()),
        },
        "patients": patients,
    }
    return SynthCorpus(records, lexicon, manifest)
