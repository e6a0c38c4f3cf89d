import json

import pytest

from caue.concepts import all_patient_concepts, extract_corpus
from caue.corpus import build_corpus, build_vocab, ingest
from caue.synth import SynthConfig, generate

TINY = dict(
    n_patients=40,
    n_labels=3,
    n_concepts=12,
    vocab_size=300,
    label_tokens=10,
    notes_per_patient=(1, 2),
    note_length=(40, 60),
    labels_per_patient=(1, 2),
    background_concepts=3,
    distractor_concepts=3,
)


def load_synthetic(config: SynthConfig):
    synth = generate(config)
    records = ingest([json.dumps(r) for r in synth.records])
    corpus = build_corpus(records)
    vocab = build_vocab(corpus.notes)
    bags = all_patient_concepts(corpus, extract_corpus(corpus, synth.lexicon))
    return corpus, vocab, synth.lexicon, bags


@pytest.fixture(scope="session")
def tiny():
    return load_synthetic(SynthConfig(**TINY, seed=3))
