"""Command-line entry point: ``caue <command> --config run.json``.

Hyperparameters live in a JSON config with one section per stage; flags
only select the command, paths and thread count. Every command writes its
resolved config and a log under the output directory, which the
``CAUE_OUTPUT_DIR`` environment variable overrides.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import BaselineSpec, usr2vec_train, word2user, word2user_concept
from .concepts import all_patient_concepts, extract_corpus, feature_matrix, load_lexicon, load_mentions, save_mentions, tfidf_features
from .corpus import Corpus, CorpusError, Preprocessor, Vocabulary, build_corpus, build_vocab, ingest, write_json_atomic
from .evaluation import EvalReport, concept_regression, evaluate_embeddings, load_reports, query_neighbors, save_reports, write_table
from .nn import EmbeddingTable
from .synth import SynthConfig, generate
from .training import (
    TrainConfig,
    build_concept_index,
    config_fingerprint,
    init_concept_table,
    initial_word_table,
    load_arrays,
    save_arrays,
    save_checkpoint,
    train,
)

logger = logging.getLogger("caue")

OUTPUT_ENV = "CAUE_OUTPUT_DIR"
COMMANDS = ("ingest", "extract-concepts", "train", "evaluate", "retrieve", "synth", "report")
METHODS = ("caue", "word2user", "word2user_concept", "usr2vec", "usr2vec_concept")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4

_baseline_defaults = BaselineSpec().to_dict()
del _baseline_defaults["kind"]

DEFAULTS = {
    "paths": {
        "input": None,
        "format": "jsonl",
        "annotations": None,
        "lexicon": None,
        "word_vectors": None,
        "output_dir": "caue_out",
    },
    "corpus": {"min_tokens": 40},
    "synth": SynthConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "eval": {
        "methods": list(METHODS),
        "folds": 5,
        "k": 10,
        "lr": 1e-3,
        "l2": 0.01,
        "epochs": 200,
        "seed": 0,
        "regression": True,
        "ngram_max": 3,
    },
    "baseline": _baseline_defaults,
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def resolve_config(user: Mapping, base_dir: Path | None = None, output_dir: str | None = None) -> dict:
    """Merge ``user`` over the defaults, rejecting unknown sections and keys.

    Relative paths are taken relative to ``base_dir`` (the config file's
    directory). ``output_dir`` (from the environment or a flag) wins over
    the config value.
    """
    if not isinstance(user, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in user.items():
        if not isinstance(values, Mapping):
            raise ConfigError(f"config section {section!r} must be an object")
        bad = set(values) - set(cfg[section])
        if bad:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(bad)}")
        cfg[section].update(values)
    if output_dir is not None:
        cfg["paths"]["output_dir"] = output_dir
    base = base_dir or Path.cwd()
    for key in ("input", "annotations", "lexicon", "word_vectors", "output_dir"):
        value = cfg["paths"][key]
        if value is not None:
            path = Path(value)
            cfg["paths"][key] = str(path if path.is_absolute() else (base / path))
    out = Path(cfg["paths"]["output_dir"])
    if cfg["paths"]["input"] is None:
        cfg["paths"]["input"] = str(out / "synth" / "corpus.jsonl")
    unknown_methods = set(cfg["eval"]["methods"]) - set(METHODS)
    if unknown_methods:
        raise ConfigError(f"unknown evaluation methods: {sorted(unknown_methods)}")
    try:
        SynthConfig.from_dict(cfg["synth"])
        TrainConfig.from_dict(cfg["train"])
        BaselineSpec.from_dict({**cfg["baseline"], "kind": "usr2vec"})
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def load_config(path: str | Path | None, output_dir: str | None = None) -> dict:
    if path is None:
        return resolve_config({}, None, output_dir)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return resolve_config(user, path.parent.resolve(), output_dir)


# --------------------------------------------------------------------------
# shared loaders
# --------------------------------------------------------------------------


def _out(cfg: Mapping) -> Path:
    return Path(cfg["paths"]["output_dir"])


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


def _load_corpus(cfg) -> tuple[Corpus, Vocabulary]:
    out = _out(cfg)
    corpus = Corpus.load(_require(out / "corpus.json", "run `caue ingest` first"))
    with open(_require(out / "vocab.json", "run `caue ingest` first"), encoding="utf-8") as fh:
        vocab = Vocabulary.from_dict(json.load(fh))
    return corpus, vocab


def _load_lexicon(cfg):
    path = cfg["paths"]["lexicon"]
    if path is None:
        # a synthetic run ships its own lexicon
        fallback = _out(cfg) / "synth" / "lexicon.tsv"
        return load_lexicon(fallback) if fallback.exists() else None
    return load_lexicon(_require(Path(path), "set paths.lexicon to a concept lexicon TSV"))


def _load_mentions(cfg):
    path = _out(cfg) / "mentions.json"
    if path.exists():
        return load_mentions(path)
    return None


def load_word_vectors(path: str | Path, vocab: Vocabulary, base: EmbeddingTable) -> EmbeddingTable:
    """Pretrained vectors from an ``.npz`` with a ``words`` array or word2vec text.

    An ``.npz`` array must already be aligned with the vocabulary. In text
    format, tokens missing from the file keep their row from ``base``.
    """
    path = Path(path)
    table = base.value.copy()
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            words = data["words"] if "words" in data.files else None
        if words is None or words.shape != table.shape:
            raise CorpusError(f"{path}: expected a 'words' array of shape {table.shape}")
        return EmbeddingTable(np.asarray(words, dtype=np.float64))
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if line_no == 1 and len(parts) == 2:
                continue  # word2vec header: count and dim
            if len(parts) != table.shape[1] + 1:
                raise CorpusError(f"{path}: expected {table.shape[1]} values", row=line_no)
            idx = vocab.stoi.get(parts[0])
            if idx is not None and idx != vocab.pad_index:
                table[idx] = np.asarray(parts[1:], dtype=np.float64)
    return EmbeddingTable(table)


def _base_words(cfg, vocab: Vocabulary) -> EmbeddingTable:
    tcfg = TrainConfig.from_dict(cfg["train"])
    base = initial_word_table(vocab, tcfg)
    if cfg["paths"]["word_vectors"]:
        return load_word_vectors(_require(Path(cfg["paths"]["word_vectors"]), "check paths.word_vectors"), vocab, base)
    return base


def _parse_annotations(path: Path):
    """SUBJECT_ID,HADM_ID,LABELS,MORTALITY rows; labels are ``;``-separated."""
    labels, mortality = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["SUBJECT_ID"], row["HADM_ID"])
            labels[key] = [lab for lab in (row.get("LABELS") or "").split(";") if lab]
            flag = (row.get("MORTALITY") or "").strip()
            if flag:
                mortality[key] = flag in ("1", "true", "True")
    return labels, mortality


def save_embeddings(path: Path, users: np.ndarray, corpus: Corpus, method: str, fingerprint: str) -> None:
    meta = {"method": method, "config_fingerprint": fingerprint, "patients": [list(p.key) for p in corpus.patients]}
    save_arrays(path, {"users": users}, meta)


def _fingerprint(cfg) -> str:
    # paths are left out so that moving a run does not change its identity
    return config_fingerprint({k: v for k, v in cfg.items() if k != "paths"})


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(cfg) -> dict:
    synth = generate(SynthConfig.from_dict(cfg["synth"]))
    paths = synth.write(_out(cfg) / "synth")
    logger.info("wrote %d notes for %d patients", len(synth.records), len(synth.manifest["patients"]))
    return {"records": len(synth.records), "patients": len(synth.manifest["patients"]),
            "files": {k: str(v) for k, v in sorted(paths.items())}}


def cmd_ingest(cfg) -> dict:
    paths = cfg["paths"]
    source = _require(Path(paths["input"]), "set paths.input or run `caue synth` first")
    labels = mortality = None
    if paths["annotations"]:
        labels, mortality = _parse_annotations(_require(Path(paths["annotations"]), "check paths.annotations"))
    records = ingest(source, paths["format"], labels=labels, mortality=mortality)
    corpus = build_corpus(records, Preprocessor(cfg["corpus"]["min_tokens"]))
    if not corpus.patients:
        raise CorpusError("no note survived preprocessing")
    vocab = build_vocab(corpus.notes, cfg["train"]["vocab_size"])
    out = _out(cfg)
    corpus.save(out / "corpus.json")
    write_json_atomic(out / "vocab.json", vocab.to_dict())
    logger.info("ingested %d records into %d patients (%d notes dropped)", len(records), len(corpus.patients),
                corpus.dropped_notes)
    return {"patients": len(corpus.patients), "notes": len(corpus.notes), "dropped_notes": corpus.dropped_notes,
            "labels": len(corpus.label_names), "vocab": len(vocab)}


def cmd_extract(cfg) -> dict:
    corpus, _ = _load_corpus(cfg)
    lexicon = _load_lexicon(cfg)
    if lexicon is None:
        raise ConfigError("extract-concepts needs paths.lexicon")
    mentions = extract_corpus(corpus, lexicon)
    save_mentions(mentions, _out(cfg) / "mentions.json")
    bags = all_patient_concepts(corpus, mentions)
    total = sum(len(ms) for ms in mentions.values())
    distinct = len({c for bag in bags for c in bag})
    logger.info("extracted %d mentions of %d distinct concepts", total, distinct)
    return {"mentions": total, "distinct_concepts": distinct,
            "patients_with_concepts": sum(1 for bag in bags if bag)}


def _concept_inputs(cfg, corpus: Corpus, need: bool):
    """Concept bags and lexicon, extracting mentions on the fly when absent."""
    lexicon = _load_lexicon(cfg)
    mentions = _load_mentions(cfg)
    if mentions is None and lexicon is not None:
        mentions = extract_corpus(corpus, lexicon)
        save_mentions(mentions, _out(cfg) / "mentions.json")
    if mentions is None:
        if need:
            raise ConfigError("concepts are enabled but no lexicon is configured (paths.lexicon)")
        return None, None, None
    return all_patient_concepts(corpus, mentions), lexicon, mentions


def cmd_train(cfg) -> dict:
    corpus, vocab = _load_corpus(cfg)
    tcfg = TrainConfig.from_dict(cfg["train"])
    bags, lexicon, _ = _concept_inputs(cfg, corpus, tcfg.enable_concepts)
    words = _base_words(cfg, vocab) if cfg["paths"]["word_vectors"] else None
    out = _out(cfg)
    (out / "checkpoints").mkdir(exist_ok=True)
    result = train(corpus, vocab, tcfg, concept_bags=bags, lexicon=lexicon, words=words,
                   checkpoint_dir=out / "checkpoints")
    save_checkpoint(out / "checkpoint.npz", result.params, tcfg, vocab, result.concept_ids, result.loss_log)
    (out / "embeddings").mkdir(exist_ok=True)
    save_embeddings(out / "embeddings" / "caue.npz", result.params.users.value, corpus, "caue", tcfg.fingerprint())
    write_json_atomic(out / "loss_log.json", result.loss_log)
    first = result.loss_log[0]["loss"] if result.loss_log else None
    last = result.loss_log[-1]["loss"] if result.loss_log else None
    return {"epochs": tcfg.epochs, "first_loss": first, "final_loss": last, "concepts": len(result.concept_ids)}


def method_embeddings(method: str, cfg, corpus: Corpus, vocab: Vocabulary) -> np.ndarray:
    out = _out(cfg)
    if method == "caue":
        arrays, _ = load_arrays(_require(out / "embeddings" / "caue.npz", "run `caue train` first"))
        return arrays["users"]
    words = _base_words(cfg, vocab)
    if method == "word2user":
        return word2user(corpus, vocab, words)
    bags, lexicon, _ = _concept_inputs(cfg, corpus, method.endswith("_concept"))
    spec_kw = {**cfg["baseline"], "kind": method}
    if method == "word2user_concept":
        concept_ids = build_concept_index(bags, cfg["train"]["concept_vocab_size"])
        table = init_concept_table(lexicon or [], words, vocab, concept_ids)
        return word2user_concept(corpus, vocab, words, table, concept_ids, bags, concat=spec_kw["concat"])
    spec = BaselineSpec.from_dict(spec_kw)
    result = usr2vec_train(corpus, vocab, spec, words, bags if method == "usr2vec_concept" else None, lexicon)
    return result.users


def cmd_evaluate(cfg) -> dict:
    corpus, vocab = _load_corpus(cfg)
    ecfg = cfg["eval"]
    out = _out(cfg)
    (out / "embeddings").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    fingerprint = _fingerprint(cfg)
    label_sets = [sorted(p.labels) for p in corpus.patients]
    mortality = [p.mortality for p in corpus.patients] if corpus.has_mortality else None
    summary = {}
    for method in ecfg["methods"]:
        users = method_embeddings(method, cfg, corpus, vocab)
        if method != "caue":
            save_embeddings(out / "embeddings" / f"{method}.npz", users, corpus, method, fingerprint)
        reports = evaluate_embeddings(
            users, label_sets, len(corpus.label_names), mortality, ecfg["seed"], ecfg["folds"], ecfg["k"],
            ecfg["lr"], ecfg["l2"], ecfg["epochs"], fingerprint,
        )
        save_reports(reports, out / "reports" / f"{method}.json")
        summary[method] = {r.task: r.value for r in reports}
        logger.info("%s: %s", method, ", ".join(f"{r.task}={r.value:.4f}" for r in reports))
    if ecfg["regression"]:
        _, _, mentions = _concept_inputs(cfg, corpus, False)
        if mentions is not None and any(mentions.values()):
            report = regression_report(corpus, mentions, ecfg["ngram_max"], ecfg["seed"], fingerprint)
            save_reports([report], out / "reports" / "regression.json")
            summary["regression"] = report.details
    return summary


def regression_report(corpus: Corpus, mentions, ngram_max: int, seed: int, fingerprint: str) -> EvalReport:
    ngram = feature_matrix(tfidf_features(corpus, "ngram", ngram_max=ngram_max))
    concept = feature_matrix(tfidf_features(corpus, "concept", mentions=mentions))
    labels = np.zeros((len(corpus.patients), len(corpus.label_names)))
    for p in corpus.patients:
        labels[p.patient_id, sorted(p.labels)] = 1.0
    res = concept_regression(ngram, concept, labels, seed=seed)
    details = {
        "names": res.names,
        "coefficients": res.coefficients,
        "std_errors": res.std_errors,
        "p_values": res.p_values,
        "n_pairs": res.n,
        "r_squared": res.r_squared,
    }
    return EvalReport("concept_regression", res.coefficient("concept"), [], fingerprint, details)


def _find_patient(corpus: Corpus, ident: str) -> int:
    if "/" in ident:
        key = tuple(ident.split("/", 1))
        hits = [p.patient_id for p in corpus.patients if p.key == key]
    else:
        hits = [p.patient_id for p in corpus.patients if p.key[0] == ident]
    if not hits:
        raise CorpusError(f"no patient {ident!r} in the corpus")
    if len(hits) > 1:
        raise CorpusError(f"patient {ident!r} has several visits; use PATIENT/VISIT")
    return hits[0]


def cmd_retrieve(cfg, patient: str, k: int | None, method: str) -> dict:
    corpus, _ = _load_corpus(cfg)
    k = cfg["eval"]["k"] if k is None else k
    path = _require(_out(cfg) / "embeddings" / f"{method}.npz", "run `caue train` or `caue evaluate` first")
    arrays, _ = load_arrays(path)
    query = _find_patient(corpus, patient)
    idx, sims = query_neighbors(arrays["users"], query, k)
    names = corpus.label_names
    hits = [
        {
            "rank": r + 1,
            "patient": "/".join(corpus.patients[j].key),
            "cosine": float(s),
            "labels": [names[l] for l in sorted(corpus.patients[j].labels)],
        }
        for r, (j, s) in enumerate(zip(idx.tolist(), sims))
    ]
    result = {"query": "/".join(corpus.patients[query].key), "method": method, "k": k,
              "labels": [names[l] for l in sorted(corpus.patients[query].labels)], "neighbors": hits}
    (_out(cfg) / "retrieval").mkdir(exist_ok=True)
    safe = result["query"].replace("/", "_")
    write_json_atomic(_out(cfg) / "retrieval" / f"{method}_{safe}_k{k}.json", result)
    return result


def cmd_report(cfg) -> dict:
    out = _out(cfg)
    rows = {}
    for method in cfg["eval"]["methods"]:
        path = out / "reports" / f"{method}.json"
        if path.exists():
            rows[method] = load_reports(path)
    if not rows:
        raise FileNotFoundError(f"no reports under {out / 'reports'}; run `caue evaluate` first")
    write_table(rows, out / "table.csv")
    table = (out / "table.csv").read_text(encoding="utf-8")
    return {"table": str(out / "table.csv"), "rows": list(rows), "csv": table}


# --------------------------------------------------------------------------
# main
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caue", description="Concept-aware patient embeddings from clinical notes")
    parser.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
    parser.add_argument("--output-dir", help=f"output directory (overridden by ${OUTPUT_ENV})")
    parser.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "retrieve":
            p.add_argument("--patient", required=True, help="PATIENT or PATIENT/VISIT key")
            p.add_argument("--k", type=int, default=None)
            p.add_argument("--method", default="caue", choices=METHODS)
    return parser


def _setup_logging(log_path: Path) -> logging.Handler:
    handler = logging.FileHandler(log_path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return handler


def _error(command: str | None, kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "command": command, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    handler = None
    try:
        output_dir = os.environ.get(OUTPUT_ENV) or args.output_dir
        cfg = load_config(args.config, output_dir)
        out = _out(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(exist_ok=True)
        (out / "configs").mkdir(exist_ok=True)
        write_json_atomic(out / "configs" / f"{command}.json", cfg)
        handler = _setup_logging(out / "logs" / f"{command}.log")
        with threadpool_limits(limits=args.threads):
            if command == "synth":
                result = cmd_synth(cfg)
            elif command == "ingest":
                result = cmd_ingest(cfg)
            elif command == "extract-concepts":
                result = cmd_extract(cfg)
            elif command == "train":
                result = cmd_train(cfg)
            elif command == "evaluate":
                result = cmd_evaluate(cfg)
            elif command == "retrieve":
                result = cmd_retrieve(cfg, args.patient, args.k, args.method)
            else:
                result = cmd_report(cfg)
    except ConfigError as err:
        return _error(command, "config", str(err), EXIT_CONFIG)
    except FileNotFoundError as err:
        return _error(command, "missing_file", str(err), EXIT_MISSING)
    except OSError as err:
        return _error(command, "io", str(err), EXIT_FAILURE)
    except CorpusError as err:
        return _error(command, "data", str(err), EXIT_DATA)
    except (ValueError, IndexError, KeyError) as err:
        return _error(command, "invalid_input", str(err), EXIT_DATA)
    finally:
        if handler is not None:
            logger.removeHandler(handler)
            handler.close()
    print(json.dumps(result, sort_keys=True, indent=1))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
