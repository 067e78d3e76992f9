"""
Corpus Service
Corpus loading, regex concept labeling and balanced dataset assembly for probing.
"""
import hashlib
import json
import logging
import re
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from schemas.corpus import ConceptDataset, ConceptRegistry, ConceptSpec, ProbeSkip, Provenance, TokenizedCorpus
from .errors import ConceptDefinitionError, ConfigurationError, DatasetError, InputError
from .model_core import MAX_SEQ_LEN
from .tokenizer import DATA_DIR, ByteBpeTokenizer, load_tokenizer

logger = logging.getLogger(__name__)

CONCEPT_DIR = DATA_DIR / "concepts"
FIXTURE_DIR = DATA_DIR / "fixtures"
CATEGORIES = ("pos", "latex", "code", "text")

DEFAULT_SAMPLES = 5000
TRAIN_FRACTION = 0.75
MIN_PER_CLASS = 8


# ============================================================
# Loading
# ============================================================

def _read_documents(path: Path) -> list[str]:
    if path.suffix == ".jsonl":
        docs = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                docs.append(json.loads(line)["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise InputError(f"{path}:{n}: expected a JSON object with a 'text' field") from e
        return docs
    return _chunk_lines(path.read_text(encoding="utf-8"))


def _split_utf8(line: str, limit: int) -> list[str]:
    """Cut one line into pieces of at most `limit` bytes, never inside a character."""
    raw = line.encode("utf-8")
    pieces = []
    while len(raw) > limit:
        cut = limit
        while (raw[cut] & 0xC0) == 0x80:  # continuation byte
            cut -= 1
        pieces.append(raw[:cut].decode("utf-8"))
        raw = raw[cut:]
    pieces.append(raw.decode("utf-8"))
    return pieces


def _chunk_lines(text: str, limit: int = MAX_SEQ_LEN) -> list[str]:
    """Pack whole lines into documents of at most `limit` UTF-8 bytes (so at most `limit` tokens).

    A line longer than `limit` is cut on character boundaries and its pieces packed like lines.
    """
    chunks, current, size = [], [], 0
    for line in text.splitlines(keepends=True):
        for piece in _split_utf8(line, limit):
            n = len(piece.encode("utf-8"))
            if current and size + n > limit:
                chunks.append("".join(current))
                current, size = [], 0
            current.append(piece)
            size += n
    if current:
        chunks.append("".join(current))
    return chunks



def load_corpus(path: str | Path, tokenizer: ByteBpeTokenizer | None = None) -> TokenizedCorpus:
    """Load a text file, a JSON-lines file or a directory of them (sorted by path).

    Raises:
        InputError: missing path, or a JSON-lines row without a "text" field
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus path not found: {path}")
    tokenizer = tokenizer or load_tokenizer()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    digest = hashlib.sha256()
    texts: list[str] = []
    for f in files:
        digest.update(f.read_bytes())
        texts.extend(_read_documents(f))
    texts = [t for t in texts if t]
    documents = [tokenizer.encode(t) for t in texts]
    corpus = TokenizedCorpus(
        documents=documents,
        texts=texts,
        tokenizer_id=tokenizer.tokenizer_id,
        provenance=Provenance(source=str(path), sha256=digest.hexdigest()),
    )
    logger.info(f"[corpus] {path}: {len(texts)} documents, {corpus.n_tokens} tokens")
    return corpus


def load_registry(category: str, concept_dir: Path = CONCEPT_DIR) -> list[ConceptSpec]:
    path = Path(concept_dir) / f"{category}.json"
    if not path.exists():
        raise InputError(f"concept registry not found: {path}")
    try:
        registry = ConceptRegistry.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"invalid concept registry {path}: {e}") from e
    for spec in registry.concepts:
        compile_rule(spec)
    return registry.concepts


def load_concepts(names: list[str] | None = None, concept_dir: Path = CONCEPT_DIR) -> list[ConceptSpec]:
    """All shipped concepts, or the named subset in the given order."""
    available = {spec.name: spec for category in CATEGORIES for spec in load_registry(category, concept_dir)}
    if names is None:
        return list(available.values())
    unknown = [n for n in names if n not in available]
    if unknown:
        raise ConfigurationError(f"unknown concepts: {unknown}")
    return [available[n] for n in names]


# ============================================================
# Labeling
# ============================================================

def compile_rule(concept: ConceptSpec) -> re.Pattern:
    try:
        return re.compile(concept.rule, re.MULTILINE)
    except re.error as e:
        raise ConceptDefinitionError(f"concept {concept.name}: rule does not compile: {e}") from e


def positive_char_spans(text: str, pattern: re.Pattern) -> list[tuple[int, int]]:
    spans = []
    for m in pattern.finditer(text):
        group = next((g for g in range(1, pattern.groups + 1) if m.start(g) != -1), 0)
        start, end = m.span(group)
        if end > start:
            spans.append((start, end))
    return spans


def token_ranges(text: str, ids: list[int], spans: list[tuple[int, int]], tokenizer: ByteBpeTokenizer) -> list[tuple[int, int]]:
    """Map character spans to [first, last) ranges of the tokens overlapping them."""
    if not spans or not ids:
        return []
    char_to_byte = np.concatenate([[0], np.cumsum([len(ch.encode("utf-8")) for ch in text])])
    starts, ends = tokenizer.byte_offsets(ids)
    ranges = []
    for cs, ce in spans:
        bs, be = char_to_byte[cs], char_to_byte[ce]
        first = int(np.searchsorted(ends, bs, side="right"))
        last = int(np.searchsorted(starts, be, side="left"))
        ranges.append((first, last))
    return ranges


def label_text(text: str, ids: list[int], pattern: re.Pattern, tokenizer: ByteBpeTokenizer) -> np.ndarray:
    """1 for every token whose byte span overlaps a positive character span."""
    labels = np.zeros(len(ids), dtype=np.int8)
    for first, last in token_ranges(text, ids, positive_char_spans(text, pattern), tokenizer):
        labels[first:last] = 1
    return labels


def label_tokens(corpus: TokenizedCorpus, concept: ConceptSpec, tokenizer: ByteBpeTokenizer | None = None) -> list[np.ndarray]:
    tokenizer = tokenizer or load_tokenizer()
    pattern = compile_rule(concept)
    return [label_text(text, ids, pattern, tokenizer) for text, ids in zip(corpus.texts, corpus.documents)]


# ============================================================
# Datasets
# ============================================================

def _split(n: int, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    order = rng.permutation(n)
    n_train = int(np.floor(TRAIN_FRACTION * n + 0.5))
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def build_dataset(labels: list[np.ndarray], n: int = DEFAULT_SAMPLES, seed: int = 0, concept: str = "") -> ConceptDataset:
    """Balanced sample of n tokens (ceil(n/2) positive) with a seeded 75/25 split.

    Args:
        labels: output of label_tokens for one concept
        n: total samples to draw
        seed: seed of both the sampling and the split
        concept: name used in messages and on the dataset

    Raises:
        DatasetError: fewer positives or negatives than the balanced sample needs
    """
    if n < 2:
        raise DatasetError(f"{concept}: need at least 2 samples, asked for {n}")
    keys = np.array([(d, p) for d, lab in enumerate(labels) for p in range(len(lab))], dtype=np.int64).reshape(-1, 2)
    flat = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int8)
    pos_idx, neg_idx = np.nonzero(flat == 1)[0], np.nonzero(flat == 0)[0]
    n_pos, n_neg = (n + 1) // 2, n // 2
    if len(pos_idx) < n_pos or len(neg_idx) < n_neg:
        raise DatasetError(
            f"{concept}: need {n_pos} positive / {n_neg} negative tokens, found {len(pos_idx)} / {len(neg_idx)}",
            n_positive=len(pos_idx), n_negative=len(neg_idx),
        )
    rng = np.random.default_rng(seed)
    chosen = np.concatenate([
        rng.choice(pos_idx, size=n_pos, replace=False),
        rng.choice(neg_idx, size=n_neg, replace=False),
    ])
    chosen = chosen[rng.permutation(len(chosen))]
    train, test = _split(len(chosen), rng)
    return ConceptDataset(
        concept=concept,
        docs=keys[chosen, 0].tolist(),
        positions=keys[chosen, 1].tolist(),
        labels=flat[chosen].astype(int).tolist(),
        train=train,
        test=test,
        seed=seed,
        metadata={"n_positive": n_pos, "n_negative": n_neg},
    )


def filter_routed(dataset: ConceptDataset, traces: list, layer: int, expert: int | None) -> ConceptDataset | ProbeSkip:
    """Keep samples routed to (layer, expert) and re-split 75/25 uniformly.

    Dense sites (expert None or a dense layer) pass the dataset through unchanged.
    """
    layer_kind = traces[dataset.docs[0]].layers[layer].kind if dataset.docs else "dense"
    if expert is None or layer_kind == "dense":
        return dataset
    keep = [i for i, (d, p) in enumerate(zip(dataset.docs, dataset.positions)) if traces[d].layers[layer].gates[p, expert] > 0]
    labels = [dataset.labels[i] for i in keep]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos < MIN_PER_CLASS or n_neg < MIN_PER_CLASS:
        return ProbeSkip(
            concept=dataset.concept, layer=layer, expert=expert,
            reason=f"only {n_pos} positive / {n_neg} negative routed samples",
            n_positive=n_pos, n_negative=n_neg,
        )
    rng = np.random.default_rng([dataset.seed, layer, expert])
    train, test = _split(len(keep), rng)
    return ConceptDataset(
        concept=dataset.concept,
        docs=[dataset.docs[i] for i in keep],
        positions=[dataset.positions[i] for i in keep],
        labels=labels,
        train=train,
        test=test,
        seed=dataset.seed,
        filtered_for=(layer, expert),
        metadata={**dataset.metadata, "n_positive": n_pos, "n_negative": n_neg, "positive_ratio": n_pos / len(keep)},
    )


def export_dataset(dataset: ConceptDataset, path: str | Path) -> None:
    """JSON-lines, one sample per line with its split tag."""
    test = set(dataset.test)
    with open(path, "w", encoding="utf-8") as f:
        for i, (d, p, y) in enumerate(zip(dataset.docs, dataset.positions, dataset.labels)):
            f.write(json.dumps({"doc": d, "position": p, "label": y, "split": "test" if i in test else "train"}) + "\n")


def take_tokens(corpus: TokenizedCorpus, budget: int) -> list[list[int]]:
    """Documents in order until `budget` tokens are collected; the last one is truncated."""
    out, used = [], 0
    for doc in corpus.documents:
        if used >= budget:
            break
        piece = doc[: budget - used]
        out.append(piece)
        used += len(piece)
    return out
