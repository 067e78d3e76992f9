"""
Autointerp Service
Expert labeling with an explainer and a scorer LLM

Flow: mine windows → top-40 per expert → 20 explainer / 10 positive / 10 held back
      → explainer hypothesis → scorer on 10 positives + 10 peer negatives → F1 against the hidden key
"""
import json
import logging
import re
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import httpx
import numpy as np
import pandas as pd
from sklearn.metrics import precision_recall_fscore_support
from tqdm import tqdm

from schemas.autointerp import (
    ActivationItem,
    AutointerpConfig,
    ExpertPool,
    LabelRecord,
    LlmEndpoint,
    MinedExample,
    PromptDocument,
)
from schemas.corpus import TokenizedCorpus
from schemas.probing import Site
from .attribution import expert_contributions, logit_lens
from .autointerp_prompts import SCORER_REPROMPT, build_explainer_prompt, build_scorer_prompt, render_piece
from .errors import ConfigurationError, DatasetError, EndpointError, EvaluationError, ProtocolError, VerdictParseError
from .llm import TranscriptStore, call_llm
from .model_core import Model, trace_corpus
from .tokenizer import ByteBpeTokenizer, load_tokenizer

logger = logging.getLogger(__name__)

VERDICT_RUN = re.compile(r"(?<![\w.])[01](?:\s*,\s*[01]|\s+[01])*(?!\w|\.\d)")
HYPOTHESIS_TAG = re.compile(r"<hypothesis>\s*(.*?)\s*</hypothesis>", re.DOTALL)


# ============================================================
# Mining
# ============================================================

def sample_windows(corpus: TokenizedCorpus, window: int = 32, budget: int = 2_000_000, seed: int = 0) -> list[tuple[int, int]]:
    """One seeded random window per document (shorter documents skipped) until `budget` tokens are covered."""
    windows = []
    for d, doc in enumerate(corpus.documents):
        if len(windows) * window >= budget:
            break
        if len(doc) < window:
            continue
        start = int(np.random.default_rng([seed, d]).integers(0, len(doc) - window + 1))
        windows.append((d, start))
    return windows


def resolve_experts(model: Model, experts: list[Site] | None) -> list[Site]:
    cfg = model.config
    if experts is None:
        return [Site(layer=l, expert=e) for l in cfg.moe_layers() for e in range(cfg.n_experts)]
    for s in experts:
        if s.expert is None or s.layer >= cfg.n_layers or not cfg.is_moe(s.layer) or s.expert >= cfg.n_experts:
            raise ConfigurationError(f"{s.label} is not an expert of an MoE layer")
    return experts


def _partition(pool: ExpertPool, config: AutointerpConfig) -> ExpertPool:
    order = np.random.default_rng([config.seed, pool.layer, pool.expert, 1]).permutation(len(pool.examples)).tolist()
    a, b = config.n_explainer, config.n_explainer + config.n_positive
    return pool.model_copy(update={
        "explainer": sorted(order[:a]),
        "positives": sorted(order[a:b]),
        "held_back": sorted(order[b:]),
    })


def _piece(tokenizer: ByteBpeTokenizer, token_id: int) -> str:
    if not 0 <= token_id < tokenizer.vocab_size:
        return f"<{token_id}>"
    return render_piece(tokenizer.token_bytes(token_id))


def _build_example(model: Model, trace, site: Site, doc: int, start: int, contributions: np.ndarray,
                   tokenizer: ByteBpeTokenizer, config: AutointerpConfig) -> MinedExample:
    lt = trace.layers[site.layer]
    tokens = trace.tokens.tolist()
    pieces = [_piece(tokenizer, t) for t in tokens]
    peaks = [int(p) for p in np.argsort(-contributions, kind="stable")[:config.n_items] if contributions[p] > 0]
    updates = lt.expert_update(site.expert)
    items = []
    for p in peaks:
        lens = logit_lens(model.weights, updates[p], n_top=config.n_promoted)
        items.append(ActivationItem(
            position=p,
            token=pieces[p],
            score=float(contributions[p]),
            promoted=[_piece(tokenizer, t) for t, _ in lens.top],
        ))
    return MinedExample(
        layer=site.layer,
        expert=site.expert,
        doc=doc,
        start=start,
        tokens=tokens,
        pieces=pieces,
        routed=(lt.gates[:, site.expert] > 0).tolist(),
        scores=contributions.tolist(),
        sequence_score=float(contributions.max()),
        top_items=items,
    )


def mine_examples(model: Model, corpus: TokenizedCorpus, experts: list[Site] | None = None,
                  config: AutointerpConfig | None = None, tokenizer: ByteBpeTokenizer | None = None,
                  workers: int = 1, progress: bool = False) -> dict[tuple[int, int], ExpertPool]:
    """Score every window for every expert by sequence score; keep the top `top_n` per expert and partition them.

    Returns:
        ExpertPool per (layer, expert); pools with fewer than `top_n` scored windows carry `unlabelable`
    """
    config = config or AutointerpConfig()
    tokenizer = tokenizer or load_tokenizer()
    experts = resolve_experts(model, experts)
    windows = sample_windows(corpus, config.window, config.budget, config.seed)
    docs = [corpus.documents[d][s:s + config.window] for d, s in windows]
    logger.info(f"[mine] {len(windows)} windows of {config.window} tokens for {len(experts)} experts")

    # first pass keeps only sequence scores; windows are re-run for the retained examples
    scores = np.zeros((len(experts), len(windows)))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        def score(tokens):
            _, trace = model.forward(tokens)
            return [expert_contributions(trace, s.layer, s.expert).max() for s in experts]
        for w, row in enumerate(tqdm(pool.map(score, docs), total=len(docs), desc="mine", disable=not progress)):
            scores[:, w] = row

    pools = {}
    for i, site in enumerate(experts):
        candidates = np.nonzero(scores[i] > 0)[0]
        ranked = candidates[np.argsort(-scores[i][candidates], kind="stable")][:config.top_n]
        examples = []
        if len(ranked):
            traces = trace_corpus(model, [docs[w] for w in ranked], workers=workers)
            for w, trace in zip(ranked, traces):
                contributions = expert_contributions(trace, site.layer, site.expert)
                examples.append(_build_example(model, trace, site, *windows[w], contributions, tokenizer, config))
        pool = ExpertPool(layer=site.layer, expert=site.expert, examples=examples)
        if len(examples) < config.top_n:
            reason = f"only {len(examples)} scored windows, need {config.top_n}"
            logger.warning(f"[mine] {site.label} unlabelable: {reason}")
            pools[(site.layer, site.expert)] = pool.model_copy(update={"unlabelable": reason})
        else:
            pools[(site.layer, site.expert)] = _partition(pool, config)
    return pools


def sample_negatives(pools: dict[tuple[int, int], ExpertPool], layer: int, expert: int, n: int = 10, seed: int = 0) -> list[MinedExample]:
    """Held-back examples of same-layer peers, excluding windows the expert itself retained."""
    own = {ex.window_id for ex in pools[(layer, expert)].examples}
    candidates = {}
    for (l, e), pool in sorted(pools.items()):
        if l != layer or e == expert or pool.unlabelable is not None:
            continue
        for ex in pool.subset(pool.held_back):
            if ex.window_id not in own:
                candidates.setdefault(ex.window_id, ex)
    candidates = list(candidates.values())
    if len(candidates) < n:
        raise DatasetError(f"L{layer}/E{expert}: {len(candidates)} negatives available in layer, need {n}")
    picked = np.random.default_rng([seed, layer, expert, 2]).choice(len(candidates), size=n, replace=False)
    return [candidates[i] for i in sorted(picked.tolist())]


# ============================================================
# Verdicts & scoring
# ============================================================

def parse_verdicts(text: str, n: int = 20) -> list[int]:
    """The last run of exactly n values from {0, 1}, bracketed or comma/whitespace separated."""
    runs = [[int(v) for v in re.findall(r"[01]", m.group())] for m in VERDICT_RUN.finditer(text)]
    runs = [r for r in runs if len(r) == n]
    if not runs:
        raise VerdictParseError(f"no run of exactly {n} binary values in scorer reply")
    return runs[-1]


def score_label(verdicts: list[int], answer_key: list[int]) -> tuple[float, float, float]:
    """(precision, recall, f1) of the positive class."""
    if len(verdicts) != len(answer_key):
        raise EvaluationError(f"{len(verdicts)} verdicts for {len(answer_key)} examples")
    if not verdicts:
        raise EvaluationError("no verdicts to score")
    p, r, f1, _ = precision_recall_fscore_support(answer_key, verdicts, average="binary", pos_label=1, zero_division=0)
    return float(p), float(r), float(f1)


def extract_hypothesis(text: str) -> str:
    m = HYPOTHESIS_TAG.search(text)
    if m:
        return " ".join(m.group(1).split())
    lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
    return lines[-1] if lines else ""


# ============================================================
# Labeling
# ============================================================

def label_expert(
    pool: ExpertPool,
    pools: dict[tuple[int, int], ExpertPool],
    endpoint: LlmEndpoint,
    client: httpx.Client | None = None,
    transcripts: TranscriptStore | None = None,
    config: AutointerpConfig | None = None,
    key_sink: Callable[[PromptDocument, list[int]], None] | None = None,
) -> LabelRecord:
    """Explainer call, then scorer call (with one re-prompt on a malformed verdict list)."""
    config = config or AutointerpConfig()
    tag = f"L{pool.layer}/E{pool.expert}"
    record = LabelRecord(layer=pool.layer, expert=pool.expert, status="unlabelable", endpoint_model=endpoint.model)
    if pool.unlabelable is not None:
        return record.model_copy(update={"note": pool.unlabelable})

    explainer = pool.subset(pool.explainer)
    positives = pool.subset(pool.positives)
    try:
        negatives = sample_negatives(pools, pool.layer, pool.expert, config.n_negative, config.seed)
    except DatasetError as e:
        logger.warning(f"[autointerp] {tag} unlabelable: {e}")
        return record.model_copy(update={"note": str(e)})
    used = [ex.window_id for ex in explainer + positives + negatives]
    assert len(set(used)) == len(used), f"{tag}: explainer and scorer examples overlap"

    record = record.model_copy(update={
        "explainer_examples": [ex.window_id for ex in explainer],
        "scorer_positives": [ex.window_id for ex in positives],
        "scorer_negatives": [ex.window_id for ex in negatives],
    })
    tags = [f"{tag}/explainer", f"{tag}/scorer"]
    try:
        prompt = build_explainer_prompt(explainer, config.n_promoted, config.n_items, config.template_version)
        hypothesis = extract_hypothesis(call_llm(endpoint, prompt.messages(), client, transcripts, tags[0]))
        scorer, key = build_scorer_prompt(hypothesis, positives, negatives, [config.seed, pool.layer, pool.expert],
                                          config.template_version)
        if key_sink is not None:
            key_sink(scorer, key)
        messages = scorer.messages()
        reply = call_llm(endpoint, messages, client, transcripts, tags[1])
        try:
            verdicts = parse_verdicts(reply, len(key))
        except VerdictParseError:
            logger.warning(f"[autointerp] {tag} verdicts unparseable, re-prompting once")
            tags.append(f"{tag}/scorer-retry")
            messages = messages + [
                {"role": "assistant", "content": reply},
                {"role": "user", "content": SCORER_REPROMPT.format(n=len(key))},
            ]
            reply = call_llm(endpoint, messages, client, transcripts, tags[2])
            verdicts = parse_verdicts(reply, len(key))
    except VerdictParseError as e:
        logger.warning(f"[autointerp] {tag} parse failed: {e}")
        return record.model_copy(update={
            "status": "parse_failed", "hypothesis": hypothesis, "answer_key": key,
            "transcript_tags": tags, "note": str(e),
        })
    except (EndpointError, ProtocolError) as e:
        logger.warning(f"[autointerp] {tag} endpoint failure: {e}")
        return record.model_copy(update={"status": "endpoint_error", "transcript_tags": tags, "note": str(e)})

    precision, recall, f1 = score_label(verdicts, key)
    logger.info(f"[autointerp] {tag} f1={f1:.3f} hypothesis={hypothesis!r}")
    return record.model_copy(update={
        "status": "ok",
        "hypothesis": hypothesis,
        "answer_key": key,
        "verdicts": verdicts,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "transcript_tags": tags,
    })


def run_autointerp(
    model: Model,
    corpus: TokenizedCorpus,
    endpoint: LlmEndpoint,
    client: httpx.Client | None = None,
    transcripts: TranscriptStore | None = None,
    config: AutointerpConfig | None = None,
    key_sink: Callable[[PromptDocument, list[int]], None] | None = None,
    tokenizer: ByteBpeTokenizer | None = None,
    workers: int = 1,
    progress: bool = False,
) -> tuple[list[LabelRecord], dict[tuple[int, int], ExpertPool]]:
    """Mine, explain and score every requested expert.

    Args:
        model: model whose experts are labeled
        corpus: tokenized corpus the windows are drawn from
        endpoint: explainer/scorer endpoint settings
        client: httpx client to send requests with (the mock app's TestClient in tests)
        transcripts: append-only store every exchange is written to, or None
        key_sink: receives each scorer prompt and its answer key (the mock endpoint uses it)

    Returns:
        (one LabelRecord per expert, the mined pools keyed by (layer, expert))
    """
    config = config or AutointerpConfig()
    pools = mine_examples(model, corpus, config.experts, config, tokenizer, workers, progress)

    def run(pool):
        return label_expert(pool, pools, endpoint, client, transcripts, config, key_sink)

    # at most `in_flight` experts talk to the endpoint at once; each runs explainer then scorer
    with ThreadPoolExecutor(max_workers=config.in_flight) as executor:
        records = list(tqdm(executor.map(run, pools.values()), total=len(pools), desc="label", disable=not progress))
    return records, pools


# ============================================================
# Replay & outputs
# ============================================================

def rescore_from_transcripts(transcripts: TranscriptStore, records: list[LabelRecord]) -> list[LabelRecord]:
    """Recompute every scorer F1 from the stored replies and answer keys."""
    replies: dict[str, str] = {}
    for entry in transcripts.read():
        response = entry.get("response")
        if isinstance(response, dict) and entry.get("status") == 200:
            replies[entry["tag"]] = response["choices"][0]["message"]["content"]
    rescored = []
    for record in records:
        if record.status != "ok":
            rescored.append(record)
            continue
        scorer_tags = [t for t in record.transcript_tags if "/scorer" in t]
        verdicts = parse_verdicts(replies[scorer_tags[-1]], len(record.answer_key))
        precision, recall, f1 = score_label(verdicts, record.answer_key)
        rescored.append(record.model_copy(update={"verdicts": verdicts, "precision": precision, "recall": recall, "f1": f1}))
    return rescored


def labels_frame(records: list[LabelRecord]) -> pd.DataFrame:
    rows = [
        {"layer": r.layer, "expert": r.expert, "status": r.status, "hypothesis": r.hypothesis,
         "precision": r.precision, "recall": r.recall, "f1": r.f1}
        for r in records
    ]
    return pd.DataFrame(rows, columns=["layer", "expert", "status", "hypothesis", "precision", "recall", "f1"])


def layer_f1_series(records: list[LabelRecord]) -> list[dict]:
    """Per layer: mean F1 over labeled experts and coverage (labeled / all)."""
    frame = labels_frame(records)
    series = []
    for layer, group in frame.groupby("layer", sort=True):
        ok = group[group["status"] == "ok"]
        series.append({
            "layer": int(layer),
            "mean_f1": float(ok["f1"].mean()) if len(ok) else None,
            "n_labeled": len(ok),
            "n_experts": len(group),
            "coverage": len(ok) / len(group),
        })
    return series


def save_labels(records: list[LabelRecord], pools: dict[tuple[int, int], ExpertPool], config: AutointerpConfig,
                out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "labels": out_dir / "labels.csv",
        "records": out_dir / "labels.json",
        "series": out_dir / "f1_by_layer.json",
        "pools": out_dir / "pools.json",
    }
    labels_frame(records).to_csv(paths["labels"], index=False)
    paths["records"].write_text(json.dumps([r.model_dump(mode="json") for r in records], indent=2), encoding="utf-8")
    paths["series"].write_text(json.dumps(layer_f1_series(records), indent=2), encoding="utf-8")
    paths["pools"].write_text(json.dumps({
        "partition": {"top_n": config.top_n, "explainer": config.n_explainer, "positive": config.n_positive,
                      "negative": config.n_negative},
        "pools": [p.model_dump(mode="json") for p in pools.values()],
    }), encoding="utf-8")
    return paths
