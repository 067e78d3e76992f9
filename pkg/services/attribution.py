"""
Attribution Service
Vocabulary-space readouts of residual-stream updates

Logit Lens: ℓ = v · W_U
DLA: A_{v→t} = LN_linear(v) · W_U[:, t], divisor frozen at the final residual
Expert contribution: g_i(x) · ‖E_i(x)‖₂, sequence score = max over positions
"""
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from schemas.attribution import (
    CaseAggregate,
    CaseFile,
    CaseRecord,
    CaseSet,
    DlaRecord,
    LensEntry,
    LensReport,
    TriggerTargetCase,
    TriggerTargetReport,
)
from .corpus import token_ranges
from .errors import CaseError, ConfigurationError, NumericError
from .model_core import ForwardTrace, Model, Weights, apply_norm, norm_divisor
from .tokenizer import ByteBpeTokenizer, load_tokenizer

logger = logging.getLogger(__name__)

TOP_RANK = 8
CATEGORIES = ("top1", "top8", "other", "not_routed")


# ============================================================
# Logit Lens
# ============================================================

@dataclass(frozen=True)
class LensResult:
    logits: np.ndarray             # (|V|,) float64
    top: list[tuple[int, float]]   # descending logit, lowest id first on ties


def logit_lens(weights: Weights, v, n_top: int = 10, normalize: bool = False) -> LensResult:
    """Project v onto the vocabulary. `normalize` applies the final norm to v first."""
    v = np.asarray(v, dtype=np.float64)
    vocab = weights.config.vocab_size
    if n_top > vocab:
        logger.warning(f"[lens] n_top={n_top} exceeds vocab_size={vocab}, clipped")
        n_top = vocab
    if normalize:
        v = apply_norm(v, weights["final_norm.scale"], weights.config.norm_kind)
    logits = v @ weights.unembed.astype(np.float64)
    order = np.argsort(-logits, kind="stable")[:n_top]
    return LensResult(logits=logits, top=[(int(t), float(logits[t])) for t in order])


def lens_report(weights: Weights, trace: ForwardTrace, position: int, n_top: int = 10,
                normalize: bool = False, tokenizer: ByteBpeTokenizer | None = None) -> list[LensReport]:
    """Logit Lens over every recorded update at one position, in stream order."""
    tokenizer = tokenizer or load_tokenizer()
    reports = []
    for name, update in trace.updates():
        lens = logit_lens(weights, update[position], n_top=n_top, normalize=normalize)
        reports.append(LensReport(
            component=name,
            position=position,
            normalized=normalize,
            top=[LensEntry(token_id=t, token=_token_str(tokenizer, t), logit=l) for t, l in lens.top],
        ))
    return reports


def _token_str(tokenizer: ByteBpeTokenizer, token_id: int) -> str:
    return tokenizer.token_str(token_id) if token_id < tokenizer.vocab_size else f"<{token_id}>"


# ============================================================
# Direct Logit Attribution
# ============================================================

def frozen_divisor(weights: Weights, final_residual) -> np.ndarray:
    final_residual = np.asarray(final_residual, dtype=np.float64)
    if not np.any(final_residual):
        raise NumericError("final residual has zero norm; DLA is undefined")
    return norm_divisor(final_residual, weights.config.norm_kind)


def linearized_norm(weights: Weights, v, divisor) -> np.ndarray:
    """LN_linear(v): the final norm with its divisor held fixed (centering is linear and kept)."""
    return apply_norm(v, weights["final_norm.scale"], weights.config.norm_kind, divisor=divisor)


def dla(weights: Weights, v, final_residual, target: int) -> float:
    divisor = frozen_divisor(weights, final_residual)
    return float(linearized_norm(weights, v, divisor) @ weights.unembed[:, target].astype(np.float64))


def dla_many(weights: Weights, vs, final_residual, target: int) -> np.ndarray:
    """dla for every row of vs against one final residual."""
    divisor = frozen_divisor(weights, final_residual)
    return linearized_norm(weights, np.atleast_2d(vs), divisor) @ weights.unembed[:, target].astype(np.float64)


def layer_dla(weights: Weights, trace: ForwardTrace, layer: int, position: int, target: int) -> DlaRecord:
    """DLA of every expert update g_i·E_i(x) of one layer toward `target`, with the expert ranking."""
    lt = trace.layers[layer]
    updates = np.stack([lt.expert_update(e)[position] for e in range(lt.n_experts)])
    contributions = dla_many(weights, updates, trace.final_residual[position], target)
    return DlaRecord(
        layer=layer,
        position=position,
        target=target,
        contributions=contributions.tolist(),
        ranking=np.argsort(-contributions, kind="stable").tolist(),
    )


# ============================================================
# Expert contribution
# ============================================================

def expert_contributions(trace: ForwardTrace, layer: int, expert: int) -> np.ndarray:
    lt = trace.layers[layer]
    norms = np.linalg.norm(lt.expert_output(expert).astype(np.float64), axis=-1)
    return lt.gates[:, expert] * norms


def expert_contribution(trace: ForwardTrace, layer: int, expert: int, position: int) -> float:
    return float(expert_contributions(trace, layer, expert)[position])


def sequence_score(trace: ForwardTrace, layer: int, expert: int) -> float:
    return float(expert_contributions(trace, layer, expert).max())


# ============================================================
# Trigger–target experiment
# ============================================================

def _find_word(text: str, word: str, start: int = 0) -> tuple[int, int] | None:
    m = re.compile(r"(?<!\w)" + re.escape(word) + r"(?!\w)").search(text, start)
    if m is None:
        idx = text.find(word, start)
        return None if idx < 0 else (idx, idx + len(word))
    return m.span()


def resolve_case(model: Model, case: TriggerTargetCase, layer: int, expert: int,
                 tokenizer: ByteBpeTokenizer) -> tuple[dict, ForwardTrace]:
    """Tokenize, run forward and pin down trigger token, target token and prediction position."""
    trigger_span = _find_word(case.text, case.trigger)
    if trigger_span is None:
        raise CaseError(f"trigger {case.trigger!r} not found in text")
    ids = tokenizer.encode(case.text)
    first, last = token_ranges(case.text, ids, [trigger_span], tokenizer)[0]
    if last <= first:
        raise CaseError(f"trigger {case.trigger!r} covers no token")
    _, trace = model.forward(ids)

    gates = trace.layers[layer].gates[first:last, expert]
    trigger_position = first + int(np.argmax(gates))

    target_span = _find_word(case.text, case.target, trigger_span[1])
    target_range = token_ranges(case.text, ids, [target_span], tokenizer)[0] if target_span else None
    if target_range and target_range[0] > 0 and target_range[1] > target_range[0]:
        target_token = ids[target_range[0]]
        prediction_position = target_range[0] - 1
        rule = "before_target"
    else:
        prefix = "" if not case.text or case.text[-1].isspace() else " "
        target_token = tokenizer.encode(prefix + case.target)[0]
        prediction_position = len(ids) - 1
        rule = "final_token"
    resolved = {
        "trigger_token": ids[trigger_position],
        "trigger_position": trigger_position,
        "target_token": target_token,
        "prediction_position": prediction_position,
        "prediction_rule": rule,
    }
    return resolved, trace


def evaluate_case(model: Model, case: TriggerTargetCase, layer: int, expert: int, owner: int,
                  tokenizer: ByteBpeTokenizer) -> CaseRecord:
    record = CaseRecord(
        layer=layer, expert=expert, case_owner=owner, matched=owner == expert,
        text=case.text, trigger=case.trigger, target=case.target,
    )
    try:
        resolved, trace = resolve_case(model, case, layer, expert, tokenizer)
        dla_record = layer_dla(model.weights, trace, layer, resolved["prediction_position"], resolved["target_token"])
    except (CaseError, NumericError) as e:
        logger.warning(f"[trigger-target] L{layer}/E{expert} case skipped: {e}")
        return record.model_copy(update={"error": str(e)})

    gate = float(trace.layers[layer].gates[resolved["trigger_position"], expert])
    rank = dla_record.ranking.index(expert) + 1
    routed = gate > 0
    if not routed:
        category = "not_routed"
    elif rank == 1:
        category = "top1"
    elif rank <= TOP_RANK:
        category = "top8"
    else:
        category = "other"
    return record.model_copy(update={
        **resolved,
        "routed": routed,
        "gate": gate,
        "contribution": dla_record.contributions[expert],
        "rank": rank,
        "top1": rank == 1,
        "top8": rank <= TOP_RANK,
        "category": category,
    })


def aggregate_cases(records: list[CaseRecord]) -> CaseAggregate:
    valid = [r for r in records if r.error is None]
    n = len(valid)
    percentages = {c: (100.0 * sum(r.category == c for r in valid) / n if n else 0.0) for c in CATEGORIES}
    histogram: dict[int, int] = {}
    for r in valid:
        histogram[r.rank] = histogram.get(r.rank, 0) + 1
    return CaseAggregate(
        n_cases=len(records),
        n_errors=len(records) - n,
        percentages=percentages,
        fraction_unrouted=(sum(not r.routed for r in valid) / n) if n else 0.0,
        rank_histogram=dict(sorted(histogram.items())),
    )


def case_sets_from_json(data, layer: int | None = None, expert: int | None = None) -> list[CaseSet]:
    """Read a case file: a bare array of {text, trigger, target} owned by `layer`/`expert`, or {"sets": [...]}."""
    try:
        if isinstance(data, list):
            if layer is None or expert is None:
                raise ConfigurationError("a bare case array needs a layer and an expert")
            return [CaseSet(layer=layer, expert=expert, cases=data)]
        return CaseFile.model_validate(data).sets
    except ValidationError as e:
        raise ConfigurationError(f"invalid case file: {e}") from e


def run_trigger_target(model: Model, case_sets: list[CaseSet], layer: int | None = None,
                       tokenizer: ByteBpeTokenizer | None = None, workers: int = 1) -> TriggerTargetReport:
    """Matched cases for each expert, plus every other same-layer expert's cases as its controls.

    Args:
        case_sets: cases grouped by the expert they were written for
        layer: only run the sets of this layer
        workers: threads evaluating cases

    Returns:
        TriggerTargetReport with every case record and the matched / control aggregates
    """
    tokenizer = tokenizer or load_tokenizer()
    if layer is not None:
        case_sets = [s for s in case_sets if s.layer == layer]
    for s in case_sets:
        if s.layer >= model.config.n_layers or s.expert >= model.config.experts_in_layer(s.layer):
            raise ConfigurationError(f"case set L{s.layer}/E{s.expert} does not exist in the model")
    jobs = []
    for target_set in case_sets:
        for owner_set in case_sets:
            if owner_set.layer != target_set.layer:
                continue
            jobs.extend((case, target_set.layer, target_set.expert, owner_set.expert) for case in owner_set.cases)

    def run(job):
        case, l, e, owner = job
        return evaluate_case(model, case, l, e, owner, tokenizer)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(run, jobs))

    matched = [r for r in records if r.matched]
    control = [r for r in records if not r.matched]
    report = TriggerTargetReport(
        records=records,
        matched=aggregate_cases(matched),
        control=aggregate_cases(control),
        metadata={"top_rank": TOP_RANK, "tokenizer": tokenizer.tokenizer_id},
    )
    logger.info(
        f"[trigger-target] {len(matched)} matched / {len(control)} control cases, "
        f"matched top1={report.matched.percentages['top1']:.1f}%"
    )
    return report


def category_series(report: TriggerTargetReport) -> dict:
    """Matched vs. control category percentages, ready for a stacked bar plot."""
    return {
        "categories": list(CATEGORIES),
        "matched": report.matched.percentages,
        "control": report.control.percentages,
        "fraction_unrouted": {"matched": report.matched.fraction_unrouted, "control": report.control.fraction_unrouted},
    }


def save_trigger_target(report: TriggerTargetReport, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "cases": out_dir / "trigger_target_cases.csv",
        "report": out_dir / "trigger_target.json",
        "series": out_dir / "trigger_target_categories.json",
    }
    pd.DataFrame([r.model_dump() for r in report.records], columns=list(CaseRecord.model_fields)).to_csv(paths["cases"], index=False)
    paths["report"].write_text(report.model_dump_json(indent=2), encoding="utf-8")
    paths["series"].write_text(json.dumps(category_series(report), indent=2), encoding="utf-8")
    return paths
