"""
Specialization Service
How concentrated each expert's tokens are over clusters of the vocabulary

Flow: k-means on W_U rows → per-expert cluster distribution P_i (routed tokens or promoted tokens)
      → layer base rate Q_L → S_i = JSD(P_i ‖ Q_L) → minus multinomial baseline Ŝ_i
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.special import rel_entr
from sklearn.cluster import KMeans

from schemas.specialization import CLUSTER_PRESET, ExpertScore, SpecializationConfig, SpecializationReport
from .errors import ConfigurationError
from .model_core import ForwardTrace, Weights

logger = logging.getLogger(__name__)

KMEANS_MAX_ITER = 100


# ============================================================
# Clustering
# ============================================================

@dataclass(frozen=True)
class ClusterMap:
    k: int
    assignment: np.ndarray  # (|V|,) cluster id per token, 0-based
    centroids: np.ndarray   # (k, d)
    inertia: float
    seed: int
    empty_clusters: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "inertia": self.inertia,
            "empty_clusters": list(self.empty_clusters),
            "assignment": self.assignment.tolist(),
            "centroids": self.centroids.tolist(),
        }


def cluster_unembedding(unembed, k: int, seed: int = 0) -> ClusterMap:
    """k-means (k-means++ init) over the token vectors W_U[:, v]."""
    points = np.asarray(unembed, dtype=np.float64).T
    vocab = points.shape[0]
    if not 1 <= k <= vocab:
        raise ConfigurationError(f"k={k} must be between 1 and vocab size {vocab}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=KMEANS_MAX_ITER, tol=0.0, random_state=seed)
    assignment = km.fit_predict(points)
    sizes = np.bincount(assignment, minlength=k)
    cmap = ClusterMap(
        k=k,
        assignment=assignment.astype(np.int64),
        centroids=km.cluster_centers_,
        inertia=float(km.inertia_),
        seed=seed,
        empty_clusters=tuple(int(c) for c in np.nonzero(sizes == 0)[0]),
    )
    logger.info(f"[cluster] k={k} inertia={cmap.inertia:.4f} iterations={km.n_iter_}")
    return cmap


# ============================================================
# Distributions
# ============================================================

@dataclass(frozen=True)
class ClusterDistribution:
    p: np.ndarray
    n_tokens: int
    kind: str

    @property
    def flagged(self) -> bool:
        return self.n_tokens == 0


def _normalize(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    return counts / total if total > 0 else np.zeros(len(counts))


def routing_counts(traces: list[ForwardTrace], layer: int, cmap: ClusterMap) -> np.ndarray:
    """(N, k) counts of routed tokens per expert, aggregated through the cluster map."""
    n_experts = traces[0].layers[layer].n_experts if traces else 0
    counts = np.zeros((n_experts, cmap.k), dtype=np.int64)
    for trace in traces:
        pos, expert = np.nonzero(trace.layers[layer].gates > 0)
        np.add.at(counts, (expert, cmap.assignment[trace.tokens[pos]]), 1)
    return counts


def functional_counts(traces: list[ForwardTrace], layer: int, cmap: ClusterMap, weights: Weights,
                      n_top: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """(N, k) counts of the top-n_top tokens promoted by g_i·E_i(x) at routed positions, plus positions per expert."""
    unembed = weights.unembed.astype(np.float64)
    n_top = min(n_top, unembed.shape[1])
    n_experts = traces[0].layers[layer].n_experts if traces else 0
    counts = np.zeros((n_experts, cmap.k), dtype=np.int64)
    positions = np.zeros(n_experts, dtype=np.int64)
    for trace in traces:
        lt = trace.layers[layer]
        for e in range(n_experts):
            routed = np.nonzero(lt.gates[:, e] > 0)[0]
            if routed.size == 0:
                continue
            logits = lt.expert_update(e)[routed] @ unembed
            top = np.argsort(-logits, axis=1, kind="stable")[:, :n_top]
            counts[e] += np.bincount(cmap.assignment[top.ravel()], minlength=cmap.k)
            positions[e] += routed.size
    return counts, positions


def routing_distribution(traces: list[ForwardTrace], layer: int, expert: int, cmap: ClusterMap) -> ClusterDistribution:
    counts = routing_counts(traces, layer, cmap)[expert]
    return ClusterDistribution(p=_normalize(counts), n_tokens=int(counts.sum()), kind="routing")


def functional_distribution(traces: list[ForwardTrace], layer: int, expert: int, cmap: ClusterMap,
                            weights: Weights, n_top: int = 3) -> ClusterDistribution:
    counts, _ = functional_counts(traces, layer, cmap, weights, n_top)
    return ClusterDistribution(p=_normalize(counts[expert]), n_tokens=int(counts[expert].sum()), kind="functional")


# ============================================================
# Divergence & baseline
# ============================================================

def _jsd_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    m = 0.5 * (p + q)
    value = 0.5 * rel_entr(p, m).sum(axis=-1) + 0.5 * rel_entr(q, m).sum(axis=-1)
    return np.clip(value / np.log(2), 0.0, 1.0)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits, 0·log0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigurationError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return float(_jsd_rows(p, q))


class Baseline(NamedTuple):
    mean: float
    stderr: float
    flagged: bool = False


def random_baseline(q, n: int, mc_samples: int = 100, seed=0) -> Baseline:
    """E[JSD(P̂ ‖ q)] for P̂ the empirical distribution of n draws from Multinomial(q)."""
    if mc_samples <= 0:
        raise ConfigurationError("mc_samples must be positive")
    if n == 0:
        return Baseline(0.0, 0.0, flagged=True)
    q = np.asarray(q, dtype=np.float64)
    # sorted so the draws do not depend on cluster labels
    q_sorted = np.sort(q)[::-1]
    rng = np.random.default_rng(seed)
    draws = rng.multinomial(n, q_sorted / q_sorted.sum(), size=mc_samples) / n
    values = _jsd_rows(draws, np.broadcast_to(q_sorted, draws.shape))
    stderr = values.std(ddof=1) / np.sqrt(mc_samples) if mc_samples > 1 else 0.0
    return Baseline(float(values.mean()), float(stderr))


def exact_single_draw_baseline(q) -> float:
    """Ŝ for n = 1: Σ_c q_c · JSD(one-hot_c ‖ q)."""
    q = np.asarray(q, dtype=np.float64)
    eye = np.eye(len(q))
    return float(q @ _jsd_rows(eye, np.broadcast_to(q, eye.shape)))


# ============================================================
# Reports
# ============================================================

def report_from_counts(counts: np.ndarray, layer: int, k: int, kind: str, mc_samples: int = 100, seed: int = 0,
                       weighted_base_rate: bool = False, n_top: int | None = None, workers: int = 1) -> SpecializationReport:
    counts = np.asarray(counts)
    if mc_samples <= 0:
        raise ConfigurationError("mc_samples must be positive")
    n = counts.sum(axis=1)
    valid = np.nonzero(n > 0)[0]
    dists = np.array([_normalize(c) for c in counts]) if len(counts) else np.zeros((0, k))
    base = dict(layer=layer, k=k, kind=kind, n_top=n_top, mc_samples=mc_samples, weighted_base_rate=weighted_base_rate)
    if valid.size == 0:
        logger.warning(f"[specialize] L{layer} k={k} {kind}: no routed tokens, empty report")
        return SpecializationReport(
            **base, empty=True,
            experts=[ExpertScore(expert=e, n_tokens=0, flagged="never routed")
                     for e in range(len(counts))],
        )
    if weighted_base_rate:
        q = counts[valid].sum(axis=0) / n[valid].sum()
    else:
        # mean of the emitted P_i
        q = dists[valid].mean(axis=0)

    def score(e: int) -> ExpertScore:
        if n[e] == 0:
            return ExpertScore(expert=e, n_tokens=0, flagged="never routed")
        raw = jsd(dists[e], q)
        baseline = random_baseline(q, int(n[e]), mc_samples, seed=[seed, layer, e])
        return ExpertScore(
            expert=e,
            raw=raw,
            baseline=baseline.mean,
            baseline_stderr=baseline.stderr,
            adjusted=raw - baseline.mean,
            n_tokens=int(n[e]),
            distribution=dists[e].tolist(),
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        experts = list(pool.map(score, range(len(counts))))
    report = SpecializationReport(**base, base_rate=q.tolist(), experts=experts)
    logger.info(f"[specialize] L{layer} k={k} {kind}: mean adjusted={report.mean_adjusted:.4f}")
    return report


def specialization_report(traces: list[ForwardTrace], layer: int, cmap: ClusterMap, kind: str = "routing",
                          weights: Weights | None = None, n_top: int = 3, mc_samples: int = 100, seed: int = 0,
                          weighted_base_rate: bool = False, workers: int = 1) -> SpecializationReport:
    """Score every expert of one layer against the layer base rate.

    Args:
        kind: "routing" clusters the routed tokens, "functional" the top-n_top tokens each update promotes
        weights: needed for "functional"

    Returns:
        SpecializationReport with one ExpertScore per expert
    """
    if kind == "routing":
        counts = routing_counts(traces, layer, cmap)
        n_top_used = None
    elif kind == "functional":
        if weights is None:
            raise ConfigurationError("functional distributions need the model weights")
        counts, _ = functional_counts(traces, layer, cmap, weights, n_top)
        n_top_used = n_top
    else:
        raise ConfigurationError(f"unknown distribution kind {kind!r}")
    return report_from_counts(counts, layer, cmap.k, kind, mc_samples, seed, weighted_base_rate, n_top_used, workers)


def resolve_k_values(vocab_size: int, k_values: tuple[int, ...] | None) -> list[int]:
    """Explicit k values must fit the vocabulary; preset values that do not are dropped."""
    if k_values is not None:
        for k in k_values:
            if k > vocab_size:
                raise ConfigurationError(f"k={k} exceeds vocab size {vocab_size}")
        return list(k_values)
    kept = [k for k in CLUSTER_PRESET if k <= vocab_size]
    dropped = [k for k in CLUSTER_PRESET if k > vocab_size]
    if dropped:
        logger.warning(f"[specialize] preset k={dropped} exceed vocab size {vocab_size}, dropped")
    return kept


def specialization_sweep(traces: list[ForwardTrace], weights: Weights,
                         config: SpecializationConfig | None = None) -> tuple[list[SpecializationReport], dict[int, ClusterMap]]:
    """Every requested MoE layer × k × kind."""
    config = config or SpecializationConfig()
    model_config = weights.config
    layers = config.layers if config.layers is not None else model_config.moe_layers()
    for l in layers:
        if l >= model_config.n_layers or not model_config.is_moe(l):
            raise ConfigurationError(f"layer {l} is not an MoE layer")
    k_values = resolve_k_values(model_config.vocab_size, config.k_values)
    cmaps = {k: cluster_unembedding(weights.unembed, k, config.seed) for k in k_values}
    reports = []
    for l in layers:
        for k in k_values:
            for kind in config.kinds:
                reports.append(specialization_report(
                    traces, l, cmaps[k], kind, weights=weights, n_top=config.n_top, mc_samples=config.mc_samples,
                    seed=config.seed, weighted_base_rate=config.weighted_base_rate, workers=config.workers or 1,
                ))
    return reports, cmaps


def report_frame(reports: list[SpecializationReport]) -> pd.DataFrame:
    rows = [
        {"expert": e.expert, "layer": r.layer, "k": r.k, "kind": r.kind, "S": e.raw, "S_hat": e.baseline,
         "S_hat_stderr": e.baseline_stderr, "adjusted": e.adjusted, "n": e.n_tokens, "n_top": r.n_top, "flagged": e.flagged}
        for r in reports for e in r.experts
    ]
    return pd.DataFrame(rows, columns=["expert", "layer", "k", "kind", "S", "S_hat", "S_hat_stderr", "adjusted", "n", "n_top", "flagged"])


def layer_series(reports: list[SpecializationReport]) -> dict:
    """kind → list of {layer, k, mean_adjusted} for plotting."""
    series: dict[str, list[dict]] = {}
    for r in reports:
        series.setdefault(r.kind, []).append({"layer": r.layer, "k": r.k, "mean_adjusted": r.mean_adjusted, "n_top": r.n_top})
    return series


def save_specialization(reports: list[SpecializationReport], cmaps: dict[int, ClusterMap], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report": out_dir / "specialization.csv", "series": out_dir / "specialization_series.json"}
    report_frame(reports).to_csv(paths["report"], index=False)
    paths["series"].write_text(json.dumps(layer_series(reports), indent=2), encoding="utf-8")
    for k, cmap in cmaps.items():
        path = out_dir / f"clusters_k{k}.json"
        path.write_text(json.dumps(cmap.to_json()), encoding="utf-8")
        paths[f"clusters_k{k}"] = path
    return paths
