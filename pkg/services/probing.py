"""
Probing Service
k-sparse probing of expert hidden activations

Flow: label concept → balanced dataset → (routed filter) → rank neurons → logistic probe per k → F1 on held-out split
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import expit
from sklearn.metrics import f1_score
from tqdm import tqdm

from schemas.corpus import ConceptDataset, ConceptSpec, ProbeSkip, TokenizedCorpus
from schemas.model import ModelConfig
from schemas.probing import BestSite, ProbeResult, Site, SweepConfig, SweepResult
from .corpus import build_dataset, filter_routed, label_tokens
from .errors import ConfigurationError, DataError, DatasetError, EvaluationError
from .model_core import ForwardTrace, Model, trace_corpus
from .tokenizer import ByteBpeTokenizer

logger = logging.getLogger(__name__)

CI_METHOD = "mean ± 1.96·stderr over concepts"
ACTIVE_EXPERT_FRACTION = 0.95


# ============================================================
# Neuron ranking
# ============================================================

@dataclass(frozen=True)
class NeuronRanking:
    scores: np.ndarray  # a_j ≥ 0
    order: np.ndarray   # neurons by descending a_j, low index first on ties

    def top(self, k: int) -> np.ndarray:
        return self.order[:k]


def _check_finite(activations: np.ndarray) -> None:
    if not np.all(np.isfinite(activations)):
        raise DataError("activations contain NaN or infinite values")


def rank_neurons(activations, labels) -> NeuronRanking:
    """a_j = |mean(h_j | y=1) − mean(h_j | y=0)|."""
    h = np.asarray(activations, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    _check_finite(h)
    if y.all() or not y.any():
        raise DatasetError("ranking needs both classes", n_positive=int(y.sum()), n_negative=int((~y).sum()))
    scores = np.abs(h[y].mean(axis=0) - h[~y].mean(axis=0))
    return NeuronRanking(scores=scores, order=np.argsort(-scores, kind="stable"))


# ============================================================
# Logistic probe
# ============================================================

@dataclass(frozen=True)
class LogisticProbe:
    weights: np.ndarray
    bias: float
    lam: float
    train_loss: float
    converged: bool
    n_iter: int

    def decision_function(self, activations) -> np.ndarray:
        return np.asarray(activations, dtype=np.float64) @ self.weights + self.bias

    def predict(self, activations) -> np.ndarray:
        # p ≥ 0.5 ⇔ z ≥ 0
        return (self.decision_function(activations) >= 0).astype(int)


def fit_probe(activations, labels, lam: float | None = None, max_iter: int = 500, tol: float = 1e-8) -> LogisticProbe:
    """Minimize mean logistic loss + (lam/2)·‖w‖² with L-BFGS-B; the bias is not penalized.

    `lam` defaults to 1/n_train.
    """
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels, dtype=np.float64)
    _check_finite(x)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos < 2 or n_neg < 2:
        raise DatasetError(f"probe needs 2 samples per class, got {n_pos} / {n_neg}", n_positive=n_pos, n_negative=n_neg)
    n, k = x.shape
    lam = 1.0 / n if lam is None else lam

    def objective(theta):
        w, b = theta[:k], theta[k]
        z = x @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * w @ w
        residual = expit(z) - y
        grad = np.empty_like(theta)
        grad[:k] = x.T @ residual / n + lam * w
        grad[k] = residual.mean()
        return loss, grad

    res = minimize(
        objective, np.zeros(k + 1), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0},
    )
    return LogisticProbe(
        weights=res.x[:k].copy(),
        bias=float(res.x[k]),
        lam=lam,
        train_loss=float(res.fun),
        converged=bool(res.success),
        n_iter=int(res.nit),
    )


def evaluate_f1(probe: LogisticProbe, activations, labels) -> float:
    """F1 of class 1 at threshold 0.5; 0 when precision + recall = 0."""
    y = np.asarray(labels).astype(int)
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(y) == 0:
        raise EvaluationError("empty evaluation set")
    if len(x) != len(y):
        raise EvaluationError(f"{len(x)} activation rows for {len(y)} labels")
    return float(f1_score(y, probe.predict(x), zero_division=0))


# ============================================================
# Sites
# ============================================================

def all_sites(config: ModelConfig) -> list[Site]:
    sites = []
    for l in range(config.n_layers):
        if config.is_moe(l):
            sites.extend(Site(layer=l, expert=e) for e in range(config.n_experts))
        else:
            sites.append(Site(layer=l))
    return sites


def resolve_sites(config: ModelConfig, sites: list[Site] | None) -> list[Site]:
    if sites is None:
        return all_sites(config)
    for site in sites:
        if site.layer >= config.n_layers:
            raise ConfigurationError(f"site {site.label}: model has {config.n_layers} layers")
        if config.is_moe(site.layer) and site.expert is None:
            raise ConfigurationError(f"site {site.label}: layer {site.layer} is MoE, name an expert")
        if not config.is_moe(site.layer) and site.expert is not None:
            raise ConfigurationError(f"site {site.label}: layer {site.layer} is dense and has no experts")
        if site.expert is not None and site.expert >= config.n_experts:
            raise ConfigurationError(f"site {site.label}: layer has {config.n_experts} experts")
    return sorted(set(sites), key=lambda s: s.sort_key)


# ============================================================
# Sweep
# ============================================================

def site_activations(traces: list[ForwardTrace], dataset: ConceptDataset, site: Site) -> np.ndarray:
    """Hidden vectors h of the site's expert (or dense FFN) for every sample."""
    docs = np.asarray(dataset.docs)
    positions = np.asarray(dataset.positions)
    expert = 0 if site.expert is None else site.expert
    d_ff = traces[0].layers[site.layer].hidden.shape[2]
    out = np.empty((len(docs), d_ff), dtype=np.float64)
    for d in np.unique(docs):
        idx = np.nonzero(docs == d)[0]
        out[idx] = traces[d].layers[site.layer].expert_hidden(expert)[positions[idx]]
    return out


def probe_site(
    traces: list[ForwardTrace],
    dataset: ConceptDataset,
    site: Site,
    k_values,
    lam: float | None = None,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> list[ProbeResult] | ProbeSkip:
    """All k for one (concept, site); the ranking is fitted on the train split only."""
    filtered = filter_routed(dataset, traces, site.layer, site.expert)
    if isinstance(filtered, ProbeSkip):
        return filtered
    x = site_activations(traces, filtered, site)
    y = np.asarray(filtered.labels, dtype=int)
    train, test = np.asarray(filtered.train), np.asarray(filtered.test)
    n_pos_train = int(y[train].sum())
    if n_pos_train < 2 or len(train) - n_pos_train < 2 or len(test) == 0:
        return ProbeSkip(
            concept=dataset.concept, layer=site.layer, expert=site.expert,
            reason=f"train split has {n_pos_train} positive / {len(train) - n_pos_train} negative, test has {len(test)}",
            n_positive=filtered.n_positive, n_negative=filtered.n_negative,
        )
    ranking = rank_neurons(x[train], y[train])
    ratio = filtered.metadata.get("positive_ratio", filtered.n_positive / filtered.n_total)
    results = []
    for k in k_values:
        if k > x.shape[1]:
            logger.debug(f"[probe] k={k} exceeds d_ff={x.shape[1]}, skipped")
            continue
        cols = ranking.top(k)
        probe = fit_probe(x[np.ix_(train, cols)], y[train], lam=lam, max_iter=max_iter, tol=tol)
        f1 = evaluate_f1(probe, x[np.ix_(test, cols)], y[test])
        logger.debug(f"[probe] concept={dataset.concept} site={site.label} k={k} f1={f1:.3f}")
        results.append(ProbeResult(
            concept=dataset.concept,
            layer=site.layer,
            expert=site.expert,
            k=k,
            selected=cols.tolist(),
            weights=probe.weights.tolist(),
            bias=probe.bias,
            lam=probe.lam,
            train_loss=probe.train_loss,
            converged=probe.converged,
            n_iter=probe.n_iter,
            test_f1=f1,
            n_train=len(train),
            n_test=len(test),
            positive_ratio=ratio,
        ))
    return results


def select_best(grid: list[ProbeResult]) -> list[BestSite]:
    """Max test F1 per (concept, k); ties go to the lowest layer, then the lowest expert."""
    best: dict[tuple[str, int], ProbeResult] = {}
    for r in grid:
        key = (r.concept, r.k)
        cur = best.get(key)
        if cur is None or (-r.test_f1, r.site.sort_key) < (-cur.test_f1, cur.site.sort_key):
            best[key] = r
    return [
        BestSite(concept=r.concept, k=r.k, layer=r.layer, expert=r.expert, test_f1=r.test_f1)
        for (_, _), r in sorted(best.items())
    ]


def run_sweep(
    model: Model,
    corpus: TokenizedCorpus,
    concepts: list[ConceptSpec],
    config: SweepConfig | None = None,
    traces: list[ForwardTrace] | None = None,
    tokenizer: ByteBpeTokenizer | None = None,
    progress: bool = False,
) -> SweepResult:
    """Probe every concept at every site for every k.

    Args:
        model: model to trace
        corpus: corpus the concepts are labeled on
        concepts: concept rules to build datasets for
        config: sweep settings (sites, k values, sample count, solver)
        traces: precomputed traces of `corpus.documents`; traced here when None

    Returns:
        SweepResult with the full grid, the best site per (concept, k) and every skip
    """
    config = config or SweepConfig()
    sites = resolve_sites(model.config, config.sites)
    workers = config.workers or 1
    if traces is None:
        traces = trace_corpus(model, corpus.documents, workers=workers, progress=progress)

    skips: list[ProbeSkip] = []
    tasks: list[tuple[ConceptDataset, Site]] = []
    for concept in concepts:
        labels = label_tokens(corpus, concept, tokenizer)
        try:
            dataset = build_dataset(labels, n=config.n_samples, seed=config.seed, concept=concept.name)
        except DatasetError as e:
            logger.warning(f"[probe] concept={concept.name} skipped: {e}")
            skips.extend(
                ProbeSkip(concept=concept.name, layer=s.layer, expert=s.expert, reason=str(e),
                          n_positive=e.n_positive or 0, n_negative=e.n_negative or 0)
                for s in sites
            )
            continue
        tasks.extend((dataset, site) for site in sites)

    def run(task):
        dataset, site = task
        return probe_site(traces, dataset, site, config.k_values, config.lam, config.max_iter, config.tol)

    grid: list[ProbeResult] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for outcome in tqdm(pool.map(run, tasks), total=len(tasks), desc="probe", disable=not progress):
            if isinstance(outcome, ProbeSkip):
                logger.warning(f"[probe] concept={outcome.concept} site={Site(layer=outcome.layer, expert=outcome.expert).label} skipped: {outcome.reason}")
                skips.append(outcome)
            else:
                grid.extend(outcome)

    result = SweepResult(
        grid=grid,
        best=select_best(grid),
        skips=skips,
        metadata={
            "config": config.model_dump(mode="json"),
            "n_documents": len(corpus.documents),
            "n_tokens": corpus.n_tokens,
            "corpus_sha256": corpus.provenance.sha256,
            "ci_method": CI_METHOD,
        },
    )
    logger.info(f"[probe] {len(grid)} probes, {len(skips)} skips, {len(result.best)} best sites")
    return result


# ============================================================
# Aggregates & persistence
# ============================================================

def grid_frame(result: SweepResult) -> pd.DataFrame:
    rows = [r.model_dump() for r in result.grid]
    frame = pd.DataFrame(rows, columns=list(ProbeResult.model_fields))
    for col in ("selected", "weights"):
        frame[col] = frame[col].map(json.dumps)
    return frame


def f1_series(result: SweepResult) -> dict:
    """Mean best-site F1 over concepts per k with a 95% interval."""
    frame = pd.DataFrame([b.model_dump() for b in result.best], columns=list(BestSite.model_fields))
    series = {"k": [], "mean": [], "lower": [], "upper": [], "n_concepts": [], "ci_method": CI_METHOD}
    for k, group in frame.groupby("k", sort=True):
        f1 = group["test_f1"].to_numpy()
        half = 1.96 * f1.std(ddof=1) / np.sqrt(len(f1)) if len(f1) > 1 else 0.0
        series["k"].append(int(k))
        series["mean"].append(float(f1.mean()))
        series["lower"].append(float(f1.mean() - half))
        series["upper"].append(float(f1.mean() + half))
        series["n_concepts"].append(len(f1))
    return series


def count_concept_experts(result: SweepResult, k: int, fraction: float = ACTIVE_EXPERT_FRACTION) -> list[dict]:
    """Experts per (concept, MoE layer) whose F1 is within `fraction` of that layer's best expert."""
    rows = [r.model_dump() for r in result.grid if r.k == k and r.expert is not None]
    if not rows:
        return []
    frame = pd.DataFrame(rows)
    counts = []
    for (concept, layer), group in frame.groupby(["concept", "layer"], sort=True):
        best = group["test_f1"].max()
        counts.append({
            "concept": concept,
            "layer": int(layer),
            "k": k,
            "best_f1": float(best),
            "n_experts": int((group["test_f1"] >= fraction * best).sum()) if best > 0 else 0,
        })
    return counts


def save_sweep(result: SweepResult, out_dir: str | Path, plot_data: bool = False, count_k: int = 1) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "grid": out_dir / "probe_grid.csv",
        "best": out_dir / "best_sites.json",
        "skips": out_dir / "skips.json",
    }
    grid_frame(result).to_csv(paths["grid"], index=False)
    paths["best"].write_text(json.dumps({
        "best": [b.model_dump() for b in result.best],
        "metadata": result.metadata,
    }, indent=2), encoding="utf-8")
    paths["skips"].write_text(json.dumps([s.model_dump() for s in result.skips], indent=2), encoding="utf-8")
    if plot_data:
        paths["series"] = out_dir / "f1_by_k.json"
        paths["series"].write_text(json.dumps(f1_series(result), indent=2), encoding="utf-8")
        paths["expert_counts"] = out_dir / "concept_expert_counts.json"
        paths["expert_counts"].write_text(json.dumps(count_concept_experts(result, count_k), indent=2), encoding="utf-8")
    return paths
