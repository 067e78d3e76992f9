"""
specialize command
Routing and functional specialization of every MoE layer
"""
from schemas.specialization import SpecializationConfig
from services.corpus import load_corpus, take_tokens
from services.manifest import RunRecorder
from services.model_core import trace_corpus
from services.specialization import save_specialization, specialization_sweep
from .common import add_model_arg, default_workers, load_model_dir, merge_config, model_inputs, parse_ints


def cmd_specialize(args) -> int:
    config = merge_config(
        SpecializationConfig,
        args.config,
        layers=parse_ints(args.layers),
        k_values=parse_ints(args.k),
        kinds=args.kinds.split(",") if args.kinds else None,
        mc_samples=args.mc_samples,
        token_budget=args.budget,
        seed=args.seed,
        weighted_base_rate=True if args.weighted_base_rate else None,
        workers=args.workers,
    )
    if config.workers is None:
        config = config.model_copy(update={"workers": default_workers()})

    model = load_model_dir(args.model)
    corpus = load_corpus(args.corpus)
    recorder = RunRecorder("specialize", config, seeds={"kmeans": config.seed, "baseline": config.seed})
    for path in model_inputs(args.model):
        recorder.add_input(path)
    recorder.inputs[str(args.corpus)] = corpus.provenance.sha256

    documents = take_tokens(corpus, config.token_budget)
    with recorder.stage("trace"):
        traces = trace_corpus(model, documents, workers=config.workers, progress=args.progress)
    with recorder.stage("specialize"):
        reports, cmaps = specialization_sweep(traces, model.weights, config)
    with recorder.stage("write"):
        paths = save_specialization(reports, cmaps, args.out)
    recorder.add_outputs(paths.values())
    recorder.notes["n_tokens"] = sum(len(d) for d in documents)
    recorder.finish(args.out)
    for r in reports:
        mean = r.mean_adjusted
        print(f"L{r.layer} k={r.k} {r.kind}: mean adjusted " + ("n/a" if mean is None else f"{mean:.4f}"))
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("specialize", help="routing / functional specialization against the layer base rate")
    add_model_arg(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="SpecializationConfig JSON")
    p.add_argument("--layers", help="comma-separated MoE layers (default all)")
    p.add_argument("--k", help="comma-separated cluster counts (default 10,50,100,1000,5000)")
    p.add_argument("--kinds", help="routing,functional")
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--budget", type=int, help="token budget (default 1000000)")
    p.add_argument("--seed", type=int)
    p.add_argument("--weighted-base-rate", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_specialize)
