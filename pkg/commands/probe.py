"""
probe command
k-sparse probe sweep over every site of a model
"""
from schemas.probing import SweepConfig
from services.corpus import load_concepts, load_corpus, load_registry
from services.manifest import RunRecorder
from services.model_core import trace_corpus
from services.probing import run_sweep, save_sweep
from .common import add_model_arg, default_workers, load_model_dir, merge_config, model_inputs, parse_ints, parse_sites


def cmd_probe(args) -> int:
    config = merge_config(
        SweepConfig,
        args.config,
        concepts=args.concepts.split(",") if args.concepts else None,
        k_values=parse_ints(args.k),
        sites=parse_sites(args.sites),
        seed=args.seed,
        workers=args.workers,
    )
    if config.workers is None:
        config = config.model_copy(update={"workers": default_workers()})

    model = load_model_dir(args.model)
    corpus = load_corpus(args.corpus)
    if args.category:
        concepts = load_registry(args.category)
        if config.concepts is not None:
            concepts = [c for c in concepts if c.name in set(config.concepts)]
    else:
        concepts = load_concepts(config.concepts)

    recorder = RunRecorder("probe", {"sweep": config.model_dump(mode="json"), "category": args.category,
                                     "plot_data": args.plot_data}, seeds={"dataset": config.seed})
    for path in model_inputs(args.model):
        recorder.add_input(path)
    recorder.inputs[str(args.corpus)] = corpus.provenance.sha256

    with recorder.stage("trace"):
        traces = trace_corpus(model, corpus.documents, workers=config.workers, progress=args.progress)
    with recorder.stage("sweep"):
        result = run_sweep(model, corpus, concepts, config, traces=traces, progress=args.progress)
    with recorder.stage("write"):
        paths = save_sweep(result, args.out, plot_data=args.plot_data)
    recorder.add_outputs(paths.values())
    recorder.notes["n_concepts"] = len(concepts)
    recorder.notes["n_skips"] = len(result.skips)
    recorder.finish(args.out)
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("probe", help="k-sparse probe sweep; best site per concept and k")
    add_model_arg(p)
    p.add_argument("--corpus", required=True, help="text / JSON-lines file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="SweepConfig JSON")
    p.add_argument("--concepts", help="comma-separated concept names")
    p.add_argument("--category", choices=["pos", "latex", "code", "text"], help="restrict to one concept registry")
    p.add_argument("--k", help="comma-separated k values (default 1,2,4,8,16,32,64)")
    p.add_argument("--sites", help="comma-separated LAYER or LAYER/EXPERT sites")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--plot-data", action="store_true", help="also write f1_by_k.json and concept_expert_counts.json")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_probe)
