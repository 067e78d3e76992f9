"""
autointerp command
Mine, explain and score expert labels against an LLM endpoint (or the in-process mock)
"""
from pathlib import Path

from fastapi.testclient import TestClient

from routers.mock_llm import MockLlmState, create_mock_app
from schemas.autointerp import AutointerpConfig, LabelRecord, LlmEndpoint
from services.autointerp import labels_frame, layer_f1_series, rescore_from_transcripts, run_autointerp, save_labels
from services.corpus import load_corpus
from services.errors import ConfigurationError, InputError
from services.llm import TranscriptStore, auth_headers
from services.manifest import RunRecorder
from .common import default_workers, load_model_dir, merge_config, model_inputs, parse_sites, read_json, validate

MOCK_URL = "http://testserver/v1/chat/completions"
TRANSCRIPT_NAME = "transcripts.jsonl"


def _endpoint(args, config: AutointerpConfig) -> LlmEndpoint:
    if args.mock_endpoint:
        return LlmEndpoint(url=MOCK_URL, model="mock", auth_env=None, backoff=0.0)
    endpoint = config.endpoint
    if args.endpoint_url or args.endpoint_model:
        data = endpoint.model_dump() if endpoint else {}
        data.update({k: v for k, v in (("url", args.endpoint_url), ("model", args.endpoint_model)) if v})
        endpoint = validate(LlmEndpoint, data, source="endpoint")
    if endpoint is None:
        raise ConfigurationError("no LLM endpoint configured (use --endpoint-url/--endpoint-model or --mock-endpoint)")
    return endpoint


def cmd_autointerp(args) -> int:
    if args.rescore:
        return cmd_rescore(args)
    config = merge_config(
        AutointerpConfig,
        args.config,
        experts=parse_sites(args.experts),
        budget=args.budget,
        seed=args.seed,
        in_flight=args.in_flight,
    )
    if not args.model or not args.corpus:
        raise InputError("--model and --corpus are required unless --rescore is given")
    endpoint = _endpoint(args, config)
    auth_headers(endpoint)
    workers = args.workers or default_workers()
    model = load_model_dir(args.model)
    corpus = load_corpus(args.corpus)

    out_dir = Path(args.out)
    transcripts_path = out_dir / TRANSCRIPT_NAME
    transcripts_path.unlink(missing_ok=True)
    transcripts = TranscriptStore(transcripts_path)

    recorder = RunRecorder("autointerp", {"autointerp": config.model_dump(mode="json", exclude={"endpoint"}),
                                          "endpoint": endpoint.model_dump(mode="json")},
                           seeds={"windows": config.seed, "partition": config.seed, "scorer_shuffle": config.seed})
    for path in model_inputs(args.model):
        recorder.add_input(path)
    recorder.inputs[str(args.corpus)] = corpus.provenance.sha256
    recorder.notes["partition"] = {"top_n": config.top_n, "explainer": config.n_explainer,
                                   "positive": config.n_positive, "negative": config.n_negative}

    client, key_sink = None, None
    if args.mock_endpoint:
        state = MockLlmState(scorer_mode=args.mock_scorer)
        client, key_sink = TestClient(create_mock_app(state)), state.register
    try:
        with recorder.stage("label"):
            records, pools = run_autointerp(model, corpus, endpoint, client=client, transcripts=transcripts,
                                            config=config, key_sink=key_sink, workers=workers, progress=args.progress)
    finally:
        if client is not None:
            client.close()
    with recorder.stage("write"):
        paths = save_labels(records, pools, config, out_dir)
    recorder.add_outputs([*paths.values(), transcripts_path])
    recorder.finish(out_dir)
    _print_series(records)
    return 0


def cmd_rescore(args) -> int:
    out_dir = Path(args.out)
    records = [LabelRecord.model_validate(r) for r in read_json(out_dir / "labels.json")]
    rescored = rescore_from_transcripts(TranscriptStore(out_dir / TRANSCRIPT_NAME), records)
    labels_frame(rescored).to_csv(out_dir / "labels_rescored.csv", index=False)
    _print_series(rescored)
    return 0


def _print_series(records: list[LabelRecord]) -> None:
    for row in layer_f1_series(records):
        f1 = "n/a" if row["mean_f1"] is None else f"{row['mean_f1']:.3f}"
        print(f"L{row['layer']}: mean F1 {f1}, coverage {row['n_labeled']}/{row['n_experts']}")


def register(subparsers) -> None:
    p = subparsers.add_parser("autointerp", help="label experts with an explainer and score them with a scorer")
    p.add_argument("--model", help="model directory")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="AutointerpConfig JSON")
    p.add_argument("--experts", help="comma-separated LAYER/EXPERT list (default every expert)")
    p.add_argument("--budget", type=int, help="mining token budget (default 2000000)")
    p.add_argument("--seed", type=int)
    p.add_argument("--in-flight", type=int, help="concurrent experts talking to the endpoint")
    p.add_argument("--endpoint-url")
    p.add_argument("--endpoint-model")
    p.add_argument("--mock-endpoint", action="store_true", help="serve the deterministic mock LLM in-process")
    p.add_argument("--mock-scorer", choices=["truth", "all_positive"], default="truth")
    p.add_argument("--rescore", action="store_true", help="recompute F1 from the transcripts in --out")
    p.add_argument("--workers", type=int)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_autointerp)
