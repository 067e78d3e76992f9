"""
attribute command
Logit Lens, DLA and the trigger–target experiment
"""
import json
from pathlib import Path

from schemas.attribution import CaseSet
from services.attribution import case_sets_from_json, layer_dla, lens_report, run_trigger_target, save_trigger_target
from services.autointerp_prompts import build_case_generation_prompt
from services.errors import ConfigurationError, InputError
from services.manifest import RunRecorder
from services.tokenizer import load_tokenizer
from .common import add_model_arg, default_workers, load_model_dir, model_inputs, parse_ints, read_json


def _encode(args, tokenizer) -> list[int]:
    if args.tokens:
        return parse_ints(args.tokens)
    if args.text is None:
        raise InputError("pass --text or --tokens")
    return tokenizer.encode(args.text)


def _position(position: int, n: int) -> int:
    resolved = position + n if position < 0 else position
    if not 0 <= resolved < n:
        raise InputError(f"position {position} outside a sequence of {n} tokens")
    return resolved


def _write(out: str | None, name: str, payload, recorder: RunRecorder) -> None:
    if out is None:
        return
    path = Path(out) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
    recorder.add_outputs([path])
    recorder.finish(out)


def cmd_lens(args) -> int:
    model = load_model_dir(args.model)
    tokenizer = load_tokenizer()
    ids = _encode(args, tokenizer)
    _, trace = model.forward(ids)
    position = _position(args.position, len(ids))
    reports = lens_report(model.weights, trace, position, n_top=args.n_top, normalize=args.normalized_lens,
                          tokenizer=tokenizer)
    for r in reports:
        print(f"{r.component:<24} " + " ".join(f"{e.token!r}:{e.logit:.2f}" for e in r.top))
    recorder = RunRecorder("attribute lens", {"tokens": ids, "position": position, "n_top": args.n_top,
                                              "normalized": args.normalized_lens})
    for path in model_inputs(args.model):
        recorder.add_input(path)
    _write(args.out, "lens.json", [r.model_dump() for r in reports], recorder)
    return 0


def cmd_dla(args) -> int:
    model = load_model_dir(args.model)
    tokenizer = load_tokenizer()
    ids = _encode(args, tokenizer)
    _, trace = model.forward(ids)
    position = _position(args.position, len(ids))
    if args.target_id is not None:
        target = args.target_id
    elif args.target:
        target = tokenizer.encode(" " + args.target)[0]
    else:
        raise InputError("pass --target or --target-id")
    if not 0 <= target < model.config.vocab_size:
        raise InputError(f"target token {target} outside vocabulary of {model.config.vocab_size}")
    layers = [args.layer] if args.layer is not None else list(range(model.config.n_layers))
    for l in layers:
        if not 0 <= l < model.config.n_layers:
            raise ConfigurationError(f"layer {l} does not exist")
    records = [layer_dla(model.weights, trace, l, position, target) for l in layers]
    for r in records:
        top = r.ranking[:3]
        print(f"L{r.layer} target={tokenizer.token_str(target)!r} top experts "
              + " ".join(f"E{e}:{r.contributions[e]:+.3f}" for e in top))
    recorder = RunRecorder("attribute dla", {"tokens": ids, "position": position, "target": target, "layers": layers})
    for path in model_inputs(args.model):
        recorder.add_input(path)
    _write(args.out, "dla.json", [r.model_dump() for r in records], recorder)
    return 0


def _load_case_sets(args) -> list[CaseSet]:
    """Bare-array case files take their owners from --expert (in file order) and --layer; set files carry their own."""
    experts = list(parse_ints(args.expert) or [])
    sets = []
    for path in args.cases:
        data = read_json(path)
        if isinstance(data, list):
            if not experts:
                raise ConfigurationError(f"{path} is a bare case array; pass --layer and one --expert per such file")
            sets.extend(case_sets_from_json(data, layer=args.layer, expert=experts.pop(0)))
        else:
            sets.extend(case_sets_from_json(data))
    if experts:
        raise ConfigurationError(f"{len(experts)} --expert value(s) left without a bare case file")
    return sets


def cmd_trigger_target(args) -> int:
    model = load_model_dir(args.model)
    case_sets = _load_case_sets(args)
    workers = args.workers or default_workers()
    recorder = RunRecorder("attribute trigger-target", {"layer": args.layer, "expert": args.expert,
                                                        "n_sets": len(case_sets)})
    for path in [*model_inputs(args.model), *args.cases]:
        recorder.add_input(path)
    with recorder.stage("cases"):
        report = run_trigger_target(model, case_sets, layer=args.layer, workers=workers)
    with recorder.stage("write"):
        paths = save_trigger_target(report, args.out)
    recorder.add_outputs(paths.values())
    recorder.finish(args.out)
    for name, agg in (("matched", report.matched), ("control", report.control)):
        print(f"{name}: " + " ".join(f"{c}={p:.1f}%" for c, p in agg.percentages.items())
              + f" errors={agg.n_errors}")
    return 0


def cmd_case_prompt(args) -> int:
    prompt = build_case_generation_prompt(args.label, n=args.n)
    print(prompt.user)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("attribute", help="vocabulary-space attribution of expert updates")
    sub = parser.add_subparsers(dest="attribute_command", required=True)

    for name, func, help_text in (
        ("lens", cmd_lens, "Logit Lens of every residual update at one position"),
        ("dla", cmd_dla, "per-expert direct logit attribution toward one target token"),
    ):
        p = sub.add_parser(name, help=help_text)
        add_model_arg(p)
        p.add_argument("--text")
        p.add_argument("--tokens", help="comma-separated token ids instead of --text")
        p.add_argument("--position", type=int, default=-1)
        p.add_argument("--out", help="directory for the JSON result and manifest")
        p.set_defaults(func=func)
        if name == "lens":
            p.add_argument("--n-top", type=int, default=10)
            p.add_argument("--normalized-lens", action="store_true", help="apply the final norm before projecting")
        else:
            p.add_argument("--target", help="target word (first token of ' ' + word)")
            p.add_argument("--target-id", type=int)
            p.add_argument("--layer", type=int)

    p = sub.add_parser("trigger-target", help="matched vs. control trigger–target cases")
    add_model_arg(p)
    p.add_argument("--cases", required=True, nargs="+",
                   help="case files: a JSON array of {text, trigger, target}, or {\"sets\": [...]}")
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, help="owner layer of bare-array files; filters set files")
    p.add_argument("--expert", help="comma-separated owner experts, one per bare-array file")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_trigger_target)

    p = sub.add_parser("case-prompt", help="print the case-generation prompt for one expert label")
    p.add_argument("--label", required=True)
    p.add_argument("--n", type=int, default=20)
    p.set_defaults(func=cmd_case_prompt)
