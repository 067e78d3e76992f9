"""
model command
init / plant / inspect toy MoE weight containers
"""
from pathlib import Path

from schemas.model import ModelConfig, PlantFile
from services.errors import ConfigurationError, InputError
from services.manifest import RunRecorder
from services.model_core import expected_shapes, init_weights, load_config
from services.planting import plant_dense_control, plant_expert
from .common import add_model_arg, load_model_dir, read_json, save_model_dir, validate


def _read_config(path: str) -> ModelConfig:
    if not Path(path).exists():
        raise InputError(f"config not found: {path}")
    return load_config(Path(path).read_text(encoding="utf-8"))


def cmd_init(args) -> int:
    config = _read_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    recorder = RunRecorder("model init", config, seeds={"weights": config.seed})
    recorder.add_input(args.config)
    with recorder.stage("init"):
        weights = init_weights(config)
    recorder.add_outputs(save_model_dir(weights, args.out))
    recorder.finish(args.out)
    return 0


def cmd_plant(args) -> int:
    config = _read_config(args.config)
    plants = validate(PlantFile, read_json(args.plants), source=args.plants)
    seed = plants.seed if plants.seed is not None else config.seed
    recorder = RunRecorder("model plant", {"model": config.model_dump(mode="json"), "plants": plants.model_dump(mode="json"),
                                           "dense_control": args.dense_control, "n_smear": args.n_smear},
                           seeds={"plant": seed})
    recorder.add_input(args.config)
    recorder.add_input(args.plants)
    with recorder.stage("plant"):
        if args.dense_control:
            if len(plants.specs) != 1:
                raise ConfigurationError("a dense control carries exactly one planted spec")
            weights = plant_dense_control(config, plants.specs[0], n_smear=args.n_smear,
                                          noise_scale=plants.noise_scale, seed=seed)
        else:
            weights = plant_expert(config, plants.specs, noise_scale=plants.noise_scale, seed=seed)
    recorder.add_outputs(save_model_dir(weights, args.out))
    recorder.finish(args.out)
    return 0


def cmd_inspect(args) -> int:
    model = load_model_dir(args.model)
    config = model.config
    print(f"d_model={config.d_model} n_layers={config.n_layers} n_heads={config.n_heads} d_ff={config.d_ff} "
          f"vocab_size={config.vocab_size} norm={config.norm_kind}")
    print(f"N={config.n_experts} N_A={config.n_active} shared={config.n_shared} ratio={config.routing_sparsity():.3f}")
    print(f"moe_layers={config.moe_layers()}")
    if args.shapes:
        for name, shape in expected_shapes(config).items():
            print(f"{name} {list(shape)}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("model", help="create, plant and inspect toy MoE models")
    sub = parser.add_subparsers(dest="model_command", required=True)

    p = sub.add_parser("init", help="seeded random weights from a ModelConfig JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="model directory to write")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("plant", help="weights with planted monosemantic experts")
    p.add_argument("--config", required=True)
    p.add_argument("--plants", required=True, help="PlantFile JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--dense-control", action="store_true", help="build the smeared dense reference instead")
    p.add_argument("--n-smear", type=int, default=8)
    p.set_defaults(func=cmd_plant)

    p = sub.add_parser("inspect", help="print architecture and routing sparsity")
    add_model_arg(p)
    p.add_argument("--shapes", action="store_true", help="also list every tensor shape")
    p.set_defaults(func=cmd_inspect)
