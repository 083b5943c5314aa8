"""Batch command-line pipeline: data, pretraining, supernet, search, merge.

Exit codes: 0 success, 2 usage or validation error, 3 numerical divergence,
4 I/O or file-format error. ``GLORA_SEED`` is used when ``--seed`` is absent.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import persist
from . import tensor as T
from .errors import ConfigurationError, ContractError, DivergenceError, FormatError
from .layer import GLoRALinear, LayerSearchSpace, reparameterize, trainable_param_count
from .search import EvoSettings, brute_force, decode, evolve, search_space_size
from .supernet import LAYER_TYPES, ToyModel, TrainSchedule, build_model, check_config, evaluate, pretrain, train_supernet
from .synth import ShiftSpec, Teacher, gen_pretrain_task, gen_shifted_task

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GLORA_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"GLORA_SEED must be an integer, got {env!r}") from None


def _need(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).exists():
        raise UsageError(f"{flag}: {path} does not exist")
    return path


def _write_report(args, report: dict) -> None:
    if getattr(args, "report", None):
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "report")}


def _teacher_model(teacher: Teacher) -> ToyModel:
    layers = teacher.as_layers(1)
    return ToyModel("mlp", tuple(teacher.dims), layers, ["plain"] * len(layers))


def _teacher_from_model(model: ToyModel) -> Teacher:
    return Teacher([np.array(l.W0.data) for l in model.layers], [np.array(l.b0.data) for l in model.layers])


def _sidecar(out: str, suffix: str) -> Path:
    return Path(f"{out}.{suffix}")


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    seed = _seed(args)
    classes = args.classes if args.kind == "classification" else None
    report = {"command": "gen-data", "config": _echo(args), "seeds": {"data": seed}}
    if args.task == "pretrain":
        dims = args.dims
        if len(dims) not in (2, 3):
            raise UsageError("--dims is d1,d_out or d1,hidden,d_out")
        hidden = dims[1] if len(dims) == 3 else None
        data, teacher = gen_pretrain_task(dims[0], dims[-1], args.n, seed, hidden=hidden, task=args.kind, n_classes=classes)
        persist.save_dataset(data, args.out)
        persist.save_checkpoint(_teacher_model(teacher), _sidecar(args.out, "teacher.glra"))
        report["outputs"] = [args.out, str(_sidecar(args.out, "teacher.glra"))]
    else:
        if args.shift is None:
            raise UsageError("--task shift needs --shift")
        teacher_model, _, _ = persist.load_checkpoint(_need(args.teacher, "--teacher"))
        teacher = _teacher_from_model(teacher_model)
        spec = ShiftSpec(args.shift, args.magnitude, args.rank, args.shift_seed if args.shift_seed is not None else seed)
        task = gen_shifted_task(teacher, spec, args.n, seed, task=args.kind, n_classes=classes)
        persist.save_dataset(task.data, args.out)
        oracle_model = ToyModel("mlp", tuple(teacher.dims), task.layers, ["plain"] * len(task.layers))
        persist.save_checkpoint(oracle_model, _sidecar(args.out, "oracle.glra"))
        persist.save_config(task.configs, _sidecar(args.out, "oracle.json"), {"seed": seed, "shift": spec.kind, "source": "generator"})
        report["outputs"] = [args.out, str(_sidecar(args.out, "oracle.json")), str(_sidecar(args.out, "oracle.glra"))]
    report["summary"] = f"wrote {', '.join(report['outputs'])}"
    return report


def _schedule(args, seed) -> TrainSchedule:
    return TrainSchedule(args.epochs, args.batch, args.lr, args.wd, seed)


def cmd_pretrain(args) -> dict:
    seed = _seed(args)
    data = persist.load_dataset(_need(args.data, "--data"))
    if args.model == "mlp":
        dims = [data.n_features, *(args.hidden or []), data.n_outputs]
        model = build_model("mlp", dims, seed, r_max=args.r_max, dtype=T.DTYPES[args.precision])
    else:
        if data.n_features % args.width:
            raise UsageError(f"{data.n_features} features are not a whole number of width-{args.width} tokens")
        model = build_model(
            "mini-attention",
            [args.width, data.n_outputs],
            seed,
            r_max=args.r_max,
            tokens=data.n_features // args.width,
            dtype=T.DTYPES[args.precision],
        )
    with T.precision(args.precision):
        result = pretrain(model, data, _schedule(args, seed))
    persist.save_checkpoint(result.model, args.out)
    metrics = {s: evaluate(result.model, data, s) for s in ("train", "val", "test")}
    return {
        "command": "pretrain",
        "config": _echo(args),
        "seeds": {"train": seed},
        "metrics": metrics,
        "loss_history": result.history,
        "summary": f"pretrained {model.kind} for {args.epochs} epochs; val loss {metrics['val']['loss']:.6g}",
    }


def cmd_train_supernet(args) -> dict:
    seed = _seed(args)
    ranks = tuple(args.ranks)
    r_max = args.r_max if args.r_max is not None else max(ranks)
    if max(ranks) > r_max:
        raise UsageError(f"rank {max(ranks)} exceeds --r-max {r_max}")
    base, _, _ = persist.load_checkpoint(_need(args.base, "--base"))
    data = persist.load_dataset(_need(args.data, "--data"))
    rng = np.random.default_rng(seed)
    layers = []
    for layer in base.layers:
        if not isinstance(layer, GLoRALinear):
            raise FormatError("--base must be an unmerged model checkpoint")
        layers.append(GLoRALinear.init(layer.W0, layer.b0, r_max, rng))
    model = base.replace_layers(layers)
    spaces = [LayerSearchSpace.full(ranks) for _ in layers]
    schedule = _schedule(args, seed)
    result = train_supernet(model, spaces, data, schedule)
    persist.save_checkpoint(result.model, args.out, spaces, {"schedule": dataclasses.asdict(schedule)})
    size = search_space_size(spaces)
    return {
        "command": "train-supernet",
        "config": _echo(args),
        "schedule": {"epochs": schedule.epochs, "batch": schedule.batch_size, "lr": schedule.lr, "weight_decay": schedule.weight_decay},
        "seeds": {"train": seed},
        "loss_history": result.history,
        "search_space": {"per_layer": size.per_layer, "summed_total": size.summed_total, "exact_total": str(size.exact_total)},
        "summary": f"trained supernet for {schedule.epochs} epochs ({result.steps} steps); final epoch loss {result.history[-1] if result.history else float('nan'):.6g}",
    }


def cmd_search(args) -> dict:
    seed = _seed(args)
    supernet, spaces, _ = persist.load_checkpoint(_need(args.supernet, "--supernet"))
    val = persist.load_dataset(_need(args.val, "--val"))
    if spaces is None:
        raise FormatError(f"{args.supernet} carries no search spaces; is it a supernet checkpoint?")
    if args.exhaustive:
        best = brute_force(supernet, spaces, val)
        history = []
    else:
        settings = EvoSettings(args.population, args.generations, args.topk, args.pc, args.pm, seed, args.threads)
        result = evolve(supernet, spaces, val, settings)
        best, history = result.best, result.history
    config = decode(best.genome, spaces)
    provenance = {
        "seed": seed,
        "method": "exhaustive" if args.exhaustive else "evolution",
        "generation": len(history) - 1 if history else 0,
        "fitness": best.fitness,
        "params": best.params,
        "genome": list(best.genome),
        "history": history,
        "settings": {"population": args.population, "generations": args.generations, "topk": args.topk, "pc": args.pc, "pm": args.pm},
    }
    persist.save_config(config, args.out, provenance)
    return {
        "command": "search",
        "config": _echo(args),
        "seeds": {"search": seed},
        "metrics": {"val": {"fitness": best.fitness}},
        "history": history,
        "layers": [cfg.to_dict() for cfg in config],
        "summary": f"best fitness {best.fitness:.6g} with {best.params} trainable parameters",
    }


def _load_config_for(model, path):
    config, provenance = persist.load_config(_need(path, "--config"))
    if len(config) != len(model.layers):
        raise FormatError(f"config has {len(config)} layers, checkpoint has {len(model.layers)}")
    return config, provenance


def cmd_merge(args) -> dict:
    supernet, _, _ = persist.load_checkpoint(_need(args.supernet, "--supernet"))
    config, _ = _load_config_for(supernet, args.config)
    merged = supernet.replace_layers([reparameterize(layer, cfg) for layer, cfg in zip(supernet.layers, config)])
    persist.save_checkpoint(merged, args.out)
    return {
        "command": "merge",
        "config": _echo(args),
        "params": {"base": supernet.base_param_count(), "merged": merged.base_param_count()},
        "summary": f"merged {len(config)} layers into {args.out}",
    }


def cmd_eval(args) -> dict:
    model, _, _ = persist.load_checkpoint(_need(args.ckpt, "--ckpt"))
    data = persist.load_dataset(_need(args.data, "--data"))
    if data.n_features != model.input_dim:
        raise FormatError(f"dataset has {data.n_features} features, model expects {model.input_dim}")
    if data.n_outputs != model.output_dim:
        raise FormatError(f"dataset has {data.n_outputs} outputs, model produces {model.output_dim}")
    config = None
    if args.config:
        config, _ = _load_config_for(model, args.config)
        if model.is_merged:
            raise FormatError("--config applies to adapter checkpoints, not merged ones")
    metrics = {s: evaluate(model, data, s, config) for s in data.splits if len(data.splits[s])}
    line = ", ".join(f"{s} loss {m['loss']:.6g}" for s, m in metrics.items())
    return {"command": "eval", "config": _echo(args), "metrics": metrics, "summary": line}


def layer_report(model: ToyModel, config) -> dict:
    """Trainable parameters per layer type and the per-layer kind table."""
    by_type = {t: 0 for t in LAYER_TYPES}
    table = []
    for i, (layer, label, cfg) in enumerate(zip(model.layers, model.labels, config)):
        count = trainable_param_count(layer, cfg)
        by_type[label] += count
        table.append({"layer": i, "type": label, "params": count, "kinds": cfg.to_dict()})
    return {"params_by_type": by_type, "total_params": sum(by_type.values()), "layers": table}


def cmd_report(args) -> dict:
    supernet, spaces, _ = persist.load_checkpoint(_need(args.supernet, "--supernet"))
    config, provenance = _load_config_for(supernet, args.config)
    if spaces is not None:
        problems = check_config(spaces, config)
        if problems:
            raise ConfigurationError("; ".join(problems))
    body = layer_report(supernet, config)
    return {
        "command": "report",
        "config": _echo(args),
        "provenance": provenance,
        **body,
        "summary": f"{body['total_params']} trainable parameters: "
        + ", ".join(f"{t}={n}" for t, n in body["params_by_type"].items() if n),
    }


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="random seed (falls back to $GLORA_SEED, then 0)")
        p.add_argument("--report", help="write the JSON run report here")

    p = sub.add_parser("gen-data", help="generate a synthetic task")
    common(p)
    p.add_argument("--task", choices=("pretrain", "shift"), required=True)
    p.add_argument("--kind", choices=("regression", "classification"), default="regression")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dims", type=_ints, default=[8, 4], help="d1,d_out or d1,hidden,d_out")
    p.add_argument("--shift", choices=("scale-shift", "low-rank", "prompt", "mixed"))
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--shift-seed", type=int, default=None)
    p.add_argument("--teacher", help="teacher checkpoint written by --task pretrain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    def training(p, epochs, lr):
        p.add_argument("--data", required=True)
        p.add_argument("--epochs", type=int, default=epochs)
        p.add_argument("--batch", type=int, default=64)
        p.add_argument("--lr", type=float, default=lr)
        p.add_argument("--wd", type=float, default=0.01)
        p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="train a plain base model")
    common(p)
    training(p, 100, 5e-3)
    p.add_argument("--model", choices=("mlp", "mini-attention"), default="mlp")
    p.add_argument("--hidden", type=_ints, default=None, help="mlp hidden widths")
    p.add_argument("--width", type=int, default=8, help="token width for mini-attention")
    p.add_argument("--r-max", type=int, default=4)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-supernet", help="train the adapter supernet on a frozen base")
    common(p)
    training(p, 500, 5e-4)
    p.add_argument("--base", required=True)
    p.add_argument("--ranks", type=_ints, default=[4, 2])
    p.add_argument("--r-max", type=int, default=None)
    p.set_defaults(func=cmd_train_supernet)

    p = sub.add_parser("search", help="evolutionary search for the best subnet")
    common(p)
    p.add_argument("--supernet")
    p.add_argument("--val", required=True, help="dataset whose val split scores subnets")
    p.add_argument("--population", type=int, default=50)
    p.add_argument("--generations", type=int, default=20)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--pc", type=float, default=0.2)
    p.add_argument("--pm", type=float, default=0.2)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--exhaustive", action="store_true", help="enumerate every subnet instead of evolving")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("merge", help="fold a searched config into plain weights")
    common(p)
    p.add_argument("--supernet", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="loss/accuracy of a checkpoint on every split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="per-layer-type parameter distribution of a config")
    common(p)
    p.add_argument("--supernet", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    start = time.perf_counter()
    try:
        report = args.func(args)
    except (UsageError, ConfigurationError, ContractError) as exc:
        print(f"glora {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"glora {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        print(f"glora {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    report["timing"] = {"seconds": round(time.perf_counter() - start, 3)}
    _write_report(args, report)
    print(report.pop("summary", "done"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
