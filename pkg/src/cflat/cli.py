"""Command-line driver: seeded experiment runs, paired comparisons, landscape
analysis, and synthetic dataset export.

Commands:
  run       execute a task stream per seed from a JSON config
  compare   paired w/ vs w/o report over two run directories
  analyze   landscape report (JSON + surface CSV) from a checkpoint
  gen-data  write a synthetic dataset as an IDX pair

Exit codes: 0 ok, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .autodiff import gradient, hvp
from .continual import (
    PhaseResult,
    Trainer,
    TrainerConfig,
    build_stream,
    compare_histories,
    fisher_trace_for_model,
    one_hot,
    returns_from_deltas,
)
from .data import (
    Dataset,
    SyntheticSpec,
    gen_gaussian_classes,
    normalize_unit_range,
    read_idx_pair,
    write_idx_pair,
)
from .errors import ConfigError, ContractViolation
from .landscape import ProbeConfig, landscape_report, write_surface_csv
from .model import load_checkpoint
from .optim import CFlatConfig

CONFIG_FORMAT_VERSION = 1

_TOP_KEYS = {
    "format_version", "dataset", "protocol", "family", "optimizer", "cflat",
    "epochs", "batch_size", "hidden_dims", "activation", "memory_budget",
    "selection", "kd", "kd_temperature", "gpm", "eta_bounds", "rho_bounds",
    "seeds", "output_dir", "landscape", "landscape_subsample",
    "landscape_trace_probes", "landscape_power_iters", "record_timing",
}
_REQUIRED_KEYS = {"dataset", "protocol", "family", "optimizer", "seeds", "output_dir"}
_CFLAT_KEYS = {"rho", "lam", "eta", "eps_guard", "apply_ratio", "scheduler",
               "abs_perturbation"}
_GPM_KEYS = {"energy_threshold", "eta1", "joint_perturbation", "rep_samples",
             "significance_init"}
_DATASET_KEYS = {"synthetic", "idx"}
_SYNTH_KEYS = {"class_count", "per_class", "dim", "cluster_spread",
               "inter_class_distance", "seed"}
_IDX_KEYS = {"images", "labels"}


def _reject_unknown(obj: dict, allowed: set, context: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown config key {context}.{unknown[0]!r}", field=f"{context}.{unknown[0]}"
        )


def load_config(path) -> dict:
    """Parse and strictly validate a run config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", field="config")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}", field="config")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", field="config")
    _reject_unknown(raw, _TOP_KEYS, "config")
    missing = sorted(_REQUIRED_KEYS - set(raw))
    if missing:
        raise ConfigError(f"missing required config key {missing[0]!r}", field=missing[0])
    if raw.get("format_version", CONFIG_FORMAT_VERSION) != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported config format_version {raw['format_version']!r}",
            field="format_version",
        )
    dataset = raw["dataset"]
    if not isinstance(dataset, dict):
        raise ConfigError("dataset must be an object", field="dataset")
    _reject_unknown(dataset, _DATASET_KEYS, "dataset")
    if len(dataset) != 1:
        raise ConfigError("dataset needs exactly one of 'synthetic' or 'idx'", field="dataset")
    if "synthetic" in dataset:
        _reject_unknown(dataset["synthetic"], _SYNTH_KEYS, "dataset.synthetic")
    else:
        _reject_unknown(dataset["idx"], _IDX_KEYS, "dataset.idx")
        for key in sorted(_IDX_KEYS):
            if key not in dataset["idx"]:
                raise ConfigError(f"dataset.idx.{key} is required", field=f"dataset.idx.{key}")
            if not Path(dataset["idx"][key]).exists():
                raise ConfigError(
                    f"dataset.idx.{key} path does not exist: {dataset['idx'][key]}",
                    field=f"dataset.idx.{key}",
                )
    _reject_unknown(raw.get("cflat", {}), _CFLAT_KEYS, "cflat")
    _reject_unknown(raw.get("gpm", {}), _GPM_KEYS, "gpm")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a non-empty list of integers", field="seeds")
    return raw


def _build_dataset(config: dict) -> Dataset:
    spec = config["dataset"]
    if "synthetic" in spec:
        return gen_gaussian_classes(SyntheticSpec(**spec["synthetic"]))
    return read_idx_pair(spec["idx"]["images"], spec["idx"]["labels"])


def trainer_config_from(config: dict) -> TrainerConfig:
    try:
        cflat = CFlatConfig(**config.get("cflat", {}))
        gpm = config.get("gpm", {})
        return TrainerConfig(
            family=config["family"],
            optimizer=config["optimizer"],
            cflat=cflat,
            epochs=config.get("epochs", 4),
            batch_size=config.get("batch_size", 32),
            hidden_dims=tuple(config.get("hidden_dims", [16])),
            activation=config.get("activation", "tanh"),
            memory_budget=config.get("memory_budget", 20),
            selection=config.get("selection", "herding"),
            kd=config.get("kd", True),
            kd_temperature=config.get("kd_temperature", 2.0),
            gpm_energy_threshold=gpm.get("energy_threshold", 0.95),
            gpm_eta1=gpm.get("eta1", 0.05),
            gpm_joint_perturbation=gpm.get("joint_perturbation", False),
            gpm_rep_samples=gpm.get("rep_samples", 128),
            gpm_significance_init=gpm.get("significance_init", "one"),
            eta_bounds=tuple(config["eta_bounds"]) if config.get("eta_bounds") else None,
            rho_bounds=tuple(config["rho_bounds"]) if config.get("rho_bounds") else None,
            landscape=config.get("landscape", False),
            landscape_subsample=config.get("landscape_subsample", 256),
            landscape_trace_probes=config.get("landscape_trace_probes", 32),
            landscape_power_iters=config.get("landscape_power_iters", 400),
            record_timing=config.get("record_timing", False),
        )
    except (ContractViolation, TypeError) as err:
        raise ConfigError(str(err), field="config")


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seeds:
        config["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.seed is not None:
        config["seeds"] = [args.seed]
    if args.out:
        config["output_dir"] = args.out
    if args.landscape:
        config["landscape"] = True
    if args.ratio is not None:
        config.setdefault("cflat", {})["apply_ratio"] = args.ratio
    if args.scheduler:
        name = {"linear": "linear_coupled"}.get(args.scheduler, args.scheduler)
        config.setdefault("cflat", {})["scheduler"] = name
    if args.abs_perturbation:
        config.setdefault("cflat", {})["abs_perturbation"] = True

    trainer_config = trainer_config_from(config)
    dataset = _build_dataset(config)
    out_root = Path(config["output_dir"])
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)
    for seed in config["seeds"]:
        stream = build_stream(dataset, config["protocol"], seed=seed)
        trainer = Trainer(stream, trainer_config, seed=seed, out_dir=out_root / f"seed_{seed}")
        results = trainer.run()
        final = results[-1]
        print(
            f"seed {seed}: {len(results)} phases, final overall "
            f"{final.acc_overall:.2f}%, average {np.mean([r.acc_overall for r in results]):.2f}%"
        )
    return 0


def read_phases_csv(path) -> list[PhaseResult]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    out = []
    for line in lines[1:]:
        cells = line.split(",")

        def opt(x):
            return None if x == "" else float(x)

        out.append(
            PhaseResult(
                phase=int(cells[0]),
                acc_overall=float(cells[1]),
                acc_old=opt(cells[2]),
                acc_new=float(cells[3]),
                loss_old=opt(cells[4]),
                forgetting=opt(cells[5]),
                lambda_max=opt(cells[6]),
                hessian_trace=opt(cells[7]),
                wall_ms=opt(cells[8]),
            )
        )
    return out


def _seed_dirs(root: Path) -> dict[int, Path]:
    out = {}
    for child in sorted(root.iterdir()):
        if child.is_dir() and child.name.startswith("seed_"):
            out[int(child.name[5:])] = child
    return out


def cmd_compare(args) -> int:
    base_root = Path(args.base)
    treat_root = Path(args.treat)
    base_seeds = _seed_dirs(base_root)
    treat_seeds = _seed_dirs(treat_root)
    if set(base_seeds) != set(treat_seeds):
        raise ContractViolation(
            f"seed mismatch: base has {sorted(base_seeds)}, treatment has {sorted(treat_seeds)}"
        )
    if not base_seeds:
        raise ContractViolation("no seed_<n> run directories found")
    per_seed = {}
    deltas = []
    bt = []
    ft = []
    for seed in sorted(base_seeds):
        base_hist = read_phases_csv(base_seeds[seed] / "phases.csv")
        treat_hist = read_phases_csv(treat_seeds[seed] / "phases.csv")
        comp = compare_histories(base_hist, treat_hist)
        per_seed[seed] = comp
        deltas.append(comp["delta_avg_acc"])
        if "bt_relative_return" in comp:
            bt.append(comp["bt_relative_return"])
        if "ft_relative_return" in comp:
            ft.append(comp["ft_relative_return"])
    avg_return, max_return = returns_from_deltas(deltas)
    report = {
        "format_version": 1,
        "per_seed": {str(k): v for k, v in per_seed.items()},
        "average_return": avg_return,
        "maximum_return": max_return,
        "bt_relative_return": float(np.mean(bt)) if bt else None,
        "ft_relative_return": float(np.mean(ft)) if ft else None,
    }
    print(f"{'seed':>6} {'base avg':>9} {'treat avg':>10} {'delta':>7}")
    for seed in sorted(per_seed):
        comp = per_seed[seed]
        print(
            f"{seed:>6} {comp['base_avg_acc']:>9.2f} {comp['treat_avg_acc']:>10.2f} "
            f"{comp['delta_avg_acc']:>+7.2f}"
        )
    print(f"average return {avg_return:+.2f}  maximum return {max_return:+.2f}")
    if report["bt_relative_return"] is not None:
        print(
            f"BT {report['bt_relative_return']:+.2f}%  FT {report['ft_relative_return']:+.2f}%"
        )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    return 0


def cmd_analyze(args) -> int:
    config = load_config(args.config)
    model, meta = load_checkpoint(args.checkpoint)
    dataset = _build_dataset(config)
    stream = build_stream(dataset, meta.get("protocol", config["protocol"]),
                          seed=meta.get("seed", config["seeds"][0]))
    col_of = stream.column_of()
    phases = meta.get("classes_seen")
    n_phases = len(phases) if phases else len(stream.tasks)
    xs = np.vstack([stream.tasks[t].train_x for t in range(n_phases)])
    ys = np.concatenate([stream.tasks[t].train_y for t in range(n_phases)])
    limit = min(args.subsample, len(ys))
    xs, ys = xs[:limit], ys[:limit]
    cols = np.array([col_of[int(c)] for c in ys], dtype=np.int64)
    graph = model.loss_graph(xs, one_hot(cols, model.n_classes))
    theta = model.params

    probe = ProbeConfig(rho=args.rho, n_directions=args.directions,
                        n_ascent_steps=args.ascent_steps, seed=args.seed)
    fisher = fisher_trace_for_model(model, xs, cols, limit=min(limit, 64))
    report = landscape_report(
        lambda p: graph.value(p),
        lambda p: gradient(graph, p),
        lambda v: hvp(graph, theta, v).data,
        theta.data,
        probe,
        n_trace_probes=args.trace_probes,
        surface_extent=args.extent,
        surface_resolution=args.resolution,
        fisher=fisher,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "landscape.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)
    if report.surface is not None:
        write_surface_csv(report.surface, out_dir / "surface.csv")
    print(
        f"lambda_max {report.lambda_max:.6g}  trace {report.hessian_trace:.6g}  "
        f"fisher {report.fisher_trace:.6g}  r0 {report.r0_hat:.6g}  r1 {report.r1_hat:.6g}"
    )
    return 0


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        class_count=args.classes,
        per_class=args.per_class,
        dim=args.dim,
        cluster_spread=args.spread,
        inter_class_distance=args.distance,
        seed=args.seed,
    )
    dataset = normalize_unit_range(gen_gaussian_classes(spec))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_idx_pair(dataset, out_dir / "images.idx", out_dir / "labels.idx")
    print(f"wrote {len(dataset)} samples to {out_dir}/images.idx and labels.idx")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cflat", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a task stream per seed")
    run.add_argument("--config", required=True)
    run.add_argument("--seeds", help="comma-separated seed override")
    run.add_argument("--seed", type=int, help="single-seed override")
    run.add_argument("--out", help="output directory override")
    run.add_argument("--landscape", action="store_true")
    run.add_argument("--ratio", type=float, help="partial-iteration apply ratio")
    run.add_argument("--scheduler", choices=["theory", "linear", "constant"])
    run.add_argument("--abs-perturbation", action="store_true", dest="abs_perturbation")
    run.set_defaults(func=cmd_run)

    comp = sub.add_parser("compare", help="paired comparison of two run dirs")
    comp.add_argument("base")
    comp.add_argument("treat")
    comp.add_argument("--out", help="write the JSON report here")
    comp.set_defaults(func=cmd_compare)

    ana = sub.add_parser("analyze", help="landscape report from a checkpoint")
    ana.add_argument("--checkpoint", required=True)
    ana.add_argument("--config", required=True)
    ana.add_argument("--out", default="analysis")
    ana.add_argument("--rho", type=float, default=0.05)
    ana.add_argument("--directions", type=int, default=32)
    ana.add_argument("--ascent-steps", type=int, default=10, dest="ascent_steps")
    ana.add_argument("--trace-probes", type=int, default=64, dest="trace_probes")
    ana.add_argument("--extent", type=float, default=0.5)
    ana.add_argument("--resolution", type=int, default=21)
    ana.add_argument("--subsample", type=int, default=256)
    ana.add_argument("--seed", type=int, default=0)
    ana.set_defaults(func=cmd_analyze)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset as IDX")
    gen.add_argument("--out", required=True)
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--per-class", type=int, default=250, dest="per_class")
    gen.add_argument("--dim", type=int, default=32)
    gen.add_argument("--spread", type=float, default=3.4)
    gen.add_argument("--distance", type=float, default=10.0)
    gen.add_argument("--seed", type=int, default=1993)
    gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
