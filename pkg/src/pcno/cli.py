"""Command-line pipeline: simulate, gen-data, train, eval, export-plots.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure.  Every
output artifact embeds the fully resolved configuration in its manifest so a
run can be reproduced from the artifact alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from multiprocessing import get_context

import numpy as np

from .field_encoding import (
    Sample,
    dataset_network,
    encode_inputs,
    export_sample_csv,
    fit_norm_stats,
    read_dataset,
    write_dataset,
)
from .gas_network import (
    BoundarySchedule,
    SquareWaveSpec,
    build_paper_network,
    load_network,
    network_to_json,
    sample_schedule,
    validate_topology,
)
from .heatmap import save_heatmap
from .losses import LossWeights
from .model import PcnoConfig
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .transient_solver import GridSpec, SolverError, restrict_field, simulate


class CliError(Exception):
    """Usage or configuration problem (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _load_network_arg(path: str | None):
    if path is None:
        return build_paper_network()
    network, schedule = load_network(path)
    problems = validate_topology(network)
    if problems:
        raise CliError(f"invalid network {path}: " + "; ".join(problems))
    return network, schedule


def _write_json(path, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


# --- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    network, schedule = _load_network_arg(args.network)
    if schedule is None:
        raise CliError(f"{args.network} carries no schedule block")
    grid = GridSpec(dt=args.dt, dx=args.dx, sigma=args.sigma)
    try:
        field = simulate(network, schedule, grid)
    except SolverError as exc:
        print(f"solver failure at time index {exc.time_index}: {exc}",
              file=sys.stderr)
        return 2
    encoding = encode_inputs(network, schedule, grid)
    sample = Sample(encoding=encoding, target=field, dt=grid.dt, dx=grid.dx,
                    seed=args.seed)
    resolved = {"command": "simulate", "network": args.network,
                "dt": args.dt, "dx": args.dx, "sigma": args.sigma,
                "seed": args.seed}
    write_dataset(args.out, {"resolved_config": resolved}, [sample],
                  network=network)
    if args.csv_dir:
        os.makedirs(args.csv_dir, exist_ok=True)
        export_sample_csv(sample, args.csv_dir, prefix="sim")
    print(f"wrote {args.out}")
    return 0


# --- gen-data ---------------------------------------------------------------

def _one_scenario(job) -> tuple[int, Sample | None]:
    (index, seed, net_doc, sources_doc, wave, ramp, dt, dx, sigma, pde_only) = job
    from .gas_network import network_from_json, series_from_json

    network, _ = network_from_json(net_doc)
    sources = {int(k): series_from_json(v) for k, v in sources_doc.items()}
    spec = SquareWaveSpec(**wave)
    schedule = sample_schedule(network, sources, seed, spec, ramp)
    grid = GridSpec(dt=dt, dx=dx, sigma=sigma)
    target = None
    if not pde_only:
        try:
            target = simulate(network, schedule, grid)
        except SolverError:
            # One retry on a halved time step, restricted back to the
            # requested grid; a second failure skips the scenario.
            try:
                fine = simulate(network, schedule,
                                GridSpec(dt=dt / 2, dx=dx, sigma=sigma))
                target = restrict_field(fine, 2, 1)
            except SolverError:
                return index, None
    encoding = encode_inputs(network, schedule, grid)
    return index, Sample(encoding=encoding, target=target, dt=dt, dx=dx, seed=seed)


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CliError("--n must be >= 1")
    network, template = _load_network_arg(args.network)
    if template is None or not template.source_pressure:
        raise CliError("network file must define source pressure series")
    wave = {"level_min": args.level_min, "level_max": args.level_max,
            "switch_count_min": args.switches_min,
            "switch_count_max": args.switches_max, "horizon": args.horizon}
    net_doc = network_to_json(network, template)
    sources_doc = net_doc["schedule"]["source_pressure"]

    jobs = [(i, args.seed + i, net_doc, sources_doc, wave, args.ramp,
             args.dt, args.dx, args.sigma, args.pde_only)
            for i in range(args.n)]
    if args.workers > 1:
        with get_context("spawn").Pool(args.workers) as pool:
            results = pool.map(_one_scenario, jobs)
    else:
        results = [_one_scenario(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    samples = [s for _, s in results if s is not None]
    skipped = [jobs[i][1] for i, s in results if s is None]
    if len(skipped) > 0.05 * args.n:
        print(f"{len(skipped)}/{args.n} scenarios failed to converge",
              file=sys.stderr)
        return 2

    resolved = {"command": "gen-data", "n": args.n, "seed": args.seed,
                "dt": args.dt, "dx": args.dx, "sigma": args.sigma,
                "ramp": args.ramp, "square_wave": wave,
                "pde_only": args.pde_only, "network": args.network,
                "skipped_seeds": skipped}
    write_dataset(args.out, {"resolved_config": resolved}, samples,
                  network=network)
    print(f"wrote {args.out}: {len(samples)} samples"
          + (f" ({len(skipped)} skipped)" if skipped else ""))
    return 0


# --- train --------------------------------------------------------------------

def _resolve_train_config(args) -> TrainConfig:
    file_cfg: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
    model_cfg = file_cfg.get("model", {})
    weights_cfg = file_cfg.get("weights", {})

    def pick(flag_value, key, default, table):
        if flag_value is not None:
            return flag_value
        return table.get(key, default)

    model = PcnoConfig(
        n_regions=model_cfg.get("n_regions", 3),
        d_in=model_cfg.get("d_in", 7),
        d_out=model_cfg.get("d_out", 2),
        layers=pick(args.layers, "layers", 4, model_cfg),
        width=pick(args.width, "width", 64, model_cfg),
        z_t=pick(args.z_t, "z_t", 25, model_cfg),
        z_x=pick(args.z_x, "z_x", 25, model_cfg),
        r_t=model_cfg.get("r_t", 0.0),
        r_x=model_cfg.get("r_x", 0.001),
        variant=pick(args.variant, "variant", "pcno", model_cfg),
        z_e=model_cfg.get("z_e", 3),
        proj_width=model_cfg.get("proj_width", 128),
    )
    top = {k: v for k, v in file_cfg.items() if k not in ("model", "weights")}
    return TrainConfig(
        model=model,
        weights=LossWeights(**weights_cfg),
        epochs=pick(args.epochs, "epochs", 300, top),
        batch_data=pick(args.batch_data, "batch_data", 8, top),
        batch_pde=pick(args.batch_pde, "batch_pde", 2, top),
        lr=pick(args.lr, "lr", 1e-3, top),
        lr_decay=top.get("lr_decay", 0.5),
        lr_decay_every=top.get("lr_decay_every", 100),
        seed=pick(args.seed, "seed", 0, top),
        val_frac=top.get("val_frac", 0.1),
        checkpoint_every=top.get("checkpoint_every", 50),
        pde_on_data=top.get("pde_on_data"),
    )


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    manifest, data_samples = read_dataset(args.data)
    network = dataset_network(manifest)
    pde_samples: list[Sample] = []
    if args.pde:
        _, pde_samples = read_dataset(args.pde)
        pde_samples = [s for s in pde_samples]
    # The channel count and region count always come from the dataset itself.
    d_in = data_samples[0].encoding.layout.d_a
    if config.model.d_in != d_in or config.model.n_regions != len(network.pipes):
        model = dataclasses.replace(config.model, d_in=d_in,
                                    n_regions=len(network.pipes))
        config = dataclasses.replace(config, model=model)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "resolved_config.json"), {
        "command": "train", "data": args.data, "pde": args.pde,
        "train_config": config.to_dict(),
    })
    try:
        result = train(config, data_samples, pde_samples, network,
                       out_dir=args.out,
                       log=(lambda s: print(s, flush=True)) if args.verbose else None)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}\nsnapshot: {json.dumps(exc.snapshot)}",
              file=sys.stderr)
        return 2
    print(f"trained {config.epochs} epochs; checkpoints in {args.out}"
          + (f" (best val {result.best_val:.4f})" if result.best_val is not None
             else ""))
    return 0


# --- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    params, norm, ckpt_manifest = load_checkpoint(args.checkpoint)
    test_sets = {}
    for spec in args.test:
        if "=" not in spec:
            raise CliError(f"--test expects TAG=FILE, got {spec!r}")
        tag, path = spec.split("=", 1)
        _, samples = read_dataset(path)
        if not all(s.target is not None for s in samples):
            raise CliError(f"{path}: evaluation needs target fields")
        test_sets[tag] = samples
    report = evaluate(params, norm, test_sets, batch=args.batch)

    header = f"{'resolution':>14} | {'flow err':>19} | {'pressure err':>19}"
    print(header)
    print("-" * len(header))
    for tag in test_sets:
        row = report.resolutions[tag]
        print(f"{tag:>14} | {row['flow_mean']:.4f} +- {row['flow_std']:.4f}   "
              f"| {row['pressure_mean']:.4f} +- {row['pressure_std']:.4f}")
    if args.out:
        _write_json(args.out, {
            "resolved_config": {"command": "eval", "checkpoint": args.checkpoint,
                                "tests": args.test},
            "model_config": ckpt_manifest.get("model_config"),
            "resolutions": report.resolutions,
        })
    return 0


# --- export-plots ----------------------------------------------------------------

def cmd_export_plots(args) -> int:
    from .autodiff import no_grad
    from .model import forward

    params, norm, _ = load_checkpoint(args.checkpoint)
    manifest, samples = read_dataset(args.data)
    if not (0 <= args.index < len(samples)):
        raise CliError(f"--index {args.index} out of range (n={len(samples)})")
    sample = samples[args.index]
    if sample.target is None:
        raise CliError("selected sample has no target field")
    encs = [r[None] for r in norm.normalize_encoding(sample.encoding).regions]
    with no_grad():
        pred = forward(params, encs, norm=norm)

    os.makedirs(args.out, exist_ok=True)
    written = []
    for e in range(len(pred)):
        fields = {
            "M_pred": pred[e][0].data[0],
            "M_true": sample.target.M[e],
            "P_pred": pred[e][1].data[0],
            "P_true": sample.target.P[e],
        }
        fields["M_error"] = fields["M_pred"] - fields["M_true"]
        fields["P_error"] = fields["P_pred"] - fields["P_true"]
        for name, arr in fields.items():
            base = os.path.join(args.out, f"pipe{e + 1}_{name}")
            np.savetxt(base + ".csv", arr, delimiter=",")
            save_heatmap(base + ".png", arr, grayscale=args.grayscale,
                         upscale=args.upscale)
            written.append(base)
    _write_json(os.path.join(args.out, "plots_manifest.json"), {
        "resolved_config": {"command": "export-plots",
                            "checkpoint": args.checkpoint, "data": args.data,
                            "index": args.index},
        "files": sorted(os.path.basename(b) for b in written),
    })
    print(f"wrote {len(written)} field matrices (csv+png) to {args.out}")
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="pcno", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the transient solver on a network")
    sim.add_argument("--network", help="network+schedule JSON (default: built-in 3-pipe case)")
    sim.add_argument("--dt", type=float, default=640.0)
    sim.add_argument("--dx", type=float, default=400.0)
    sim.add_argument("--sigma", type=float, default=0.55)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--csv-dir")
    sim.set_defaults(fn=cmd_simulate)

    gen = sub.add_parser("gen-data", help="generate random scenarios and simulate them")
    gen.add_argument("--network")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--dt", type=float, default=640.0)
    gen.add_argument("--dx", type=float, default=400.0)
    gen.add_argument("--sigma", type=float, default=0.55)
    gen.add_argument("--ramp", type=float, default=640.0)
    gen.add_argument("--horizon", type=float, default=86400.0)
    gen.add_argument("--level-min", type=float, default=0.5)
    gen.add_argument("--level-max", type=float, default=2.0)
    gen.add_argument("--switches-min", type=int, default=0)
    gen.add_argument("--switches-max", type=int, default=24)
    gen.add_argument("--pde-only", action="store_true",
                     help="store encodings only (no simulation targets)")
    gen.add_argument("--workers", type=int, default=1)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=cmd_gen_data)

    tr = sub.add_parser("train", help="train the operator on generated datasets")
    tr.add_argument("--data", required=True)
    tr.add_argument("--pde")
    tr.add_argument("--config", help="JSON config file; flags override it")
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--width", type=int)
    tr.add_argument("--layers", type=int)
    tr.add_argument("--z-t", dest="z_t", type=int)
    tr.add_argument("--z-x", dest="z_x", type=int)
    tr.add_argument("--variant")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-data", type=int)
    tr.add_argument("--batch-pde", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--verbose", action="store_true")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on test datasets")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--test", action="append", required=True,
                    metavar="TAG=FILE")
    ev.add_argument("--batch", type=int, default=2)
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_eval)

    ex = sub.add_parser("export-plots", help="export predicted/true/error fields")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--index", type=int, default=0)
    ex.add_argument("--grayscale", action="store_true")
    ex.add_argument("--upscale", type=int, default=1)
    ex.add_argument("--out", required=True)
    ex.set_defaults(fn=cmd_export_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError, json.JSONDecodeError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
