"""Experiment runner.

Subcommands: simulate | reconstruct | train | adapt | verify | metrics.
Configs are flat ``key = value`` lines with dotted section prefixes; every
key has a default, unknown keys are rejected, and each run writes the fully
resolved config beside its outputs so it can be replayed verbatim.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (non-finite
values produced), 4 I/O failure.
"""

import argparse
import csv
import io
import os
import sys
import tempfile

import numpy as np

from . import arrayio
from .operators import CallTrace, Geometry, build_projector, count_operator_calls
from .simulate import (MeasurementSimConfig, disc_phantom, fbp, metrics_row,
                       shepp_logan, simulate_measurements)
from .theory import (diag_line_problem, gaussian_sparse_problem,
                     lower_bound_check, sgd_network_config,
                     sgd_network_params, stacked_orthogonal_problem,
                     upper_bound_check)
from .training import (AdaptConfig, adapt_instance, make_dataset, train)
from .unrolling import (ConfigError, Problem, UnrollConfig,
                        init_unroll_params, params_to_arrays,
                        arrays_to_params, unroll_forward)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class NumericError(RuntimeError):
    """A produced array contains non-finite values."""


def _parse_bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ConfigError("expected a boolean, got %r" % text)


def _parse_float_list(text):
    return tuple(float(part) for part in text.split(",") if part.strip())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA = {
    "geometry.n_angles": (int, 64),
    "geometry.n_detectors": (int, 95),
    "geometry.detector_spacing": (float, 2.0 / 64),
    "grid.size": (int, 64),
    "grid.pixel_size": (float, 2.0 / 64),
    "phantom.kind": (str, "shepp-logan"),
    "sim.i0": (float, 7e4),
    "sim.noise": (str, "poisson"),
    "sim.seed": (int, 0),
    "unroll.variant": (str, "lpd"),
    "unroll.layers": (int, 6),
    "unroll.subsets": (int, 1),
    "unroll.order": (str, "cyclic"),
    "unroll.subset_seed": (int, 0),
    "unroll.sketch_factor": (int, 1),
    "unroll.k_switch": (int, -1),            # -1 = variant default
    "unroll.per_subset_dual": (_parse_bool, False),
    "init.seed": (int, 0),
    "init.conv_layers": (int, 2),
    "init.hidden_channels": (int, 8),
    "init.kernel_size": (int, 3),
    "train.epochs": (int, 10),
    "train.lr": (float, 1e-3),
    "train.seed": (int, 0),
    "train.items": (int, 8),
    "adapt.lambda": (float, 1.0),
    "adapt.steps": (int, 30),
    "adapt.lr": (float, 1e-4),
    "adapt.i0": (float, 1e4),
    "adapt.seed": (int, 1234),
    "theory.instance": (str, "stacked-orthogonal"),
    "theory.d": (int, 8),
    "theory.n": (int, 32),
    "theory.s": (int, 1),
    "theory.m": (int, 2),
    "theory.noise_std": (float, 0.0),
    "theory.runs": (int, 200),
    "theory.layers": (int, 6),
    "theory.gamma": (_parse_float_list, (0.1, 0.5, 1.0)),
    "theory.seed": (int, 0),
    "output.dir": (str, ""),
}


def parse_config(path):
    """Read a flat key=value config; unknown keys are an error."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError("cannot read config %s: %s" % (path, exc))
        for lineno, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key = value" % (path, lineno))
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in SCHEMA:
                raise ConfigError("%s:%d: unknown key %r" % (path, lineno, key))
            parser = SCHEMA[key][0]
            try:
                resolved[key] = parser(value)
            except (ValueError, ConfigError) as exc:
                raise ConfigError("%s:%d: bad value for %s: %s"
                                  % (path, lineno, key, exc))
    return resolved


def write_resolved_config(cfg, out_dir):
    lines = "".join("%s = %s\n" % (key, _fmt(cfg[key])) for key in sorted(cfg))
    _atomic_text(os.path.join(out_dir, "resolved.cfg"), lines)


def _atomic_text(path, text):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-cli-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                         else v for v in row])
    _atomic_text(path, buf.getvalue())


def _check_finite(name, arr):
    if not np.isfinite(arr).all():
        raise NumericError("non-finite values in %s" % name)


# ---------------------------------------------------------------------------
# shared builders


def _build_projector(cfg):
    geo = Geometry(cfg["geometry.n_angles"], cfg["geometry.n_detectors"],
                   cfg["geometry.detector_spacing"])
    size = cfg["grid.size"]
    return build_projector(geo, (size, size), cfg["grid.pixel_size"])


def _phantom(cfg):
    kind = cfg["phantom.kind"]
    if kind == "shepp-logan":
        return shepp_logan(cfg["grid.size"])
    if kind == "disc":
        return disc_phantom(cfg["grid.size"])
    raise ConfigError("unknown phantom.kind %r" % kind)


def _unroll_config(cfg):
    k_switch = cfg["unroll.k_switch"]
    return UnrollConfig(
        n_layers=cfg["unroll.layers"],
        variant=cfg["unroll.variant"],
        m=cfg["unroll.subsets"],
        subset_order=cfg["unroll.order"],
        subset_seed=cfg["unroll.subset_seed"],
        sketch_factor=cfg["unroll.sketch_factor"],
        k_switch=None if k_switch < 0 else k_switch,
        per_subset_dual=cfg["unroll.per_subset_dual"])


def _init_params(cfg, uconfig, problem):
    return init_unroll_params(
        uconfig, problem, seed=cfg["init.seed"],
        conv_layers=cfg["init.conv_layers"],
        hidden_channels=cfg["init.hidden_channels"],
        kernel_size=cfg["init.kernel_size"])


# ---------------------------------------------------------------------------
# checkpoints


def _param_names(params):
    names = ["taus", "sigmas", "beta"]
    if params.dual_weights is not None:
        names.append("dual_weights")

    def net_names(nets, prefix):
        if nets is None:
            return
        single = not isinstance(nets, list)
        for ni, net in enumerate([nets] if single else nets):
            tag = prefix if single else "%s%d" % (prefix, ni)
            for li in range(len(net.layers)):
                names.append("%s.layer%d.kernels" % (tag, li))
                names.append("%s.layer%d.biases" % (tag, li))

    net_names(params.primal_nets, "primal")
    net_names(params.dual_nets, "dual")
    return names


def save_checkpoint(directory, params, uconfig):
    os.makedirs(directory, exist_ok=True)
    arrays = params_to_arrays(params)
    names = _param_names(params)
    lines = ["unrollct-checkpoint v1",
             "variant=%s" % uconfig.variant,
             "layers=%d" % uconfig.n_layers,
             "arrays=%d" % len(arrays)]
    for idx, (name, arr) in enumerate(zip(names, arrays)):
        shape = ",".join(str(s) for s in arr.shape)
        lines.append("%d %s %s" % (idx, name, shape or "scalar"))
        arrayio.write_array(os.path.join(directory, "p%03d.arr" % idx), arr)
    _atomic_text(os.path.join(directory, "manifest.txt"), "\n".join(lines) + "\n")


def load_checkpoint(directory, template):
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != "unrollct-checkpoint v1":
        raise ConfigError("not a checkpoint: %s" % directory)
    arrays = []
    idx = 0
    while True:
        path = os.path.join(directory, "p%03d.arr" % idx)
        if not os.path.exists(path):
            break
        arrays.append(arrayio.read_array(path))
        idx += 1
    return arrays_to_params(template, arrays)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out_dir):
    projector = _build_projector(cfg)
    x_true = _phantom(cfg)
    sim_cfg = MeasurementSimConfig(i0=cfg["sim.i0"], noise=cfg["sim.noise"],
                                   seed=cfg["sim.seed"])
    counts, sino = simulate_measurements(x_true, projector, sim_cfg)
    recon0 = fbp(sino, projector)
    for name, arr in [("phantom", x_true), ("counts", counts),
                      ("sinogram", sino), ("fbp", recon0)]:
        _check_finite(name, arr)
        arrayio.write_array(os.path.join(out_dir, name + ".arr"), arr,
                            meta={"kind": name, "seed": cfg["sim.seed"],
                                  "noise": cfg["sim.noise"], "i0": cfg["sim.i0"]})
    write_resolved_config(cfg, out_dir)
    return EXIT_OK


def cmd_reconstruct(cfg, out_dir, checkpoint=None):
    projector = _build_projector(cfg)
    x_true = _phantom(cfg)
    sim_cfg = MeasurementSimConfig(i0=cfg["sim.i0"], noise=cfg["sim.noise"],
                                   seed=cfg["sim.seed"])
    _, sino = simulate_measurements(x_true, projector, sim_cfg)
    problem = Problem(projector, sino, x_true)
    uconfig = _unroll_config(cfg)
    params = _init_params(cfg, uconfig, problem)
    if checkpoint:
        params = load_checkpoint(checkpoint, params)
    trace = CallTrace()
    x0 = fbp(sino, projector, trace=trace)
    traj = unroll_forward(problem, uconfig, params, x0, trace=trace)
    _check_finite("reconstruction", traj.x_final)
    arrayio.write_array(os.path.join(out_dir, "recon.arr"), traj.x_final,
                        meta={"kind": "reconstruction",
                              "variant": uconfig.variant})
    layers_dir = os.path.join(out_dir, "layers")
    os.makedirs(layers_dir, exist_ok=True)
    for k, x in enumerate(traj.xs):
        arrayio.write_array(os.path.join(layers_dir, "x_%03d.arr" % k), x)
    errors = traj.error_norms(x_true)
    _write_csv(os.path.join(out_dir, "layer_errors.csv"),
               ["k", "error_norm"], list(enumerate(errors)))
    unroll_calls = count_operator_calls(trace, tags={"unroll"})
    total_calls = count_operator_calls(trace)
    _atomic_text(os.path.join(out_dir, "calls.txt"),
                 "unroll_calls = %s\ntotal_calls = %s\n"
                 % (repr(unroll_calls), repr(total_calls)))
    write_resolved_config(cfg, out_dir)
    return EXIT_OK


def cmd_train(cfg, out_dir):
    projector = _build_projector(cfg)
    base = _phantom(cfg)
    phantoms = [base] * cfg["train.items"]

    def sim_factory(idx):
        return MeasurementSimConfig(i0=cfg["sim.i0"], noise=cfg["sim.noise"],
                                    seed=cfg["sim.seed"] + idx)

    dataset = make_dataset(projector, phantoms, sim_factory)
    uconfig = _unroll_config(cfg)
    problem0 = Problem(projector, dataset.items[0].b)
    params = _init_params(cfg, uconfig, problem0)
    params, curve = train(dataset, uconfig, params, epochs=cfg["train.epochs"],
                          lr=cfg["train.lr"], seed=cfg["train.seed"])
    for _, _, loss in curve:
        if not np.isfinite(loss):
            raise NumericError("non-finite training loss")
    save_checkpoint(os.path.join(out_dir, "checkpoint"), params, uconfig)
    _write_csv(os.path.join(out_dir, "loss_curve.csv"),
               ["epoch", "item", "loss"], curve)
    rows = []
    from .simulate import metrics_row
    from .unrolling import expected_operator_calls, unroll_forward
    calls = expected_operator_calls(uconfig)
    for idx, item in enumerate(dataset.items):
        traj = unroll_forward(Problem(projector, item.b), uconfig, params,
                              item.x0)
        row = metrics_row(traj.x_final, item.x_ref)
        rows.append([idx, uconfig.variant, uconfig.n_layers, uconfig.m,
                     uconfig.sketch_factor, calls, row.psnr, row.ssim,
                     cfg["sim.seed"] + idx])
    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["item_id", "method", "K", "m", "factor", "calls", "psnr_db",
                "ssim", "seed"], rows)
    write_resolved_config(cfg, out_dir)
    return EXIT_OK


def cmd_adapt(cfg, out_dir, checkpoint=None):
    projector = _build_projector(cfg)
    x_true = _phantom(cfg)
    sim_cfg = MeasurementSimConfig(i0=cfg["adapt.i0"], noise="poisson",
                                   seed=cfg["adapt.seed"])
    _, b_in = simulate_measurements(x_true, projector, sim_cfg)
    uconfig = _unroll_config(cfg)
    problem = Problem(projector, b_in)
    params = _init_params(cfg, uconfig, problem)
    if checkpoint:
        params = load_checkpoint(checkpoint, params)
    adapt_cfg = AdaptConfig(lam=cfg["adapt.lambda"], steps=cfg["adapt.steps"],
                            lr=cfg["adapt.lr"])
    params_a, x_a, curve, trace = adapt_instance(params, b_in, uconfig,
                                                 adapt_cfg, projector)
    _check_finite("adapted reconstruction", x_a)
    save_checkpoint(os.path.join(out_dir, "checkpoint"), params_a, uconfig)
    arrayio.write_array(os.path.join(out_dir, "recon.arr"), x_a,
                        meta={"kind": "adapted reconstruction"})
    _write_csv(os.path.join(out_dir, "objective_curve.csv"),
               ["step", "objective"], list(enumerate(curve)))
    _atomic_text(os.path.join(out_dir, "calls.txt"),
                 "unroll_calls = %s\ntotal_calls = %s\n"
                 % (repr(count_operator_calls(trace, tags={"unroll"})),
                    repr(count_operator_calls(trace))))
    write_resolved_config(cfg, out_dir)
    return EXIT_OK


def cmd_verify(cfg, out_dir):
    instance = cfg["theory.instance"]
    seed = cfg["theory.seed"]
    reports = []
    if instance == "stacked-orthogonal":
        problem, prior = stacked_orthogonal_problem(
            d=cfg["theory.d"], s=cfg["theory.s"], seed=seed)
        uc = sgd_network_config(cfg["theory.layers"], 2, prior,
                                subset_order="random", seed=seed)
        params = sgd_network_params(uc, problem)
        reports.append(("report", upper_bound_check(
            problem, uc, params, prior, n_runs=cfg["theory.runs"], seed=seed)))
    elif instance == "gaussian-sparse":
        problem, prior = gaussian_sparse_problem(
            d=cfg["theory.d"], n=cfg["theory.n"], s=cfg["theory.s"],
            m=cfg["theory.m"], noise_std=cfg["theory.noise_std"], seed=seed)
        uc = sgd_network_config(cfg["theory.layers"], cfg["theory.m"], prior,
                                subset_order="random", seed=seed)
        params = sgd_network_params(uc, problem)
        reports.append(("report", upper_bound_check(
            problem, uc, params, prior, n_runs=cfg["theory.runs"], seed=seed)))
    elif instance == "diag-line":
        problem, prior, x0 = diag_line_problem()
        uc = sgd_network_config(cfg["theory.layers"], 1, prior,
                                subset_order="cyclic")
        params = sgd_network_params(uc, problem)
        for gamma in cfg["theory.gamma"]:
            rep = lower_bound_check(problem, uc, params, prior, gamma, x0=x0)
            reports.append(("report_gamma%s" % gamma, rep))
    else:
        raise ConfigError("unknown theory.instance %r" % instance)

    summary = []
    for name, rep in reports:
        rep.write_csv(os.path.join(out_dir, name + ".csv"))
        summary.append("== %s ==\n%s\n" % (name, rep.summary()))
    _atomic_text(os.path.join(out_dir, "report.txt"), "\n".join(summary))
    write_resolved_config(cfg, out_dir)
    return EXIT_OK


def cmd_metrics(recon_path, ref_path, out_dir):
    recon = arrayio.read_array(recon_path)
    ref = arrayio.read_array(ref_path)
    row = metrics_row(recon, ref)
    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["psnr_db", "ssim", "data_range"],
               [[row.psnr, row.ssim, row.data_range]])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _apply_overrides(cfg, args, command):
    # --out stays an invocation detail so the echoed config is path-free
    if args.seed is not None:
        key = {"simulate": "sim.seed", "reconstruct": "sim.seed",
               "train": "train.seed", "adapt": "adapt.seed",
               "verify": "theory.seed"}.get(command)
        if key:
            cfg[key] = args.seed


def build_parser():
    parser = argparse.ArgumentParser(
        prog="unrollct",
        description="Unrolled primal-dual tomography experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reconstruct", "train", "adapt", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        if name in ("reconstruct", "adapt"):
            p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("metrics")
    p.add_argument("--recon", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "metrics":
            out_dir = args.out or "."
            os.makedirs(out_dir, exist_ok=True)
            return cmd_metrics(args.recon, args.ref, out_dir)
        cfg = parse_config(args.config)
        _apply_overrides(cfg, args, args.command)
        out_dir = args.out or cfg["output.dir"]
        if not out_dir:
            raise ConfigError("no output directory (--out or output.dir)")
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, out_dir, checkpoint=args.checkpoint)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "adapt":
            return cmd_adapt(cfg, out_dir, checkpoint=args.checkpoint)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir)
        raise ConfigError("unknown command %r" % args.command)
    except (ConfigError, ValueError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
