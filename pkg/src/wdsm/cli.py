"""Command-line driver: ``wdsm <subcommand>``.

Every CSV starts with a ``# config_sha256=<hex> seed=<n>`` line followed
by a column header.  Randomness is derived from the global ``--seed``
with :func:`derive_seed`, keyed by run name and replicate index, so an
entry of a ``figures`` manifest produces the same bytes whether it runs
alone, in a sweep, or in a worker process.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import density, estimators, sampling, score_net, training, weighting
from .errors import NumericalError
from .schedule import NoiseSchedule, discrete_levels

log = logging.getLogger("wdsm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4
DEFAULT_MANIFEST = Path(__file__).parent / "data" / "figures.ini"
# keys that name outputs; excluded from the config hash
_OUTPUT_KEYS = ("out", "out_dir", "out_dir_sub", "save_model", "gt_out")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def derive_seed(seed: int, name: str, index: int = 0) -> int:
    """Integer seed for replicate ``index`` of run ``name``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


def config_hash(args: argparse.Namespace) -> str:
    keep = {k: v for k, v in sorted(vars(args).items()) if k not in _OUTPUT_KEYS and k not in ("func", "jobs", "verbose")}
    blob = json.dumps(keep, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path: Path, columns: dict, args: argparse.Namespace, note: str | None = None) -> None:
    """Write ``columns`` (name -> equal-length sequence) as CSV with the provenance line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    cols = [np.asarray(columns[n]) if not isinstance(columns[n], list) else columns[n] for n in names]
    lengths = {len(c) for c in cols}
    if len(lengths) > 1:
        raise ValueError(f"ragged table for {path}")
    with open(path, "w", newline="") as fh:
        head = f"# config_sha256={config_hash(args)} seed={args.seed}"
        fh.write(head + (f" {note}" if note else "") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def _out_path(args, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(args.out_dir) / p


def _schedule(args) -> NoiseSchedule:
    try:
        return NoiseSchedule(args.sigma_min, args.sigma_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _mixture(path) -> density.GaussianMixture1D:
    try:
        return density.load_mixture(path)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _layout(count: int):
    try:
        return score_net.layout_for(count)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_weights(args) -> None:
    gmm = _mixture(args.density)
    levels = discrete_levels(_schedule(args), args.levels)
    x = np.linspace(args.x_min, args.x_max, args.x_points)
    for i, table in enumerate(weighting.weight_curves(gmm, levels, x)):
        write_table(_out_path(args, Path(args.out_dir_sub) / f"level{i}.csv"), table, args)


def _train_config(args, gmm, seed):
    try:
        return training.TrainConfig(
            gmm, schedule=_schedule(args), weighting=args.weighting, layout=_layout(args.params),
            batch_size=args.batch_size, iterations=args.iters, lr=args.lr, eval_every=args.eval_every,
            seed=seed, n_eval=args.n_eval, sampler_steps=args.steps,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> None:
    gmm = _mixture(args.density)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    logs, params = [], None
    for k in range(args.seeds):
        cfg = _train_config(args, gmm, derive_seed(args.seed, args.name, k))
        p, lg = training.train(cfg)
        logs.append(lg)
        if params is None:
            params = p
    table = training.runlog_table(logs)
    note = "energy_distance=v_statistic"
    write_table(_out_path(args, args.out), table, args, note)
    if args.gt_out:
        gt = {k: v for k, v in table.items() if k == "iterations" or k.startswith("gen_sample_ed")}
        write_table(_out_path(args, args.gt_out), gt, args, note)
    if args.save_model:
        path = _out_path(args, args.save_model)
        path.parent.mkdir(parents=True, exist_ok=True)
        score_net.save(params, path)


def cmd_sample(args) -> None:
    gmm = _mixture(args.density)
    if args.score == "analytic":
        fn = training.analytic_score_fn(gmm)
    elif args.score.startswith("model:"):
        try:
            fn = training.model_score_fn(score_net.load(args.score[len("model:"):]))
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError(f"--score must be 'analytic' or 'model:<path>', got {args.score!r}")
    try:
        cfg = sampling.SamplerConfig(steps=args.steps, n_samples=args.n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    x = sampling.reverse_sde_sample(fn, _schedule(args), cfg, derive_seed(args.seed, args.name))
    write_table(_out_path(args, args.out), {"sample": x}, args)


def cmd_estimators(args) -> None:
    gmm = _mixture(args.density)
    kinds = estimators.KINDS if args.kind == "all" else (args.kind,)
    grid = np.linspace(args.x_min, args.x_max, args.x_points)
    try:
        rows = estimators.estimator_bias_variance(kinds, gmm, args.sigma, grid, args.delta, args.n, args.reps,
                                                  derive_seed(args.seed, args.name))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cols = {f: [getattr(r, f) for r in rows] for f in estimators.EstimatorRow._fields}
    write_table(_out_path(args, args.out), cols, args)


def cmd_gradvar(args) -> None:
    gmm = _mixture(args.density)
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    cfg = _train_config(args, gmm, 0)
    seeds = [derive_seed(args.seed, args.name, k) for k in range(args.seeds)]
    try:
        rep = training.gradient_variance(cfg, discrete_levels(cfg.schedule, args.levels), batches=args.batches,
                                         seeds=seeds, at_init=args.at_init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_table(_out_path(args, args.out), rep.table(), args)


def cmd_decompose(args) -> None:
    gmm = _mixture(args.density)
    sigmas = _floats(args.sigmas)
    if not sigmas or min(sigmas) <= 0:
        raise ConfigError("--sigmas needs positive values")
    rows = []
    for i, sig in enumerate(sigmas):
        exact = training.analytic_score_fn(gmm)
        res = training.pythagorean_gap(gmm, sig, lambda x, s=sig: exact(x, s), args.n, derive_seed(args.seed, args.name, i))
        rows.append((sig, *res, abs(res.gap - res.analytic_constant) / res.analytic_constant))
    names = ("sigma", *training.GapResult._fields, "relative_error")
    write_table(_out_path(args, args.out), {n: [r[j] for r in rows] for j, n in enumerate(names)}, args)


# ---------------------------------------------------------------------------
# manifest sweeps


def read_manifest(path, parser: argparse.ArgumentParser, base: argparse.Namespace) -> list[tuple[str, list[str]]]:
    """Parse an INI manifest into ``(name, argv)`` pairs and validate them.

    Each section is one run: ``command`` picks the subcommand, every other
    key becomes ``--key value`` (``key = true`` for bare switches).
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    entries, outputs = [], {}
    for name in cp.sections():
        sec = dict(cp[name])
        cmd = sec.pop("command", None)
        if cmd not in SUBCOMMANDS or cmd == "figures":
            raise ConfigError(f"{path}: [{name}] needs command = one of {sorted(set(SUBCOMMANDS) - {'figures'})}")
        argv = [cmd]
        for key, value in sec.items():
            if value.lower() == "true":
                argv.append(f"--{key}")
            elif value.lower() != "false":
                argv += [f"--{key}", value]
        ns = _resolve(parser, base, argv, name)
        if getattr(ns, "density", None) is not None:
            _mixture(ns.density)
        for key in ("out", "out_dir_sub", "save_model", "gt_out"):
            val = getattr(ns, key, None)
            if val:
                p = _out_path(ns, val)
                if p in outputs:
                    raise ConfigError(f"{path}: output {p} claimed by both [{outputs[p]}] and [{name}]")
                outputs[p] = name
        entries.append((name, argv))
    return entries


def _resolve(parser, base: argparse.Namespace, argv: list[str], name: str) -> argparse.Namespace:
    ns = parser.parse_args(argv)
    for key in ("seed", "out_dir", "sigma_min", "sigma_max", "jobs", "verbose"):
        setattr(ns, key, getattr(base, key))
    ns.name = name
    return ns


def _run_entry(name: str, argv: list[str], base: dict) -> tuple[str, int, str]:
    parser = build_parser()
    try:
        ns = _resolve(parser, argparse.Namespace(**base), argv, name)
        log.info("running [%s]: %s", name, " ".join(argv))
        ns.func(ns)
    except ConfigError as exc:
        return name, EXIT_CONFIG, str(exc)
    except NumericalError as exc:
        return name, EXIT_NUMERICAL, str(exc)
    return name, EXIT_OK, ""


def cmd_figures(args) -> int:
    parser = build_parser()
    entries = read_manifest(args.manifest, parser, args)
    base = {k: getattr(args, k) for k in ("seed", "out_dir", "sigma_min", "sigma_max", "jobs", "verbose")}
    if args.jobs > 1 and len(entries) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_entry, *zip(*[(n, a, base) for n, a in entries])))
    else:
        results = [_run_entry(n, a, base) for n, a in entries]
    failed = [(n, code, msg) for n, code, msg in results if code]
    for n, code, msg in failed:
        print(f"wdsm figures: [{n}] failed (exit {code}): {msg}", file=sys.stderr)
    if failed:
        return EXIT_PARTIAL
    return EXIT_OK


SUBCOMMANDS = {
    "weights": cmd_weights,
    "train": cmd_train,
    "sample": cmd_sample,
    "estimators": cmd_estimators,
    "gradvar": cmd_gradvar,
    "decompose": cmd_decompose,
    "figures": cmd_figures,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wdsm", description="Weighted denoising score matching on 1-D Gaussian mixtures.")
    p.add_argument("--seed", type=int, default=0, help="root seed; runs derive theirs from (seed, name, index)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent manifest entries")
    p.add_argument("--out-dir", default=".", help="base directory for relative output paths")
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--sigma-max", type=float, default=50.0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=SUBCOMMANDS[name], name=name)
        return sp

    sp = add("weights", "heuristic and pointwise-optimal weights per noise level")
    sp.add_argument("--density", default="fig1_gmm.cfg")
    sp.add_argument("--levels", type=int, default=10)
    sp.add_argument("--x-min", type=float, default=-2.0)
    sp.add_argument("--x-max", type=float, default=6.0)
    sp.add_argument("--x-points", type=int, default=400)
    sp.add_argument("--out-dir", dest="out_dir_sub", default="weights", help="directory for level<i>.csv")

    sp = add("train", "train a score network and log energy distances")
    sp.add_argument("--density", default="fig1_gmm.cfg")
    sp.add_argument("--weighting", default="heuristic", choices=["heuristic", "optimal", "optimal-pointwise",
                                                                  "optimal-expected", "none", "taylor"])
    sp.add_argument("--params", type=int, default=25, choices=sorted(score_net.PAPER_LAYOUTS))
    sp.add_argument("--iters", type=int, default=80_000)
    sp.add_argument("--eval-every", type=int, default=2_000)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--seeds", type=int, default=1, help="replicates aggregated into mean / std-error columns")
    sp.add_argument("--n-eval", type=int, default=5_000)
    sp.add_argument("--steps", type=int, default=1_000, help="reverse-SDE steps per evaluation")
    sp.add_argument("--out", default="train.csv")
    sp.add_argument("--gt-out", default=None, help="also write the analytic-score baseline columns here")
    sp.add_argument("--save-model", default=None)

    sp = add("sample", "draw samples with the reverse SDE")
    sp.add_argument("--score", default="analytic", help="'analytic' or 'model:<path>'")
    sp.add_argument("--density", default="fig1_gmm.cfg")
    sp.add_argument("--n", type=int, default=5_000)
    sp.add_argument("--steps", type=int, default=1_000)
    sp.add_argument("--out", default="samples.csv")

    sp = add("estimators", "bias and variance of the second-order estimators")
    sp.add_argument("--density", default="fig1_gmm.cfg")
    sp.add_argument("--kind", default="all", choices=["t1", "t2", "t3", "all"])
    sp.add_argument("--delta", type=float, default=0.2)
    sp.add_argument("--sigma", type=float, default=0.5)
    sp.add_argument("--x-min", type=float, default=-1.0)
    sp.add_argument("--x-max", type=float, default=5.0)
    sp.add_argument("--x-points", type=int, default=9)
    sp.add_argument("--n", type=int, default=10_000, help="posterior draws per estimate")
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--out", default="estimators.csv")

    sp = add("gradvar", "gradient covariance trace per noise level")
    sp.add_argument("--density", default="gradvar_gmm.cfg")
    sp.add_argument("--params", type=int, default=25, choices=sorted(score_net.PAPER_LAYOUTS))
    sp.add_argument("--batches", type=int, default=10)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--levels", type=int, default=10)
    sp.add_argument("--iters", type=int, default=20_000)
    sp.add_argument("--eval-every", type=int, default=5_000)
    sp.add_argument("--at-init", action="store_true")
    sp.add_argument("--out", default="gradvar.csv")
    # fixed training knobs shared with `train`
    sp.set_defaults(weighting="heuristic", batch_size=128, lr=1e-3, n_eval=5_000, steps=1_000)

    sp = add("decompose", "Monte-Carlo DSM minus SM loss against the analytic constant")
    sp.add_argument("--density", default="fig1_gmm.cfg")
    sp.add_argument("--sigmas", default="0.1 0.5 1 5")
    sp.add_argument("--n", type=int, default=1_000_000)
    sp.add_argument("--out", default="decompose.csv")

    sp = add("figures", "run every entry of a manifest")
    sp.add_argument("--manifest", default=str(DEFAULT_MANIFEST))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"wdsm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"wdsm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
