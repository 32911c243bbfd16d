"""Command-line entry point: run experiments and write delimited outputs."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .dro_opf import NETWORK_MODES, DispatchModel, OpfInfeasible
from .estimator import write_snapshot
from .feeder import FeederError, load_feeder
from .learning_loop import (DEFAULT_FEEDER, ORACLE_CASES, ExperimentConfig, ExperimentResult,
                            StepFailure, init_state, run_experiment, write_solutions,
                            write_summary, write_trace)

log = logging.getLogger("drlearn")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4
REGRET_COLUMNS = ("t", "zeta_obs", "zeta_exp", "env_lo", "env_hi")
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    pass


def _eta(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 0.5:
        raise argparse.ArgumentTypeError(f"eta must lie in (0, 0.5], got {v}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="drlearn",
        description="Learn DR price sensitivities inside a chance-constrained feeder OPF.")
    ap.add_argument("--feeder", default=str(DEFAULT_FEEDER),
                    help="feeder directory with nodes.csv, lines.csv, meta.csv")
    ap.add_argument("--participants", default=None,
                    help="participants.csv (default: the one inside the feeder directory)")
    ap.add_argument("--case", default="all", choices=ORACLE_CASES + ("all",))
    ap.add_argument("--network-mode", default="all", choices=NETWORK_MODES + ("all",))
    ap.add_argument("--steps", type=_positive_int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eta-v", type=_eta, default=0.1)
    ap.add_argument("--eta-g", type=_eta, default=0.1)
    ap.add_argument("--eta-f", type=_eta, default=0.1)
    ap.add_argument("--kappa", type=float, default=25.0)
    ap.add_argument("--price-range", type=float, nargs=2, default=(30.0, 200.0),
                    metavar=("LOW", "HIGH"))
    ap.add_argument("--price-file", default=None,
                    help="one wholesale price per line; replaces uniform sampling")
    ap.add_argument("--noise-family", default="gaussian",
                    choices=("gaussian", "uniform", "two_point"))
    ap.add_argument("--polygon-sides", type=int, default=12)
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--dump-program", default=None, metavar="PATH",
                    help="write the first step's conic program in plain text")
    ap.add_argument("--manifest", default=None, metavar="PATH",
                    help="re-run from a manifest, checking input and output hashes")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


@dataclass
class RunRequest:
    config: ExperimentConfig
    cases: tuple[str, ...]
    modes: tuple[str, ...]
    out_dir: Path
    dump_program: Path | None = None
    manifest: Path | None = None


def _read_prices(path: str) -> tuple[float, ...]:
    with open(path) as fh:
        vals = [float(line.split(",")[-1]) for line in fh
                if line.strip() and not line.lstrip().startswith(("#", "omega"))]
    if not all(math.isfinite(v) and v >= 0 for v in vals):
        raise ConfigError(f"{path}: prices must be finite and nonnegative")
    return tuple(vals)


def parse_cli(argv=None) -> RunRequest:
    """Map command-line flags to a run request. Raises SystemExit(2) on bad flags."""
    args = build_parser().parse_args(argv)
    feeder = Path(args.feeder)
    if not feeder.is_dir():
        raise ConfigError(f"feeder directory {feeder} does not exist")
    part = Path(args.participants) if args.participants else feeder / "participants.csv"
    if not part.is_file():
        raise ConfigError(f"participants file {part} does not exist")
    series = _read_prices(args.price_file) if args.price_file else None
    try:
        cfg = ExperimentConfig(
            steps=args.steps, oracle_case="oblivious" if args.case == "all" else args.case,
            network_mode="full" if args.network_mode == "all" else args.network_mode,
            price_range=tuple(args.price_range), price_series=series, kappa=args.kappa,
            seed=args.seed, feeder=str(feeder), participants=args.participants,
            eta_g=args.eta_g, eta_v=args.eta_v, eta_f=args.eta_f,
            polygon_sides=args.polygon_sides, noise_family=args.noise_family)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cases = ORACLE_CASES if args.case == "all" else ("oracle", args.case)
    cases = tuple(dict.fromkeys(cases))
    modes = NETWORK_MODES if args.network_mode == "all" else (args.network_mode,)
    return RunRequest(cfg, cases, modes, Path(args.out_dir),
                      Path(args.dump_program) if args.dump_program else None,
                      Path(args.manifest) if args.manifest else None)


# ---------------------------------------------------------------- plot data
def _csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(v) -> str:
    return repr(float(v))


def emit_plot_data(result: ExperimentResult, out_dir) -> list[Path]:
    """Write per-figure CSVs next to the traces. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    m = result.feeder.m
    node_cols = [f"node_{i}" for i in range(1, m)]
    modes = sorted({mode for _, mode in result.traces}, key=NETWORK_MODES.index)
    for mode in modes:
        oracle = result.traces.get(("oracle", mode), [])
        others = [c for c in ORACLE_CASES if c != "oracle" and (c, mode) in result.traces]
        # objective gaps and the learning-error decomposition
        header = ["t", "omega"]
        for c in others:
            header += [f"{c}_exp", f"{c}_obs", f"{c}_learning"]
        rows = []
        for k, o in enumerate(oracle):
            row = [o.t, _f(o.omega)]
            d_eps = o.obsC - o.expC
            for c in others:
                r = result.traces[(c, mode)][k]
                row += [_f(r.expC - o.expC), _f(r.obsC - o.obsC),
                        _f((r.obsC - r.expC) - d_eps)]
            rows.append(row)
        p = out / f"objective_gap_{mode}.csv"
        _csv(p, header, rows)
        written.append(p)
        for c in others:
            trace = result.traces[(c, mode)]
            p = out / f"regret_{c}_{mode}.csv"
            _csv(p, REGRET_COLUMNS, [
                [r.t, _f(r.zeta_obs_cum), _f(r.zeta_exp_cum),
                 _f(20.0 * math.log(r.t)), _f(200.0 * math.log(r.t))] for r in trace])
            written.append(p)
            p = out / f"price_difference_{c}_{mode}.csv"
            _csv(p, ["t", *node_cols], [
                [r.t, *(_f(v) for v in (r.lam - o.lam)[1:])] for r, o in zip(trace, oracle)])
            written.append(p)
        for c in ["oracle", *others]:
            trace = result.traces.get((c, mode), [])
            p = out / f"estimator_moments_{c}_{mode}.csv"
            _csv(p, ["t", "node", "mu_hat", "var_hat", "beta0_hat", "beta1_hat"], [
                [r.t, i, _f(r.mu_hat[i]), _f(r.sigma_diag[i]), _f(r.beta0_hat[i]),
                 _f(r.beta1_hat[i])] for r in trace for i in range(1, m)])
            written.append(p)
    return written


def emit_traces(result: ExperimentResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (case, mode), trace in result.traces.items():
        p = out / f"trace_{case}_{mode}.csv"
        write_trace(trace, p)
        s = out / f"solution_{case}_{mode}.csv"
        write_solutions(trace, s)
        e = out / f"estimator_{case}_{mode}.csv"
        write_snapshot([(r.t, i, r.beta0_hat[i], r.beta1_hat[i], r.residual_mean[i],
                         r.sigma_diag[i]) for r in trace for i in range(r.lam.size)], e)
        written += [p, s, e]
    return written


# ---------------------------------------------------------------- manifest
def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def input_files(cfg: ExperimentConfig) -> list[Path]:
    feeder = Path(cfg.feeder)
    files = [feeder / n for n in ("meta.csv", "nodes.csv", "lines.csv")]
    part = cfg.participants_path()
    files.append(part)
    cov = part.parent / "covariance.csv"
    if cov.exists():
        files.append(cov)
    return files


@dataclass
class RunManifest:
    config: dict
    cases: list[str]
    modes: list[str]
    seed: int
    version: str
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)

    @classmethod
    def create(cls, req: RunRequest) -> "RunManifest":
        cfg = asdict(req.config)
        cfg["price_range"] = list(cfg["price_range"])
        if cfg["price_series"] is not None:
            cfg["price_series"] = list(cfg["price_series"])
        return cls(cfg, list(req.cases), list(req.modes), req.config.seed, _version(),
                   {str(p): sha256(p) for p in input_files(req.config)})

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        doc = json.loads(Path(path).read_text())
        man = cls(**doc)
        bad = [p for p, h in man.inputs.items() if not Path(p).exists() or sha256(p) != h]
        if bad:
            raise ConfigError(f"input files changed since the manifest was written: {bad}")
        return man

    def request(self, out_dir: Path) -> RunRequest:
        cfg = dict(self.config)
        cfg["price_range"] = tuple(cfg["price_range"])
        if cfg.get("price_series") is not None:
            cfg["price_series"] = tuple(cfg["price_series"])
        return RunRequest(ExperimentConfig(**cfg), tuple(self.cases), tuple(self.modes), out_dir)


# ---------------------------------------------------------------- main
def execute(req: RunRequest, progress=None) -> tuple[ExperimentResult, RunManifest]:
    manifest = RunManifest.create(req)
    req.out_dir.mkdir(parents=True, exist_ok=True)
    if req.dump_program is not None:
        state = init_state(req.config, mode=req.modes[0])
        state.model.set_parameters(state.prior, state.prior_moments,
                                   _first_market(req.config))
        state.model.dump(req.dump_program)
    t0 = time.perf_counter()
    result = run_experiment(req.config, cases=req.cases, modes=req.modes, progress=progress)
    wall = time.perf_counter() - t0
    files = emit_traces(result, req.out_dir) + emit_plot_data(result, req.out_dir)
    summary = req.out_dir / "summary.json"
    write_summary(result, summary)
    steps = np.array([r.solve_time for tr in result.traces.values() for r in tr])
    manifest.timing = {"wall_seconds": wall, "step_mean": float(steps.mean()),
                       "step_std": float(steps.std()), "steps": int(steps.size)}
    manifest.outputs = {p.name: sha256(p) for p in files}
    manifest.write(req.out_dir / MANIFEST_NAME)
    return result, manifest


def _first_market(cfg: ExperimentConfig):
    from .dro_opf import MarketScenario
    from .learning_loop import Scenario
    from .participants import load_participants
    feeder = load_feeder(cfg.feeder)
    _, cov = load_participants(cfg.participants_path(), feeder.m)
    return MarketScenario(float(Scenario.draw(cfg, cov).omega[0]), cfg.kappa)


def _print_summary(result: ExperimentResult, out=sys.stdout) -> None:
    print("case/mode                 dr_max  dr_median  dr_min  der_median  step_s", file=out)
    for key, s in result.summary.items():
        print(f"{key:24s} {s['dr_max']:7.2f} {s['dr_median']:9.2f} {s['dr_min']:7.2f} "
              f"{s['der_median']:10.2f} {s['solve_time_mean']:7.4f}", file=out)


def main(argv=None) -> int:
    try:
        req = parse_cli(argv)
    except ConfigError as exc:
        print(f"drlearn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.ERROR if argv_quiet(argv) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        expected = None
        if req.manifest is not None:
            old = RunManifest.load(req.manifest)
            expected = old.outputs
            req = replace(old.request(req.out_dir), dump_program=req.dump_program)
        progress = None if argv_quiet(argv) else (
            lambda c, m, w: print(f"  {c:13s} {m:8s} {w:7.1f} s", file=sys.stderr))
        result, manifest = execute(req, progress)
    except (ConfigError, FeederError) as exc:
        print(f"drlearn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StepFailure as exc:
        print(f"drlearn: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OpfInfeasible as exc:
        print(f"drlearn: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"drlearn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"drlearn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if expected is not None:
        diff = sorted(k for k, h in manifest.outputs.items() if expected.get(k) != h)
        if diff:
            print(f"drlearn: outputs differ from manifest: {diff}", file=sys.stderr)
            return EXIT_CONFIG
        print("outputs match manifest", file=sys.stderr)
    if not argv_quiet(argv):
        _print_summary(result)
    return EXIT_OK


def argv_quiet(argv) -> bool:
    argv = sys.argv[1:] if argv is None else argv
    return "-q" in argv or "--quiet" in argv


if __name__ == "__main__":
    sys.exit(main())
