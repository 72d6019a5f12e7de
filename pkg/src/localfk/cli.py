"""Command line front end: ``localfk <subcommand> --config run.toml --out DIR``.

Exit status: 0 when every verdict passes, 1 when any certificate fails
(or a report row is malformed), 2 on configuration or pipeline errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import kernel_bounds as kb
from .elliptic import ScalarField, assemble_operator
from .geometry import DomainError, build_domain
from .lorentz import oneil_check
from .spectral import argmax_abs, faber_krahn_ratio, log_spike_fixture, log_spike_l1, principal_eigenpair
from .stochastic import median_exit_times, mc_survival_curve, simulate_paths, write_survival_csv
from .verify import (
    Certificate,
    StageError,
    calibrated_pair,
    global_baselines,
    run_jobs,
    theorem1_certificate,
    theorem2_certificate,
    theorem3_check,
)

log = logging.getLogger("localfk")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    domains: list = field(default_factory=list)
    coefficients: dict = field(default_factory=lambda: {"type": "identity"})
    potential: dict = field(default_factory=lambda: {"type": "constant"})
    h: float = 1 / 32
    eta: float = 0.5
    seed: int = 0
    horizons: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    out: str = "out"


_KNOWN = {"schema_version", "domains", "coefficients", "potential", "h", "eta", "seed",
          "horizons", "options", "out"}


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read and validate a TOML config; errors name the offending field path."""
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config: {exc}") from exc
        if "schema_version" not in raw:
            raise ConfigError("schema_version: missing")
    for key in raw:
        if key not in _KNOWN:
            raise ConfigError(f"{key}: unknown field")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = ExperimentConfig(**raw)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.schema_version!r}")
    if not isinstance(cfg.h, (int, float)) or not cfg.h > 0:
        raise ConfigError(f"h: must be positive, got {cfg.h!r}")
    if not isinstance(cfg.eta, (int, float)) or not 0 < cfg.eta < 1:
        raise ConfigError(f"eta: must lie in (0, 1), got {cfg.eta!r}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"seed: must be a nonnegative integer, got {cfg.seed!r}")
    if not isinstance(cfg.domains, list):
        raise ConfigError("domains: must be a list of tables")
    keys = set()
    for i, d in enumerate(cfg.domains):
        if not isinstance(d, dict) or "type" not in d:
            raise ConfigError(f"domains[{i}].type: missing")
        key = d.get("key", f"d{i}")
        if key in keys:
            raise ConfigError(f"domains[{i}].key: duplicate key {key!r}")
        keys.add(key)


def _domains(cfg):
    if not cfg.domains:
        raise ConfigError("domains: empty domain list")
    out = {}
    for i, d in enumerate(cfg.domains):
        desc = {k: v for k, v in d.items() if k not in ("key", "h")}
        out[d.get("key", f"d{i}")] = (desc, float(d.get("h", cfg.h)))
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# --- subcommands -----------------------------------------------------------


def cmd_eigen(cfg, out, threads):
    doms = _domains(cfg)

    def job(desc, h):
        def run():
            mask = build_domain(desc, h)
            pair = principal_eigenpair(assemble_operator(mask))
            return {"lambda1": pair.eigenvalue, "measure": mask.measure,
                    "fk_ratio": faber_krahn_ratio(mask, pair.eigenvalue), "h": h, "n": mask.n}
        return run

    res = run_jobs({k: job(*v) for k, v in doms.items()}, threads)
    _write_rows(out / "eigen.csv", ["key", "n", "h", "lambda1", "measure", "fk_ratio"],
                [[k, r["n"], r["h"], r["lambda1"], r["measure"], r["fk_ratio"]] for k, r in res.items()])
    (out / "eigen.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    for k, r in res.items():
        print(f"{k}: lambda1 = {r['lambda1']:.6f}")
    return EXIT_OK


def cmd_exit_time(cfg, out, threads):
    doms = _domains(cfg)
    paths = int(cfg.options.get("mc_paths", 0))

    def job(key, desc, h):
        def run():
            mask = build_domain(desc, h)
            op = assemble_operator(mask)
            pts = desc.get("points")
            if pts is None:
                pts = [argmax_abs(principal_eigenpair(op).u)[0].tolist()]
            mets, curves = median_exit_times(op, pts, cfg.eta)
            rows = []
            for j, (m, c) in enumerate(zip(mets, curves)):
                write_survival_csv(out / f"survival_{key}_{j}.csv", c)
                row = [key, j, " ".join(repr(float(v)) for v in c.x), m.value]
                if paths:
                    samples = simulate_paths(op, None, c.x, c.times[-1], paths, seed=cfg.seed)
                    mc = mc_survival_curve(samples, c.times, c.x)
                    write_survival_csv(out / f"survival_mc_{key}_{j}.csv", mc)
                    p, se = samples.survival(m.value)
                    row += [p, se]
                rows.append(row)
            return rows
        return run

    res = run_jobs({k: job(k, *v) for k, v in doms.items()}, threads)
    header = ["key", "point", "coords", "T"] + (["mc_survival_at_T", "mc_stderr"] if paths else [])
    rows = [r for k in res for r in res[k]]
    _write_rows(out / "exit_time.csv", header, rows)
    for r in rows:
        print(f"{r[0]}[{r[1]}]: T_eta = {r[3]:.6f}")
    return EXIT_OK


def _certificates(out, certs: dict) -> int:
    for key, cert in certs.items():
        cert.write(out / f"cert_{key}.json")
    return report(out)


def cmd_fk_verify(cfg, out, threads):
    opts = cfg.options
    jobs = {
        k: (lambda d=d, h=h: theorem1_certificate(
            d, h, cfg.coefficients, cfg.potential, cfg.eta,
            chain=bool(opts.get("chain", True)), khasminskii=bool(opts.get("khasminskii", False))))
        for k, (d, h) in _domains(cfg).items()
    }
    return _certificates(out, run_jobs(jobs, threads))


def cmd_fk_verify_2d(cfg, out, threads):
    opts = cfg.options
    source = opts.get("source", "calibration")
    if source == "log-spike":
        eps_list = [math.exp(-float(L)) for L in opts.get("log_eps", [4])]
        jobs = {f"spike_{i}": (lambda e=e: theorem2_certificate(
            None, _spike_h(e), source="log-spike", eps=e, eta=cfg.eta)) for i, e in enumerate(eps_list)}
    else:
        jobs = {k: (lambda d=d, h=h: theorem2_certificate(
            d, h, cfg.coefficients, template=cfg.potential, eta=cfg.eta,
            chain=bool(opts.get("chain", True)), khasminskii=bool(opts.get("khasminskii", False))))
            for k, (d, h) in _domains(cfg).items()}
    return _certificates(out, run_jobs(jobs, threads))


def cmd_lieb_check(cfg, out, threads):
    opts = cfg.options
    calibrate = bool(opts.get("calibrate", False))
    etas = opts.get("etas", [cfg.eta])
    jobs = {}
    for k, (d, h) in _domains(cfg).items():
        for e in etas:
            jobs[f"{k}_eta{e}"] = (lambda d=d, h=h, e=e: theorem3_check(
                d, h, cfg.coefficients, cfg.potential, float(e), calibrate=calibrate,
                hypothesis_scale=float(opts.get("hypothesis_scale", 1.0))))
    return _certificates(out, run_jobs(jobs, threads))


def cmd_lemma_sweep(cfg, out, threads):
    opts = cfg.options
    rows = kb.lemma_gauss_sweep()
    kb.write_sweep_csv(rows, out / "lemma_gauss.csv")
    count = int(opts.get("fields", 20))
    rng = np.random.default_rng(cfg.seed)
    m3 = build_domain({"type": "box", "lower": [0, 0, 0], "upper": [1, 1, 1]}, float(opts.get("h3", 1 / 16)))
    m2 = build_domain({"type": "box", "lower": [0, 0], "upper": [1, 1]}, float(opts.get("h2", 1 / 64)))
    f3 = [kb.random_field(m3, rng) for _ in range(count)]
    f2 = [kb.random_field(m2, rng) for _ in range(count)]
    d3, d2 = float(opts.get("d3", 0.3)), float(opts.get("d2", 0.2))
    r6 = run_jobs({i: (lambda f=f: kb.lemma_est_ratio(f, d3).ratio) for i, f in enumerate(f3)}, threads)
    r7 = run_jobs({i: (lambda f=f: kb.lemma_final_ratio(f, d2).ratio) for i, f in enumerate(f2)}, threads)
    # 1/2 is a cell vertex, so no center sits on the singularity
    riesz = np.linalg.norm(m3.centers() - 0.5, axis=-1) ** -1.0
    g = ScalarField(m3, riesz)
    ro = {i: oneil_check(f, g, 3) for i, f in enumerate(f3)}
    _write_rows(out / "lemma_fields.csv", ["field", "est_ratio", "final_ratio", "oneil_ratio"],
                [[i, r6[i], r7[i], ro[i]] for i in range(count)])
    consts = {str(k): v for k, v in kb.sweep_constants(rows).items()}
    summary = {"gauss_max_ratio": consts, "est_max": max(r6.values()), "final_max": max(r7.values()),
               "oneil_max": max(ro.values()), "fields": count, "seed": cfg.seed}
    (out / "lemma_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _spike_h(eps):
    # at least four cells across the spike, never coarser than 1/128
    return min(1 / 128, 2.0 ** -math.ceil(math.log2(4 / eps)))


def counterexample_rows(log_eps):
    rows = []
    for L in log_eps:
        eps = math.exp(-float(L))
        _, V = log_spike_fixture(eps, _spike_h(eps))
        conv = kb.log_kernel_convolution(V, (0.0, 0.0), 1.0)
        rows.append([float(L), eps, V.integral(), log_spike_l1(eps), 2 * math.pi / (float(L) + 0.5),
                     conv, conv / 2])
    return rows


def cmd_counterexample(cfg, out, threads):
    rows = counterexample_rows(cfg.options.get("log_eps", [2, 3, 4, 5, 6]))
    _write_rows(out / "counterexample.csv",
                ["log_inv_eps", "eps", "l1_norm", "l1_closed_form", "l1_reference",
                 "log_convolution", "log_abs_convolution"], rows)
    for r in rows:
        print(f"eps=e^-{r[0]:g}: L1 = {r[2]:.4f}, log convolution = {r[5]:.4f}")
    return EXIT_OK


def cmd_baselines(cfg, out, threads):
    r = float(cfg.options.get("r", 2.0))

    def job(d, h):
        def run():
            mask, _, _, V, rec = calibrated_pair(d, h, cfg.coefficients, cfg.potential)
            return global_baselines(mask, V, r)
        return run

    res = run_jobs({k: job(*v) for k, v in _domains(cfg).items()}, threads)
    cols = ["measure", "lr_norm", "decarli_product", "global_bound_scale", "sup_norm", "lambda1",
            "barta_ratio", "fk_product", "fk_constant", "fk_ratio"]
    _write_rows(out / "baselines.csv", ["key"] + cols, [[k] + [res[k][c] for c in cols] for k in res])
    return EXIT_OK


SUMMARY_HEADER = ["key", "file", "theorem", "verdict", "norm_value", "threshold", "T", "eta", "flag"]


def report(directory) -> int:
    """Summarize every ``cert_*.json`` in ``directory`` into ``summary.csv``."""
    directory = Path(directory)
    rows, status = [], EXIT_OK
    for path in sorted(directory.glob("cert_*.json")):
        key = path.stem[len("cert_"):]
        try:
            c = Certificate.from_json(path.read_text())
            rows.append([key, path.name, c.theorem, c.verdict, c.norm_value, c.threshold, c.T, c.eta, ""])
            if c.verdict == "FAIL":
                status = max(status, EXIT_FAIL)
        except (ValueError, TypeError, KeyError) as exc:
            rows.append([key, path.name, "", "", "", "", "", "", f"malformed: {type(exc).__name__}"])
            status = max(status, EXIT_FAIL)
    _write_rows(directory / "summary.csv", SUMMARY_HEADER, rows)
    return status


COMMANDS = {
    "eigen": cmd_eigen,
    "exit-time": cmd_exit_time,
    "fk-verify": cmd_fk_verify,
    "fk-verify-2d": cmd_fk_verify_2d,
    "lieb-check": cmd_lieb_check,
    "lemma-sweep": cmd_lemma_sweep,
    "counterexample": cmd_counterexample,
    "baselines": cmd_baselines,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="parallel jobs (env LOCALFK_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="localfk", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    rp = sub.add_parser("report", parents=[common], help="summarize certificates in a directory")
    rp.add_argument("directory", type=Path)
    return p


def _threads(arg):
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("LOCALFK_THREADS")
    return max(1, int(env)) if env else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        if not args.directory.is_dir():
            print(f"error: {args.directory} is not a directory", file=sys.stderr)
            return EXIT_CONFIG
        return report(args.directory)
    log.info("running %s", args.command)
    try:
        cfg = load_config(args.config, {"seed": args.seed})
        out = Path(args.out or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, _threads(args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
