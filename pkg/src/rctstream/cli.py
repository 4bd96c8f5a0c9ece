"""Command-line entry point.

Usage::

    rctstream gen --n 1000 --k 3 --tau 0.5 --seed 1 > data.csv
    rctstream pate data.csv --pi1 0.5
    rctstream rls data.csv --se hrse
    rctstream bootstrap data.csv --B 200 --seed 7
    rctstream cluster-bootstrap data.csv --cluster cluster
    rctstream federated-sim data.csv --transport wire
    rctstream verify data.csv

Reports are JSON on stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
from typing import Iterable, Iterator, Optional, TextIO

import numpy as np

from .bootstrap import (
    BootstrapMeanEnsemble,
    OnlineRlsBootstrap,
    WeightGenerator,
    WeightMode,
    bootstrap_pate_step,
    summarize,
    understatement_warning,
)
from .estimators import PateStream, RegressionStream, z_quantile
from .stream import RecursiveMean, mean_update
from .types import EmptyStreamError, Record, StreamConfig, StreamError

logger = logging.getLogger("rctstream")

SCHEMA_VERSION = 1
STREAMING_COMMANDS = ("mean", "pate", "rls", "bootstrap", "cluster-bootstrap")
_XCOL = re.compile(r"^x(\d+)$")


class IngestError(StreamError):
    pass


def _parse_cluster(value) -> Optional[bytes]:
    if value is None or value == "":
        return None
    return str(value).encode("utf-8")


def _parse_d(value) -> int:
    d = float(value)
    if d not in (0.0, 1.0):
        raise ValueError(f"treatment indicator must be 0 or 1, got {value!r}")
    return int(d)


def _iter_csv(lines: Iterable[str], cluster_col: str) -> Iterator[tuple]:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        return
    header = [h.strip() for h in header]
    if "y" not in header or "d" not in header:
        raise IngestError("CSV header must name columns 'y' and 'd'")
    iy, idd = header.index("y"), header.index("d")
    xcols = sorted(
        ((int(m.group(1)), i) for i, h in enumerate(header) if (m := _XCOL.match(h))),
    )
    ic = header.index(cluster_col) if cluster_col in header else None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue

        def build(row=row):
            if len(row) != len(header):
                raise ValueError(f"expected {len(header)} fields, got {len(row)}")
            cov = [float(row[i]) for _, i in xcols]
            cid = _parse_cluster(row[ic]) if ic is not None else None
            return Record.from_values(float(row[iy]), _parse_d(row[idd]), cov, cid)

        yield lineno, build


def _iter_jsonl(lines: Iterable[str], cluster_col: str) -> Iterator[tuple]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue

        def build(line=line):
            obj = json.loads(line)
            if not isinstance(obj, dict) or "y" not in obj or "d" not in obj:
                raise ValueError("object needs keys 'y' and 'd'")
            cov = obj.get("x", [])
            if not isinstance(cov, list):
                raise ValueError("'x' must be an array of covariates")
            y = obj["y"]
            if isinstance(y, bool) or not isinstance(y, (int, float)):
                raise ValueError("'y' must be numeric")
            return Record.from_values(float(y), _parse_d(obj["d"]), [float(v) for v in cov],
                                      _parse_cluster(obj.get(cluster_col)))

        yield lineno, build


def ingest(source: TextIO, fmt: str = "csv", cluster_col: str = "cluster", strict: bool = False) -> Iterator[Record]:
    """Yield validated records one at a time.

    The intercept is prepended automatically. Malformed rows are reported
    with their line number and skipped, or abort the run under ``strict``.
    Raises :class:`EmptyStreamError` if the input holds no records.
    """
    rows = _iter_csv(source, cluster_col) if fmt == "csv" else _iter_jsonl(source, cluster_col)
    k = None
    count = 0
    for lineno, build in rows:
        try:
            rec = build()
            if k is None:
                k = rec.k
            elif rec.k != k:
                raise ValueError(f"record has {rec.k} features, earlier records have {k}")
        except (ValueError, TypeError, StreamError) as exc:
            if strict:
                raise IngestError(f"line {lineno}: {exc}") from None
            logger.warning("line %d skipped: %s", lineno, exc)
            continue
        count += 1
        yield rec
        del rec
    if count == 0:
        raise EmptyStreamError("input contains no records")


def _peek(records: Iterator[Record]):
    first = next(records, None)
    if first is None:
        raise EmptyStreamError("input contains no records")
    return first


def _chain(first: Record, rest: Iterator[Record]) -> Iterator[Record]:
    yield first
    del first
    yield from rest


def _warning(code: str, message: str) -> dict:
    logger.warning(message)
    return {"code": code, "message": message}


def _base_report(command: str, args) -> dict:
    return {"schema": SCHEMA_VERSION, "command": command, "method": None, "n": 0,
            "tau_hat": None, "se": None, "ci": None, "level": args.level, "warnings": []}


def _fill_estimate(report: dict, est) -> None:
    report["method"] = est.method
    report["n"] = est.n
    report["tau_hat"] = est.tau_hat
    report["se"] = est.se
    report["ci"] = None if est.ci_low is None else [est.ci_low, est.ci_high]
    for flag in est.flags:
        report["warnings"].append(_warning(flag, f"degenerate treatment arm: {flag}; variance unavailable"))


def _cfg(args, k: int) -> StreamConfig:
    return StreamConfig(k=k, pi1=args.pi1, init_m=args.init_m, df_divisor=args.df)


def _cmd_mean(args, records) -> dict:
    report = _base_report("mean", args)
    state = RecursiveMean()
    for r in records:
        state = mean_update(state, r.y)
        del r
    if state.weight_sum == 0:
        raise EmptyStreamError("input contains no records")
    report.update(method="mean", n=int(state.weight_sum), mean=state.mean)
    return report


def _cmd_pate(args, records) -> dict:
    report = _base_report("pate", args)
    first = _peek(records)
    ps = PateStream(_cfg(args, first.k))
    stream = _chain(first, records)
    del first
    for r in stream:
        ps.update(r)
        del r
    _fill_estimate(report, ps.estimate(args.level))
    return report


def _cmd_rls(args, records) -> dict:
    report = _base_report("rls", args)
    first = _peek(records)
    rs = RegressionStream(_cfg(args, first.k), hrse=args.se == "hrse")
    stream = _chain(first, records)
    del first
    for r in stream:
        rs.update(r)
        del r
    est = rs.estimate(args.se, args.level)
    _fill_estimate(report, est)
    report["beta"] = rs.beta.tolist()
    if args.se == "iid" and not est.flags:
        rep = rs.variance("iid")
        report["dof"] = rep.dof
        report["sigma2_hat"] = rep.sigma2_hat
    if args.se == "hrse":
        report["warnings"].append({
            "code": "HRSE_RECURSIVE_RESIDUALS",
            "message": "robust meat built from standardized recursive residuals",
        })
    return report


def _cmd_bootstrap(args, records, mode: WeightMode) -> dict:
    command = "cluster-bootstrap" if mode is WeightMode.CLUSTER_SEEDED else "bootstrap"
    report = _base_report(command, args)
    gen = WeightGenerator(args.seed, mode)
    first = _peek(records)
    if mode is WeightMode.CLUSTER_SEEDED and first.cluster_id is None:
        raise IngestError(f"cluster column {args.cluster!r} missing or empty")
    cfg = _cfg(args, first.k)
    stream = _chain(first, records)
    del first
    if args.model == "pate":
        point = PateStream(cfg)
        ens = BootstrapMeanEnsemble(args.B)
        for r in stream:
            point.update(r)
            bootstrap_pate_step(ens, r, gen, cfg)
            del r
        summary = summarize(ens, args.level)
        report["tau_hat"] = point.estimate(args.level).tau_hat
        report["n"] = point.n
        variance, lo, hi = summary.variance, summary.ci_low, summary.ci_high
    else:
        point = RegressionStream(cfg)
        boot = OnlineRlsBootstrap(cfg, args.B, gen)
        for r in stream:
            point.update(r)
            boot.update(r)
            del r
        if boot.ensemble is None:
            raise EmptyStreamError("regression never became identifiable")
        summary = summarize(boot.ensemble, args.level)
        report["tau_hat"] = float(point.beta[1])
        report["n"] = point.n
        variance, lo, hi = float(summary.variance[1, 1]), float(summary.ci_low[1]), float(summary.ci_high[1])
        warn = understatement_warning(boot.ensemble.m, boot.n_seen)
        if warn:
            report["warnings"].append(warn)
    report["method"] = f"{command}-{args.model}"
    report["se"] = math.sqrt(max(variance, 0.0))
    report["ci"] = [lo, hi]
    report["bootstrap_variance"] = variance
    report["B"] = args.B
    report["B_effective"] = summary.B_effective
    report["seed"] = args.seed
    return report


def _cmd_federated(args, records) -> dict:
    from .federated import ClientState, ProtocolTrace, run_delta_simulation, run_simulation

    report = _base_report("federated-sim", args)
    first = _peek(records)
    cfg = _cfg(args, first.k)
    server_fit = RegressionStream(cfg)
    # client-side storage: each cluster keeps its own records
    clients: dict = {}
    stream = _chain(first, records)
    del first
    for r in stream:
        if r.cluster_id is None:
            raise IngestError(f"cluster column {args.cluster!r} missing or empty")
        server_fit.update(r)
        clients.setdefault(r.cluster_id, ClientState()).records.append(r)
    trace = ProtocolTrace()
    if args.protocol == "delta":
        est = run_delta_simulation(clients.values(), args.transport, args.quorum, level=args.level, trace=trace)
        _fill_estimate(report, est)
        report["J"] = len(trace.to_server)
    else:
        rep = run_simulation(clients.values(), server_fit.beta, server_fit.bread,
                             transport=args.transport, quorum=args.quorum, trace=trace)
        est = server_fit.estimate("cluster-robust", args.level, report=rep)
        _fill_estimate(report, est)
        report["method"] = "federated-cluster-robust"
        report["beta"] = server_fit.beta.tolist()
        report["J"] = rep.j_count
    report["clients"] = len(clients)
    report["messages"] = {
        "broadcasts": trace.broadcasts,
        "to_clients": len(trace.to_clients),
        "to_server": len(trace.to_server),
        "abstained": trace.abstained,
        "missing": trace.missing,
    }
    if trace.missing:
        report["warnings"].append(_warning(
            "PARTIAL_AGGREGATION", f"{trace.missing} clients did not answer; estimate uses realized J"))
    return report


def _cmd_verify(args, records) -> dict:
    from . import oracle
    from .federated import partition_by_cluster, run_simulation

    report = _base_report("verify", args)
    data = oracle.RetainedDataset.from_records(records)
    n, k = data.X.shape
    cfg = _cfg(args, k)
    rs = RegressionStream(cfg)
    ps = PateStream(cfg)
    rows = list(oracle_records(data))
    for r in rows:
        rs.update(r)
        ps.update(r)
    fit = oracle.batch_ols(data)
    checks = []

    def check(name, delta, tol):
        checks.append({"name": name, "delta": float(delta), "tol": tol, "pass": bool(delta <= tol)})

    check("rls_beta_max_abs", np.max(np.abs(rs.beta - fit.beta)), 1e-8)
    check("rls_ssr_rel", abs(rs.state.ssr - fit.ssr) / max(fit.ssr, 1e-300), 1e-8)
    z_mean = float(oracle.pate_values(data, args.pi1).mean())
    check("pate_mean_rel", abs(ps.state.mean - z_mean) / max(abs(z_mean), 1e-300), 1e-12)
    if data.cluster_ids is not None and len(set(data.cluster_ids)) >= 2:
        rep = run_simulation(partition_by_cluster(rows), rs.beta, rs.bread, transport=args.transport)
        ref = oracle.batch_cluster_sandwich(data, rs.beta)
        check("federated_sandwich_rel", np.max(np.abs(rep.sigma - ref)) / np.max(np.abs(ref)), 1e-10)
    est = rs.estimate("iid", args.level)
    _fill_estimate(report, est)
    report["checks"] = checks
    report["ok"] = all(c["pass"] for c in checks)
    return report


def oracle_records(data) -> Iterator[Record]:
    ids = data.cluster_ids
    for i in range(data.y.shape[0]):
        yield Record(data.y[i], data.X[i], None if ids is None else ids[i])


def _cmd_gen(args, out: TextIO) -> None:
    from .datagen import ClusterSpec, DgpSpec, generate_arrays

    beta = tuple(float(v) for v in args.beta.split(",")) if args.beta else (0.0,) + (1.0,) * (args.k - 2)
    cs = ClusterSpec(args.clusters, args.icc, args.cluster_assignment) if args.clusters else None
    spec = DgpSpec(n=args.n, k=args.k, tau=args.tau, beta=beta, pi1=args.pi1, noise_sd=args.noise_sd,
                   hetero_factor=args.hetero, cluster_spec=cs, seed=args.seed, exact_count=args.exact_count)
    data = generate_arrays(spec)
    covs = [f"x{j}" for j in range(2, args.k)]
    if args.format == "csv":
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["y", "d", *covs] + (["cluster"] if cs else []))
        for i in range(spec.n):
            row = [repr(float(data.y[i])), int(data.X[i, 1]), *(repr(float(v)) for v in data.X[i, 2:])]
            if cs:
                row.append(data.cluster_ids[data.cluster_index[i]].decode())
            w.writerow(row)
    else:
        for i in range(spec.n):
            obj = {"y": float(data.y[i]), "d": int(data.X[i, 1]), "x": [float(v) for v in data.X[i, 2:]]}
            if cs:
                obj["cluster"] = data.cluster_ids[data.cluster_index[i]].decode()
            out.write(json.dumps(obj) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rctstream", description="Streaming analysis of randomized experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("input", help="input file, or '-' for stdin")
        p.add_argument("--format", choices=("csv", "jsonl"), default=None,
                       help="input format (default: from file extension, else csv)")
        p.add_argument("--pi1", type=float, default=0.5, help="treatment probability")
        p.add_argument("--cluster", default="cluster", help="cluster column name")
        p.add_argument("--init-m", type=int, default=0, help="records buffered for the batch start")
        p.add_argument("--level", type=float, default=0.95, help="confidence level")
        p.add_argument("--df", choices=("nk", "nk1"), default="nk", help="residual dof divisor")
        p.add_argument("--strict", action="store_true", help="abort on malformed rows")
        return p

    p = sub.add_parser("gen", help="generate a synthetic experiment stream")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--beta", default=None, help="intercept,cov coefs (comma separated)")
    p.add_argument("--pi1", type=float, default=0.5)
    p.add_argument("--noise-sd", type=float, default=1.0)
    p.add_argument("--hetero", type=float, default=1.0)
    p.add_argument("--clusters", type=int, default=0)
    p.add_argument("--icc", type=float, default=0.0)
    p.add_argument("--cluster-assignment", choices=("balanced", "random"), default="balanced")
    p.add_argument("--exact-count", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    common(sub.add_parser("mean", help="running mean of the outcome"))
    common(sub.add_parser("pate", help="inverse-probability effect estimate"))
    p = common(sub.add_parser("rls", help="recursive least-squares effect estimate"))
    p.add_argument("--se", choices=("iid", "hrse"), default="iid")
    for name in ("bootstrap", "cluster-bootstrap"):
        p = common(sub.add_parser(name, help=f"online {name.replace('-', ' ')}"))
        p.add_argument("--B", type=int, default=200)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--model", choices=("pate", "rls"), default="pate")
    p = common(sub.add_parser("federated-sim", help="simulate the one-round federated CRSE protocol"))
    p.add_argument("--transport", choices=("inproc", "wire"), default="inproc")
    p.add_argument("--quorum", type=float, default=1.0)
    p.add_argument("--protocol", choices=("sandwich", "delta"), default="sandwich")
    p = common(sub.add_parser("verify", help="compare streaming results to batch oracles"))
    p.add_argument("--transport", choices=("inproc", "wire"), default="inproc")
    return parser


def _validate(args) -> None:
    if args.command == "gen":
        if args.n < 1 or args.k < 2:
            raise StreamError("--n must be positive and --k at least 2")
        return
    if not 0.0 < args.pi1 < 1.0:
        raise StreamError("--pi1 must lie strictly between 0 and 1")
    if not 0.0 < args.level < 1.0:
        raise StreamError("--level must lie in (0, 1)")
    if args.init_m < 0:
        raise StreamError("--init-m must be non-negative")
    if getattr(args, "B", 2) < 2:
        raise StreamError("--B must be at least 2")
    if getattr(args, "seed", 0) < 0 or getattr(args, "seed", 0) >= 2 ** 64:
        raise StreamError("--seed must be an unsigned 64-bit integer")
    if not 0.0 < getattr(args, "quorum", 1.0) <= 1.0:
        raise StreamError("--quorum must lie in (0, 1]")
    z_quantile(args.level)


def _input_format(args) -> str:
    if args.format:
        return args.format
    return "jsonl" if args.input.endswith((".jsonl", ".ndjson")) else "csv"


def run_report(args, records: Optional[Iterator[Record]] = None) -> dict:
    """Run one analysis subcommand and return its JSON-ready report.

    ``records`` overrides the input file, which lets callers feed an
    instrumented source.
    """
    _validate(args)
    handle = None
    if records is None:
        handle = sys.stdin if args.input == "-" else open(args.input, newline="", encoding="utf-8")
        records = ingest(handle, _input_format(args), args.cluster, args.strict)
    try:
        records = iter(records)
        if args.command == "mean":
            return _cmd_mean(args, records)
        if args.command == "pate":
            return _cmd_pate(args, records)
        if args.command == "rls":
            return _cmd_rls(args, records)
        if args.command == "bootstrap":
            return _cmd_bootstrap(args, records, WeightMode.IID)
        if args.command == "cluster-bootstrap":
            return _cmd_bootstrap(args, records, WeightMode.CLUSTER_SEEDED)
        if args.command == "federated-sim":
            return _cmd_federated(args, records)
        if args.command == "verify":
            return _cmd_verify(args, records)
        raise StreamError(f"unknown command {args.command!r}")
    finally:
        if handle is not None and handle is not sys.stdin:
            handle.close()


def main(argv: Optional[list] = None, stdout: Optional[TextIO] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(levelname)s: %(message)s", stream=sys.stderr)
    out = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            _validate(args)
            _cmd_gen(args, out)
            return 0
        report = run_report(args)
    except (StreamError, OSError) as exc:
        print(f"rctstream: error: {exc}", file=sys.stderr)
        return 2
    out.write(json.dumps(report, indent=2) + "\n")
    if args.command == "verify" and not report["ok"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
