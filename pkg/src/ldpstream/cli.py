"""Command-line front end.

    ldpstream run <experiment> [--seed S] [--devices N] ... [--out PATH]
    ldpstream validate <config>
    ldpstream simulate <fleet.json> <query.json> [--out PATH]
    ldpstream columns <csv>
    ldpstream serve [--port P] [--ingest-port P] ...
    ldpstream client {register,submit,estimates} ... [--url URL]

Exit status: 0 success, 1 validation failure, 2 capacity or runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import CapacityError, LDPStreamError, QueryParseError
from .experiments import EXPERIMENTS, ExperimentSpec, run_experiment, write_result
from .fleet import FleetConfig, run as run_fleet
from .query import parse_query, validate_query

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DEFAULT_URL = "http://127.0.0.1:8000"

log = logging.getLogger("ldpstream")


def _overrides(args) -> dict:
    pairs = {
        "n_devices": args.devices,
        "sensitive_fraction": args.fraction,
        "answer_interval_seconds": args.interval,
        "window_seconds": args.window,
        "duration_seconds": args.duration,
        "churn_rate": args.churn,
    }
    return {k: v for k, v in pairs.items() if v is not None}


def cmd_run(args) -> int:
    spec = ExperimentSpec(args.experiment, _overrides(args), args.reps, args.seed, args.p, args.q)
    problems = spec.violations()
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = run_experiment(spec)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, LDPStreamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out, detail = write_result(result, args.out)
    print(result.summary_line)
    log.info("wrote %s and %s", out, detail)
    return EXIT_OK


def validate_document(doc) -> list[str]:
    """Violations for a query document, a fleet config, or ``{"query", "fleet"}``."""
    if not isinstance(doc, dict):
        return ["config must be a JSON object"]
    parts = []
    if "query" in doc or "fleet" in doc:
        parts = [(k, doc[k]) for k in ("query", "fleet") if k in doc]
    elif "buckets" in doc:
        parts = [("query", doc)]
    elif "n_devices" in doc:
        parts = [("fleet", doc)]
    else:
        return ["unrecognized config: expected a query document or a fleet config"]

    problems = []
    for kind, body in parts:
        if kind == "query":
            try:
                query = parse_query(json.dumps(body))
            except QueryParseError as exc:
                problems.append(f"query: {exc}")
                continue
            problems += [f"query: [{v.code}] {v.message}" for v in validate_query(query).violations]
        else:
            try:
                cfg = FleetConfig.from_dict(body)
            except (TypeError, ValueError) as exc:
                problems.append(f"fleet: {exc}")
                continue
            problems += [f"fleet: {p}" for p in cfg.violations()]
    return problems


def cmd_validate(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        print(f"{args.config}: not valid JSON at byte {len(text[:exc.pos].encode())}: {exc.msg}")
        return EXIT_INVALID
    problems = validate_document(doc)
    if problems:
        for p in problems:
            print(f"{args.config}: {p}")
        return EXIT_INVALID
    print(f"{args.config}: ok")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        cfg = FleetConfig.load(args.fleet)
        cfg.check()
        query = parse_query(Path(args.query).read_bytes())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, LDPStreamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        record = run_fleet(cfg, query, engine=args.engine)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    text = record.to_ndjson()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_columns(args) -> int:
    """Rewrite a CSV as whitespace-separated columns with a '#' header."""
    with open(args.csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return EXIT_INVALID
    print("# " + " ".join(rows[0]))
    for row in rows[1:]:
        print(" ".join(row))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceSettings, create_app

    settings = ServiceSettings(
        window_ms=args.window_ms,
        retention_epochs=args.retention_epochs,
        publication_log=args.log,
        registration_files=tuple(args.queries or ()),
        tick_seconds=None if args.no_tick else 0.05,
        ingest_host=args.host,
        ingest_port=args.ingest_port,
    )
    try:
        app = create_app(settings)
    except (OSError, ValueError, LDPStreamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_client(args) -> int:
    import httpx

    with httpx.Client(base_url=args.url, timeout=30.0) as http:
        if args.action == "register":
            body = json.loads(Path(args.path).read_text(encoding="utf-8"))
            resp = http.post("/queries", json=body)
        elif args.action == "submit":
            lines = Path(args.path).read_text(encoding="utf-8").splitlines()
            resp = http.post("/submissions/batch", json=[json.loads(l) for l in lines if l.strip()])
        else:
            params = {} if args.since is None else {"since_ms": args.since}
            resp = http.get(f"/queries/{args.query_id}/estimates", params=params)
            if resp.is_success:
                for item in resp.json():
                    print(json.dumps(item, separators=(",", ":")))
                return EXIT_OK
    print(json.dumps(resp.json(), indent=2) if resp.content else resp.status_code)
    if resp.status_code == 422:
        return EXIT_INVALID
    return EXIT_OK if resp.is_success else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldpstream", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a canned experiment and write CSV")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--devices", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--interval", type=float, help="answer interval in seconds")
    p.add_argument("--window", type=float, help="batch window in seconds")
    p.add_argument("--duration", type=float, help="simulated seconds per run")
    p.add_argument("--churn", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--out", help="summary CSV path (default $LDPSTREAM_OUT_DIR/<experiment>.csv)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a query document or fleet config")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run one fleet config and print its RunRecord")
    p.add_argument("fleet")
    p.add_argument("query")
    p.add_argument("--engine", choices=("auto", "agents", "vectorized"), default="auto")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("columns", help="gnuplot-ready columns from an experiment CSV")
    p.add_argument("csv")
    p.set_defaults(func=cmd_columns)

    p = sub.add_parser("serve", help="start the aggregator service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ingest-port", type=int, help="also listen for length-delimited submissions")
    p.add_argument("--window-ms", type=int, default=1000)
    p.add_argument("--retention-epochs", type=int, default=2)
    p.add_argument("--queries", nargs="*", help="registration files to load at startup")
    p.add_argument("--log", help="append published estimates to this NDJSON file")
    p.add_argument("--no-tick", action="store_true", help="close windows only via POST /advance")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="talk to a running service")
    p.add_argument("--url", default=DEFAULT_URL)
    csub = p.add_subparsers(dest="action", required=True)
    c = csub.add_parser("register")
    c.add_argument("path")
    c = csub.add_parser("submit", help="post an NDJSON file of submissions")
    c.add_argument("path")
    c = csub.add_parser("estimates")
    c.add_argument("query_id")
    c.add_argument("--since", type=int)
    p.set_defaults(func=cmd_client)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
