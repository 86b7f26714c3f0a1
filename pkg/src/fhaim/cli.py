"""Command-line entry point: ``fhaim --dataset data/compas.csv --domain data/compas.domain.json``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import traceback
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _epsilon(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("epsilon must be positive (use 'inf' for a non-private run)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fhaim", description="Train AIM over encrypted data and emit synthetic data.")
    p.add_argument("--dataset", required=True, help="CSV table with a header row")
    p.add_argument("--domain", required=True, help="JSON domain file")
    p.add_argument("--epsilon", type=_epsilon, default=math.inf)
    p.add_argument("--delta", type=float, default=1e-9)
    p.add_argument("--norm", choices=("l2sq", "l1poly"), default="l2sq")
    p.add_argument("--backend", choices=("exact", "noisy"), default="exact")
    p.add_argument("--rounds", type=int, default=None, help="selection rounds (default 16 d)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="fhaim_out")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--emit", choices=("synthetic", "metrics", "transcript", "all"), default="all")
    p.add_argument("--target", default=None, help="binary attribute for the classifier (default: last)")
    p.add_argument("--fit-iterations", type=int, default=100)
    p.add_argument("--batch-decrypt", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_record(out_dir, kind: str, message: str, code: int) -> int:
    rec = {"status": "error", "error": kind, "message": message, "exit_code": code}
    print(json.dumps(rec), file=sys.stderr)
    if out_dir is None:
        return code
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(rec, indent=2))
    except OSError:
        pass
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        # no trustworthy --out-dir yet, so stderr only
        return _error_record(None, "usage", str(e), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    for flag in ("dataset", "domain"):
        if not Path(getattr(args, flag)).is_file():
            return _error_record(args.out_dir, "missing_file", f"--{flag} {getattr(args, flag)} not found", EXIT_USAGE)
    if not 0 < args.delta < 1:
        return _error_record(args.out_dir, "usage", "--delta must lie in (0, 1)", EXIT_USAGE)

    from .aim import RunConfig
    from .encoding import SchemaError, load_dataset
    from .metrics import build_report
    from .workflow import audit_transcript, run_workflow, write_artifacts

    try:
        data = load_dataset(args.dataset, args.domain)
        target = data.schema.d - 1 if args.target is None else data.schema.index(args.target)
        cfg = RunConfig(
            epsilon=args.epsilon, delta=args.delta, norm=args.norm, backend=args.backend,
            rounds=args.rounds, seed=args.seed, fit_iterations=args.fit_iterations,
            batch_decrypt=args.batch_decrypt, target=data.schema.names[target],
        )
        art = run_workflow(cfg, data=data, transport=args.transport)
    except (SchemaError, ValueError) as e:
        return _error_record(args.out_dir, "invalid_input", str(e), EXIT_USAGE)
    except Exception as e:  # noqa: BLE001 - reported as a machine-readable record
        logging.debug(traceback.format_exc())
        return _error_record(args.out_dir, type(e).__name__, str(e), EXIT_RUNTIME)

    out = Path(args.out_dir)
    write_artifacts(art, out, args.emit)
    audit = audit_transcript(art.transcript, art.expected_decryptions)
    report = build_report(art, target)
    report.extra["audit_violations"] = audit.violations
    if args.emit in ("metrics", "all"):
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps({"status": "ok", "delta": report.delta, "accuracy": report.accuracy,
                      "f1": report.f1, "out_dir": str(out)}))
    return EXIT_OK if audit.ok else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
