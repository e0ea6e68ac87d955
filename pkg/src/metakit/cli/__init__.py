"""Command-line front end.

Exit codes:

====  ====================================================================
0     success
2     config, schema, parse or format error (also bad METAKIT_THREADS)
3     computation failure: too many effect sizes not estimable, singular
      design, insufficient data, non-PSD covariance, CR2 adjustment failure
4     optimizer failed to converge (a partial bundle is written)
====  ====================================================================
"""

from __future__ import annotations

import os
import sys

# must run before numpy is imported to cap BLAS threads
_THREADS = os.environ.get("METAKIT_THREADS")
if _THREADS is not None and _THREADS.isdigit() and int(_THREADS) >= 1:
    for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_v] = _THREADS

import argparse  # noqa: E402
import datetime as _dt  # noqa: E402
from pathlib import Path  # noqa: E402

import jsonschema  # noqa: E402

from .. import __version__  # noqa: E402
from ..errors import (ConvergenceError, FormatError, MetakitError, NotEstimableError,  # noqa: E402
                      ParseError, SchemaError)
from ..ingest import write_csv  # noqa: E402
from ..tables import dumps  # noqa: E402
from .config import bundle_schema, load_config  # noqa: E402
from .pipeline import (DEFAULT_MAX_FAILED, build_tables, failed_fraction, fit_analysis,  # noqa: E402
                       prepare_data, render_plots, selected_tables)
from .rcode import emit_r_code  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE, EXIT_CONVERGENCE = 0, 2, 3, 4


def exit_code(err):
    """Exit code for an error class (total: every error maps to a nonzero code)."""
    if isinstance(err, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(err, (SchemaError, ParseError, FormatError)):
        return EXIT_CONFIG
    return EXIT_COMPUTE


def threads():
    v = os.environ.get("METAKIT_THREADS")
    if v is None:
        return None
    if not v.isdigit() or int(v) < 1:
        raise SchemaError(f"METAKIT_THREADS must be a positive integer, got {v!r}")
    return int(v)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _bundle(cfg, command, started, tables, plots, errors, rows=None):
    prov = {"config_sha256": cfg.sha256, "version": __version__, "started": started, "finished": _now(),
            "command": command}
    t = threads()
    if t is not None:
        prov["threads"] = t
    if rows is not None:
        prov["rows"] = rows
    return {"tables": {n: tab.to_dict() for n, tab in tables.items()}, "plots": plots, "provenance": prov,
            "errors": errors}


def write_bundle(out, bundle):
    import json
    text = dumps(bundle)
    jsonschema.validate(json.loads(text), bundle_schema())
    (out / "bundle.json").write_text(text, encoding="utf-8")


def _err(stage, e):
    return {"stage": stage, "kind": type(e).__name__, "message": str(e)}


def cmd_es(cfg, out, max_failed=None):
    prep = prepare_data(cfg)
    for c in prep.counts:
        print(c.line())
        for rid in c.failed_rows:
            print(f"  row {rid}: not estimable")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(prep.data, out / "data_es.csv")
    thr = max_failed if max_failed is not None else cfg["effect_size"].get("max_failed_fraction",
                                                                            DEFAULT_MAX_FAILED)
    frac = failed_fraction(prep.counts)
    if frac > thr or (prep.counts and prep.counts[-1].computed == 0):
        print(f"error: {frac:.1%} of effect sizes not estimable (threshold {thr:.1%})", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def _run(cfg, out, command, table_names=None, plot_names=None, max_failed=None):
    started = _now()
    failures = []
    tables, plots = {}, {}
    rows = None
    out.mkdir(parents=True, exist_ok=True)
    try:
        prep = prepare_data(cfg)
        thr = max_failed if max_failed is not None else cfg["effect_size"].get("max_failed_fraction",
                                                                                DEFAULT_MAX_FAILED)
        frac = failed_fraction(prep.counts)
        if frac > thr or (prep.counts and prep.counts[-1].computed == 0):
            raise NotEstimableError(f"{frac:.1%} of effect sizes not estimable (threshold {thr:.1%})")
        an = fit_analysis(cfg, prep)
        rows = {"total": len(prep.data), "used": len(an.data), "omitted": len(an.omitted),
                "omitted_reasons": {str(k): v for k, v in an.omitted.items()}}
        names = selected_tables(cfg, an) if table_names is None else table_names
        tables = build_tables(an, prep, names, failures)
        for name, svg in render_plots(an, plot_names).items():
            fn = f"{name}.svg"
            (out / fn).write_text(svg, encoding="utf-8")
            plots[name] = fn
    except MetakitError as e:
        failures.append(("analysis", e))
    errors = [_err(stage, e) for stage, e in failures]
    write_bundle(out, _bundle(cfg, command, started, tables, plots, errors, rows))
    for e in errors:
        print(f"error [{e['stage']}] {e['kind']}: {e['message']}", file=sys.stderr)
    return max((exit_code(e) for _, e in failures), default=EXIT_OK)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="metakit", description="Classical meta-analysis from a declarative config.")
    ap.add_argument("--version", action="version", version=f"metakit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("es", "compute effect sizes and write an augmented CSV"),
                           ("fit", "run the configured analysis and write a result bundle"),
                           ("plot", "write only the configured plots"),
                           ("pubbias", "publication-bias table only"),
                           ("emit-r-code", "print an equivalent metafor script")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="YAML or JSON run configuration")
        p.add_argument("--out", required=name != "emit-r-code", type=Path, help="output directory")
        if name in ("es", "fit", "plot", "pubbias"):
            p.add_argument("--max-failed-fraction", type=float, default=None,
                           help="fail (exit 3) when more effect sizes than this fraction are not estimable")
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        threads()
        cfg = load_config(args.config)
    except MetakitError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    try:
        if args.command == "es":
            return cmd_es(cfg, args.out, args.max_failed_fraction)
        if args.command == "fit":
            return _run(cfg, args.out, "fit", max_failed=args.max_failed_fraction)
        if args.command == "plot":
            return _run(cfg, args.out, "plot", table_names=[], max_failed=args.max_failed_fraction)
        if args.command == "pubbias":
            return _run(cfg, args.out, "pubbias", table_names=["pubbias"], plot_names=(),
                        max_failed=args.max_failed_fraction)
        text = emit_r_code(cfg)
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "analysis.R").write_text(text, encoding="utf-8")
        sys.stdout.write(text)
        return EXIT_OK
    except MetakitError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
