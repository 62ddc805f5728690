"""Command-line entry point: ``fedelastic run|compare|diagnose|presets``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import config as cfgmod
from . import diagnostics as dg
from . import report
from .errors import DivergedSolveError, FedElasticError
from .experiment import run_experiment

log = logging.getLogger("fedelastic")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--output", help="output directory (overrides output.dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedelastic", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True, help="YAML file or bundled preset name")
    _add_overrides(p)

    p = sub.add_parser("compare", help="joint report over several runs")
    p.add_argument("--configs", nargs="+", required=True,
                   help="configs to run, or finished run directories; the first is the baseline")
    p.add_argument("--output", required=True, help="directory for compare.json and the runs")
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)

    p = sub.add_parser("diagnose", help="run with the convex-mode convergence diagnostics")
    p.add_argument("--config", required=True)
    p.add_argument("--heavy", action="store_true", help="re-solve all clients every round")
    p.add_argument("--sign-trials", type=int, default=10_000)
    _add_overrides(p)

    sub.add_parser("presets", help="list bundled presets")
    return parser


def _load(path: str, **overrides):
    cfg = cfgmod.parse_config(path)
    resolved = Path(path) if Path(path).exists() else cfgmod.preset_path(path)
    return cfgmod.apply_overrides(cfg, **overrides), resolved


def _error_payload(exc: Exception) -> dict:
    out = {"type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DivergedSolveError):
        out.update(round=exc.round, client=exc.client, lr=exc.lr)
    errors = getattr(exc, "errors", None)
    if errors:
        out["errors"] = errors
    return out


def execute(cfg, config_path, out_dir=None) -> tuple[int, dict | None]:
    """Run ``cfg`` into its output directory; returns (exit code, summary)."""
    out = Path(out_dir) if out_dir else cfg.output_dir()
    try:
        out = report.preflight(out)
    except OSError as exc:
        print(json.dumps({"error": {"type": "OSError", "message": f"{out}: {exc}"}}), file=sys.stderr)
        return EXIT_IO, None
    manifest = report.Manifest(out, config_path, cfg.to_yaml(), cfg.seed)
    start = time.perf_counter()
    try:
        result = run_experiment(cfg)
        files = report.emit_report(result, out)
    except FedElasticError as exc:
        payload = _error_payload(exc)
        manifest.finish("failed", runtime=time.perf_counter() - start, error=payload)
        print(json.dumps({"error": payload}), file=sys.stderr)
        return EXIT_RUNTIME, None
    manifest.finish("completed", files, runtime=time.perf_counter() - start)
    log.info("wrote %s", out)
    return EXIT_OK, report.summary(result)


def _cmd_run(args) -> int:
    cfg, path = _load(args.config, lambda1=args.lambda1, lambda2=args.lambda2,
                      epsilon=args.epsilon, variant=args.variant, seed=args.seed,
                      threads=args.threads, rounds=args.rounds, output=args.output)
    code, _ = execute(cfg, path, args.output)
    return code


def _cmd_compare(args) -> int:
    out = report.preflight(args.output)
    summaries = []
    for i, item in enumerate(args.configs):
        p = Path(item)
        if p.is_dir() and (p / report.FILES["summary"]).exists():
            summaries.append(json.loads((p / report.FILES["summary"]).read_text()))
            continue
        cfg, path = _load(item, seed=args.seed, threads=args.threads, rounds=args.rounds)
        code, summ = execute(cfg, path, out / f"{i}_{cfg.name}")
        if code != EXIT_OK:
            return code
        summaries.append(json.loads(report.dumps(summ)))
    joint = report.compare(summaries)
    (out / "compare.json").write_text(report.dumps(joint))
    print(report.dumps(joint), end="")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    cfg, path = _load(args.config, lambda1=args.lambda1, lambda2=args.lambda2,
                      epsilon=args.epsilon, variant=args.variant, seed=args.seed,
                      threads=args.threads, rounds=args.rounds, output=args.output)
    raw = cfg.to_dict()
    raw["diagnostics"]["enabled"] = True
    raw["diagnostics"]["heavy"] = bool(args.heavy or cfg.diagnostics.heavy)
    cfg = cfgmod.from_dict(raw)
    out = Path(args.output) if args.output else cfg.output_dir()
    code, summ = execute(cfg, path, out)
    if code != EXIT_OK:
        return code
    grid = []
    for m in (20, 100):
        for delta in (0.1, 0.3, 0.5):
            emp, bound = dg.sign_concentration(m, delta, args.sign_trials)
            grid.append({"m": m, "delta": delta, "empirical": emp, "bound": bound,
                         "pass": emp <= 2 * bound})
    verdict = {"diagnostics": summ["diagnostics"], "sign_concentration": grid}
    (out / "diagnose.json").write_text(report.dumps(verdict))
    print(report.dumps(verdict), end="")
    return EXIT_OK


def _cmd_presets(args) -> int:
    for name in cfgmod.list_presets():
        print(name)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "compare": _cmd_compare, "diagnose": _cmd_diagnose,
                "presets": _cmd_presets}
    try:
        return handlers[args.verb](args)
    except FedElasticError as exc:
        print(json.dumps({"error": _error_payload(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(json.dumps({"error": {"type": "OSError", "message": str(exc)}}), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
