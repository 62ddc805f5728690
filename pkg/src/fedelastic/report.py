"""Run outputs: per-round CSV, JSON summary, update histogram, diagnostics, manifest.

Everything except the manifest is a pure function of (config, seed), so two
runs of the same config produce byte-identical files. Timestamps and
runtimes live only in ``manifest.json``.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import math
from pathlib import Path

import yaml

from . import __version__

CSV_SCHEMA = "fedelastic-rounds/1"
DIAG_SCHEMA = "fedelastic-diagnostics/1"
ROUND_COLUMNS = ("round", "variant", "participants", "elements_round", "nnz_round", "H_round",
                 "nnz_cum", "bits_cum", "nnz_cum_full", "bits_cum_full", "test_acc",
                 "train_loss", "residual_max", "gamma_dev", "h_dev")
FILES = {"rounds": "rounds.csv", "summary": "summary.json", "histogram": "histogram.csv",
         "diagnostics": "diagnostics.csv", "manifest": "manifest.json", "config": "config.yaml"}


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v).lower()
    return v


def _csv_text(schema: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def rounds_csv(records) -> str:
    return _csv_text(CSV_SCHEMA, ROUND_COLUMNS,
                     ([getattr(r, c) for c in ROUND_COLUMNS] for r in records))


def histogram_csv(histogram: dict, bin: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_index", "bin_left", "count"])
    for k in sorted(histogram):
        w.writerow([k, repr(k * bin), histogram[k]])
    return buf.getvalue()


def diagnostics_csv(trace) -> str:
    return _csv_text(DIAG_SCHEMA, trace.COLUMNS, trace.rows())


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def summary(result) -> dict:
    cfg = result.config
    algo = cfg.algorithm_config()
    run = result.run
    recs = run.records
    accs = [r.test_acc for r in recs if r.test_acc is not None]
    losses = [r.train_loss for r in recs if r.train_loss is not None]
    out = {
        "name": cfg.name,
        "variant": algo.variant,
        "family": algo.family,
        "seed": cfg.seed,
        "rounds": len(recs),
        "clients": len(result.problem.shards),
        "num_params": result.problem.spec.num_params,
        "cumulative_nnz": run.ledger.cumulative_nonzero,
        "cumulative_elements": run.ledger.cumulative_elements,
        "cumulative_bits": run.ledger.cumulative_bits,
        "cumulative_nnz_full": run.ledger_full.cumulative_nonzero if run.ledger_full else None,
        "cumulative_bits_full": run.ledger_full.cumulative_bits if run.ledger_full else None,
        "final_test_acc": accs[-1] if accs else None,
        "final_train_loss": losses[-1] if losses else None,
        "metering": {"bin": run.ledger.bin, "pooling": run.ledger.pooling,
                     "channels": list(run.ledger.channels)},
        "diagnostics": result.verdicts,
        "config": cfg.semantic_dict(),
    }
    return out


def preflight(out_dir) -> Path:
    """Create ``out_dir`` and prove it is writable before any compute starts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_text("ok")
    probe.unlink()
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """``manifest.json``: written when a run starts and finalised when it ends."""

    def __init__(self, out_dir: Path, config_path, config_text: str, seed: int):
        self.path = Path(out_dir) / FILES["manifest"]
        self.data = {
            "code_version": __version__,
            "config_path": str(config_path) if config_path else None,
            "config_sha256": _sha256(Path(config_path)) if config_path else None,
            "effective_config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
            "seed": seed,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": {},
        }
        self._write()

    def _write(self):
        self.path.write_text(dumps(self.data))

    def finish(self, status: str, files=(), runtime: float | None = None, error: dict | None = None):
        self.data["finished"] = _now()
        self.data["status"] = status
        self.data["runtime_seconds"] = runtime
        if error is not None:
            self.data["error"] = error
        for f in files:
            f = Path(f)
            self.data["outputs"][f.name] = {"sha256": _sha256(f), "bytes": f.stat().st_size}
        self._write()


def emit_report(result, out_dir) -> list[Path]:
    """Write the run's data files into ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    written = []

    def put(key, text):
        p = out / FILES[key]
        p.write_text(text)
        written.append(p)

    put("config", yaml.safe_dump(result.config.semantic_dict(), sort_keys=False))
    put("rounds", rounds_csv(result.records))
    put("histogram", histogram_csv(result.run.ledger.histogram, result.run.ledger.bin))
    if result.trace is not None:
        put("diagnostics", diagnostics_csv(result.trace))
    put("summary", dumps(summary(result)))
    return written


def compare(summaries: list[dict]) -> dict:
    """Joint report of several runs; ratios are relative to the first (baseline)."""
    base = summaries[0]
    rows = []
    for s in summaries:
        row = {k: s.get(k) for k in ("name", "variant", "rounds", "cumulative_nnz",
                                     "cumulative_bits", "cumulative_bits_full", "final_test_acc")}

        def ratio(key, s=s):
            a, b = base.get(key), s.get(key)
            return a / b if a is not None and b not in (None, 0) else None

        row["nnz_ratio_baseline_over_this"] = ratio("cumulative_nnz")
        row["bits_ratio_baseline_over_this"] = ratio("cumulative_bits")
        if base.get("final_test_acc") is not None and s.get("final_test_acc") is not None:
            row["acc_diff_vs_baseline"] = s["final_test_acc"] - base["final_test_acc"]
        rows.append(row)
    return {"baseline": base.get("name"), "runs": rows}
