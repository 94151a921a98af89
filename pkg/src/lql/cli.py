"""Command line entry point: ``lql <command> --config <path> --out <dir>``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ExperimentConfig, load_config
from .empirical import ProbeDisk, sample_empirical, write_samples_jsonl
from .errors import ConfigurationError, EmptyRenewalError, LqlError
from .field import save_field
from .metric import write_paths_jsonl
from .pipeline import admissible_length, build_field, build_replicate, ensemble, pmap
from .renewal import write_decomposition
from .stats import DiagnosticEntry, DiagnosticReport, pooled_autocorrelation

log = logging.getLogger("lql")

EXIT_OK, EXIT_ATTENTION, EXIT_CONFIG, EXIT_EMPTY = 0, 1, 2, 3
STAGES = ("sample", "geodesic", "decompose", "empirical", "diagnose")


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------- per-replicate work
class _Stage:
    """Picklable replicate job writing only its own files; returns a manifest row."""

    def __init__(self, cfg: ExperimentConfig, stage: str, out: Path):
        self.cfg, self.stage, self.out = cfg, stage, out

    def __call__(self, r: int) -> dict:
        cfg, out = self.cfg, self.out
        row = {"index": r, "seed": cfg.seed(r), "status": "ok", "error": "", "files": []}
        try:
            if self.stage == "sample":
                p = out / "fields" / f"field_{r:04d}.lqgf"
                save_field(build_field(cfg, cfg.seed(r)), p)
                row["files"].append(p)
                return row
            rep = build_replicate(cfg, r)
            if self.stage == "geodesic":
                p = out / "geodesic" / f"coalescence_{r:04d}.json"
                recs = [
                    {
                        "scale": rec.scale,
                        "occurred": rec.occurred,
                        "point": None if rec.point is None else [rec.point[1] - rep.field.grid.origin, rec.point[0] - rep.field.grid.origin],
                        "normalized_clearance": rec.normalized_clearance,
                        "note": rec.note,
                    }
                    for rec in rep.records
                ]
                p.write_text(json.dumps(recs, indent=1) + "\n")
                row["files"].append(p)
            if rep.decomposition is None:
                row.update(status="empty_renewal", error=rep.error)
                return row
            if self.stage == "geodesic":
                p = out / "geodesic" / f"path_{r:04d}.jsonl"
                write_paths_jsonl(p, rep.metric, [rep.trace.path])
                row["files"].append(p)
            elif self.stage == "decompose":
                p = out / "decompose" / f"decomposition_{r:04d}.csv"
                write_decomposition(p, rep.decomposition, rep.field.grid, {"rho": cfg.rho, "n_probe": cfg.n_probe, "seed": row["seed"]})
                row["files"] += [p, Path(str(p) + ".json")]
            elif self.stage == "empirical":
                path = rep.trace.path
                disk = ProbeDisk(cfg.mesh_resolution, cfg.delta)
                t_max = math.log(admissible_length(rep.metric, path, cfg.delta))
                ts = cfg.t_values or (t_max,)
                samples = []
                for a, t in enumerate(ts):
                    for b in range(cfg.n_empirical):
                        seed = (row["seed"] + 1000 * a + b) & 0xFFFF_FFFF_FFFF_FFFF
                        samples.append(sample_empirical(rep.metric, path, t, seed, disk, with_metric=True))
                p = out / "empirical" / f"samples_{r:04d}.jsonl"
                write_samples_jsonl(p, samples)
                row["files"].append(p)
        except EmptyRenewalError as exc:
            row.update(status="empty_renewal", error=str(exc))
        except LqlError as exc:
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row


def _write_manifest(out: Path, cfg: ExperimentConfig, stage: str, rows: list, extra_files=()) -> None:
    files = [Path(f) for row in rows for f in row.pop("files", [])] + [Path(f) for f in extra_files]
    manifest = {
        "command": stage,
        "config": cfg.dumps(),
        "replicates": rows,
        "files": [{"path": str(f.relative_to(out)), "sha256": sha256(f)} for f in files],
    }
    (out / f"manifest_{stage}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def run_stage(cfg: ExperimentConfig, stage: str, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if stage == "diagnose":
        return run_diagnose(cfg, out)
    (out / {"sample": "fields"}.get(stage, stage)).mkdir(exist_ok=True)
    rows = pmap(_Stage(cfg, stage, out), range(cfg.n_replicates))
    _write_manifest(out, cfg, stage, rows)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.warning("replicate %d: %s (%s)", r["index"], r["status"], r["error"])
    if stage != "sample" and all(r["status"] == "empty_renewal" for r in rows):
        return EXIT_EMPTY
    return EXIT_OK


# -------------------------------------------------------------------- diagnose
def _scaled(cfg: ExperimentConfig, n: int, floor: int = 2) -> int:
    return max(int(round(n * cfg.diagnose_scale)), floor)


def _not_computed(num: int, fn, exc) -> DiagnosticEntry:
    name = f"c{num:02d}_{fn.__name__.removeprefix('criterion_')}"
    return DiagnosticEntry(name, math.nan, math.nan, "le", note=f"not computed: {type(exc).__name__}: {exc}")


def run_diagnose(cfg: ExperimentConfig, out: Path) -> int:
    report = DiagnosticReport()
    s = cfg.base_seed
    standalone = [
        lambda: ex.criterion_oracle(_scaled(cfg, 20), seed=s + 1),
        lambda: ex.criterion_weyl(_scaled(cfg, 100), seed=s + 2),
        lambda: ex.criterion_renewal(_scaled(cfg, 50), seed=s + 3),
        lambda: ex.criterion_cameron_martin(_scaled(cfg, 100_000, 100), seed=s + 4),
        lambda: ex.criterion_brownian(_scaled(cfg, 2000, 20), seed=s + 5),
        lambda: ex.criterion_coalescence(_scaled(cfg, 200), seed=s + 6, rho=cfg.rho, n_probe=cfg.n_probe),
        lambda: ex.criterion_geodesic_shortcut(_scaled(cfg, 10, 1), seed=s + 9, epsilons=cfg.shortcut_epsilons),
        lambda: ex.criterion_typical_shortcut(_scaled(cfg, 200), seed=s + 10, epsilons=cfg.shortcut_epsilons),
    ]
    for job in standalone:
        for e in job():
            report.add(e)
            log.info("%s = %s (%s)", e.name, e.value, "pass" if e.passed else "FAIL")

    view = ex.EnsembleView(ensemble(cfg))
    data = {"coalescence_fraction": {}, "autocorrelation": None, "ks": []}
    if view.decomposed:
        for num, fn in ex.ENSEMBLE_CRITERIA.items():
            try:
                entries = fn(view, cfg)
            except LqlError as exc:
                log.warning("%s not computed: %s", fn.__name__, exc)
                entries = [_not_computed(num, fn, exc)]
            for e in entries:
                report.add(e)
        g = view.stack("G")
        seqs = [row[np.isfinite(row)] for row in g]
        lag = max(len(q) for q in seqs) - 1
        if lag >= 1:
            ac = pooled_autocorrelation(seqs, lag)
            data["autocorrelation"] = {"lag": ac.lags.tolist(), "rho": ac.rho.tolist(), "se": ac.se.tolist()}
    else:
        log.warning("no replicate produced a renewal decomposition")
        exc = EmptyRenewalError("no replicate produced a renewal decomposition")
        for num, fn in ex.ENSEMBLE_CRITERIA.items():
            report.add(_not_computed(num, fn, exc))
    for e in ex.coalescence_fraction(view, cfg):
        report.add(e)
        data["coalescence_fraction"][repr(cfg.K)] = [e.value, e.ci_lo, e.ci_hi]
    for e in report.entries:
        if e.name.startswith("c06_p_coalescence_K16"):
            data["coalescence_fraction"]["16.0"] = [e.value, e.ci_lo, e.ci_hi]
        if "ks" in e.name:
            data["ks"].append({"name": e.name, "value": e.value, "note": e.note})
    report.dump(out / "diagnostics.json")
    (out / "diagnostics_data.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    rows = [{"index": x.index, "seed": x.seed, "status": "ok" if not x.error else "partial", "error": x.error} for x in view.summaries]
    _write_manifest(out, cfg, "diagnose", rows, [out / "diagnostics.json", out / "diagnostics_data.json"])
    return EXIT_OK


# ---------------------------------------------------------------------- report
def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def run_report(out: Path, stream=None) -> int:
    stream = stream or sys.stdout
    diag = out / "diagnostics.json"
    if not diag.exists():
        raise ConfigurationError(f"missing stage 'diagnose': {diag} not found")
    report = DiagnosticReport.load(diag)
    rep_dir = out / "report"
    rep_dir.mkdir(exist_ok=True)
    header = ["name", "value", "ci_lo", "ci_hi", "tolerance", "rule", "pass", "n"]
    stream.write(" | ".join(header) + "\n")
    with open(rep_dir / "entries.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header + ["note"])
        for e in report.entries:
            row = [e.name, e.value, e.ci_lo, e.ci_hi, e.tolerance, e.rule, e.passed, e.n]
            stream.write(" | ".join(_fmt(v) for v in row) + "\n")
            w.writerow(row + [e.note])
    data_path = out / "diagnostics_data.json"
    if data_path.exists():
        data = json.loads(data_path.read_text())
        ac = data.get("autocorrelation")
        if ac:
            with open(rep_dir / "autocorrelation.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lag", "rho", "se"])
                w.writerows(zip(ac["lag"], ac["rho"], ac["se"]))
        with open(rep_dir / "ks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "value", "note"])
            w.writerows([k["name"], k["value"], k["note"]] for k in data.get("ks", []))
        with open(rep_dir / "coalescence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "fraction", "ci_lo", "ci_hi"])
            for k, v in sorted(data.get("coalescence_fraction", {}).items(), key=lambda kv: float(kv[0])):
                w.writerow([k, *v])
    failed = [e.name for e in report.entries if not e.passed]
    stream.write(f"{len(report.entries) - len(failed)}/{len(report.entries)} entries pass\n")
    return EXIT_ATTENTION if failed else EXIT_OK


# ------------------------------------------------------------------------ main
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lql", description="Lattice LQG geodesic experiments")
    p.add_argument("command", choices=STAGES + ("report",))
    p.add_argument("--config", type=Path, help="flat key = value config file (not needed for report)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--replicates", type=int, default=None, help="override n_replicates")
    p.add_argument("--seed", type=int, default=None, help="override base_seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return run_report(args.out)
        if args.config is None:
            raise ConfigurationError("--config is required for this command")
        cfg = load_config(args.config).with_overrides(n_replicates=args.replicates, base_seed=args.seed)
        return run_stage(cfg, args.command, args.out)
    except ConfigurationError as exc:
        print(f"lql: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
