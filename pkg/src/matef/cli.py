"""Command-line entry point.

Exit codes: 0 success, 1 bad input data, 2 configuration error, 3 store error,
4 backend error, 5 analysis error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import shutil
import sys
from pathlib import Path

from . import __version__
from .artefacts import TypeCombo
from .config import ExperimentManifest, load_manifest
from .dataset import build_dataset, load_dataset, save_dataset
from .errors import AnalysisError, ConfigError, MatefError, OracleError
from .library import ingest_directory, select_sample
from .oracle import ingest_report, parse_report_csv
from .orchestrator import TestRunSpec, load_group, run_group
from .sandbox import HypervisorBackend, SimulatedBackend
from .stats.analysis import (
    PLAN_HEADER,
    RESULT_HEADER,
    AnalysisSpec,
    DatasetRef,
    h1_plan,
    h2_plan,
    plan_rows,
    run_analysis,
    to_csv,
    to_text,
)
from .store import STORE_ENV, open_store
from .synth import write_corpus

log = logging.getLogger("matef")


def _store_path(args, manifest: ExperimentManifest | None = None):
    if args.store:
        return args.store
    if manifest is not None and manifest.raw.get("store"):
        p = Path(manifest.raw["store"])
        return p if p.is_absolute() else manifest.source_path.parent / p
    return None


def _manifest(args) -> ExperimentManifest:
    if not args.manifest:
        raise ConfigError("--manifest is required for this command")
    m = load_manifest(args.manifest, seed=args.seed)
    m.register_adapters()
    return m


def cmd_synth(args) -> int:
    m = _manifest(args)
    count = args.count or m.synthetic_count
    if count <= 0:
        raise ConfigError("synthetic corpus size must be positive (--count or synthetic.count)")
    out = Path(args.dir)
    summary = write_corpus(out, count, m.seed, m.model, m.oracle_source, m.sample_tag)
    print(f"wrote {summary['binaries']} binaries to {out / 'binaries'} and {summary['reports']} reports to {out / 'oracle'}")
    return 0


def cmd_ingest(args) -> int:
    with open_store(_optional_store_path(args)) as store:
        summary = ingest_directory(store, Path(args.dir), args.sidecar and Path(args.sidecar),
                                   args.source, args.tag or ())
        tags: dict[str, int] = {}
        for s in store.list_samples():
            for t in s.capability_tags:
                tags[t] = tags.get(t, 0) + 1
    print(f"ingested {summary['ingested']} new, {summary['duplicates']} duplicates, "
          f"{summary['skipped_empty']} empty")
    for tag, n in sorted(tags.items()):
        print(f"  {tag}: {n}")
    return 0


def cmd_oracle_import(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise MatefError(f"no such report file or directory: {path}")
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
    stored, bad = 0, []
    with open_store(_optional_store_path(args)) as store:
        for f in files:
            try:
                if f.suffix.lower() == ".csv":
                    for report in parse_report_csv(f.read_text(), args.source, strict=args.strict):
                        store.put_report(report)
                        stored += 1
                else:
                    ingest_report(store, f.read_bytes(), strict=args.strict)
                    stored += 1
            except OracleError as exc:
                if args.strict:
                    print(f"{f}: {exc}", file=sys.stderr)
                    raise
                bad.append((f, exc))
    print(f"stored {stored} oracle reports")
    for f, exc in bad:
        print(f"  malformed: {f}: {exc}")
    return 0


def _optional_store_path(args):
    """Store for commands where the manifest only supplies the store location."""
    return _store_path(args, load_manifest(args.manifest) if args.manifest and not args.store else None)


def _backend(m: ExperimentManifest):
    if m.backend == "simulated":
        return SimulatedBackend(m.model)
    backend = HypervisorBackend()
    backend.provision(0)  # raises until a real driver exists; fail before any test record is written
    return backend


def _write_provenance(m: ExperimentManifest, command: str, extra: dict) -> None:
    out = m.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if m.source_path is not None and m.source_path.resolve() != (out / "manifest.yaml").resolve():
        shutil.copyfile(m.source_path, out / "manifest.yaml")
    record = {
        "command": command,
        "matef_version": __version__,
        "python": platform.python_version(),
        "seed": m.seed,
        **extra,
    }
    (out / f"provenance-{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    m = _manifest(args)
    backend = _backend(m)
    groups = []
    with open_store(_store_path(args, m)) as store:
        if m.sample_hashes:
            hashes = list(m.sample_hashes)
        else:
            hashes = select_sample(store, m.sample_tag, m.sample_count, m.seed)
        first_test: int | None = None
        for tool in m.tool_ids:
            for duration in m.durations_s:
                spec = TestRunSpec(tool, duration, m.guest_count, m.stagger_s, m.seed, m.runs_per_group, m.workers)
                group = run_group(spec, hashes, backend, store, lineage=first_test)
                if first_test is None:
                    first_test = group.run_ids[0]
                groups.append({
                    "tool_id": tool,
                    "duration_s": duration,
                    "group_id": group.group_id,
                    "run_ids": list(group.run_ids),
                    "dataset_id": m.dataset_id(tool, duration),
                })
                print(f"group {group.group_id}: {tool} {duration:g}s runs {list(group.run_ids)}")
    _write_provenance(m, "run", {"groups": groups, "sample_size": len(hashes)})
    (m.output_dir / "experiment.json").write_text(json.dumps({"name": m.name, "groups": groups}, indent=2) + "\n")
    return 0


def _latest_groups(store, m: ExperimentManifest) -> dict[tuple[str, float], int]:
    found = {}
    for g in store.list_groups():
        key = (g["tool_id"], float(g["duration_s"]))
        if g["tool_id"] in m.tool_ids and len(g["run_ids"]) == 3:
            found[key] = g["group_id"]
    return found


def cmd_build_dataset(args) -> int:
    m = _manifest(args)
    combo = TypeCombo.parse(args.combo) if args.combo else m.combo
    out = m.output_dir / "datasets"
    with open_store(_store_path(args, m)) as store:
        groups = _latest_groups(store, m)
        for tool in m.tool_ids:
            for duration in m.durations_s:
                gid = groups.get((tool, float(duration)))
                if gid is None:
                    raise MatefError(f"no completed test run group for {tool} at {duration:g}s; run 'matef run' first")
                ds = build_dataset(store, load_group(store, gid), combo, m.oracle_source,
                                   m.dataset_id(tool, duration), m.all_types_repeatability)
                save_dataset(store, ds)
                ds.write(out)
                print(f"{ds.dataset_id}: {tool} {duration:g}s {combo.name} -> {len(ds.rows)} repeatable rows"
                      + (f" ({ds.dropped_unknown} unknown to oracle)" if ds.dropped_unknown else ""))
    return 0


def _analysis_specs(m: ExperimentManifest, store) -> list[AnalysisSpec]:
    specs = []
    for i, raw in enumerate(m.analyses, start=1):
        try:
            specs.append(AnalysisSpec(
                hypothesis=raw["hypothesis"],
                dataset_a_id=raw["dataset_a"],
                dataset_b_id=raw["dataset_b"],
                alpha=float(raw.get("alpha", m.alpha)),
                outlier_method=raw.get("outlier_method", m.outlier_method),
                test=str(raw.get("test", f"X.{i}")),
                description=raw.get("description", f"{raw['dataset_a']} vs {raw['dataset_b']}"),
                zero_method=raw.get("zero_method", m.zero_method),
                continuity=bool(raw.get("continuity", m.continuity)),
            ))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"analysis spec {i}: {exc}") from exc
    if m.analysis_auto:
        refs = [DatasetRef(m.dataset_id(t, d), t, float(d)) for t in m.tool_ids for d in m.durations_s]
        auto = h1_plan(refs, m.tool_ids, m.h1_reference_s, m.alpha, m.outlier_method)
        auto += h2_plan(refs, m.tool_ids, m.alpha, m.outlier_method)
        specs += [
            AnalysisSpec(**{**s.__dict__, "zero_method": m.zero_method, "continuity": m.continuity}) for s in auto
        ]
    missing = sorted({d for s in specs for d in (s.dataset_a_id, s.dataset_b_id)} - set(store.list_datasets()))
    if missing:
        raise AnalysisError(f"missing datasets: {', '.join(missing)}; run 'matef build-dataset' first")
    return specs


def _write_table(directory: Path, stem: str, rows, header) -> None:
    (directory / f"{stem}.csv").write_text(to_csv(rows, header))
    (directory / f"{stem}.txt").write_text(to_text(rows, header))


def cmd_analyze(args) -> int:
    m = _manifest(args)
    out = m.output_dir / "reports"
    failures = []
    with open_store(_store_path(args, m)) as store:
        specs = _analysis_specs(m, store)
        if not specs:
            print("no analyses configured")
            return 0
        out.mkdir(parents=True, exist_ok=True)
        tool_of = {d: load_dataset(store, d).tool_id for s in specs for d in (s.dataset_a_id, s.dataset_b_id)}
        outcomes = []
        for spec in specs:
            try:
                outcomes.append(run_analysis(spec, store))
            except AnalysisError as exc:
                failures.append(f"{spec.test}: {exc}")
    tables: dict[str, list] = {}
    for o in outcomes:
        if o.spec.hypothesis == "H1":
            tables.setdefault(f"H1_{tool_of[o.spec.dataset_a_id]}", []).append(o)
        else:
            tables.setdefault("H2", []).append(o)
    for name, group in tables.items():
        _write_table(out, f"plan_{name}", plan_rows(group), PLAN_HEADER)
        _write_table(out, f"results_{name}", [o.row() for o in group], RESULT_HEADER)
    normality = []
    for o in outcomes:
        for side, checks in o.normality.items():
            for method, res in checks.items():
                normality.append({
                    "Test": o.spec.test,
                    "Side": side,
                    "Method": method,
                    "Statistic": "NaN" if res is None else f"{res.statistic:.4f}",
                    "p": "NaN" if res is None else f"{res.p:.4f}",
                    "n": "0" if res is None else str(res.n),
                })
    _write_table(out, "normality", normality, ["Test", "Side", "Method", "Statistic", "p", "n"])
    all_rows = [o.row() for o in outcomes]
    _write_table(out, "results_all", all_rows, RESULT_HEADER)
    print(to_text(all_rows, RESULT_HEADER), end="")
    _write_provenance(m, "analyze", {"analyses": [o.provenance for o in outcomes], "failures": failures})
    if failures:
        for f in failures:
            print(f"analysis failed: {f}", file=sys.stderr)
        return AnalysisError.exit_code
    return 0


def cmd_report(args) -> int:
    with open_store(_optional_store_path(args), readonly=True) as store:
        rows = store.list_results()
        if args.datasets:
            for ds_id in store.list_datasets():
                ds = load_dataset(store, ds_id)
                print(f"{ds_id}: {ds.tool_id} {ds.duration_s:g}s {ds.combo.name} rows={len(ds.rows)}")
    if not rows:
        print("no stored results")
        return 0
    print(to_text(rows, RESULT_HEADER), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matef", description="Malware analysis tool evaluation harness")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store", help=f"store file or directory (default: ${STORE_ENV} or ./matef.sqlite)")
    common.add_argument("--manifest", help="experiment manifest (YAML)")
    common.add_argument("--seed", type=int, help="override the manifest seed (u64)")
    common.add_argument("--strict", action="store_true", help="fail on the first malformed input")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="ingest a directory of binaries")
    p.add_argument("dir")
    p.add_argument("--sidecar", help="CSV: filename,source_tag,capability tags")
    p.add_argument("--source", default="directory")
    p.add_argument("--tag", action="append", help="capability tag for files without sidecar metadata")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("oracle-import", parents=[common], help="import oracle reports (XML or CSV)")
    p.add_argument("path", help="report file or directory of reports")
    p.add_argument("--source", default="csv-oracle", help="source id for CSV reports")
    p.set_defaults(func=cmd_oracle_import)

    p = sub.add_parser("run", parents=[common], help="execute every (tool, duration) test run group")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("build-dataset", parents=[common], help="filter groups for repeatability and emit datasets")
    p.add_argument("--combo", help="type combination, e.g. PortOnly or File+Mutex")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("analyze", parents=[common], help="run H1/H2 analyses and write result tables")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", parents=[common], help="print stored result rows")
    p.add_argument("--datasets", action="store_true", help="also list stored datasets")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic corpus and oracle reports")
    p.add_argument("dir")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MatefError as exc:
        print(f"matef: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
