"""Command-line pipeline: simulate | decode | track | estimate | report.

Every stage reads and writes the JSONL capture format, so stages compose
across processes. Exit codes: 0 success, 2 input error, 3 schema error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from . import capture as capture_io
from . import report as report_mod
from .capture import CaptureError, SchemaMismatch
from .fingerprint import ModelTable
from .simulator import ConfigInvalid, ScenarioConfig, SimulationError, run_scenario
from .tracker import (
    EPSILON_T_DEFAULT,
    TARGETED_U,
    UNTARGETED_U,
    annotate_leaks,
    detect_global_mac_leak,
    fit_trajectory,
    icloud_cluster,
    ingest,
    prediction_window,
    window_from_width,
    DegenerateFit,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SCHEMA = 3


def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w"), True


def _read_records(path: str) -> list:
    return list(capture_io.read_capture(path))


def cmd_decode(args) -> int:
    records = _read_records(args.capture)
    out, close = _open_out(args.out)
    try:
        for record in records:
            out.write(json.dumps(capture_io.summarize(record), sort_keys=True))
            out.write("\n")
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = ScenarioConfig.load(args.scenario)
    if args.seed is not None:
        config.seed = args.seed
    records, truth = run_scenario(config)
    n = capture_io.write_capture(records, args.out)
    if args.truth:
        with open(args.truth, "w") as f:
            f.write(truth.to_jsonl())
    print(f"wrote {n} records to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_track(args) -> int:
    records = _read_records(args.capture)
    observations = list(capture_io.to_observations(records))
    result = ingest(observations, epsilon_t=args.epsilon)
    leaks = detect_global_mac_leak(observations)
    annotate_leaks(result.tracks, leaks)
    clusters = icloud_cluster(result.tracks)

    out, close = _open_out(args.out)
    try:
        for track in result.tracks:
            summary = report_mod.track_summary(track)
            summary["window"] = _window_for(track, args)
            out.write(json.dumps(summary, sort_keys=True))
            out.write("\n")
        for ts, old, new, rule in result.links:
            out.write(json.dumps({"kind": "link", "ts": ts, "old": str(old),
                                  "new": str(new), "rule": rule}, sort_keys=True))
            out.write("\n")
        for ts, addr, rule in result.ambiguous_events:
            out.write(json.dumps({"kind": "ambiguous", "ts": ts, "addr": str(addr),
                                  "rule": rule}, sort_keys=True))
            out.write("\n")
        for leak in leaks:
            out.write(json.dumps(report_mod.leak_summary(leak), sort_keys=True))
            out.write("\n")
        out.write(json.dumps({"kind": "clusters",
                              "clusters": sorted(sorted(c) for c in clusters)},
                             sort_keys=True))
        out.write("\n")
    finally:
        if close:
            out.close()
    return EXIT_OK


def _window_for(track, args) -> dict | None:
    if not track.seq_samples:
        return None
    t_end = track.last_seen
    last_seq = track.seq_samples[-1][1]
    if args.window_mode == "untargeted":
        window = window_from_width(last_seq, args.u or UNTARGETED_U)
        basis = "untargeted-default"
    else:
        try:
            model = fit_trajectory(track.seq_samples)
            window = prediction_window(model, t_end, confidence=0.9)
            basis = "fitted"
        except DegenerateFit:
            window = window_from_width(last_seq, args.u or TARGETED_U)
            basis = "targeted-default"
    return {"center": window.center, "width_u": window.width_u,
            "interval": list(window.interval), "basis": basis}


def cmd_estimate(args) -> int:
    table = ModelTable.load(args.bins) if args.bins else None
    n_range = _parse_n_range(args.n)
    if args.u is not None:
        share = args.share if args.share is not None else 1.0
        rows = report_mod.estimate_table([("custom", share)], args.u, n_range,
                                         scenario="custom")
    else:
        rows = report_mod.scenario_estimates(n_range, table)
    out, close = _open_out(args.out)
    try:
        writer = csv.writer(out)
        writer.writerow(["scenario", "u", "bin_share", "n", "accuracy"])
        for row in rows:
            writer.writerow([row.scenario, row.u, f"{row.bin_share:.6f}", row.n,
                             f"{row.accuracy:.6f}"])
    finally:
        if close:
            out.close()
    return EXIT_OK


def _parse_n_range(text: str) -> list[int]:
    values = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            pieces = [int(x) for x in part.split(":")]
            start, stop = pieces[0], pieces[1]
            step = pieces[2] if len(pieces) > 2 else 1
            values.extend(range(start, stop, step))
        elif part:
            values.append(int(part))
    if not values:
        raise ValueError(f"empty n range {text!r}")
    return values


def cmd_report(args) -> int:
    records = _read_records(args.capture)
    observations = list(capture_io.to_observations(records))
    result = ingest(observations, epsilon_t=args.epsilon)
    leaks = detect_global_mac_leak(observations)
    annotate_leaks(result.tracks, leaks)
    clusters = icloud_cluster(result.tracks)
    table = ModelTable.load(args.bins) if args.bins else None
    manifest = report_mod.write_report_bundle(
        args.out_dir, result, leaks, clusters, observations,
        hist_bins=args.hist_bins, figures=not args.no_figures, table=table)
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bletrack",
        description="Decode, fingerprint, and track Continuity traffic; "
                    "simulate ground-truth scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="decode a capture to per-record summaries")
    p.add_argument("capture")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("simulate", help="run a scenario config into a capture")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default="capture.jsonl")
    p.add_argument("--truth", default=None, help="ground-truth sidecar path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("track", help="link identities across address rotations")
    p.add_argument("capture")
    p.add_argument("--epsilon", type=float, default=EPSILON_T_DEFAULT,
                   help="max silent gap for rotation linking (seconds)")
    p.add_argument("--window-mode", choices=["targeted", "untargeted"],
                   default="targeted")
    p.add_argument("--u", type=int, default=None,
                   help="override default window width")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("estimate", help="re-identification accuracy table")
    p.add_argument("--u", type=int, default=None,
                   help="fixed window width (default: the standard scenarios)")
    p.add_argument("--share", type=float, default=None,
                   help="bin share to pair with --u")
    p.add_argument("--bins", default=None, help="model/population table JSON")
    p.add_argument("--n", default="0,1,2,5,10,20,50,100,200,500",
                   help="crowd sizes, comma list and start:stop:step ranges")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("report", help="full report bundle with figures")
    p.add_argument("capture")
    p.add_argument("--out-dir", default="report")
    p.add_argument("--epsilon", type=float, default=EPSILON_T_DEFAULT)
    p.add_argument("--hist-bins", type=int, default=64)
    p.add_argument("--bins", default=None, help="model/population table JSON")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SchemaMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (CaptureError, ConfigInvalid, SimulationError, FileNotFoundError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
