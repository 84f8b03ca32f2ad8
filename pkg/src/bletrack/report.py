"""Report generation: track summaries, estimates, histograms, and figures.

Reports are machine-readable first (JSONL + CSV); the same data is also
rendered to PNG figures so a capture can be eyeballed without extra tooling.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy import stats as _stats

from .codec import Handoff
from .fingerprint import ModelTable, default_model_table
from .tracker import (
    SEQ_SPACE,
    TARGETED_U,
    UNTARGETED_U,
    BinKey,
    DeviceTrack,
    IngestResult,
    LeakReport,
    collision_probability,
)


class EmptyInput(Exception):
    pass


# ---------------------------------------------------------------------------
# Sequence-number histogram
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistogramReport:
    bin_count: int
    counts: tuple[int, ...]
    total: int
    chi2: float
    p_value: float

    @property
    def uniform_rejected_at_5pct(self) -> bool:
        return self.p_value < 0.05


def histogram_report(observations, bin_count: int = 64) -> HistogramReport:
    """Bin deduplicated Handoff counters and test them for uniformity.

    Redundant measurements are removed the blunt way: one sequence number per
    source address, the first seen. Raises EmptyInput when the capture holds
    no Handoff traffic at all.
    """
    first_per_mac: dict = {}
    for obs in observations:
        if obs.address in first_per_mac:
            continue
        msg = obs.first(Handoff)
        if msg is not None:
            first_per_mac[obs.address] = msg.sequence_number
    if not first_per_mac:
        raise EmptyInput("capture contains no Handoff messages")
    values = np.fromiter(first_per_mac.values(), dtype=float)
    counts, _ = np.histogram(values, bins=bin_count, range=(0, SEQ_SPACE))
    chi2, p_value = _stats.chisquare(counts)
    return HistogramReport(bin_count=bin_count, counts=tuple(int(c) for c in counts),
                           total=int(counts.sum()), chi2=float(chi2),
                           p_value=float(p_value))


# ---------------------------------------------------------------------------
# Re-identification estimates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimateRow:
    scenario: str
    u: int
    bin_share: float
    n: int
    accuracy: float


def estimate_table(bins: list[tuple[BinKey | str, float]], u: int,
                   n_range: list[int], scenario: str = "custom") -> list[EstimateRow]:
    """Accuracy of unique re-identification across crowd sizes.

    For each bin, only the share of the crowd that falls in the same bin can
    collide, so the expected accuracy at crowd size n is the collision
    formula evaluated at n * share.
    """
    rows = []
    for key, share in bins:
        if not 0.0 <= share <= 1.0:
            raise ValueError(f"bin share {share} outside [0, 1]")
        label = key if isinstance(key, str) else repr(key)
        for n in n_range:
            accuracy = collision_probability(u, 0) if n == 0 else \
                (1.0 - u / SEQ_SPACE) ** (n * share)
            rows.append(EstimateRow(scenario=scenario, u=u, bin_share=share,
                                    n=n, accuracy=accuracy))
    return rows


def default_scenarios(table: ModelTable | None = None) -> list[tuple[str, int, float]]:
    """The three canonical attack settings: (label, u, in-bin share)."""
    table = table or default_model_table()
    ios12_share = table.os_shares.get("ios12", 1.0)
    largest_model = max((m.population_share for m in table.models.values()
                         if m.family == "iphone"), default=1.0)
    return [
        ("active-model-bin", TARGETED_U, largest_model * ios12_share),
        ("passive-os-bin", UNTARGETED_U, ios12_share),
        ("no-binning", UNTARGETED_U, 1.0),
    ]


def scenario_estimates(n_range: list[int],
                       table: ModelTable | None = None) -> list[EstimateRow]:
    rows = []
    for label, u, share in default_scenarios(table):
        rows.extend(estimate_table([(label, share)], u, n_range, scenario=label))
    return rows


def write_estimates_csv(rows: list[EstimateRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scenario", "u", "bin_share", "n", "accuracy"])
        for row in rows:
            writer.writerow([row.scenario, row.u, f"{row.bin_share:.6f}",
                             row.n, f"{row.accuracy:.6f}"])


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def render_histogram_figure(hist: HistogramReport, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    width = SEQ_SPACE / hist.bin_count
    lefts = np.arange(hist.bin_count) * width
    ax.bar(lefts, hist.counts, width=width * 0.95, align="edge", color="#3465a4")
    ax.set_xlabel("sequence number")
    ax.set_ylabel("deduplicated observations")
    ax.set_title(f"Handoff sequence numbers (n={hist.total}, "
                 f"chi2 p={hist.p_value:.3f})")
    ax.set_xlim(0, SEQ_SPACE)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_accuracy_figure(rows: list[EstimateRow], path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    by_scenario: dict[str, list[EstimateRow]] = {}
    for row in rows:
        by_scenario.setdefault(row.scenario, []).append(row)
    for scenario, group in by_scenario.items():
        group = sorted(group, key=lambda r: r.n)
        ax.plot([r.n for r in group], [r.accuracy for r in group],
                marker="o", markersize=3, label=f"{scenario} (u={group[0].u})")
    ax.set_xlabel("devices observed")
    ax.set_ylabel("unique re-identification probability")
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

def track_summary(track: DeviceTrack) -> dict:
    return {
        "kind": "track",
        "track_id": track.track_id,
        "addresses": [str(iv.address) for iv in track.mac_history],
        "first_seen": track.mac_history[0].first_seen,
        "last_seen": track.last_seen,
        "n_seq_samples": len(track.seq_samples),
        "last_seq": track.seq_samples[-1][1] if track.seq_samples else None,
        "bin": {"device_class": track.bin.device_class.value,
                "os_major": track.bin.os_major.value,
                "model": track.bin.model},
        "link_rules": track.link_rules,
        "linked_public_mac": str(track.linked_public_mac)
        if track.linked_public_mac else None,
    }


def leak_summary(report: LeakReport) -> dict:
    return {
        "kind": "leak",
        "public_mac": str(report.public_mac),
        "rpa": str(report.rpa),
        "matched_status": report.matched_status.hex(),
        "evidence": list(report.evidence),
        "wifi_mac_candidates": [str(m) for m in report.wifi_mac_candidates],
    }


def write_report_bundle(out_dir: str, ingest_result: IngestResult,
                        leaks: list[LeakReport], clusters: list[frozenset[int]],
                        observations: list, hist_bins: int = 64,
                        n_range: list[int] | None = None,
                        figures: bool = True,
                        table: ModelTable | None = None) -> dict:
    """Write report.jsonl, estimates.csv, and figures into a directory.

    Returns a small manifest of what was produced.
    """
    os.makedirs(out_dir, exist_ok=True)
    n_range = n_range or [0, 1, 2, 5, 10, 20, 50, 100, 200, 500]
    lines: list[dict] = []
    for track in ingest_result.tracks:
        lines.append(track_summary(track))
    for ts, old, new, rule in ingest_result.links:
        lines.append({"kind": "link", "ts": ts, "old": str(old), "new": str(new),
                      "rule": rule})
    for ts, addr, rule in ingest_result.ambiguous_events:
        lines.append({"kind": "ambiguous", "ts": ts, "addr": str(addr), "rule": rule})
    for leak in leaks:
        lines.append(leak_summary(leak))
    track_clusters = [sorted(members) for members in clusters]
    lines.append({"kind": "clusters", "clusters": sorted(track_clusters)})

    hist = None
    try:
        hist = histogram_report(observations, bin_count=hist_bins)
        lines.append({"kind": "histogram", "bin_count": hist.bin_count,
                      "counts": list(hist.counts), "total": hist.total,
                      "chi2": hist.chi2, "p_value": hist.p_value})
    except EmptyInput:
        lines.append({"kind": "histogram", "error": "no Handoff messages in capture"})

    rows = scenario_estimates(n_range, table)
    for row in rows:
        lines.append({"kind": "estimate", "scenario": row.scenario, "u": row.u,
                      "bin_share": row.bin_share, "n": row.n,
                      "accuracy": row.accuracy})

    report_path = os.path.join(out_dir, "report.jsonl")
    with open(report_path, "w") as f:
        for line in lines:
            f.write(json.dumps(line, sort_keys=True))
            f.write("\n")
    csv_path = os.path.join(out_dir, "estimates.csv")
    write_estimates_csv(rows, csv_path)

    manifest = {"report": report_path, "estimates": csv_path}
    if figures:
        if hist is not None:
            hist_path = os.path.join(out_dir, "seq_histogram.png")
            render_histogram_figure(hist, hist_path)
            manifest["seq_histogram"] = hist_path
        acc_path = os.path.join(out_dir, "reid_accuracy.png")
        render_accuracy_figure(rows, acc_path)
        manifest["reid_accuracy"] = acc_path
    return manifest
