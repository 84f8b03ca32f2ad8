"""Defeating MAC randomization: identity linking and sequence-number tracking.

The pipeline groups time-ordered observations into per-device tracks, links a
track across an address rotation when payload material survives the change
(Handoff sequence + data, Nearby status bytes, or the daily account ID), fits
a linear trajectory to the slowly incrementing Handoff counter, and turns the
fitted model into a wraparound window of plausible future sequence numbers.
Membership of an in-bin candidate in that window is the re-identification
test; `collision_probability` gives its analytic success rate.

Also here: the laptop global-address leak detector, the SSID digest
dictionary, and account clustering from Wi-Fi Settings / Instant Hotspot
choreography.
"""

from __future__ import annotations

import hashlib
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats as _stats

from .addressing import AddressKind, MacAddress
from .codec import ContinuityMessage, Handoff, InstantHotspot, Nearby, WifiSettings
from .fingerprint import DeviceClass, OsFingerprint, OsMajor, UNKNOWN_OS

SEQ_SPACE = 65536
EPSILON_T_DEFAULT = 2.0  # seconds a track may be silent before a rotation link
TARGETED_U = 421  # median 90%-window width with per-target measurements
UNTARGETED_U = 813  # convex closure of observed 90%-window widths
ICLOUD_ID_VALIDITY_S = 86400.0  # account IDs rotate daily
HOTSPOT_RESPONSE_WINDOW_S = 2.0
# The one-byte status of the oldest Nearby shape is identical fleet-wide and
# identifies nothing; only the four-byte field persists distinctively.
MIN_LINK_STATUS_LEN = 4


class TrackerError(Exception):
    pass


class OutOfOrderTimestamp(TrackerError):
    pass


class DegenerateFit(TrackerError):
    pass


# ---------------------------------------------------------------------------
# Observations and tracks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """One decoded, fingerprinted advertising event."""

    timestamp: float
    address: MacAddress
    address_kind: AddressKind
    messages: tuple[ContinuityMessage, ...] = ()
    device_class: DeviceClass = DeviceClass.UNKNOWN_APPLE
    os: OsFingerprint = UNKNOWN_OS
    model: str | None = None

    def first(self, cls):
        for msg in self.messages:
            if isinstance(msg, cls):
                return msg
        return None

    @property
    def handoff_seq(self) -> int | None:
        msg = self.first(Handoff)
        return msg.sequence_number if msg else None

    @property
    def bin(self) -> "BinKey":
        return BinKey(self.device_class, self.os.major, self.model)


@dataclass(frozen=True)
class BinKey:
    """Anonymity-set partition: device class / OS major / hardware model."""

    device_class: DeviceClass = DeviceClass.UNKNOWN_APPLE
    os_major: OsMajor = OsMajor.UNKNOWN
    model: str | None = None

    def could_match(self, target: "BinKey") -> bool:
        """In-bin test for re-identification.

        Conservative: a candidate with an unknown class, OS, or model cannot
        be excluded and therefore counts as in-bin.
        """
        if (self.device_class is not DeviceClass.UNKNOWN_APPLE
                and target.device_class is not DeviceClass.UNKNOWN_APPLE
                and self.device_class is not target.device_class):
            return False
        if (self.os_major is not OsMajor.UNKNOWN
                and target.os_major is not OsMajor.UNKNOWN
                and self.os_major is not target.os_major):
            return False
        if self.model and target.model and self.model != target.model:
            return False
        return True


@dataclass
class MacInterval:
    address: MacAddress
    first_seen: float
    last_seen: float


@dataclass
class DeviceTrack:
    """One inferred device identity across any number of addresses."""

    track_id: int
    mac_history: list[MacInterval] = field(default_factory=list)
    seq_samples: list[tuple[float, int]] = field(default_factory=list)
    nearby_status_last: bytes = b""
    nearby_status_ts: float = 0.0
    handoff_last: tuple[int, bytes] | None = None
    icloud_sightings: list[tuple[float, bytes]] = field(default_factory=list)
    settings_times: list[float] = field(default_factory=list)
    hotspot_times: list[float] = field(default_factory=list)
    observed_types: set[int] = field(default_factory=set)
    bin: BinKey = field(default_factory=BinKey)
    linked_public_mac: MacAddress | None = None
    link_rules: list[str] = field(default_factory=list)

    @property
    def current_address(self) -> MacAddress:
        return self.mac_history[-1].address

    @property
    def last_seen(self) -> float:
        return self.mac_history[-1].last_seen

    @property
    def addresses(self) -> list[MacAddress]:
        return [iv.address for iv in self.mac_history]

    def absorb(self, obs: Observation) -> None:
        """Record one observation for an address already owned by this track."""
        if self.mac_history and self.mac_history[-1].address == obs.address:
            self.mac_history[-1].last_seen = max(self.mac_history[-1].last_seen,
                                                 obs.timestamp)
        for msg in obs.messages:
            self.observed_types.add(_wire_type(msg))
            if isinstance(msg, Handoff):
                if self.handoff_last is None or self.handoff_last[0] != msg.sequence_number:
                    self.seq_samples.append((obs.timestamp, msg.sequence_number))
                self.handoff_last = (msg.sequence_number, msg.payload)
            elif isinstance(msg, Nearby):
                if msg.status:
                    self.nearby_status_last = msg.status
                    self.nearby_status_ts = obs.timestamp
            elif isinstance(msg, WifiSettings):
                self.icloud_sightings.append((obs.timestamp, msg.icloud_id))
                self.settings_times.append(obs.timestamp)
            elif isinstance(msg, InstantHotspot):
                self.hotspot_times.append(obs.timestamp)
        self.bin = _refine_bin(self.bin, obs)

    def adopt_address(self, obs: Observation, rule: str) -> None:
        self.mac_history.append(MacInterval(obs.address, obs.timestamp, obs.timestamp))
        self.link_rules.append(rule)
        self.absorb(obs)


def _wire_type(msg: ContinuityMessage) -> int:
    from .codec import message_type
    return message_type(msg)


def _refine_bin(current: BinKey, obs: Observation) -> BinKey:
    device_class = current.device_class
    if obs.device_class is not DeviceClass.UNKNOWN_APPLE:
        # watch evidence outranks flag evidence, everything outranks unknown
        if (device_class is DeviceClass.UNKNOWN_APPLE
                or obs.device_class is DeviceClass.APPLE_WATCH):
            device_class = obs.device_class
    os_major = current.os_major
    if obs.os.major is not OsMajor.UNKNOWN:
        os_major = obs.os.major
    model = current.model or obs.model
    return BinKey(device_class, os_major, model)


# ---------------------------------------------------------------------------
# Rotation linking
# ---------------------------------------------------------------------------

class LinkOutcome(Enum):
    LINKED = "linked"
    NEW_TRACK = "new_track"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class LinkDecision:
    outcome: LinkOutcome
    track: DeviceTrack | None = None
    rule: str | None = None
    candidates: tuple[DeviceTrack, ...] = ()


def link_rotation(tracks: list[DeviceTrack], new_obs: Observation,
                  epsilon_t: float = EPSILON_T_DEFAULT) -> LinkDecision:
    """Decide whether a never-seen address continues a recently silent track.

    Linking material, strongest first: identical Handoff sequence + payload;
    identical Nearby status bytes; matching daily account ID. Each rule
    requires a one-to-one pairing between the silent track and the new
    address; two candidates under the same rule are surfaced as AMBIGUOUS and
    never guessed.

    Only resolvable-private addresses are rotation candidates: a factory
    address appearing mid-capture is the laptop leak, not a rotation, and is
    correlated by detect_global_mac_leak instead.
    """
    if new_obs.address_kind is not AddressKind.RESOLVABLE_PRIVATE:
        return LinkDecision(LinkOutcome.NEW_TRACK)
    silent = [t for t in tracks
              if 0.0 <= new_obs.timestamp - t.last_seen <= epsilon_t
              and t.current_address != new_obs.address
              and t.bin.could_match(new_obs.bin)]

    handoff = new_obs.first(Handoff)
    if handoff is not None:
        key = (handoff.sequence_number, handoff.payload)
        matches = [t for t in silent if t.handoff_last == key]
        if len(matches) == 1:
            return LinkDecision(LinkOutcome.LINKED, matches[0], "handoff")
        if len(matches) > 1:
            return LinkDecision(LinkOutcome.AMBIGUOUS, None, "handoff", tuple(matches))

    nearby = new_obs.first(Nearby)
    if nearby is not None and len(nearby.status) >= MIN_LINK_STATUS_LEN:
        matches = [t for t in silent if t.nearby_status_last == nearby.status]
        if len(matches) == 1:
            return LinkDecision(LinkOutcome.LINKED, matches[0], "nearby")
        if len(matches) > 1:
            return LinkDecision(LinkOutcome.AMBIGUOUS, None, "nearby", tuple(matches))

    settings = new_obs.first(WifiSettings)
    if settings is not None:
        matches = [t for t in silent if t.icloud_sightings
                   and t.icloud_sightings[-1][1] == settings.icloud_id
                   and new_obs.timestamp - t.icloud_sightings[-1][0] <= ICLOUD_ID_VALIDITY_S]
        if len(matches) == 1:
            return LinkDecision(LinkOutcome.LINKED, matches[0], "icloud")
        if len(matches) > 1:
            return LinkDecision(LinkOutcome.AMBIGUOUS, None, "icloud", tuple(matches))

    return LinkDecision(LinkOutcome.NEW_TRACK)


@dataclass
class IngestResult:
    tracks: list[DeviceTrack]
    ambiguous_events: list[tuple[float, MacAddress, str]] = field(default_factory=list)
    links: list[tuple[float, MacAddress, MacAddress, str]] = field(default_factory=list)


def ingest(observations, epsilon_t: float = EPSILON_T_DEFAULT,
           strict: bool = False) -> IngestResult:
    """Fold a time-ordered observation stream into device tracks.

    Repeated Handoff frames from one address add nothing and are dropped from
    the sequence samples. In strict mode a timestamp regression raises
    OutOfOrderTimestamp; otherwise the stray frame is processed as-is.
    """
    result = IngestResult(tracks=[])
    by_address: dict[MacAddress, DeviceTrack] = {}
    next_id = 0
    last_ts = -math.inf
    for obs in observations:
        if obs.timestamp < last_ts and strict:
            raise OutOfOrderTimestamp(
                f"{obs.timestamp:.6f} after {last_ts:.6f} at {obs.address}")
        last_ts = max(last_ts, obs.timestamp)

        track = by_address.get(obs.address)
        if track is not None:
            track.absorb(obs)
            continue
        decision = link_rotation(result.tracks, obs, epsilon_t)
        if decision.outcome is LinkOutcome.LINKED:
            track = decision.track
            old = track.current_address
            track.adopt_address(obs, decision.rule)
            by_address[obs.address] = track
            result.links.append((obs.timestamp, old, obs.address, decision.rule))
            continue
        if decision.outcome is LinkOutcome.AMBIGUOUS:
            result.ambiguous_events.append((obs.timestamp, obs.address, decision.rule))
        track = DeviceTrack(track_id=next_id)
        next_id += 1
        track.mac_history.append(MacInterval(obs.address, obs.timestamp, obs.timestamp))
        track.absorb(obs)
        result.tracks.append(track)
        by_address[obs.address] = track
    return result


# ---------------------------------------------------------------------------
# Sequence-number trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryModel:
    """Least-squares line through unwrapped sequence counts vs. time."""

    slope: float  # counts per hour
    intercept: float  # unwrapped count at the reference time
    residual_scale: float
    n_samples: int
    reference_time: float  # seconds; x values are hours since this
    t_mean_hours: float
    sxx_hours: float


def unwrap_sequence(values) -> list[int]:
    """Undo mod-65536 wrapping, assuming < 32768 counts between samples."""
    if not values:
        return []
    out = [values[0]]
    for prev, cur in zip(values, values[1:]):
        delta = ((cur - prev + SEQ_SPACE // 2) % SEQ_SPACE) - SEQ_SPACE // 2
        out.append(out[-1] + delta)
    return out


def fit_trajectory(samples: list[tuple[float, int]]) -> TrajectoryModel:
    """Ordinary least squares on unwrapped counts against hours elapsed."""
    if len(samples) < 2:
        raise DegenerateFit(f"need at least 2 samples, got {len(samples)}")
    t0 = samples[0][0]
    x = np.array([(ts - t0) / 3600.0 for ts, _ in samples])
    if np.all(x == x[0]):
        raise DegenerateFit("all samples share one timestamp")
    y = np.array(unwrap_sequence([seq for _, seq in samples]), dtype=float)
    n = len(samples)
    x_mean = float(x.mean())
    sxx = float(((x - x_mean) ** 2).sum())
    slope = float(((x - x_mean) * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x_mean)
    residuals = y - (intercept + slope * x)
    sse = float((residuals ** 2).sum())
    scale = math.sqrt(sse / (n - 2)) if n > 2 else 0.0
    return TrajectoryModel(slope=slope, intercept=intercept, residual_scale=scale,
                           n_samples=n, reference_time=t0, t_mean_hours=x_mean,
                           sxx_hours=sxx)


@dataclass(frozen=True)
class PredictionWindow:
    """Wraparound interval of plausible sequence numbers at some future time.

    `width_u` counts the sequence values the window admits (the u that enters
    the collision formula); both interval edges are inclusive.
    """

    center: int
    width_u: int
    interval: tuple[int, int]

    def contains(self, seq: int) -> bool:
        if self.width_u <= 0:
            return False
        if self.width_u >= SEQ_SPACE:
            return True
        lo, hi = self.interval
        if lo <= hi:
            return lo <= seq <= hi
        return seq >= lo or seq <= hi


def window_from_width(center: int, width_u: int) -> PredictionWindow:
    """Window of a forced width centered on a sequence value."""
    center %= SEQ_SPACE
    if width_u >= SEQ_SPACE:
        return PredictionWindow(center, SEQ_SPACE, (0, SEQ_SPACE - 1))
    if width_u <= 0:
        return PredictionWindow(center, 0, (center, center))
    lo = (center - (width_u - 1) // 2) % SEQ_SPACE
    hi = (lo + width_u - 1) % SEQ_SPACE
    return PredictionWindow(center, width_u, (lo, hi))


def prediction_window(model: TrajectoryModel, t: float,
                      confidence: float = 0.9) -> PredictionWindow:
    """Regression prediction interval at time `t`, wrapped into [0, 65535].

    Uses the Student-t quantile with n-2 degrees of freedom and the usual
    leverage term, so the window widens away from the sampled epoch. A
    perfect fit collapses to the single predicted value.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence {confidence} outside (0, 1)")
    x = (t - model.reference_time) / 3600.0
    center = model.intercept + model.slope * x
    if model.residual_scale == 0.0 or model.n_samples <= 2:
        margin = 0.0
    else:
        quantile = float(_stats.t.ppf((1.0 + confidence) / 2.0, model.n_samples - 2))
        leverage = 1.0 + 1.0 / model.n_samples
        if model.sxx_hours > 0:
            leverage += (x - model.t_mean_hours) ** 2 / model.sxx_hours
        margin = quantile * model.residual_scale * math.sqrt(leverage)
    lo = math.floor(center - margin)
    hi = math.ceil(center + margin)
    width = min(hi - lo + 1, SEQ_SPACE)
    center_int = round(center) % SEQ_SPACE
    if width >= SEQ_SPACE:
        return PredictionWindow(center_int, SEQ_SPACE, (0, SEQ_SPACE - 1))
    return PredictionWindow(center_int, width, (lo % SEQ_SPACE, hi % SEQ_SPACE))


# ---------------------------------------------------------------------------
# Re-identification
# ---------------------------------------------------------------------------

class VerdictKind(Enum):
    UNIQUE_MATCH = "unique_match"
    NO_MATCH = "no_match"
    COLLISION = "collision"


@dataclass(frozen=True)
class ReidentifyVerdict:
    kind: VerdictKind
    matches: tuple[Observation, ...] = ()

    @property
    def observation(self) -> Observation | None:
        return self.matches[0] if self.kind is VerdictKind.UNIQUE_MATCH else None


def reidentify(window: PredictionWindow, target_bin: BinKey,
               candidates: list[Observation]) -> ReidentifyVerdict:
    """Is the target the only in-bin device whose counter falls in the window?

    Candidates that cannot be excluded by binning (unknown class/OS/model)
    are kept, so an un-fingerprinted device in the window still counts as a
    collision. Candidates without a Handoff sequence number carry no counter
    to test and are skipped.
    """
    matches = []
    for obs in candidates:
        seq = obs.handoff_seq
        if seq is None:
            continue
        if not obs.bin.could_match(target_bin):
            continue
        if window.contains(seq):
            matches.append(obs)
    if not matches:
        return ReidentifyVerdict(VerdictKind.NO_MATCH)
    if len(matches) == 1:
        return ReidentifyVerdict(VerdictKind.UNIQUE_MATCH, tuple(matches))
    return ReidentifyVerdict(VerdictKind.COLLISION, tuple(matches))


def collision_probability(u: float, n: int) -> float:
    """Chance that no identically binned device lands in a width-u window."""
    if not 0 <= u <= SEQ_SPACE:
        raise ValueError(f"u {u} outside [0, {SEQ_SPACE}]")
    if n < 0:
        raise ValueError(f"n {n} negative")
    return (1.0 - u / SEQ_SPACE) ** n


# ---------------------------------------------------------------------------
# Global-address leak detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeakReport:
    public_mac: MacAddress
    rpa: MacAddress
    matched_status: bytes
    evidence: tuple[str, ...]
    wifi_mac_candidates: tuple[MacAddress, MacAddress]


def detect_global_mac_leak(observations,
                           concurrency_window: float = 30.0) -> list[LeakReport]:
    """Find public addresses whose Nearby status matches a live private track.

    The laptop flaw moves Nearby frames to the factory address while Handoff
    or Wi-Fi Settings traffic is active, with status bytes unchanged; a status
    byte-match between a public-kind source and a concurrently active
    resolvable-private source therefore binds the two. The factory Bluetooth
    address is typically one off from the Wi-Fi address, so both neighbours
    are reported as derived metadata.
    """
    public_sightings: list[tuple[float, MacAddress, bytes]] = []
    rpa_status: dict[MacAddress, list[tuple[float, bytes]]] = {}
    rpa_active: dict[MacAddress, list[float]] = {}

    for obs in observations:
        nearby = obs.first(Nearby)
        if obs.address_kind is AddressKind.PUBLIC:
            if nearby is not None and nearby.status:
                public_sightings.append((obs.timestamp, obs.address, nearby.status))
        elif obs.address_kind is AddressKind.RESOLVABLE_PRIVATE:
            rpa_active.setdefault(obs.address, []).append(obs.timestamp)
            if nearby is not None and nearby.status:
                rpa_status.setdefault(obs.address, []).append((obs.timestamp, nearby.status))

    reports: dict[tuple[MacAddress, MacAddress], LeakReport] = {}
    for ts, public, status in public_sightings:
        for rpa, statuses in rpa_status.items():
            if not any(s == status for _, s in statuses):
                continue
            activity = rpa_active[rpa]
            i = bisect_left(activity, ts - concurrency_window)
            if i >= len(activity) or activity[i] > ts + concurrency_window:
                continue
            key = (public, rpa)
            if key not in reports:
                pub_int = int(public)
                neighbours = (MacAddress.from_int((pub_int - 1) % (1 << 48)),
                              MacAddress.from_int((pub_int + 1) % (1 << 48)))
                reports[key] = LeakReport(
                    public_mac=public, rpa=rpa, matched_status=status,
                    evidence=(f"status={status.hex()}", f"t={ts:.3f}"),
                    wifi_mac_candidates=neighbours)
    return list(reports.values())


def annotate_leaks(tracks: list[DeviceTrack], leaks: list[LeakReport]) -> None:
    """Pin each leaked factory address onto the track that owns the RPA."""
    by_address = {iv.address: track for track in tracks for iv in track.mac_history}
    for leak in leaks:
        track = by_address.get(leak.rpa)
        if track is not None:
            track.linked_public_mac = leak.public_mac


# ---------------------------------------------------------------------------
# SSID dictionary
# ---------------------------------------------------------------------------

def ssid_hash3(ssid: str) -> bytes:
    """First three octets of the SSID digest as carried in Wi-Fi Join frames."""
    return hashlib.sha256(ssid.encode("utf-8")).digest()[:3]


def build_ssid_index(ssids) -> dict[bytes, list[str]]:
    """Precomputed digest-prefix dictionary; colliding SSIDs are all kept."""
    index: dict[bytes, list[str]] = {}
    for ssid in ssids:
        index.setdefault(ssid_hash3(ssid), []).append(ssid)
    return index


def lookup_ssid(hash3: bytes, index: dict[bytes, list[str]]) -> list[str]:
    return list(index.get(bytes(hash3), []))


# ---------------------------------------------------------------------------
# Account clustering
# ---------------------------------------------------------------------------

def icloud_cluster(tracks: list[DeviceTrack],
                   response_window: float = HOTSPOT_RESPONSE_WINDOW_S,
                   min_choreography_events: int = 2) -> list[frozenset[int]]:
    """Partition tracks into same-account clusters.

    Tracks join a cluster when they broadcast the same account ID inside one
    24-hour validity window, or when one track's Wi-Fi Settings frames are
    repeatedly answered by another's Instant Hotspot frames within the
    response window. Every track lands in exactly one cluster (singletons
    included).
    """
    parent = {t.track_id: t.track_id for t in tracks}

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    # shared account ID inside one validity window
    sightings: dict[bytes, list[tuple[float, int]]] = {}
    for track in tracks:
        for ts, icloud_id in track.icloud_sightings:
            sightings.setdefault(icloud_id, []).append((ts, track.track_id))
    for icloud_id, seen in sightings.items():
        seen.sort()
        window_start = None
        window_anchor = None
        for ts, track_id in seen:
            if window_start is None or ts - window_start > ICLOUD_ID_VALIDITY_S:
                window_start = ts
                window_anchor = track_id
            else:
                union(window_anchor, track_id)

    # stimulus/response choreography
    for initiator in tracks:
        if not initiator.settings_times:
            continue
        stimuli = sorted(initiator.settings_times)
        for responder in tracks:
            if responder.track_id == initiator.track_id or not responder.hotspot_times:
                continue
            responses = sorted(responder.hotspot_times)
            answered = 0
            for ts in stimuli:
                i = bisect_right(responses, ts + response_window)
                j = bisect_left(responses, ts)
                if i > j:
                    answered += 1
                    if answered >= min_choreography_events:
                        union(initiator.track_id, responder.track_id)
                        break

    clusters: dict[int, set[int]] = {}
    for track in tracks:
        clusters.setdefault(find(track.track_id), set()).add(track.track_id)
    return [frozenset(members) for members in clusters.values()]
