"""Deterministic discrete-event generator of Continuity traffic.

A scenario is a fleet of virtual Apple devices with scripted and/or
Poisson-rate user events. The loop reproduces the observed over-the-air
behaviors: per-version message gating, 15-minute address rotation that
preserves Handoff state, the one-to-two-frame Nearby status persistence after
a rotation, Wi-Fi Settings / Instant Hotspot request-response choreography
with a daily account ID, the laptop global-address leak, and the abstract
Wi-Fi-side probe/authentication events that expose the factory address.

Every emission carries a ground-truth label, which is what makes the tracker
claims testable at desk scale. Identical (seed, config) replays to an
identical byte stream.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from enum import Enum

from .addressing import Irk, MacAddress, generate_rpa
from .capture import KIND_BLE, KIND_WIFI_AUTH, KIND_WIFI_PROBE, CaptureRecord
from .codec import (
    APPLE_COMPANY_ID,
    TYPE_HANDOFF,
    TYPE_INSTANT_HOTSPOT,
    TYPE_NEARBY,
    TYPE_WATCH_CONNECTION,
    TYPE_WIFI_JOIN,
    TYPE_WIFI_SETTINGS,
    AdFlags,
    BleAdvertisement,
    Handoff,
    InstantHotspot,
    Nearby,
    WatchConnection,
    WifiJoin,
    WifiSettings,
    encode_advertisement,
    encode_message,
    to_hex,
)
from .fingerprint import STATUS_IOS10_MARKER, STATUS_IOS11_MARKER, STATUS_WIFI_OFF, STATUS_WIFI_ON
from .tracker import ssid_hash3

GATT_DEVICE_INFORMATION = 0x180A
GATT_MODEL_NUMBER_STRING = 0x2A24

INACTIVITY_TRANSITION_S = 30.0  # active -> transition after this much quiet
TRANSITION_LOCK_S = 30.0  # transition -> locked after this much more
NEARBY_TIMEOUT_S = 30.0  # pre-12 releases stop Nearby after this idle time
HANDOFF_BURST_S = 4.0
HANDOFF_PERIOD_S = 0.25
SETTINGS_PERIOD_S = 0.5
HOTSPOT_PERIOD_S = 0.5
HOTSPOT_LINGER_S = 1.0  # responses may trail the last settings frame this long
WATCH_PERIOD_S = 2.0
SMS_WAKE_S = 10.0
RING_TIMEOUT_S = 15.0


class SimulationError(Exception):
    pass


class ConfigInvalid(SimulationError):
    pass


class InvalidTransition(SimulationError):
    pass


class OsVersion(Enum):
    IOS_8 = "ios8"
    IOS_8_1 = "ios8.1"
    IOS_9 = "ios9"
    IOS_10 = "ios10"
    IOS_11 = "ios11"
    IOS_12 = "ios12"
    IOS_12_3 = "ios12.3"
    HIGH_SIERRA = "highsierra"
    MOJAVE = "mojave"

    @property
    def is_macos(self) -> bool:
        return self in (OsVersion.HIGH_SIERRA, OsVersion.MOJAVE)

    @property
    def ios_generation(self) -> float | None:
        return _IOS_GENERATION.get(self)

    def at_least(self, generation: float) -> bool:
        gen = self.ios_generation
        return gen is not None and gen >= generation


_IOS_GENERATION = {
    OsVersion.IOS_8: 8.0, OsVersion.IOS_8_1: 8.1, OsVersion.IOS_9: 9.0,
    OsVersion.IOS_10: 10.0, OsVersion.IOS_11: 11.0, OsVersion.IOS_12: 12.0,
    OsVersion.IOS_12_3: 12.3,
}

# Message types each release is ever observed to transmit.
ALLOWED_TYPES: dict[OsVersion, frozenset[int]] = {
    OsVersion.IOS_8: frozenset({TYPE_HANDOFF}),
    OsVersion.IOS_8_1: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_INSTANT_HOTSPOT}),
    OsVersion.IOS_9: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_INSTANT_HOTSPOT}),
    OsVersion.IOS_10: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_INSTANT_HOTSPOT,
                                 TYPE_NEARBY}),
    OsVersion.IOS_11: frozenset({TYPE_WATCH_CONNECTION, TYPE_HANDOFF, TYPE_WIFI_SETTINGS,
                                 TYPE_INSTANT_HOTSPOT, TYPE_WIFI_JOIN, TYPE_NEARBY}),
    OsVersion.IOS_12: frozenset({TYPE_WATCH_CONNECTION, TYPE_HANDOFF, TYPE_WIFI_SETTINGS,
                                 TYPE_INSTANT_HOTSPOT, TYPE_WIFI_JOIN, TYPE_NEARBY}),
    OsVersion.IOS_12_3: frozenset({TYPE_WATCH_CONNECTION, TYPE_HANDOFF, TYPE_WIFI_SETTINGS,
                                   TYPE_INSTANT_HOTSPOT, TYPE_WIFI_JOIN, TYPE_NEARBY}),
    OsVersion.HIGH_SIERRA: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_NEARBY}),
    OsVersion.MOJAVE: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_NEARBY}),
}


class ScreenState(Enum):
    LOCKED = "locked"
    ACTIVE = "active"
    TRANSITION = "transition"
    IN_CALL = "in_call"


class UserEvent(Enum):
    UNLOCK = "unlock"
    LOCK = "lock"
    APP_ACTION = "app_action"
    COPY = "copy"
    OPEN_WIFI_SETTINGS = "open_wifi_settings"
    CLOSE_WIFI_SETTINGS = "close_wifi_settings"
    JOIN_NETWORK = "join_network"
    INCOMING_CALL = "incoming_call"
    ACCEPT_CALL = "accept_call"
    END_CALL = "end_call"
    INCOMING_SMS = "incoming_sms"
    REBOOT = "reboot"


# Events an app/user performs; these bump the Handoff counter by one.
_INCREMENT_EVENTS = {UserEvent.APP_ACTION, UserEvent.UNLOCK}
# Rate-driven fuzzing may only draw from events that are valid in any state.
_RATE_SAFE_EVENTS = {"app_action", "unlock", "lock", "copy", "open_wifi_settings",
                     "join_network", "incoming_sms", "reboot", "phone_call"}


@dataclass
class DeviceConfig:
    device_id: str
    model: str = "iPhone9,1"
    os: OsVersion = OsVersion.IOS_12
    icloud_account: str = "default-account"
    irk: Irk | None = None
    public_mac: MacAddress | None = None
    handoff_seq: int | None = None  # None -> drawn uniform from the seed
    handoff_enabled: bool = True
    location_sharer: bool = False
    wifi_on: bool = True
    battery: int = 80
    cell_service: int = 7
    cell_bars: int = 4
    has_paired_watch: bool = False
    cellular: bool | None = None  # None -> derived from the model string
    bluetooth_off: bool = False
    airplane_mode: bool = False
    watch_disconnected: bool = False
    rotation_offset_s: float = 0.0
    rssi_mean: int = -60
    rssi_noise: float = 0.0
    events: list[dict] = field(default_factory=list)
    event_rates_per_hour: dict[str, float] = field(default_factory=dict)

    @property
    def is_cellular(self) -> bool:
        if self.cellular is not None:
            return self.cellular
        return self.model.startswith("iPhone")

    @property
    def is_watch(self) -> bool:
        return self.model.startswith("Watch")

    @property
    def is_airpods(self) -> bool:
        return self.model.startswith("AirPods")


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 600.0
    rotation_period_s: float = 900.0
    rotation_jitter_s: float = 0.0
    nearby_rate_per_min: float = 200.0
    status_persistence_frames: int = 1
    devices: list[DeviceConfig] = field(default_factory=list)
    accounts: dict[str, list[str]] = field(default_factory=dict)
    icloud_boundary_offsets: dict[str, float] = field(default_factory=dict)
    ssid_pool: list[str] = field(default_factory=lambda: ["HomeNet"])

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        if doc.get("schema_version", 1) != 1:
            raise ConfigInvalid(f"scenario schema_version {doc.get('schema_version')}")
        devices = []
        for entry in doc.get("devices", []):
            entry = dict(entry)
            try:
                os_tag = entry.pop("os", "ios12")
                entry["os"] = OsVersion(os_tag)
            except ValueError:
                raise ConfigInvalid(f"unknown os tag {os_tag!r}") from None
            if entry.get("irk"):
                entry["irk"] = Irk.parse(entry["irk"])
            if entry.get("public_mac"):
                entry["public_mac"] = MacAddress.parse(entry["public_mac"])
            try:
                devices.append(DeviceConfig(**entry))
            except TypeError as exc:
                raise ConfigInvalid(f"bad device entry: {exc}") from None
        known = {f for f in ScenarioConfig.__dataclass_fields__} | {"schema_version"}
        extra = set(doc) - known - {"devices"}
        if extra:
            raise ConfigInvalid(f"unknown scenario keys: {sorted(extra)}")
        return cls(
            seed=doc.get("seed", 0),
            duration_s=doc.get("duration_s", 600.0),
            rotation_period_s=doc.get("rotation_period_s", 900.0),
            rotation_jitter_s=doc.get("rotation_jitter_s", 0.0),
            nearby_rate_per_min=doc.get("nearby_rate_per_min", 200.0),
            status_persistence_frames=doc.get("status_persistence_frames", 1),
            devices=devices,
            accounts={k: list(v) for k, v in doc.get("accounts", {}).items()},
            icloud_boundary_offsets=dict(doc.get("icloud_boundary_offsets", {})),
            ssid_pool=list(doc.get("ssid_pool", ["HomeNet"])),
        )

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class SimDevice:
    """Runtime state of one virtual device."""

    config: DeviceConfig
    rng: random.Random
    current_rpa: MacAddress = None  # type: ignore[assignment]
    handoff_seq: int = 0
    handoff_payload: bytes = b""
    clipboard_full: bool = False
    screen_state: ScreenState = ScreenState.LOCKED
    last_activity: float = -1e9
    activity_serial: int = 0
    nearby_data: bytes = b"\x00\x00\x00"
    status_persist_left: int = -1
    settings_open: bool = False
    ringing: bool = False
    in_call: bool = False
    handoff_burst_until: float = -1.0
    handoff_burst_cause: str = ""
    hotspot_until: float = -1.0
    handoff_chain_live: bool = False
    settings_chain_live: bool = False
    hotspot_chain_live: bool = False
    channel_cursor: int = 0
    last_rotation_t: float = 0.0

    @property
    def device_id(self) -> str:
        return self.config.device_id

    def action_code(self) -> int:
        if self.in_call and self.config.os.at_least(12.3):
            return 14
        if self.screen_state in (ScreenState.ACTIVE, ScreenState.IN_CALL):
            return 11
        if self.screen_state is ScreenState.TRANSITION:
            return 7
        return 10 if self.config.has_paired_watch else 3

    def nearby_status(self) -> bytes:
        os = self.config.os
        if os is OsVersion.IOS_10:
            return bytes([STATUS_IOS10_MARKER])
        if os in (OsVersion.IOS_11, OsVersion.HIGH_SIERRA):
            return bytes([STATUS_IOS11_MARKER]) + self.nearby_data
        wifi = STATUS_WIFI_ON if self.config.wifi_on else STATUS_WIFI_OFF
        return bytes([wifi]) + self.nearby_data

    def refresh_nearby_data(self) -> None:
        self.nearby_data = self.rng.randbytes(3)

    def refresh_handoff_payload(self) -> None:
        self.handoff_payload = self.rng.randbytes(10)


@dataclass
class EmissionLabel:
    index: int
    timestamp: float
    device_id: str
    public_mac: str
    address: str
    cause: str


@dataclass
class RotationEvent:
    timestamp: float
    device_id: str
    old_address: str
    new_address: str


@dataclass
class GroundTruth:
    labels: list[EmissionLabel] = field(default_factory=list)
    rotations: list[RotationEvent] = field(default_factory=list)
    accounts: dict[str, list[str]] = field(default_factory=dict)
    devices: dict[str, dict] = field(default_factory=dict)

    def device_for_address(self) -> dict[str, str]:
        """address text -> device_id over all labelled emissions."""
        return {label.address: label.device_id for label in self.labels}

    def to_jsonl(self) -> str:
        lines = []
        for dev_id, info in self.devices.items():
            lines.append(json.dumps({"kind": "device", "device_id": dev_id, **info},
                                    sort_keys=True))
        for account, members in self.accounts.items():
            lines.append(json.dumps({"kind": "account", "account": account,
                                     "devices": members}, sort_keys=True))
        for rot in self.rotations:
            lines.append(json.dumps({"kind": "rotation", "ts": rot.timestamp,
                                     "device_id": rot.device_id, "old": rot.old_address,
                                     "new": rot.new_address}, sort_keys=True))
        for label in self.labels:
            lines.append(json.dumps({"kind": "label", "i": label.index,
                                     "ts": label.timestamp, "device_id": label.device_id,
                                     "public_mac": label.public_mac,
                                     "addr": label.address, "cause": label.cause},
                                    sort_keys=True))
        return "\n".join(lines) + "\n"


def gatt_model_response(device: SimDevice | DeviceConfig, service: int,
                        characteristic: int) -> bytes | None:
    """Answer a GATT read; None marks an unsupported service/characteristic.

    The model string is served to any querier regardless of source address.
    """
    config = device.config if isinstance(device, SimDevice) else device
    if service == GATT_DEVICE_INFORMATION and characteristic == GATT_MODEL_NUMBER_STRING:
        return config.model.encode("ascii")
    return None


class Simulation:
    """One scenario run. Build, then call run(); records/truth accumulate."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self._validate()
        self.records: list[CaptureRecord] = []
        self.truth = GroundTruth()
        self._heap: list = []
        self._counter = 0
        self.now = 0.0
        self.devices: dict[str, SimDevice] = {}
        self.registered: dict[str, list[str]] = self._registered_accounts()
        self._build_devices()
        self.truth.accounts = {k: sorted(v) for k, v in self.registered.items()}

    # -- configuration ------------------------------------------------------

    def _validate(self) -> None:
        cfg = self.config
        if cfg.rotation_period_s <= 0:
            raise ConfigInvalid(f"rotation period {cfg.rotation_period_s} must be positive")
        if cfg.status_persistence_frames not in (1, 2):
            raise ConfigInvalid("status_persistence_frames must be 1 or 2")
        if cfg.duration_s <= 0:
            raise ConfigInvalid("duration must be positive")
        ids = [d.device_id for d in cfg.devices]
        if len(ids) != len(set(ids)):
            raise ConfigInvalid("duplicate device_id")
        sharers: dict[str, list[str]] = {}
        for dev in cfg.devices:
            if dev.location_sharer:
                sharers.setdefault(dev.icloud_account, []).append(dev.device_id)
        for account, who in sharers.items():
            if len(who) > 1:
                raise ConfigInvalid(f"account {account} has {len(who)} location sharers")
        for dev in cfg.devices:
            bad = set(dev.event_rates_per_hour) - _RATE_SAFE_EVENTS
            if bad:
                raise ConfigInvalid(f"{dev.device_id}: rate events {sorted(bad)} "
                                    "cannot be driven stochastically")

    def _registered_accounts(self) -> dict[str, list[str]]:
        registered: dict[str, list[str]] = {}
        for dev in self.config.devices:
            registered.setdefault(dev.icloud_account, [])
            if dev.device_id not in registered[dev.icloud_account]:
                registered[dev.icloud_account].append(dev.device_id)
        for account, members in self.config.accounts.items():
            merged = registered.setdefault(account, [])
            for member in members:
                if member not in merged:
                    merged.append(member)
        return registered

    def _device_rng(self, device_id: str, stream: str = "state") -> random.Random:
        return random.Random(f"{self.config.seed}:{device_id}:{stream}")

    def _build_devices(self) -> None:
        # ensure exactly one location sharer per account
        sharer_accounts = {d.icloud_account for d in self.config.devices if d.location_sharer}
        for dev_cfg in self.config.devices:
            if dev_cfg.icloud_account not in sharer_accounts:
                dev_cfg.location_sharer = True
                sharer_accounts.add(dev_cfg.icloud_account)

        for dev_cfg in self.config.devices:
            rng = self._device_rng(dev_cfg.device_id)
            if dev_cfg.irk is None:
                dev_cfg.irk = Irk(self._device_rng(dev_cfg.device_id, "irk").randbytes(16))
            if dev_cfg.public_mac is None:
                octets = bytearray(self._device_rng(dev_cfg.device_id, "mac").randbytes(6))
                octets[0] &= 0x3F  # keep the factory address out of random space
                dev_cfg.public_mac = MacAddress(bytes(octets))
            device = SimDevice(config=dev_cfg, rng=rng)
            device.handoff_seq = (dev_cfg.handoff_seq if dev_cfg.handoff_seq is not None
                                  else rng.randrange(65536))
            device.refresh_handoff_payload()
            device.refresh_nearby_data()
            device.current_rpa = generate_rpa(dev_cfg.irk, rng)
            self.devices[dev_cfg.device_id] = device
            self.truth.devices[dev_cfg.device_id] = {
                "model": dev_cfg.model, "os": dev_cfg.os.value,
                "account": dev_cfg.icloud_account,
                "public_mac": str(dev_cfg.public_mac),
                "initial_seq": device.handoff_seq,
            }

    # -- scheduling ---------------------------------------------------------

    def _push(self, t: float, fn, *args) -> None:
        if t > self.config.duration_s:
            return
        heapq.heappush(self._heap, (t, self._counter, fn, args))
        self._counter += 1

    def run(self) -> tuple[list[CaptureRecord], GroundTruth]:
        self._schedule_initial()
        while self._heap:
            t, _, fn, args = heapq.heappop(self._heap)
            self.now = t
            fn(t, *args)
        return self.records, self.truth

    def _schedule_initial(self) -> None:
        cfg = self.config
        nearby_period = 60.0 / cfg.nearby_rate_per_min if cfg.nearby_rate_per_min > 0 else None
        for device in self.devices.values():
            dev_cfg = device.config
            jitter = (device.rng.uniform(-cfg.rotation_jitter_s, cfg.rotation_jitter_s)
                      if cfg.rotation_jitter_s else 0.0)
            self._push(dev_cfg.rotation_offset_s + cfg.rotation_period_s + jitter,
                       self._on_rotate, device.device_id)
            if nearby_period is not None and self._may_emit(device, TYPE_NEARBY):
                phase = device.rng.uniform(0, nearby_period)
                self._push(phase, self._nearby_tick, device.device_id, nearby_period)
            if dev_cfg.is_watch and dev_cfg.watch_disconnected:
                self._push(device.rng.uniform(0, WATCH_PERIOD_S), self._watch_tick,
                           device.device_id)
            for entry in dev_cfg.events:
                try:
                    event = UserEvent(entry["event"])
                except (KeyError, ValueError):
                    raise ConfigInvalid(f"bad scripted event {entry!r}") from None
                self._push(float(entry["t"]), self._on_user_event, device.device_id,
                           event, entry.get("ssid"), True)
            for name, rate in sorted(dev_cfg.event_rates_per_hour.items()):
                if rate <= 0:
                    continue
                rng = self._device_rng(device.device_id, f"rate:{name}")
                t = 0.0
                while True:
                    t += rng.expovariate(rate / 3600.0)
                    if t > cfg.duration_s:
                        break
                    if name == "phone_call":
                        self._push(t, self._on_user_event, device.device_id,
                                   UserEvent.INCOMING_CALL, None, False)
                        self._push(t + 2.0, self._on_user_event, device.device_id,
                                   UserEvent.ACCEPT_CALL, None, False)
                        self._push(t + 20.0, self._on_user_event, device.device_id,
                                   UserEvent.END_CALL, None, False)
                    elif name == "open_wifi_settings":
                        self._push(t, self._on_user_event, device.device_id,
                                   UserEvent.OPEN_WIFI_SETTINGS, None, False)
                        self._push(t + 10.0, self._on_user_event, device.device_id,
                                   UserEvent.CLOSE_WIFI_SETTINGS, None, False)
                    elif name == "join_network":
                        ssid = rng.choice(cfg.ssid_pool)
                        self._push(t, self._on_user_event, device.device_id,
                                   UserEvent.JOIN_NETWORK, ssid, False)
                    else:
                        self._push(t, self._on_user_event, device.device_id,
                                   UserEvent(name), None, False)

    # -- gating helpers ------------------------------------------------------

    def _account_registered_count(self, device: SimDevice) -> int:
        return len(self.registered.get(device.config.icloud_account, []))

    def _may_emit(self, device: SimDevice, wire_type: int) -> bool:
        cfg = device.config
        if cfg.bluetooth_off:
            return False  # settings-level disable is the only true off switch
        if self._account_registered_count(device) < 2:
            return False  # Continuity needs a second device on the account
        if wire_type not in ALLOWED_TYPES[cfg.os]:
            return False
        if wire_type == TYPE_HANDOFF and not cfg.handoff_enabled:
            return False
        if cfg.is_watch and wire_type != TYPE_WATCH_CONNECTION:
            return False
        return True

    def _settings_peer_exists(self, device: SimDevice) -> bool:
        """A second, cellular-capable hotspot device registered to the account."""
        for member in self.registered.get(device.config.icloud_account, []):
            if member == device.device_id:
                continue
            peer = self.devices.get(member)
            if peer is None:
                return True  # registered but not simulated: assume capable
            if peer.config.is_cellular:
                return True
        return False

    def _icloud_daily_id(self, account: str, t: float) -> bytes:
        offset = self.config.icloud_boundary_offsets.get(account, 0.0)
        day = int((t + offset) // 86400.0)
        return random.Random(f"{self.config.seed}:icloud:{account}:{day}").randbytes(4)

    # -- emission -----------------------------------------------------------

    def _flags_for(self, device: SimDevice) -> AdFlags | None:
        cfg = device.config
        if cfg.is_airpods:
            return None
        if cfg.os.is_macos:
            return AdFlags.from_bits(False, False, True)
        return AdFlags.from_bits(True, True, False)

    def _emit(self, device: SimDevice, message, cause: str,
              use_public_mac: bool = False) -> None:
        address = device.config.public_mac if use_public_mac else device.current_rpa
        channel = 37 + device.channel_cursor % 3
        device.channel_cursor += 1
        rssi = device.config.rssi_mean
        if device.config.rssi_noise:
            rssi = round(rssi + device.rng.gauss(0.0, device.config.rssi_noise))
        adv = BleAdvertisement(
            address=address,
            tlvs=(encode_message(message),),
            flags=self._flags_for(device),
            timestamp=self.now,
            channel=channel,
            rssi=rssi,
            tx_add_random=not use_public_mac,
            company_id=APPLE_COMPANY_ID,
        )
        raw = encode_advertisement(adv)
        self._record(device, KIND_BLE, str(address), cause, raw=to_hex(raw),
                     channel=channel, rssi=rssi, tx_add=not use_public_mac)

    def _record(self, device: SimDevice, kind: str, address: str, cause: str,
                raw: str = "", channel: int | None = None, rssi: int | None = None,
                tx_add: bool | None = None, summary: dict | None = None) -> None:
        ts = round(self.now, 6)
        self.records.append(CaptureRecord(
            timestamp=ts, address=address, kind=kind, channel=channel,
            rssi=rssi, tx_add_random=tx_add, raw=raw, summary=summary))
        self.truth.labels.append(EmissionLabel(
            index=len(self.records) - 1, timestamp=ts, device_id=device.device_id,
            public_mac=str(device.config.public_mac), address=address, cause=cause))

    def _macos_leak_active(self, device: SimDevice) -> bool:
        cfg = device.config
        if not cfg.os.is_macos or not cfg.handoff_enabled:
            return False
        if self._account_registered_count(device) < 2:
            return False
        return device.handoff_burst_until >= self.now or device.settings_open

    # -- periodic chains ----------------------------------------------------

    def _nearby_tick(self, t: float, device_id: str, period: float) -> None:
        device = self.devices[device_id]
        cfg = device.config
        self._push(t + period, self._nearby_tick, device_id, period)
        if not self._may_emit(device, TYPE_NEARBY):
            return
        continuous = cfg.os in (OsVersion.IOS_12, OsVersion.IOS_12_3, OsVersion.MOJAVE)
        if not continuous and t - device.last_activity > NEARBY_TIMEOUT_S:
            return
        sharing = 1 if (cfg.location_sharer and cfg.os.at_least(12.3)) else 0
        message = Nearby(location_sharing=sharing, action_code=device.action_code(),
                         status=device.nearby_status())
        self._emit(device, message, "nearby",
                   use_public_mac=self._macos_leak_active(device))
        if device.status_persist_left > 0:
            device.status_persist_left -= 1
            if device.status_persist_left == 0:
                device.refresh_nearby_data()
                device.status_persist_left = -1

    def _handoff_tick(self, t: float, device_id: str) -> None:
        device = self.devices[device_id]
        if t > device.handoff_burst_until:
            device.handoff_chain_live = False
            return
        self._push(t + HANDOFF_PERIOD_S, self._handoff_tick, device_id)
        if not self._may_emit(device, TYPE_HANDOFF):
            return
        message = Handoff(
            clipboard_status=0x08 if device.clipboard_full else 0x00,
            sequence_number=device.handoff_seq,
            payload=device.handoff_payload,
        )
        self._emit(device, message, f"handoff/{device.handoff_burst_cause}")

    def _settings_tick(self, t: float, device_id: str) -> None:
        device = self.devices[device_id]
        if not device.settings_open:
            device.settings_chain_live = False
            return
        self._push(t + SETTINGS_PERIOD_S, self._settings_tick, device_id)
        if not self._may_emit(device, TYPE_WIFI_SETTINGS):
            return
        if not self._settings_peer_exists(device):
            return
        daily_id = self._icloud_daily_id(device.config.icloud_account, t)
        self._emit(device, WifiSettings(icloud_id=daily_id), "wifi_settings",
                   use_public_mac=False)
        self._trigger_hotspot_responses(device, daily_id)

    def _trigger_hotspot_responses(self, initiator: SimDevice, daily_id: bytes) -> None:
        account = initiator.config.icloud_account
        for member in self.registered.get(account, []):
            peer = self.devices.get(member)
            if peer is None or peer is initiator:
                continue
            if not peer.config.is_cellular:
                continue
            if not self._may_emit(peer, TYPE_INSTANT_HOTSPOT):
                continue
            if self._icloud_daily_id(peer.config.icloud_account, self.now) != daily_id:
                continue  # responds only to the correct account-derived ID
            peer.hotspot_until = self.now + HOTSPOT_LINGER_S
            if not peer.hotspot_chain_live:
                peer.hotspot_chain_live = True
                self._push(self.now + 0.1, self._hotspot_tick, peer.device_id)

    def _hotspot_tick(self, t: float, device_id: str) -> None:
        device = self.devices[device_id]
        if t > device.hotspot_until:
            device.hotspot_chain_live = False
            return
        self._push(t + HOTSPOT_PERIOD_S, self._hotspot_tick, device_id)
        if not self._may_emit(device, TYPE_INSTANT_HOTSPOT):
            return
        cfg = device.config
        message = InstantHotspot(prefix=b"\x01\x01", battery_life=cfg.battery,
                                 mid=0x00, cell_service=cfg.cell_service,
                                 cell_bars=cfg.cell_bars)
        self._emit(device, message, "instant_hotspot")

    def _watch_tick(self, t: float, device_id: str) -> None:
        device = self.devices[device_id]
        self._push(t + WATCH_PERIOD_S, self._watch_tick, device_id)
        if not self._may_emit(device, TYPE_WATCH_CONNECTION):
            return
        payload = random.Random(f"{self.config.seed}:{device_id}:watchpayload").randbytes(4)
        self._emit(device, WatchConnection(payload=payload), "watch_connection")

    # -- rotation -----------------------------------------------------------

    def _on_rotate(self, t: float, device_id: str) -> None:
        device = self.devices[device_id]
        self.rotate_mac(device)
        cfg = self.config
        jitter = (device.rng.uniform(-cfg.rotation_jitter_s, cfg.rotation_jitter_s)
                  if cfg.rotation_jitter_s else 0.0)
        self._push(t + cfg.rotation_period_s + jitter, self._on_rotate, device_id)

    def rotate_mac(self, device: SimDevice) -> MacAddress:
        """Swap in a fresh resolvable address; Handoff state survives intact."""
        old = device.current_rpa
        device.current_rpa = generate_rpa(device.config.irk, device.rng)
        device.status_persist_left = self.config.status_persistence_frames
        device.last_rotation_t = self.now
        self.truth.rotations.append(RotationEvent(
            timestamp=round(self.now, 6), device_id=device.device_id,
            old_address=str(old), new_address=str(device.current_rpa)))
        return device.current_rpa

    # -- user events --------------------------------------------------------

    def _mark_activity(self, device: SimDevice) -> None:
        device.last_activity = self.now
        device.activity_serial += 1
        if not device.in_call:
            device.screen_state = ScreenState.ACTIVE
        serial = device.activity_serial
        self._push(self.now + INACTIVITY_TRANSITION_S, self._inactivity_transition,
                   device.device_id, serial)

    def _inactivity_transition(self, t: float, device_id: str, serial: int) -> None:
        device = self.devices[device_id]
        if device.activity_serial != serial or device.in_call:
            return
        if device.screen_state is ScreenState.ACTIVE:
            device.screen_state = ScreenState.TRANSITION
            self._push(t + TRANSITION_LOCK_S, self._inactivity_lock, device_id, serial)

    def _inactivity_lock(self, t: float, device_id: str, serial: int) -> None:
        device = self.devices[device_id]
        if device.activity_serial != serial or device.in_call:
            return
        if device.screen_state is ScreenState.TRANSITION:
            device.screen_state = ScreenState.LOCKED

    def _start_handoff_burst(self, device: SimDevice, cause: str) -> None:
        if not self._may_emit(device, TYPE_HANDOFF):
            return
        device.handoff_burst_until = self.now + HANDOFF_BURST_S
        device.handoff_burst_cause = cause
        if not device.handoff_chain_live:
            device.handoff_chain_live = True
            self._push(self.now, self._handoff_tick, device.device_id)

    def _on_user_event(self, t: float, device_id: str, event: UserEvent,
                       ssid: str | None, scripted: bool) -> None:
        device = self.devices[device_id]
        try:
            self.apply_event(device, event, ssid=ssid)
        except InvalidTransition:
            if scripted:
                raise
            # stochastic fuzzing draws may land in a state where the event
            # makes no sense; drop them rather than abort the run

    def apply_event(self, device: SimDevice, event: UserEvent,
                    ssid: str | None = None) -> None:
        """Apply one user event: state delta plus any triggered emissions."""
        cfg = device.config
        if event in _INCREMENT_EVENTS:
            device.handoff_seq = (device.handoff_seq + 1) % 65536
            device.refresh_handoff_payload()

        if event is UserEvent.UNLOCK:
            self._mark_activity(device)
        elif event is UserEvent.LOCK:
            device.activity_serial += 1  # cancel pending inactivity timers
            device.screen_state = ScreenState.LOCKED
        elif event is UserEvent.APP_ACTION:
            self._mark_activity(device)
            self._start_handoff_burst(device, "app_action")
        elif event is UserEvent.COPY:
            device.clipboard_full = True
            self._mark_activity(device)
            self._start_handoff_burst(device, "copy")
        elif event is UserEvent.OPEN_WIFI_SETTINGS:
            device.settings_open = True
            self._mark_activity(device)
            if not device.settings_chain_live:
                device.settings_chain_live = True
                self._push(self.now, self._settings_tick, device.device_id)
        elif event is UserEvent.CLOSE_WIFI_SETTINGS:
            device.settings_open = False
            self._mark_activity(device)
        elif event is UserEvent.JOIN_NETWORK:
            if ssid is None:
                raise InvalidTransition("join_network needs an ssid")
            self._mark_activity(device)
            if self._may_emit(device, TYPE_WIFI_JOIN):
                prefix = device.rng.randbytes(4)
                self._emit(device, WifiJoin(prefix=prefix, ssid_hash3=ssid_hash3(ssid)),
                           "wifi_join")
                # the 802.11 side of the exchange uses the factory address
                public = str(cfg.public_mac)
                detail = {"ssid_hash3": ssid_hash3(ssid).hex()}
                self._push(self.now + 0.2, self._wifi_event, device.device_id,
                           KIND_WIFI_PROBE, public, detail)
                self._push(self.now + 0.5, self._wifi_event, device.device_id,
                           KIND_WIFI_AUTH, public, detail)
        elif event is UserEvent.INCOMING_CALL:
            if not cfg.is_cellular:
                raise InvalidTransition(f"{device.device_id} has no cellular radio")
            device.ringing = True
            if device.screen_state is ScreenState.LOCKED:
                device.screen_state = ScreenState.TRANSITION
        elif event is UserEvent.ACCEPT_CALL:
            if not cfg.is_cellular:
                raise InvalidTransition(f"{device.device_id} has no cellular radio")
            if not device.ringing:
                raise InvalidTransition("accept_call without a ringing call")
            device.ringing = False
            device.in_call = True
            device.screen_state = ScreenState.IN_CALL
            device.last_activity = self.now
            if cfg.os.at_least(9.0):
                self._start_handoff_burst(device, "accept_call")
        elif event is UserEvent.END_CALL:
            if not device.in_call:
                raise InvalidTransition("end_call without an active call")
            device.in_call = False
            self._mark_activity(device)
        elif event is UserEvent.INCOMING_SMS:
            if device.screen_state is ScreenState.LOCKED:
                device.screen_state = ScreenState.TRANSITION
                serial = device.activity_serial
                self._push(self.now + SMS_WAKE_S, self._inactivity_lock,
                           device.device_id, serial)
            if cfg.os.at_least(9.0):
                self._start_handoff_burst(device, "incoming_sms")
        elif event is UserEvent.REBOOT:
            device.handoff_seq = (device.handoff_seq + device.rng.randint(1, 8)) % 65536
            device.refresh_handoff_payload()
            device.clipboard_full = False
            device.in_call = False
            device.ringing = False
            device.settings_open = False
            device.activity_serial += 1
            device.screen_state = ScreenState.LOCKED
            self.rotate_mac(device)
        else:
            raise InvalidTransition(f"unhandled event {event}")

    def _wifi_event(self, t: float, device_id: str, kind: str, address: str,
                    detail: dict) -> None:
        device = self.devices[device_id]
        self._record(device, kind, address, kind, summary=detail)


def run_scenario(config: ScenarioConfig) -> tuple[list[CaptureRecord], GroundTruth]:
    """Run one scenario to completion; deterministic in (seed, config)."""
    return Simulation(config).run()
