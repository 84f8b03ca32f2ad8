"""Passive device/OS fingerprinting from decoded Continuity observations.

Three independent signals identify a device without its cooperation:

* advertisement flags split mobiles (H,C,LE = 1,1,0) from laptops (0,0,1);
  AirPods carry no flags at all, and only watches send connection-lost frames
* the shape of the Nearby status field pins the OS major release exactly
* the message-type mix must be consistent with the claimed OS generation

All classification here is pure; tables load once and are immutable after.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from importlib import resources

from .codec import (
    TYPE_AIRPODS,
    TYPE_HANDOFF,
    TYPE_INSTANT_HOTSPOT,
    TYPE_NEARBY,
    TYPE_WATCH_CONNECTION,
    TYPE_WIFI_JOIN,
    TYPE_WIFI_SETTINGS,
    AdFlags,
    Nearby,
)


class DeviceClass(Enum):
    MOBILE_IOS = "mobile_ios"
    MAC_LAPTOP = "mac_laptop"
    AIRPODS = "airpods"
    APPLE_WATCH = "apple_watch"
    UNKNOWN_APPLE = "unknown_apple"


class OsFamily(Enum):
    IOS = "ios"
    MACOS = "macos"
    UNKNOWN = "unknown"


class OsMajor(Enum):
    """Major-release tags the Nearby shape can distinguish.

    IOS8/IOS9 exist only as claim values for consistency checking; the shape
    test never produces them (Nearby did not exist before iOS 10).
    """

    IOS8 = "ios8"
    IOS9 = "ios9"
    IOS10 = "ios10"
    IOS11 = "ios11"
    IOS12 = "ios12"
    PRE_MOJAVE = "pre_mojave"
    MOJAVE = "mojave"
    UNKNOWN = "unknown"


class WifiRadioState(Enum):
    ON = "on"
    OFF = "off"
    UNKNOWN = "unknown"


class ActionCode(IntEnum):
    """Low nibble of the first Nearby payload octet: device state.

    Total over 0-15; nibbles with no documented meaning keep their raw value
    under OTHER_* names (13 was seen in the wild but never reproduced, so it
    is surfaced without interpretation).
    """

    OTHER_0 = 0
    RECENTLY_UPDATED = 1
    OTHER_2 = 2
    LOCKED_SCREEN = 3
    OTHER_4 = 4
    OTHER_5 = 5
    OTHER_6 = 6
    TRANSITION_PHASE = 7
    OTHER_8 = 8
    OTHER_9 = 9
    LOCKED_INFORM_WATCH = 10
    ACTIVE_USER = 11
    OTHER_12 = 12
    UNKNOWN_13 = 13
    PHONE_OR_FACETIME = 14
    OTHER_15 = 15

    @property
    def documented(self) -> bool:
        return not self.name.startswith(("OTHER_", "UNKNOWN_"))


def interpret_action(code: int) -> ActionCode:
    if not 0 <= code <= 15:
        raise ValueError(f"action code {code} is not a nibble")
    return ActionCode(code)


# Nearby status first-byte markers (iOS 12 / Mojave era)
STATUS_WIFI_OFF = 0x18
STATUS_WIFI_ON = 0x1C
STATUS_IOS11_MARKER = 0x10
STATUS_IOS10_MARKER = 0x00


@dataclass(frozen=True)
class OsFingerprint:
    family: OsFamily = OsFamily.UNKNOWN
    major: OsMajor = OsMajor.UNKNOWN
    evidence: tuple[str, ...] = ()


UNKNOWN_OS = OsFingerprint()


def infer_device_class(flags: AdFlags | None, observed_types: frozenset[int] | set[int]) -> DeviceClass:
    """Classify from flags bits and the set of message types seen.

    Message-type evidence outranks flags: the watch-connection type is only
    ever sent by a watch, so it wins over whatever flags claim.
    """
    if TYPE_WATCH_CONNECTION in observed_types:
        return DeviceClass.APPLE_WATCH
    if flags is not None:
        if flags.bits == (1, 1, 0):
            return DeviceClass.MOBILE_IOS
        if flags.bits == (0, 0, 1):
            return DeviceClass.MAC_LAPTOP
    elif TYPE_AIRPODS in observed_types:
        return DeviceClass.AIRPODS
    return DeviceClass.UNKNOWN_APPLE


def infer_os_version(nearby: Nearby, device_class: DeviceClass) -> OsFingerprint:
    """Pin the OS major release from the Nearby status shape.

    Length and first byte are injective over the releases that emit Nearby:
    1/0x00 -> iOS 10, 4/0x10 -> iOS 11, 4/0x18|0x1C -> iOS 12. The same shapes
    on a laptop split Mojave from pre-Mojave. Everything else stays UNKNOWN
    with the odd shape recorded as evidence.
    """
    status = nearby.status
    evidence = [f"status-len={len(status)}"]
    if status:
        evidence.append(f"status-byte1=0x{status[0]:02X}")

    shape = None
    if len(status) == 1 and status[0] == STATUS_IOS10_MARKER:
        shape = "ios10-era"
    elif len(status) == 4 and status[0] == STATUS_IOS11_MARKER:
        shape = "ios11-era"
    elif len(status) == 4 and status[0] in (STATUS_WIFI_OFF, STATUS_WIFI_ON):
        shape = "ios12-era"
    if shape is not None:
        evidence.append(shape)

    if device_class is DeviceClass.MOBILE_IOS:
        mapping = {"ios10-era": OsMajor.IOS10, "ios11-era": OsMajor.IOS11,
                   "ios12-era": OsMajor.IOS12}
        if shape in mapping:
            return OsFingerprint(OsFamily.IOS, mapping[shape], tuple(evidence))
        return OsFingerprint(OsFamily.IOS, OsMajor.UNKNOWN, tuple(evidence))
    if device_class is DeviceClass.MAC_LAPTOP:
        if shape == "ios12-era":
            return OsFingerprint(OsFamily.MACOS, OsMajor.MOJAVE, tuple(evidence))
        if shape in ("ios10-era", "ios11-era"):
            return OsFingerprint(OsFamily.MACOS, OsMajor.PRE_MOJAVE, tuple(evidence))
        return OsFingerprint(OsFamily.MACOS, OsMajor.UNKNOWN, tuple(evidence))
    return OsFingerprint(OsFamily.UNKNOWN, OsMajor.UNKNOWN, tuple(evidence))


def wifi_radio_state(nearby: Nearby) -> WifiRadioState:
    if nearby.status:
        if nearby.status[0] == STATUS_WIFI_OFF:
            return WifiRadioState.OFF
        if nearby.status[0] == STATUS_WIFI_ON:
            return WifiRadioState.ON
    return WifiRadioState.UNKNOWN


# Message types permitted per claimed OS major (mobile generations follow the
# observed availability matrix; 8 includes the 8.1 additions).
_CLAIM_ALLOWED: dict[OsMajor, frozenset[int]] = {
    OsMajor.IOS8: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_INSTANT_HOTSPOT}),
    OsMajor.IOS9: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_INSTANT_HOTSPOT}),
    OsMajor.IOS10: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_INSTANT_HOTSPOT,
                              TYPE_NEARBY}),
    OsMajor.IOS11: frozenset({TYPE_WATCH_CONNECTION, TYPE_HANDOFF, TYPE_WIFI_SETTINGS,
                              TYPE_INSTANT_HOTSPOT, TYPE_WIFI_JOIN, TYPE_NEARBY}),
    OsMajor.IOS12: frozenset({TYPE_WATCH_CONNECTION, TYPE_HANDOFF, TYPE_WIFI_SETTINGS,
                              TYPE_INSTANT_HOTSPOT, TYPE_WIFI_JOIN, TYPE_NEARBY}),
    OsMajor.PRE_MOJAVE: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_NEARBY}),
    OsMajor.MOJAVE: frozenset({TYPE_HANDOFF, TYPE_WIFI_SETTINGS, TYPE_NEARBY}),
}


@dataclass(frozen=True)
class ConsistencyVerdict:
    consistent: bool
    conflicts: tuple[str, ...] = ()


def version_consistency(observed_types: frozenset[int] | set[int],
                        claimed: OsFingerprint) -> ConsistencyVerdict:
    """Check the observed message-type mix against a claimed OS version.

    Vacuously consistent for empty observations or an unknown claim.
    """
    allowed = _CLAIM_ALLOWED.get(claimed.major)
    if allowed is None:
        return ConsistencyVerdict(True)
    conflicts = tuple(
        f"type 0x{t:02X} not available on {claimed.major.value}"
        for t in sorted(observed_types) if t not in allowed
    )
    return ConsistencyVerdict(not conflicts, conflicts)


# ---------------------------------------------------------------------------
# Hardware model table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelDescriptor:
    identifier: str
    marketing_name: str
    population_share: float
    family: str = "unknown"


@dataclass(frozen=True)
class ModelTable:
    """Model/population table loaded from the bundled (or a user) config."""

    models: dict[str, ModelDescriptor]
    os_shares: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelTable":
        models = {}
        for row in doc["models"]:
            desc = ModelDescriptor(
                identifier=row["identifier"],
                marketing_name=row["marketing_name"],
                population_share=float(row["share"]),
                family=row.get("family", "unknown"),
            )
            models[desc.identifier] = desc
        return cls(models=models, os_shares=dict(doc.get("os_shares", {})))

    @classmethod
    def load(cls, path: str | None = None) -> "ModelTable":
        if path is None:
            text = resources.files("bletrack.data").joinpath("device_models.json").read_text()
        else:
            with open(path) as f:
                text = f.read()
        return cls.from_dict(json.loads(text))

    def family_shares(self, family: str) -> float:
        return sum(m.population_share for m in self.models.values() if m.family == family)

    def lookup(self, identifier: str) -> ModelDescriptor:
        desc = self.models.get(identifier)
        if desc is None:
            return ModelDescriptor(identifier=identifier, marketing_name="unknown",
                                   population_share=0.0)
        return desc


_DEFAULT_TABLE: ModelTable | None = None


def default_model_table() -> ModelTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = ModelTable.load()
    return _DEFAULT_TABLE


def model_lookup(identifier: str, table: ModelTable | None = None) -> ModelDescriptor:
    """Descriptor for a GATT model string; unknown identifiers get share 0."""
    return (table or default_model_table()).lookup(identifier)
