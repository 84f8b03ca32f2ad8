"""Bit-exact codec for BLE advertising frames and Apple Continuity TLVs.

A captured advertising frame looks like:

    [access address 0x8E89BED6]   optional, little-endian on the wire
    [PDU header: 2 octets]        type/ChSel/TxAdd/RxAdd bits + payload length
    [advertiser address: 6]       little-endian on the wire
    [AD structures...]            each: length, type, payload

Continuity messages ride inside a manufacturer-specific AD structure (type
0xFF) carrying Apple's company ID 0x004C, as a run of type/length/value
records; several message TLVs are often concatenated in one frame.

Everything here is a pure function over immutable values: parse never mutates
its input and decode(encode(m)) == m holds for every message variant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

from .addressing import MacAddress

ACCESS_ADDRESS = 0x8E89BED6
ACCESS_ADDRESS_WIRE = ACCESS_ADDRESS.to_bytes(4, "little")
APPLE_COMPANY_ID = 0x004C
MAX_AD_BYTES = 31  # legacy advertising payload capacity

AD_TYPE_FLAGS = 0x01
AD_TYPE_MANUFACTURER = 0xFF

# Continuity message type octets
TYPE_WATCH_CONNECTION = 0x0B
TYPE_HANDOFF = 0x0C
TYPE_WIFI_SETTINGS = 0x0D
TYPE_INSTANT_HOTSPOT = 0x0E
TYPE_WIFI_JOIN = 0x0F
TYPE_NEARBY = 0x10
TYPE_AIRPODS = 0x07  # proximity-pairing frames unique to AirPods

# Wi-Fi Join payload split: opaque prefix, 3-octet SSID digest, opaque suffix
WIFI_JOIN_PREFIX_LEN = 4
WIFI_JOIN_DIGEST_LEN = 3


class CodecError(Exception):
    """Base for all typed codec failures."""


class TruncatedFrame(CodecError):
    """A length prefix disagrees with the bytes actually present."""


class MalformedMessage(CodecError):
    """A TLV value does not fit its message type's layout."""

    def __init__(self, apple_type: int, reason: str):
        super().__init__(f"type 0x{apple_type:02X}: {reason}")
        self.apple_type = apple_type


class FieldRange(CodecError):
    """A field value is outside its encodable or semantic range."""


class FrameTooLarge(CodecError):
    """AD data exceeds the legacy advertising payload capacity."""


def to_hex(data: bytes) -> str:
    return data.hex()


def from_hex(text: str) -> bytes:
    """Hex parser tolerant of spaces and colons (test fixture convenience)."""
    return bytes.fromhex(text.replace(":", " "))


# ---------------------------------------------------------------------------
# AD-level types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdFlags:
    """The one-octet Flags AD structure.

    The three bits of interest split mobiles from laptops:
    simultaneous-LE-and-BR/EDR host (H, bit 4), controller (C, bit 3), and
    LE-only (bit 2). `raw_byte` keeps the full wire octet so re-encoding is
    exact even when other bits are set.
    """

    raw_byte: int

    @classmethod
    def from_bits(cls, simul_host: bool, simul_controller: bool, le_only: bool) -> "AdFlags":
        return cls((simul_host << 4) | (simul_controller << 3) | (le_only << 2))

    @property
    def simul_host(self) -> int:
        return (self.raw_byte >> 4) & 1

    @property
    def simul_controller(self) -> int:
        return (self.raw_byte >> 3) & 1

    @property
    def le_only(self) -> int:
        return (self.raw_byte >> 2) & 1

    @property
    def bits(self) -> tuple[int, int, int]:
        return (self.simul_host, self.simul_controller, self.le_only)


@dataclass(frozen=True)
class AppleTlv:
    """One Continuity record: type octet, then length-prefixed value."""

    apple_type: int
    value: bytes

    @property
    def apple_length(self) -> int:
        return len(self.value)

    def to_bytes(self) -> bytes:
        if not 0 <= self.apple_type <= 0xFF:
            raise FieldRange(f"apple_type 0x{self.apple_type:X} out of range")
        if len(self.value) > 0xFF:
            raise FieldRange("TLV value longer than 255 octets")
        return bytes([self.apple_type, len(self.value)]) + self.value


# ---------------------------------------------------------------------------
# Continuity message variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WatchConnection:
    payload: bytes = b""


@dataclass(frozen=True)
class Handoff:
    clipboard_status: int
    sequence_number: int
    payload: bytes = b""


@dataclass(frozen=True)
class WifiSettings:
    icloud_id: bytes


@dataclass(frozen=True)
class InstantHotspot:
    prefix: bytes
    battery_life: int
    mid: int
    cell_service: int
    cell_bars: int


@dataclass(frozen=True)
class WifiJoin:
    prefix: bytes
    ssid_hash3: bytes
    suffix: bytes = b""


@dataclass(frozen=True)
class Nearby:
    location_sharing: int
    action_code: int
    status: bytes = b""


@dataclass(frozen=True)
class Unknown:
    apple_type: int
    payload: bytes = b""


ContinuityMessage = Union[
    WatchConnection, Handoff, WifiSettings, InstantHotspot, WifiJoin, Nearby, Unknown
]

MESSAGE_TYPES = {
    WatchConnection: TYPE_WATCH_CONNECTION,
    Handoff: TYPE_HANDOFF,
    WifiSettings: TYPE_WIFI_SETTINGS,
    InstantHotspot: TYPE_INSTANT_HOTSPOT,
    WifiJoin: TYPE_WIFI_JOIN,
    Nearby: TYPE_NEARBY,
}


def message_type(msg: ContinuityMessage) -> int:
    """The wire type octet a message encodes to."""
    if isinstance(msg, Unknown):
        return msg.apple_type
    return MESSAGE_TYPES[type(msg)]


def decode_message(tlv: AppleTlv) -> ContinuityMessage:
    """Decode one Continuity TLV into its tagged variant.

    The decoder is deliberately permissive about field *values* (undocumented
    action codes and status shapes decode fine; plausibility is the
    fingerprint layer's job) but strict about *layout*: a value that cannot
    fit its type's field offsets raises MalformedMessage.
    """
    t, v = tlv.apple_type, tlv.value
    if t == TYPE_WATCH_CONNECTION:
        return WatchConnection(payload=v)
    if t == TYPE_HANDOFF:
        if len(v) < 3:
            raise MalformedMessage(t, f"need clipboard + sequence, got {len(v)} octets")
        # sequence number is little-endian 16-bit; a single constant to flip
        # if real captures disagree
        seq = struct.unpack_from("<H", v, 1)[0]
        return Handoff(clipboard_status=v[0], sequence_number=seq, payload=v[3:])
    if t == TYPE_WIFI_SETTINGS:
        if len(v) != 4:
            raise MalformedMessage(t, f"iCloud ID is 4 octets, got {len(v)}")
        return WifiSettings(icloud_id=v)
    if t == TYPE_INSTANT_HOTSPOT:
        if len(v) != 6:
            raise MalformedMessage(t, f"hotspot layout is 6 octets, got {len(v)}")
        return InstantHotspot(prefix=v[:2], battery_life=v[2], mid=v[3],
                              cell_service=v[4], cell_bars=v[5])
    if t == TYPE_WIFI_JOIN:
        fixed = WIFI_JOIN_PREFIX_LEN + WIFI_JOIN_DIGEST_LEN
        if len(v) < fixed:
            raise MalformedMessage(t, f"need {fixed} octets before suffix, got {len(v)}")
        return WifiJoin(prefix=v[:WIFI_JOIN_PREFIX_LEN],
                        ssid_hash3=v[WIFI_JOIN_PREFIX_LEN:fixed],
                        suffix=v[fixed:])
    if t == TYPE_NEARBY:
        if len(v) < 1:
            raise MalformedMessage(t, "need the sharing/action octet")
        return Nearby(location_sharing=v[0] >> 4, action_code=v[0] & 0x0F, status=v[1:])
    return Unknown(apple_type=t, payload=v)


def encode_message(msg: ContinuityMessage, strict: bool = True) -> AppleTlv:
    """Inverse of decode_message; apple_length is computed.

    Structural limits (field widths) always raise FieldRange; semantic limits
    (battery 0-100, bars 0-5) raise only in strict mode so tests can build
    deliberately odd frames.
    """
    if isinstance(msg, WatchConnection):
        return AppleTlv(TYPE_WATCH_CONNECTION, msg.payload)
    if isinstance(msg, Handoff):
        _check_octet("clipboard_status", msg.clipboard_status)
        if not 0 <= msg.sequence_number <= 0xFFFF:
            raise FieldRange(f"sequence_number {msg.sequence_number} exceeds 16 bits")
        value = bytes([msg.clipboard_status]) + struct.pack("<H", msg.sequence_number) + msg.payload
        return AppleTlv(TYPE_HANDOFF, value)
    if isinstance(msg, WifiSettings):
        if len(msg.icloud_id) != 4:
            raise FieldRange(f"icloud_id needs 4 octets, got {len(msg.icloud_id)}")
        return AppleTlv(TYPE_WIFI_SETTINGS, msg.icloud_id)
    if isinstance(msg, InstantHotspot):
        if len(msg.prefix) != 2:
            raise FieldRange(f"hotspot prefix needs 2 octets, got {len(msg.prefix)}")
        for name in ("battery_life", "mid", "cell_service", "cell_bars"):
            _check_octet(name, getattr(msg, name))
        if strict and msg.battery_life > 100:
            raise FieldRange(f"battery_life {msg.battery_life} exceeds 100")
        if strict and msg.cell_bars > 5:
            raise FieldRange(f"cell_bars {msg.cell_bars} exceeds 5")
        value = msg.prefix + bytes([msg.battery_life, msg.mid, msg.cell_service, msg.cell_bars])
        return AppleTlv(TYPE_INSTANT_HOTSPOT, value)
    if isinstance(msg, WifiJoin):
        if len(msg.prefix) != WIFI_JOIN_PREFIX_LEN:
            raise FieldRange(f"wifi-join prefix needs {WIFI_JOIN_PREFIX_LEN} octets")
        if len(msg.ssid_hash3) != WIFI_JOIN_DIGEST_LEN:
            raise FieldRange(f"ssid_hash3 needs {WIFI_JOIN_DIGEST_LEN} octets")
        return AppleTlv(TYPE_WIFI_JOIN, msg.prefix + msg.ssid_hash3 + msg.suffix)
    if isinstance(msg, Nearby):
        if not 0 <= msg.location_sharing <= 0xF:
            raise FieldRange(f"location_sharing {msg.location_sharing} exceeds a nibble")
        if not 0 <= msg.action_code <= 0xF:
            raise FieldRange(f"action_code {msg.action_code} exceeds a nibble")
        value = bytes([(msg.location_sharing << 4) | msg.action_code]) + msg.status
        return AppleTlv(TYPE_NEARBY, value)
    if isinstance(msg, Unknown):
        return AppleTlv(msg.apple_type, msg.payload)
    raise TypeError(f"not a ContinuityMessage: {msg!r}")


def _check_octet(name: str, value: int) -> None:
    if not 0 <= value <= 0xFF:
        raise FieldRange(f"{name} {value} exceeds one octet")


# ---------------------------------------------------------------------------
# Advertisement frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BleAdvertisement:
    """One advertising event plus enough header detail to re-encode exactly.

    `ad_sequence` remembers the wire order of AD structures (by type octet) so
    a parsed frame re-serializes byte-for-byte even with unusual ordering;
    when empty, the encoder emits the canonical flags-then-manufacturer order.
    """

    address: MacAddress
    tlvs: tuple[AppleTlv, ...] = ()
    flags: AdFlags | None = None
    timestamp: float = 0.0
    channel: int = 37
    rssi: int | None = None
    tx_add_random: bool | None = None
    company_id: int | None = None  # manufacturer AD company; None if absent
    mfg_opaque: bytes = b""  # non-Apple manufacturer payload, preserved verbatim
    other_ads: tuple[tuple[int, bytes], ...] = ()
    ad_sequence: tuple[int, ...] = ()
    has_access_address: bool = False
    pdu_type: int = 0
    ch_sel: bool = False
    rx_add: bool = False
    raw: bytes = b""

    def __post_init__(self):
        if self.channel not in (37, 38, 39):
            raise FieldRange(f"channel {self.channel} not an advertising channel")

    @property
    def is_apple(self) -> bool:
        return self.company_id == APPLE_COMPANY_ID

    @property
    def not_apple(self) -> bool:
        """Frame carried manufacturer data from some other company."""
        return self.company_id is not None and not self.is_apple

    @property
    def apple_types(self) -> frozenset[int]:
        return frozenset(t.apple_type for t in self.tlvs)


def parse_advertisement(raw: bytes, timestamp: float = 0.0, channel: int = 37,
                        rssi: int | None = None) -> BleAdvertisement:
    """Parse a complete advertising payload starting at the PDU header.

    Captures that keep the 0x8E89BED6 access address and captures that strip
    it are both accepted; which one arrived is recorded so encoding restores
    it. Frames without an Apple manufacturer structure still parse (tlvs
    empty, `not_apple`/`company_id` tell the caller why).
    """
    data = raw
    has_access = data[:4] == ACCESS_ADDRESS_WIRE
    if has_access:
        data = data[4:]
    if len(data) < 8:
        raise TruncatedFrame(f"{len(data)} octets left, need PDU header + address")
    header0, length = data[0], data[1]
    pdu_type = header0 & 0x0F
    ch_sel = bool(header0 & 0x20)
    tx_add = bool(header0 & 0x40)
    rx_add = bool(header0 & 0x80)
    body = data[2:]
    if length != len(body):
        raise TruncatedFrame(f"PDU declares {length} octets, {len(body)} present")
    if length < 6:
        raise TruncatedFrame("PDU too short for an advertiser address")
    address = MacAddress(bytes(reversed(body[:6])))
    ad_data = body[6:]

    flags = None
    company_id = None
    mfg_opaque = b""
    tlvs: list[AppleTlv] = []
    other_ads: list[tuple[int, bytes]] = []
    ad_sequence: list[int] = []
    i = 0
    while i < len(ad_data):
        struct_len = ad_data[i]
        if struct_len == 0 or i + 1 + struct_len > len(ad_data):
            raise TruncatedFrame(f"AD structure at offset {i} overruns the frame")
        ad_type = ad_data[i + 1]
        payload = ad_data[i + 2:i + 1 + struct_len]
        ad_sequence.append(ad_type)
        if ad_type == AD_TYPE_FLAGS and len(payload) == 1 and flags is None:
            flags = AdFlags(payload[0])
        elif ad_type == AD_TYPE_MANUFACTURER and company_id is None:
            if len(payload) < 2:
                raise TruncatedFrame("manufacturer AD shorter than its company ID")
            company_id = struct.unpack_from("<H", payload)[0]
            if company_id == APPLE_COMPANY_ID:
                tlvs.extend(_split_tlvs(payload[2:]))
            else:
                mfg_opaque = payload[2:]
        else:
            other_ads.append((ad_type, payload))
        i += 1 + struct_len

    return BleAdvertisement(
        address=address, tlvs=tuple(tlvs), flags=flags,
        timestamp=timestamp, channel=channel, rssi=rssi,
        tx_add_random=tx_add, company_id=company_id, mfg_opaque=mfg_opaque,
        other_ads=tuple(other_ads), ad_sequence=tuple(ad_sequence),
        has_access_address=has_access, pdu_type=pdu_type, ch_sel=ch_sel,
        rx_add=rx_add, raw=raw,
    )


def _split_tlvs(data: bytes) -> list[AppleTlv]:
    tlvs = []
    i = 0
    while i < len(data):
        if i + 2 > len(data):
            raise TruncatedFrame("Continuity TLV header cut short")
        apple_type, apple_len = data[i], data[i + 1]
        if i + 2 + apple_len > len(data):
            raise TruncatedFrame(
                f"TLV 0x{apple_type:02X} declares {apple_len} octets, frame ends first")
        tlvs.append(AppleTlv(apple_type, data[i + 2:i + 2 + apple_len]))
        i += 2 + apple_len
    return tlvs


def encode_advertisement(adv: BleAdvertisement) -> bytes:
    """Serialize an advertisement; exact inverse of parse_advertisement."""
    ads: dict[str, bytes] = {}
    if adv.flags is not None:
        ads["flags"] = bytes([2, AD_TYPE_FLAGS, adv.flags.raw_byte])
    mfg_payload = None
    if adv.is_apple or adv.tlvs:
        mfg_payload = b"".join(t.to_bytes() for t in adv.tlvs)
    elif adv.company_id is not None:
        mfg_payload = adv.mfg_opaque
    if mfg_payload is not None:
        company = adv.company_id if adv.company_id is not None else APPLE_COMPANY_ID
        body = struct.pack("<H", company) + mfg_payload
        if len(body) + 1 > 0xFF:
            raise FrameTooLarge("manufacturer AD exceeds a one-octet length prefix")
        ads["mfg"] = bytes([len(body) + 1, AD_TYPE_MANUFACTURER]) + body

    pieces: list[bytes] = []
    if adv.ad_sequence:
        others = list(adv.other_ads)
        for ad_type in adv.ad_sequence:
            if ad_type == AD_TYPE_FLAGS and "flags" in ads:
                pieces.append(ads.pop("flags"))
            elif ad_type == AD_TYPE_MANUFACTURER and "mfg" in ads:
                pieces.append(ads.pop("mfg"))
            else:
                o_type, payload = others.pop(0)
                pieces.append(bytes([len(payload) + 1, o_type]) + payload)
    else:
        if "flags" in ads:
            pieces.append(ads["flags"])
        if "mfg" in ads:
            pieces.append(ads["mfg"])
        for o_type, payload in adv.other_ads:
            pieces.append(bytes([len(payload) + 1, o_type]) + payload)

    ad_data = b"".join(pieces)
    if len(ad_data) > MAX_AD_BYTES:
        raise FrameTooLarge(f"{len(ad_data)} octets of AD data, capacity is {MAX_AD_BYTES}")

    header0 = (adv.pdu_type & 0x0F) | (adv.ch_sel << 5) | (adv.rx_add << 7)
    if adv.tx_add_random:
        header0 |= 0x40
    body = bytes(reversed(adv.address.octets)) + ad_data
    frame = bytes([header0, len(body)]) + body
    if adv.has_access_address:
        frame = ACCESS_ADDRESS_WIRE + frame
    return frame
