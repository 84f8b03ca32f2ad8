"""JSONL capture format: the wire between every pipeline stage.

One JSON object per line. BLE records carry the raw advertising payload as
lowercase hex plus capture metadata; abstract cross-domain events (probe
request / authentication frames seen on the Wi-Fi side) share the stream with
their own `kind`. Decoding and fingerprinting happen lazily on read, so a
capture file is always a faithful byte-level record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Iterable, Iterator

from .addressing import classify_address
from .codec import (
    CodecError,
    MalformedMessage,
    Nearby,
    Unknown,
    decode_message,
    parse_advertisement,
)
from .fingerprint import UNKNOWN_OS, infer_device_class, infer_os_version
from .tracker import Observation

SCHEMA_VERSION = 1

KIND_BLE = "ble"
KIND_WIFI_PROBE = "wifi_probe"
KIND_WIFI_AUTH = "wifi_auth"


class CaptureError(Exception):
    pass


class SchemaMismatch(CaptureError):
    def __init__(self, version, line_no: int):
        super().__init__(f"line {line_no}: schema_version {version} not supported")
        self.version = version
        self.line_no = line_no


class ParseError(CaptureError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class CaptureRecord:
    """One serialized observation (or cross-domain event)."""

    timestamp: float
    address: str
    kind: str = KIND_BLE
    channel: int | None = 37
    rssi: int | None = None
    tx_add_random: bool | None = None
    raw: str = ""  # lowercase hex of the advertising payload
    model: str | None = None  # externally obtained GATT model string
    summary: dict | None = None
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        doc = {"v": self.schema_version, "ts": self.timestamp, "kind": self.kind,
               "addr": self.address}
        if self.channel is not None:
            doc["ch"] = self.channel
        if self.rssi is not None:
            doc["rssi"] = self.rssi
        if self.tx_add_random is not None:
            doc["tx_add"] = self.tx_add_random
        if self.raw:
            doc["raw"] = self.raw
        if self.model is not None:
            doc["model"] = self.model
        if self.summary is not None:
            doc["summary"] = self.summary
        return json.dumps(doc, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str, line_no: int = 0) -> "CaptureRecord":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"bad JSON: {exc.msg}") from exc
        if not isinstance(doc, dict) or "v" not in doc:
            raise ParseError(line_no, "record is not an object with a version")
        if doc["v"] != SCHEMA_VERSION:
            raise SchemaMismatch(doc["v"], line_no)
        try:
            record = cls(
                timestamp=float(doc["ts"]),
                address=doc["addr"],
                kind=doc.get("kind", KIND_BLE),
                channel=doc.get("ch"),
                rssi=doc.get("rssi"),
                tx_add_random=doc.get("tx_add"),
                raw=doc.get("raw", ""),
                model=doc.get("model"),
                summary=doc.get("summary"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line_no, f"missing or invalid field: {exc}") from exc
        if record.raw:
            try:
                bytes.fromhex(record.raw)
            except ValueError as exc:
                raise ParseError(line_no, "raw field is not valid hex") from exc
        return record

    def payload_bytes(self) -> bytes:
        return bytes.fromhex(self.raw)


def write_capture(records: Iterable[CaptureRecord], path) -> int:
    n = 0
    with open(path, "w") as f:
        for record in records:
            f.write(record.to_json())
            f.write("\n")
            n += 1
    return n


def read_capture(path) -> Iterator[CaptureRecord]:
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            yield CaptureRecord.from_json(line, line_no)


def record_to_observation(record: CaptureRecord) -> Observation | None:
    """Decode + fingerprint one BLE record; None for frames the tracker skips.

    Malformed Continuity TLVs are kept as opaque Unknown messages rather than
    dropped, so one odd record never kills a whole capture.
    """
    if record.kind != KIND_BLE or not record.raw:
        return None
    adv = parse_advertisement(record.payload_bytes(), timestamp=record.timestamp,
                              channel=record.channel or 37, rssi=record.rssi)
    if not adv.is_apple:
        return None
    messages = []
    for tlv in adv.tlvs:
        try:
            messages.append(decode_message(tlv))
        except MalformedMessage:
            messages.append(Unknown(apple_type=tlv.apple_type, payload=tlv.value))
    device_class = infer_device_class(adv.flags, adv.apple_types)
    nearby = next((m for m in messages if isinstance(m, Nearby)), None)
    os_fp = infer_os_version(nearby, device_class) if nearby else UNKNOWN_OS
    return Observation(
        timestamp=record.timestamp,
        address=adv.address,
        address_kind=classify_address(adv.address, adv.tx_add_random),
        messages=tuple(messages),
        device_class=device_class,
        os=os_fp,
        model=record.model,
    )


def to_observations(records: Iterable[CaptureRecord]) -> Iterator[Observation]:
    """Stream observations out of a record stream (non-BLE/non-Apple skipped)."""
    for record in records:
        try:
            obs = record_to_observation(record)
        except CodecError:
            continue
        if obs is not None:
            yield obs


def summarize(record: CaptureRecord) -> dict:
    """Human/machine summary of one record for the decode pipeline stage."""
    base = {"ts": record.timestamp, "kind": record.kind, "addr": record.address}
    if record.kind != KIND_BLE:
        base["detail"] = record.summary or {}
        return base
    try:
        adv = parse_advertisement(record.payload_bytes(), timestamp=record.timestamp)
    except CodecError as exc:
        base["error"] = f"{type(exc).__name__}: {exc}"
        return base
    base["address_kind"] = classify_address(adv.address, adv.tx_add_random).value
    if adv.flags is not None:
        base["flags"] = adv.flags.bits
    if not adv.is_apple:
        base["not_apple"] = True
        if adv.company_id is not None:
            base["company_id"] = adv.company_id
        return base
    messages = []
    for tlv in adv.tlvs:
        try:
            msg = decode_message(tlv)
        except MalformedMessage as exc:
            messages.append({"type": tlv.apple_type, "error": str(exc)})
            continue
        entry = {"type": tlv.apple_type, "message": type(msg).__name__}
        entry.update({k: (v.hex() if isinstance(v, bytes) else v)
                      for k, v in asdict(msg).items()})
        messages.append(entry)
    base["messages"] = messages
    return base
