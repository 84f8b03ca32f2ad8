"""BLE device address handling: classification and resolvable private addresses.

BLE device addresses are 48-bit EUI-48 values. Besides the factory-assigned
public address, devices may use random addresses of three kinds, told apart by
the two most significant bits:

    11  static random
    00  non-resolvable private
    01  resolvable private (RPA)

An RPA is built from 22 pseudorandom bits (prand) plus a 24-bit keyed hash of
the prand computed under the device's 128-bit Identity Resolving Key (IRK).
A peer that holds the IRK can recompute the hash and confirm the address
belongs to the key holder; to anyone else the address is unlinkable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

PRAND_BITS = 22
HASH_BITS = 24
# Full 24-bit prand field of an RPA: the two kind bits (01) followed by the
# 22 pseudorandom bits. The keyed hash is computed over this full field.
RPA_KIND_BITS = 0b01 << PRAND_BITS


class AddressKind(Enum):
    PUBLIC = "public"
    STATIC_RANDOM = "static_random"
    NON_RESOLVABLE_PRIVATE = "non_resolvable_private"
    RESOLVABLE_PRIVATE = "resolvable_private"
    NON_COMPLIANT = "non_compliant"


@dataclass(frozen=True, order=True)
class MacAddress:
    """48-bit device address, most significant octet first."""

    octets: bytes

    def __post_init__(self):
        if len(self.octets) != 6:
            raise ValueError(f"address needs 6 octets, got {len(self.octets)}")

    @classmethod
    def parse(cls, text: str) -> "MacAddress":
        return cls(bytes(int(part, 16) for part in text.split(":")))

    @classmethod
    def from_int(cls, value: int) -> "MacAddress":
        return cls(value.to_bytes(6, "big"))

    def __int__(self) -> int:
        return int.from_bytes(self.octets, "big")

    def __str__(self) -> str:
        return ":".join(f"{b:02X}" for b in self.octets)

    def __repr__(self) -> str:
        return f"MacAddress({self})"


@dataclass(frozen=True)
class Irk:
    """128-bit Identity Resolving Key."""

    key: bytes

    def __post_init__(self):
        if len(self.key) != 16:
            raise ValueError(f"IRK needs 16 octets, got {len(self.key)}")

    @classmethod
    def parse(cls, text: str) -> "Irk":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"Irk({self.key.hex()})"


@dataclass(frozen=True)
class Rpa:
    """Decomposed resolvable private address: 22-bit prand + 24-bit hash."""

    prand: int  # 22 pseudorandom bits, kind bits excluded
    hash: int  # 24-bit keyed hash

    def __post_init__(self):
        if not 0 <= self.prand < (1 << PRAND_BITS):
            raise ValueError("prand exceeds 22 bits")
        if not 0 <= self.hash < (1 << HASH_BITS):
            raise ValueError("hash exceeds 24 bits")

    @property
    def prand_field(self) -> int:
        """Full upper-half field as it appears on the wire (kind bits + prand)."""
        return RPA_KIND_BITS | self.prand

    def to_mac(self) -> MacAddress:
        return MacAddress.from_int((self.prand_field << HASH_BITS) | self.hash)

    @classmethod
    def from_mac(cls, addr: MacAddress) -> "Rpa":
        value = int(addr)
        prand_field = value >> HASH_BITS
        if prand_field >> PRAND_BITS != 0b01:
            raise ValueError(f"{addr} is not a resolvable private address")
        return cls(prand=prand_field & ((1 << PRAND_BITS) - 1),
                   hash=value & ((1 << HASH_BITS) - 1))


def classify_address(addr: MacAddress, tx_add_random: bool | None = None) -> AddressKind:
    """Classify a device address by its TxAdd flag and top two bits.

    A false TxAdd flag marks the address public regardless of bit pattern.
    When the flag is true or unavailable, the two most significant bits select
    the random-address kind. Patterns whose remaining 46 bits are all zeros or
    all ones are reserved and reported as NON_COMPLIANT.
    """
    if tx_add_random is False:
        return AddressKind.PUBLIC
    value = int(addr)
    residual = value & ((1 << 46) - 1)
    if residual == 0 or residual == (1 << 46) - 1:
        return AddressKind.NON_COMPLIANT
    top = value >> 46
    if top == 0b11:
        return AddressKind.STATIC_RANDOM
    if top == 0b00:
        return AddressKind.NON_RESOLVABLE_PRIVATE
    if top == 0b01:
        return AddressKind.RESOLVABLE_PRIVATE
    return AddressKind.NON_COMPLIANT


def rpa_hash(irk: Irk, prand_field: int) -> int:
    """24-bit address hash of the prand field under the IRK.

    The 24-bit input (kind bits included, e.g. 0x708194) is zero-padded to one
    AES block, encrypted under the IRK, and the low 24 bits of the ciphertext
    are the hash.
    """
    if not 0 <= prand_field < (1 << HASH_BITS):
        raise ValueError("prand field exceeds 24 bits")
    block = prand_field.to_bytes(16, "big")
    encryptor = Cipher(algorithms.AES(irk.key), modes.ECB()).encryptor()
    out = encryptor.update(block) + encryptor.finalize()
    return int.from_bytes(out[-3:], "big")


def generate_rpa(irk: Irk, rng: random.Random) -> MacAddress:
    """Draw a fresh resolvable private address from the injected RNG.

    The prand bits come only from `rng` so simulations replay exactly under a
    fixed seed. Degenerate prand values (all zeros / all ones) are redrawn.
    """
    while True:
        prand = rng.getrandbits(PRAND_BITS)
        if prand not in (0, (1 << PRAND_BITS) - 1):
            break
    rpa = Rpa(prand=prand, hash=rpa_hash(irk, RPA_KIND_BITS | prand))
    return rpa.to_mac()


def resolve_rpa(irk: Irk, addr: MacAddress) -> bool:
    """True iff `addr` is a resolvable private address generated under `irk`."""
    if classify_address(addr, True) is not AddressKind.RESOLVABLE_PRIVATE:
        return False
    rpa = Rpa.from_mac(addr)
    return rpa_hash(irk, rpa.prand_field) == rpa.hash


def match_irk(addr: MacAddress, irks) -> Irk | None:
    """First key in `irks` that resolves `addr`, or None.

    Linear scan; fleets small enough to simulate do not warrant an index.
    """
    for irk in irks:
        if resolve_rpa(irk, addr):
            return irk
    return None
