"""Channel-scoped key derivation and authenticated framing.

Both endpoints of a channel derive their key from the *channel* name and the
direction, never from their own component name, so the sender's TX key and
the receiver's key for that same TX direction are identical.

Frame wire layout (big-endian)::

    version:1 (0x01) | channel_id:4 | ciphertext_len:4 | nonce:12 | ciphertext | tag:16

The 9-byte header is bound into the AEAD associated data ahead of any
caller-supplied associated data.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthenticationError, ConfigError, NonceExhausted

FRAME_VERSION = 0x01
CONTEXT_VERSION = "v1"
KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
_HEADER = struct.Struct(">BII")
COUNTER_LIMIT = 2**64


class Direction(enum.Enum):
    TX = "tx"
    RX = "rx"


# single source of truth for channel identities
CHANNELS = {
    "sniffer-to-ml-detector": 1,
    "fast-detector-to-ml-detector": 2,
    "ml-detector-to-firewall-acl-agent": 3,
    "ml-detector-to-rag-ingester": 4,
    "firewall-acl-agent-to-event-log": 5,
}

EVENT_LOG_CONTEXT = f"ml-defender:event-log:{CONTEXT_VERSION}:hmac"


@dataclass(frozen=True)
class ChannelContext:
    channel_name: str
    direction: Direction = Direction.TX
    version: str = CONTEXT_VERSION

    def __post_init__(self):
        if self.channel_name not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel_name!r}")

    @property
    def channel_id(self) -> int:
        return CHANNELS[self.channel_name]

    def info(self) -> bytes:
        return f"ml-defender:{self.channel_name}:{self.version}:{self.direction.value}".encode("ascii")


def hkdf_sha256(seed: bytes, info: bytes, length: int = KEY_BYTES) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(seed)


def derive_key(seed: bytes, ctx: ChannelContext) -> bytes:
    if len(seed) != 32:
        raise ConfigError("seed must be 32 bytes")
    return hkdf_sha256(seed, ctx.info())


def derive_log_key(seed: bytes) -> bytes:
    return hkdf_sha256(seed, EVENT_LOG_CONTEXT.encode("ascii"))


@dataclass(frozen=True)
class SealedFrame:
    channel_id: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes
    version: int = FRAME_VERSION

    def header(self) -> bytes:
        return _HEADER.pack(self.version, self.channel_id, len(self.ciphertext))

    def to_bytes(self) -> bytes:
        return self.header() + self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedFrame":
        minimum = _HEADER.size + NONCE_BYTES + TAG_BYTES
        if len(data) < minimum:
            raise AuthenticationError("frame too short")
        version, channel_id, length = _HEADER.unpack_from(data)
        if version != FRAME_VERSION:
            raise AuthenticationError(f"unsupported frame version {version}")
        if len(data) != minimum + length:
            raise AuthenticationError("frame length field does not match payload")
        off = _HEADER.size
        nonce = data[off : off + NONCE_BYTES]
        off += NONCE_BYTES
        ciphertext = data[off : off + length]
        return cls(channel_id, nonce, ciphertext, data[off + length :], version)


class FrameSealer:
    """Seals frames for one channel direction. Single owner: the nonce counter is not shared."""

    def __init__(self, key: bytes, channel_id: int, counter: int = 0):
        self._aead = ChaCha20Poly1305(key)
        self.channel_id = channel_id
        self.counter = counter

    def next_nonce(self) -> bytes:
        if self.counter >= COUNTER_LIMIT:
            raise NonceExhausted("nonce counter exhausted; rekey required")
        nonce = self.channel_id.to_bytes(4, "big") + self.counter.to_bytes(8, "big")
        self.counter += 1
        return nonce

    def seal(self, plaintext: bytes, associated_data: bytes = b"") -> SealedFrame:
        nonce = self.next_nonce()
        header = _HEADER.pack(FRAME_VERSION, self.channel_id, len(plaintext))
        sealed = self._aead.encrypt(nonce, plaintext, header + associated_data)
        return SealedFrame(self.channel_id, nonce, sealed[:-TAG_BYTES], sealed[-TAG_BYTES:])


def seal(sealer: FrameSealer, plaintext: bytes, associated_data: bytes = b"") -> SealedFrame:
    return sealer.seal(plaintext, associated_data)


def open_frame(key: bytes, frame: SealedFrame | bytes, associated_data: bytes = b"") -> bytes:
    """Authenticate and decrypt. Any inconsistency raises :class:`AuthenticationError`."""
    if isinstance(frame, (bytes, bytearray)):
        frame = SealedFrame.from_bytes(bytes(frame))
    if len(frame.nonce) != NONCE_BYTES or len(frame.tag) != TAG_BYTES:
        raise AuthenticationError("malformed nonce or tag")
    try:
        return ChaCha20Poly1305(key).decrypt(frame.nonce, frame.ciphertext + frame.tag, frame.header() + associated_data)
    except InvalidTag:
        raise AuthenticationError("MAC authentication failure") from None


class ChannelEndpoint:
    """Sender or receiver bound to one (channel, direction)."""

    def __init__(self, seed: bytes, channel_name: str, direction: Direction = Direction.TX):
        self.context = ChannelContext(channel_name, direction)
        self.key = derive_key(seed, self.context)
        self._sealer = FrameSealer(self.key, self.context.channel_id)

    def seal(self, plaintext: bytes, associated_data: bytes = b"") -> bytes:
        return self._sealer.seal(plaintext, associated_data).to_bytes()

    def open(self, wire: bytes, associated_data: bytes = b"") -> bytes:
        frame = SealedFrame.from_bytes(wire)
        if frame.channel_id != self.context.channel_id:
            raise AuthenticationError("frame addressed to a different channel")
        return open_frame(self.key, frame, associated_data)
