"""
Password envelope
JWE compact serialization with PBES2-HS256+A128KW key wrapping and A128GCM
content encryption (RFC 7516 / RFC 7518)
"""
import json
import os
from dataclasses import dataclass
from typing import Dict, Optional, Union

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.pbkdf2 import PBKDF2HMAC
from cryptography.hazmat.primitives.keywrap import InvalidUnwrap, aes_key_unwrap, aes_key_wrap

from config import settings
from src.crypto.b64 import b64url_decode, b64url_encode
from src.crypto.suite import GCM_IV_BYTES, aes_gcm_decrypt, aes_gcm_encrypt
from src.errors import AuthFailure, InvalidInput, ParseError

KEY_WRAP_ALG = "PBES2-HS256+A128KW"
CONTENT_ENC = "A128GCM"
CEK_BYTES = 16
KEK_BYTES = 16


@dataclass(frozen=True)
class EnvelopeCompact:
    """
    Five-segment compact envelope

    `protected` keeps the exact header segment as received, since it is the
    additional authenticated data of the content cipher.
    """

    header: Dict
    wrapped_cek: bytes
    iv: bytes
    ciphertext: bytes
    tag: bytes
    protected: str

    def serialize(self) -> str:
        return ".".join([
            self.protected,
            b64url_encode(self.wrapped_cek),
            b64url_encode(self.iv),
            b64url_encode(self.ciphertext),
            b64url_encode(self.tag),
        ])

    @classmethod
    def parse(cls, compact: str) -> "EnvelopeCompact":
        """
        Split and decode a compact envelope

        Raises:
            ParseError: not five base64url segments
            AuthFailure: header segment decodes but is not a JSON object
        """
        if not isinstance(compact, str):
            raise ParseError("envelope must be a string")
        segments = compact.split(".")
        if len(segments) != 5:
            raise ParseError(f"expected 5 segments, got {len(segments)}")
        raw = [b64url_decode(s) for s in segments]
        try:
            header = json.loads(raw[0].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise AuthFailure("protected header corrupted")
        if not isinstance(header, dict):
            raise AuthFailure("protected header corrupted")
        return cls(
            header=header,
            wrapped_cek=raw[1],
            iv=raw[2],
            ciphertext=raw[3],
            tag=raw[4],
            protected=segments[0],
        )


def _derive_kek(password: str, p2s: bytes, p2c: int) -> bytes:
    # RFC 7518 4.8.1.1: salt = UTF8(alg) ‖ 0x00 ‖ p2s
    salt = KEY_WRAP_ALG.encode("utf-8") + b"\x00" + p2s
    kdf = PBKDF2HMAC(algorithm=hashes.SHA256(), length=KEK_BYTES, salt=salt, iterations=p2c)
    return kdf.derive(password.encode("utf-8"))


def seal(password: str, plaintext: bytes, iterations: Optional[int] = None) -> EnvelopeCompact:
    """
    Encrypt plaintext under a fresh CEK and wrap the CEK with the password

    Args:
        password: User password, never serialized
        plaintext: Bytes to protect
        iterations: PBKDF2 count, defaults to settings.PBES2_ITERATIONS

    Returns:
        EnvelopeCompact
    """
    if not password:
        raise InvalidInput("password must not be empty")
    p2c = settings.PBES2_ITERATIONS if iterations is None else iterations
    if p2c < settings.PBES2_MIN_ITERATIONS:
        raise InvalidInput(f"iteration count must be >= {settings.PBES2_MIN_ITERATIONS}")

    p2s = os.urandom(settings.PBES2_SALT_BYTES)
    header = {"alg": KEY_WRAP_ALG, "enc": CONTENT_ENC, "p2c": p2c, "p2s": b64url_encode(p2s)}
    protected = b64url_encode(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))

    cek = os.urandom(CEK_BYTES)
    wrapped = aes_key_wrap(_derive_kek(password, p2s, p2c), cek)
    iv = os.urandom(GCM_IV_BYTES)
    ciphertext, tag = aes_gcm_encrypt(cek, iv, plaintext, protected.encode("ascii"))
    return EnvelopeCompact(header, wrapped, iv, ciphertext, tag, protected)


def open_envelope(password: str, envelope: Union[EnvelopeCompact, str]) -> bytes:
    """
    Unwrap the CEK with the password and decrypt

    Raises:
        ParseError: malformed compact serialization
        AuthFailure: wrong password or any tampering
    """
    if isinstance(envelope, str):
        envelope = EnvelopeCompact.parse(envelope)
    header = envelope.header
    if header.get("alg") != KEY_WRAP_ALG or header.get("enc") != CONTENT_ENC:
        raise AuthFailure("unsupported algorithms in header")
    p2c = header.get("p2c")
    if not isinstance(p2c, int) or not settings.PBES2_MIN_ITERATIONS <= p2c <= settings.PBES2_MAX_ITERATIONS:
        raise AuthFailure("iteration count out of bounds")
    try:
        p2s = b64url_decode(header.get("p2s", ""))
    except ParseError:
        raise AuthFailure("salt corrupted")
    if len(p2s) < 8:
        raise AuthFailure("salt too short")

    try:
        cek = aes_key_unwrap(_derive_kek(password, p2s, p2c), envelope.wrapped_cek)
    except (InvalidUnwrap, ValueError):
        raise AuthFailure("key unwrap failed")
    if len(cek) != CEK_BYTES:
        raise AuthFailure("unexpected CEK length")
    return aes_gcm_decrypt(cek, envelope.iv, envelope.ciphertext, envelope.tag,
                           envelope.protected.encode("ascii"))
