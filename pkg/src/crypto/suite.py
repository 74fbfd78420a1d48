"""
Cryptographic suite
Every primitive the scheme uses, fixed to secp256r1 / SHA-256 / AES-128
"""
import hashlib
import struct
from dataclasses import dataclass
from typing import Tuple

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import constant_time, hashes, hmac
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat
from ecdsa import NIST256p, VerifyingKey
from ecdsa.ellipticcurve import INFINITY
from ecdsa.errors import MalformedPointError

from src.errors import AuthFailure, InvalidInput, InvalidPoint, OutOfRange

CURVE = ec.SECP256R1()
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

SEED_BYTES = 32
MIN_SALT_BYTES = 16
MAC_KEY_BYTES = 32
SCALAR_BYTES = 32
POINT_BYTES = 65
SIGNATURE_BYTES = 64
GCM_IV_BYTES = 12
GCM_TAG_BYTES = 16


@dataclass(frozen=True)
class KdfInput:
    """Seed plus per-service salt fed to the KDF"""

    seed: bytes
    salt: bytes

    def __post_init__(self):
        if len(self.seed) != SEED_BYTES:
            raise InvalidInput(f"seed must be {SEED_BYTES} bytes, got {len(self.seed)}")
        if len(self.salt) < MIN_SALT_BYTES:
            raise InvalidInput(f"salt must be at least {MIN_SALT_BYTES} bytes")


@dataclass(frozen=True)
class EcKeyPair:
    """secp256r1 key pair; the public point is an uncompressed SEC1 encoding"""

    private_scalar: int
    public_point: bytes

    def __repr__(self) -> str:
        # the scalar never shows up in logs or tracebacks
        return f"EcKeyPair(public={fingerprint(self.public_point)})"

    @property
    def private_bytes(self) -> bytes:
        return self.private_scalar.to_bytes(SCALAR_BYTES, "big")

    @property
    def private_key(self) -> ec.EllipticCurvePrivateKey:
        return ec.derive_private_key(self.private_scalar, CURVE)


# ============================================================================
# HASHING / MAC / KDF
# ============================================================================

def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def fingerprint(data: bytes) -> str:
    """Short printable identifier of public data (first 16 hex chars of SHA-256)"""
    return hashlib.sha256(data).hexdigest()[:16]


def pack_fields(*fields: bytes) -> bytes:
    """Length-prefixed concatenation: len(a) ‖ a ‖ len(b) ‖ b ..."""
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    """Raw HMAC-SHA-256 without length policy"""
    h = hmac.HMAC(key, hashes.SHA256())
    h.update(message)
    return h.finalize()


def kdf(kdf_input: KdfInput) -> bytes:
    """
    Derive 32 pseudorandom bytes from a seed and a salt

    Args:
        kdf_input: Seed (HMAC key) and salt (HMAC message)

    Returns:
        32-byte HMAC-SHA-256 output
    """
    return hmac_sha256(kdf_input.seed, kdf_input.salt)


def mac(key: bytes, message: bytes) -> bytes:
    if len(key) != MAC_KEY_BYTES:
        raise InvalidInput(f"MAC key must be {MAC_KEY_BYTES} bytes")
    return hmac_sha256(key, message)


def mac_verify(key: bytes, message: bytes, tag: bytes) -> bool:
    """Constant-time MAC check"""
    if len(key) != MAC_KEY_BYTES:
        raise InvalidInput(f"MAC key must be {MAC_KEY_BYTES} bytes")
    h = hmac.HMAC(key, hashes.SHA256())
    h.update(message)
    try:
        h.verify(tag)
        return True
    except InvalidSignature:
        return False


def tags_equal(a: bytes, b: bytes) -> bool:
    return constant_time.bytes_eq(a, b)


# ============================================================================
# KEYS / SIGNATURES
# ============================================================================

def _keypair_from_private(private_key: ec.EllipticCurvePrivateKey) -> EcKeyPair:
    public = private_key.public_key().public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)
    return EcKeyPair(private_scalar=private_key.private_numbers().private_value, public_point=public)


def scalar_to_keypair(candidate: bytes) -> EcKeyPair:
    """
    Interpret 32 bytes as a big-endian scalar d and build the key pair d·G

    Raises:
        OutOfRange: d is 0 or ≥ n; the caller draws a new salt and retries
    """
    if len(candidate) != SCALAR_BYTES:
        raise InvalidInput(f"candidate must be {SCALAR_BYTES} bytes")
    d = int.from_bytes(candidate, "big")
    if not 1 <= d <= CURVE_ORDER - 1:
        raise OutOfRange()
    return _keypair_from_private(ec.derive_private_key(d, CURVE))


def generate_keypair() -> EcKeyPair:
    return _keypair_from_private(ec.generate_private_key(CURVE))


def public_key_from_point(point: bytes) -> ec.EllipticCurvePublicKey:
    if len(point) != POINT_BYTES or point[0] != 0x04:
        raise InvalidPoint("expected a 65-byte uncompressed point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, point)
    except ValueError as e:
        raise InvalidPoint(str(e))


def sign(key: EcKeyPair, message: bytes) -> bytes:
    """ECDSA-P256-SHA256 signature as fixed-width r ‖ s"""
    der = key.private_key.sign(message, ec.ECDSA(hashes.SHA256()))
    r, s = decode_dss_signature(der)
    return r.to_bytes(SCALAR_BYTES, "big") + s.to_bytes(SCALAR_BYTES, "big")


def verify(point: bytes, message: bytes, signature: bytes) -> bool:
    """
    Verify an r ‖ s signature

    Raises:
        InvalidInput: point or signature is not well-formed
    """
    if len(signature) != SIGNATURE_BYTES:
        raise InvalidInput(f"signature must be {SIGNATURE_BYTES} bytes")
    try:
        public_key = public_key_from_point(point)
    except InvalidPoint as e:
        raise InvalidInput(e.detail)
    r = int.from_bytes(signature[:SCALAR_BYTES], "big")
    s = int.from_bytes(signature[SCALAR_BYTES:], "big")
    if not (0 < r < CURVE_ORDER and 0 < s < CURVE_ORDER):
        return False
    try:
        public_key.verify(encode_dss_signature(r, s), message, ec.ECDSA(hashes.SHA256()))
        return True
    except InvalidSignature:
        return False


# ============================================================================
# DIFFIE-HELLMAN
# ============================================================================

def dh(private_scalar: int, peer_point: bytes) -> bytes:
    """
    Full-point ECDH: private_scalar · peer_point

    The ring exchange forwards intermediate products, so this returns the
    whole point rather than only the x-coordinate.
    """
    if not 1 <= private_scalar <= CURVE_ORDER - 1:
        raise InvalidInput("scalar out of range")
    if len(peer_point) != POINT_BYTES or peer_point[0] != 0x04:
        raise InvalidPoint("expected a 65-byte uncompressed point")
    try:
        peer = VerifyingKey.from_string(peer_point, curve=NIST256p)
    except (MalformedPointError, ValueError) as e:
        raise InvalidPoint(str(e))
    product = peer.pubkey.point * private_scalar
    if product == INFINITY:
        raise InvalidPoint("product is the identity")
    return VerifyingKey.from_public_point(product, curve=NIST256p).to_string("uncompressed")


def generator_point() -> bytes:
    return scalar_to_keypair((1).to_bytes(SCALAR_BYTES, "big")).public_point


def point_x(point: bytes) -> bytes:
    return point[1:1 + SCALAR_BYTES]


# ============================================================================
# AES-GCM
# ============================================================================

def aes_gcm_encrypt(key: bytes, iv: bytes, plaintext: bytes, aad: bytes = b"") -> Tuple[bytes, bytes]:
    """
    AES-GCM encryption

    Returns:
        (ciphertext, 16-byte tag)
    """
    encryptor = Cipher(algorithms.AES(key), modes.GCM(iv)).encryptor()
    encryptor.authenticate_additional_data(aad)
    ciphertext = encryptor.update(plaintext) + encryptor.finalize()
    return ciphertext, encryptor.tag


def aes_gcm_decrypt(key: bytes, iv: bytes, ciphertext: bytes, tag: bytes, aad: bytes = b"") -> bytes:
    if len(iv) != GCM_IV_BYTES or len(tag) != GCM_TAG_BYTES:
        raise AuthFailure("bad IV or tag length")
    decryptor = Cipher(algorithms.AES(key), modes.GCM(iv, tag)).decryptor()
    decryptor.authenticate_additional_data(aad)
    try:
        return decryptor.update(ciphertext) + decryptor.finalize()
    except InvalidTag:
        raise AuthFailure("authentication tag mismatch")
