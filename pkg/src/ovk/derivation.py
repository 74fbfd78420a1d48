"""
OVK derivation
Per-service Ownership Verification Keys derived from the shared seed:
OVSK = KDF(seed, R), metadata (R, M, N) with M = MAC(OVSK, R ‖ service_id),
registration signatures and updating messages.
"""
import logging
import os
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict

from config import settings
from src.crypto.b64 import B64Bytes
from src.crypto.suite import (
    MAC_KEY_BYTES,
    EcKeyPair,
    KdfInput,
    fingerprint,
    kdf,
    mac,
    mac_verify,
    pack_fields,
    scalar_to_keypair,
    sign,
    verify,
)
from src.errors import (
    EpochOrder,
    InternalError,
    InvalidInput,
    MalformedMetadata,
    NoMatchingSeed,
    OutOfRange,
    OvkError,
    WrongService,
)
from src.seed.exchange import SeedRecord

logger = logging.getLogger(__name__)

BIND_CONTEXT = b"ovk/bind/v1"
UPDATE_CONTEXT = b"ovk/update/v1"


class OvkMetadata(BaseModel):
    """Public salt R, MAC tag M and declared authenticator count N"""

    model_config = ConfigDict(frozen=True, extra="ignore")

    r: B64Bytes
    m: B64Bytes
    n: int

    def check(self):
        """
        Raises:
            MalformedMetadata: wrong field lengths or n < 1
        """
        if len(self.r) != settings.METADATA_R_BYTES:
            raise MalformedMetadata(f"r must be {settings.METADATA_R_BYTES} bytes")
        if len(self.m) != MAC_KEY_BYTES:
            raise MalformedMetadata(f"m must be {MAC_KEY_BYTES} bytes")
        if self.n < 1:
            raise MalformedMetadata("n must be >= 1")

    def packed(self) -> bytes:
        return pack_fields(self.r, self.m, self.n.to_bytes(4, "big"))


@dataclass(frozen=True)
class DerivedOvk:
    keypair: EcKeyPair
    metadata: OvkMetadata
    service_id: str
    seed_epoch: int

    @property
    def ovpk(self) -> bytes:
        return self.keypair.public_point


class UpdatingMessage(BaseModel):
    """
    Proposal of a new OVPK

    signature: previous OVSK over (new_ovpk ‖ new_metadata ‖ service_id)
    rebinding_sig: new OVSK over (sender public key ‖ service_id), so the
        sender's credential stays bound if the proposal commits
    """

    model_config = ConfigDict(frozen=True, extra="ignore")

    new_ovpk: B64Bytes
    new_metadata: OvkMetadata
    signature: B64Bytes
    sender_credential_id: str
    rebinding_sig: B64Bytes


def _metadata_message(r: bytes, service_id: str) -> bytes:
    return pack_fields(r, service_id.encode("utf-8"))


def _ovsk(seed: SeedRecord, r: bytes) -> EcKeyPair:
    return scalar_to_keypair(kdf(KdfInput(seed.seed, r)))


def _check_service_id(service_id: str):
    if not service_id:
        raise InvalidInput("service_id must not be empty")


def derive_fresh(seed: SeedRecord, service_id: str, r: Optional[bytes] = None) -> DerivedOvk:
    """
    Derive a new OVK for a service under a random salt

    Args:
        seed: Latest seed of the device
        service_id: Origin of the service
        r: Salt to use instead of a random one (single attempt)

    Returns:
        DerivedOvk with metadata (r, MAC(OVSK, r ‖ service_id), seed.n_parties)
    """
    _check_service_id(service_id)
    attempts = 1 if r is not None else settings.DERIVE_MAX_RETRIES
    for _ in range(attempts):
        salt = r if r is not None else os.urandom(settings.METADATA_R_BYTES)
        try:
            keypair = _ovsk(seed, salt)
        except OutOfRange:
            if r is not None:
                raise
            continue
        metadata = OvkMetadata(
            r=salt,
            m=mac(keypair.private_bytes, _metadata_message(salt, service_id)),
            n=seed.n_parties,
        )
        logger.debug("Derived OVPK %s for %s", fingerprint(keypair.public_point), service_id)
        return DerivedOvk(keypair, metadata, service_id, seed.epoch)
    raise InternalError(f"no valid scalar after {attempts} salts")


def derive_from_metadata(seed: SeedRecord, service_id: str, metadata: OvkMetadata) -> DerivedOvk:
    """
    Re-derive the OVK a sibling registered

    Raises:
        WrongService: metadata was not minted under this seed for this service
        MalformedMetadata: metadata fields out of shape
    """
    _check_service_id(service_id)
    metadata.check()
    try:
        keypair = _ovsk(seed, metadata.r)
    except OutOfRange:
        raise WrongService()
    if not mac_verify(keypair.private_bytes, _metadata_message(metadata.r, service_id), metadata.m):
        raise WrongService(f"metadata does not verify for {service_id}")
    return DerivedOvk(keypair, metadata, service_id, seed.epoch)


# ============================================================================
# SIGNATURES
# ============================================================================

def registration_payload(public_key: bytes, service_id: str) -> bytes:
    return pack_fields(BIND_CONTEXT, public_key, service_id.encode("utf-8"))


def authn_payload(challenge: bytes, service_id: str) -> bytes:
    """Bytes a credential signs to answer a challenge"""
    return pack_fields(challenge, service_id.encode("utf-8"))


def update_payload(new_ovpk: bytes, new_metadata: OvkMetadata, service_id: str) -> bytes:
    return pack_fields(UPDATE_CONTEXT, new_ovpk, new_metadata.packed(), service_id.encode("utf-8"))


def _safe_verify(point: bytes, message: bytes, signature: bytes) -> bool:
    try:
        return verify(point, message, signature)
    except OvkError:
        return False


def sign_registration(ovk: DerivedOvk, new_public_key: bytes) -> bytes:
    """OVSK signature authorizing a new credential public key for ovk.service_id"""
    return sign(ovk.keypair, registration_payload(new_public_key, ovk.service_id))


def verify_registration(ovpk: bytes, new_public_key: bytes, service_id: str, signature: bytes) -> bool:
    return _safe_verify(ovpk, registration_payload(new_public_key, service_id), signature)


def build_update(
    prev: DerivedOvk,
    next: DerivedOvk,
    sender_credential_id: str,
    sender_public_key: bytes,
) -> UpdatingMessage:
    """
    Sign the next OVPK with the previous OVSK

    Args:
        prev: OVK currently bound at the service
        next: OVK derived from the newer seed
        sender_credential_id: Credential authenticating the session
        sender_public_key: Public key of that credential

    Returns:
        UpdatingMessage

    Raises:
        EpochOrder: next does not come from a newer seed
    """
    if prev.service_id != next.service_id:
        raise InvalidInput("previous and next OVK target different services")
    if prev.seed_epoch >= next.seed_epoch:
        raise EpochOrder(f"epoch {next.seed_epoch} does not follow {prev.seed_epoch}")
    return UpdatingMessage(
        new_ovpk=next.ovpk,
        new_metadata=next.metadata,
        signature=sign(prev.keypair, update_payload(next.ovpk, next.metadata, next.service_id)),
        sender_credential_id=sender_credential_id,
        rebinding_sig=sign_registration(next, sender_public_key),
    )


def verify_update(ovpk: bytes, service_id: str, msg: UpdatingMessage) -> bool:
    return _safe_verify(ovpk, update_payload(msg.new_ovpk, msg.new_metadata, service_id), msg.signature)


# ============================================================================
# SEED SELECTION
# ============================================================================

def find_candidate(seed: SeedRecord, service_id: str, candidates: Iterable[OvkMetadata]) -> Optional[DerivedOvk]:
    """First relayed candidate whose MAC verifies under this seed, if any"""
    for candidate in candidates:
        try:
            return derive_from_metadata(seed, service_id, candidate)
        except (WrongService, MalformedMetadata):
            continue
    return None


def select_update_seed(
    seeds: Sequence[SeedRecord],
    prev_metadata: OvkMetadata,
    service_id: str,
) -> Tuple[SeedRecord, SeedRecord]:
    """
    Pick the seed behind the bound OVK and the seed to move to

    Args:
        seeds: Seeds held by the device, any order
        prev_metadata: Metadata currently bound at the service
        service_id: Service origin

    Returns:
        (previous seed, latest seed); equal when the service is already on
        the latest seed

    Raises:
        NoMatchingSeed: no held seed verifies prev_metadata
    """
    if not seeds:
        raise NoMatchingSeed("device holds no seed")
    ordered: List[SeedRecord] = sorted(seeds, key=lambda s: s.epoch)
    latest = ordered[-1]
    for seed in reversed(ordered):
        try:
            derive_from_metadata(seed, service_id, prev_metadata)
        except (WrongService, MalformedMetadata):
            continue
        return seed, latest
    raise NoMatchingSeed(f"no held seed verifies the metadata bound at {service_id}")
