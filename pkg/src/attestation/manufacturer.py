"""
Device attestation
A minimal manufacturer PKI: root keys certify per-device attestation keys,
devices sign statements about keys they generate, services judge those
statements against a trust policy.
"""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional, Union

from pydantic import BaseModel, ConfigDict, model_validator

from src.crypto.b64 import B64Bytes, b64url_decode, b64url_encode
from src.crypto.suite import (
    EcKeyPair,
    generate_keypair,
    pack_fields,
    scalar_to_keypair,
    sign,
    tags_equal,
    verify,
)
from src.errors import DeviceLocked, InvalidInput, OvkError

logger = logging.getLogger(__name__)


class AttestedKind(str, Enum):
    AUTHN_KEY = "AuthnKey"
    OVPK = "Ovpk"
    DH_SHARE = "DhShare"


class ManufacturerCert(BaseModel):
    """Root-signed binding of a model name to an attestation public key"""

    model_config = ConfigDict(frozen=True, extra="ignore")

    manufacturer_id: str
    model_name: str
    subject_point: B64Bytes
    signature: B64Bytes

    def signed_bytes(self) -> bytes:
        return pack_fields(
            b"ovk/cert/v1",
            self.manufacturer_id.encode("utf-8"),
            self.model_name.encode("utf-8"),
            self.subject_point,
        )


class AttestationStatement(BaseModel):
    """Device-signed claim about a freshly generated public key"""

    model_config = ConfigDict(frozen=True, extra="ignore")

    kind: AttestedKind
    subject_point: B64Bytes
    model_name: str
    peer_models: List[str] = []
    challenge_echo: B64Bytes
    signature: B64Bytes
    certificate: ManufacturerCert

    @model_validator(mode="after")
    def _peers_only_for_ovpk(self):
        if self.peer_models and self.kind != AttestedKind.OVPK:
            raise ValueError("peer_models is only allowed on Ovpk statements")
        return self

    def signed_bytes(self) -> bytes:
        return statement_bytes(self.kind, self.subject_point, self.model_name,
                               self.peer_models, self.challenge_echo)


def statement_bytes(kind: AttestedKind, subject_point: bytes, model_name: str,
                    peer_models: List[str], challenge_echo: bytes) -> bytes:
    peers = pack_fields(*(p.encode("utf-8") for p in peer_models))
    return pack_fields(
        b"ovk/attestation/v1",
        kind.value.encode("ascii"),
        subject_point,
        model_name.encode("utf-8"),
        peers,
        challenge_echo,
    )


@dataclass(frozen=True)
class DeviceIdentity:
    """Attestation key embedded by the manufacturer, with its certificate"""

    model_name: str
    attestation_keypair: EcKeyPair
    device_certificate: ManufacturerCert

    def __post_init__(self):
        if self.device_certificate.subject_point != self.attestation_keypair.public_point:
            raise InvalidInput("certificate subject does not match attestation key")
        if self.device_certificate.model_name != self.model_name:
            raise InvalidInput("certificate model does not match device model")


class TrustPolicy(BaseModel):
    """
    Service-side trust configuration

    trusted_roots: manufacturer root points
    compliant_models: models deriving OVKs as specified
    secure_storage_models: models keeping the seed in secure storage
    """

    model_config = ConfigDict(frozen=True, extra="ignore")

    trusted_roots: FrozenSet[B64Bytes] = frozenset()
    compliant_models: FrozenSet[str] = frozenset()
    secure_storage_models: FrozenSet[str] = frozenset()

    def to_json(self) -> str:
        return json.dumps({
            "trusted_roots": sorted(b64url_encode(r) for r in self.trusted_roots),
            "compliant_models": sorted(self.compliant_models),
            "secure_storage_models": sorted(self.secure_storage_models),
        }, indent=2)


@dataclass(frozen=True)
class TrustVerdict:
    chain_ok: bool
    criterion1: bool
    criterion2: bool

    @property
    def trusted(self) -> bool:
        return self.chain_ok and self.criterion1 and self.criterion2


class Manufacturer:
    """Holds a root key and issues device identities"""

    def __init__(self, manufacturer_id: str, root: Optional[EcKeyPair] = None):
        self.manufacturer_id = manufacturer_id
        self.root = root or generate_keypair()

    @property
    def root_point(self) -> bytes:
        return self.root.public_point

    def issue_certificate(self, model_name: str, subject_point: bytes) -> ManufacturerCert:
        unsigned = ManufacturerCert(
            manufacturer_id=self.manufacturer_id,
            model_name=model_name,
            subject_point=subject_point,
            signature=b"",
        )
        return unsigned.model_copy(update={"signature": sign(self.root, unsigned.signed_bytes())})

    def issue_device(self, model_name: str) -> DeviceIdentity:
        """
        Provision a new device of the given model

        Args:
            model_name: Marketing model name carried in the certificate

        Returns:
            DeviceIdentity with a fresh attestation key
        """
        keypair = generate_keypair()
        cert = self.issue_certificate(model_name, keypair.public_point)
        logger.info("Issued %s device certificate for model %s", self.manufacturer_id, model_name)
        return DeviceIdentity(model_name, keypair, cert)

    def to_dict(self) -> dict:
        return {"manufacturer_id": self.manufacturer_id, "root_key": b64url_encode(self.root.private_bytes)}

    @classmethod
    def from_dict(cls, data: dict) -> "Manufacturer":
        return cls(data["manufacturer_id"], scalar_to_keypair(b64url_decode(data["root_key"])))

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Manufacturer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def attest(
    device: DeviceIdentity,
    kind: AttestedKind,
    subject_point: bytes,
    peer_models: Iterable[str],
    challenge_echo: bytes,
    unlocked: bool = True,
) -> AttestationStatement:
    """
    Sign a statement about a key generated inside the device

    Args:
        device: Device identity holding the attestation key
        kind: What the subject key is
        subject_point: The attested public point
        peer_models: Models of the other seed holders (Ovpk statements only)
        challenge_echo: Service challenge (or negotiation context) answered
        unlocked: Local authentication state of the device

    Returns:
        AttestationStatement
    """
    if not unlocked:
        raise DeviceLocked()
    peers = list(peer_models)
    if peers and kind != AttestedKind.OVPK:
        raise InvalidInput("peer_models is only allowed on Ovpk statements")
    payload = statement_bytes(kind, subject_point, device.model_name, peers, challenge_echo)
    return AttestationStatement(
        kind=kind,
        subject_point=subject_point,
        model_name=device.model_name,
        peer_models=peers,
        challenge_echo=challenge_echo,
        signature=sign(device.attestation_keypair, payload),
        certificate=device.device_certificate,
    )


def _safe_verify(point: bytes, message: bytes, signature: bytes) -> bool:
    try:
        return verify(point, message, signature)
    except OvkError:
        return False


def verify_statement_signature(stmt: AttestationStatement) -> bool:
    """Integrity of the statement under its own certificate key, no chain"""
    return (stmt.model_name == stmt.certificate.model_name
            and _safe_verify(stmt.certificate.subject_point, stmt.signed_bytes(), stmt.signature))


def verify_chain(cert: ManufacturerCert, roots: Iterable[bytes]) -> bool:
    message = cert.signed_bytes()
    return any(_safe_verify(root, message, cert.signature) for root in roots)


def verify_statement(stmt: AttestationStatement, policy: TrustPolicy, expected_challenge: bytes) -> TrustVerdict:
    """
    Judge a statement against the trust policy

    chain_ok needs the certificate to chain to a trusted root, the statement
    signature to verify and the challenge echo to match. The two criteria only
    look at model names, so shrinking either policy set never turns a field true.
    """
    chain_ok = (
        verify_chain(stmt.certificate, policy.trusted_roots)
        and verify_statement_signature(stmt)
        and tags_equal(stmt.challenge_echo, expected_challenge)
    )
    criterion1 = stmt.model_name in policy.compliant_models
    criterion2 = (stmt.model_name in policy.secure_storage_models
                  and all(p in policy.secure_storage_models for p in stmt.peer_models))
    return TrustVerdict(chain_ok, criterion1, criterion2)


def load_policy(path: Union[str, Path]) -> TrustPolicy:
    return TrustPolicy.model_validate_json(Path(path).read_text(encoding="utf-8"))


def save_policy(policy: TrustPolicy, path: Union[str, Path]):
    Path(path).write_text(policy.to_json(), encoding="utf-8")
