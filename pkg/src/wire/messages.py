"""
Wire messages
Request and response bodies exchanged between authenticators and services.
Byte fields travel as unpadded base64url; unknown fields are ignored.
"""
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from src.attestation.manufacturer import AttestationStatement
from src.crypto.b64 import B64Bytes
from src.ovk.derivation import OvkMetadata, UpdatingMessage


class WireModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")


# ============================================================================
# REQUESTS
# ============================================================================

class StartAuthnRequest(WireModel):
    username: str = Field(min_length=1)


class RegisterRequest(WireModel):
    username: str = Field(min_length=1)
    challenge: B64Bytes
    public_key: B64Bytes
    attestation: AttestationStatement
    ovpk: B64Bytes
    metadata: OvkMetadata
    ovpk_attestation: AttestationStatement
    binding_sig: B64Bytes


class EnrollRequest(WireModel):
    username: str = Field(min_length=1)
    challenge: B64Bytes
    public_key: B64Bytes
    attestation: AttestationStatement
    ovk_signature: B64Bytes


class AuthnRequest(WireModel):
    username: str = Field(min_length=1)
    challenge: B64Bytes
    credential_id: str
    challenge_signature: B64Bytes
    updating_message: Optional[UpdatingMessage] = None


# ============================================================================
# RESPONSES
# ============================================================================

class StartAuthnResponse(WireModel):
    """
    Challenge plus the account's OVK state

    Unknown usernames get the same shape with no ovpk or metadata.
    candidates is non-empty only while a migration is open.
    """

    challenge: B64Bytes
    credentials: List[str] = []
    ovpk: Optional[B64Bytes] = None
    metadata: Optional[OvkMetadata] = None
    candidates: List[OvkMetadata] = []
    state: Literal["stable", "migrating"] = "stable"


class AccountCreated(WireModel):
    username: str
    credential_id: str
    capacity: int


class KeyBound(WireModel):
    username: str
    credential_id: str
    active_count: int


class UpdateAck(WireModel):
    """
    status: pending (vote recorded, migration open), committed (this proposal
    won), duplicate (this credential already voted in the open migration)
    """

    status: Literal["pending", "committed", "duplicate"]
    supporters: int
    electorate: int
    deadline: Optional[float] = None
    revoked: List[str] = []


class SessionGranted(WireModel):
    username: str
    credential_id: str
    update: Optional[UpdateAck] = None


class ErrorReply(WireModel):
    error: str
    detail: str = ""
