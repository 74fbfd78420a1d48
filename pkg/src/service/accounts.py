"""
Service-side account state
Everything here is persisted by the account store, so it is all pydantic.
"""
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict

from src.crypto.b64 import B64Bytes
from src.ovk.derivation import OvkMetadata


class CredentialStatus(str, Enum):
    ACTIVE = "Active"
    REVOKED = "Revoked"


class CredentialRecord(BaseModel):
    model_config = ConfigDict(validate_assignment=True)

    credential_id: str
    public_key: B64Bytes
    binding_sig: B64Bytes
    model_name: str
    status: CredentialStatus = CredentialStatus.ACTIVE

    @property
    def active(self) -> bool:
        return self.status == CredentialStatus.ACTIVE


class Proposal(BaseModel):
    """One candidate OVPK; rebinding maps supporter id -> new-OVSK signature"""

    new_ovpk: B64Bytes
    new_metadata: OvkMetadata
    supporters: List[str] = []
    first_seen: float
    rebinding: Dict[str, B64Bytes] = {}


class MigrationState(BaseModel):
    """
    An open OVK migration

    electorate is frozen at opening: the credentials Active at that moment.
    Proposals keep arrival order, which breaks ties on equal first_seen.
    """

    opened_at: float
    deadline: float
    electorate: List[str]
    proposals: List[Proposal] = []

    def voted(self, credential_id: str) -> bool:
        return any(credential_id in p.supporters for p in self.proposals)

    def proposal_for(self, new_ovpk: bytes) -> Optional[Proposal]:
        for proposal in self.proposals:
            if proposal.new_ovpk == new_ovpk:
                return proposal
        return None

    def majority(self) -> Optional[Proposal]:
        for proposal in self.proposals:
            if len(proposal.supporters) > len(self.electorate) // 2:
                return proposal
        return None

    def leader(self) -> Proposal:
        """Most supporters, then earliest first_seen, then arrival order"""
        ranked = sorted(
            enumerate(self.proposals),
            key=lambda item: (-len(item[1].supporters), item[1].first_seen, item[0]),
        )
        return ranked[0][1]


class Account(BaseModel):
    username: str
    ovpk: B64Bytes
    metadata: OvkMetadata
    credentials: List[CredentialRecord] = []
    migration: Optional[MigrationState] = None

    def credential(self, credential_id: str) -> Optional[CredentialRecord]:
        for cred in self.credentials:
            if cred.credential_id == credential_id:
                return cred
        return None

    def active_credentials(self) -> List[CredentialRecord]:
        return [c for c in self.credentials if c.active]

    @property
    def state(self) -> str:
        return "migrating" if self.migration is not None else "stable"


class CommitReport(BaseModel):
    username: str
    new_ovpk: B64Bytes
    supporters: List[str]
    revoked: List[str]
    committed_at: float
    by_deadline: bool


class ServiceSnapshot(BaseModel):
    service_id: str
    accounts: Dict[str, Account] = {}
