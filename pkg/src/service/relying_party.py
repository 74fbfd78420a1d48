"""
Relying party
Accounts, challenges, OVPK-gated credential binding and the OVK migration
vote. Every mutation of one account happens under that account's lock, so
first_seen order is the order the lock was taken.
"""
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from config import settings
from src.attestation.manufacturer import (
    AttestationStatement,
    AttestedKind,
    TrustPolicy,
    load_policy,
    verify_statement,
)
from src.crypto.suite import fingerprint, verify
from src.database.account_store import AccountStore
from src.errors import (
    BadOwnershipSignature,
    BadSignature,
    BadUpdateSignature,
    CorruptStore,
    CredentialExists,
    DuplicateUser,
    InvalidInput,
    MalformedUpdate,
    MigrationInProgress,
    NLimitExceeded,
    OvkError,
    RevokedCredential,
    StaleChallenge,
    UnknownAccount,
    UnknownCredential,
    UntrustedAttestation,
)
from src.harness.clock import Clock, SystemClock
from src.ovk.derivation import UpdatingMessage, authn_payload, verify_registration, verify_update
from src.service.accounts import (
    Account,
    CommitReport,
    CredentialRecord,
    CredentialStatus,
    MigrationState,
    Proposal,
    ServiceSnapshot,
)
from src.wire.messages import (
    AccountCreated,
    AuthnRequest,
    EnrollRequest,
    KeyBound,
    RegisterRequest,
    SessionGranted,
    StartAuthnResponse,
    UpdateAck,
)

logger = logging.getLogger(__name__)


class ServiceSettings(BaseModel):
    """Service config file: JSON, unknown keys ignored"""

    model_config = ConfigDict(extra="ignore")

    service_id: str = Field(min_length=1)
    migration_period_secs: float = Field(default=settings.MIGRATION_PERIOD_SECS, gt=0)
    challenge_ttl_secs: float = Field(default=settings.CHALLENGE_TTL_SECS, gt=0)
    store_path: Optional[str] = None
    trust_policy_path: Optional[str] = None

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ServiceSettings":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


def credential_id_for(public_key: bytes) -> str:
    return "cred-" + fingerprint(public_key)


# ============================================================================
# CHALLENGES
# ============================================================================

@dataclass
class ChallengeRecord:
    value: bytes
    username: str
    issued_at: float
    ttl: float
    consumed: bool = False

    def expired(self, now: float) -> bool:
        return now > self.issued_at + self.ttl


class ChallengeStore:
    """Issues single-use challenges; consumption is atomic"""

    def __init__(self, ttl: float):
        self.ttl = ttl
        self._records: Dict[bytes, ChallengeRecord] = {}
        self._lock = threading.Lock()

    def issue(self, username: str, now: float) -> bytes:
        value = os.urandom(settings.CHALLENGE_BYTES)
        with self._lock:
            self._purge(now)
            self._records[value] = ChallengeRecord(value, username, now, self.ttl)
        return value

    def consume(self, value: bytes, username: str, now: float):
        """
        Raises:
            StaleChallenge: unknown, expired, consumed or issued for another user
        """
        with self._lock:
            record = self._records.get(value)
            if record is None or record.consumed or record.expired(now) or record.username != username:
                raise StaleChallenge()
            record.consumed = True

    def _purge(self, now: float):
        stale = [v for v, r in self._records.items() if r.consumed or r.expired(now)]
        for value in stale:
            del self._records[value]


# ============================================================================
# RELYING PARTY
# ============================================================================

class RelyingParty:
    """Service state machine for one origin"""

    def __init__(
        self,
        service_id: str,
        policy: TrustPolicy,
        clock: Optional[Clock] = None,
        migration_period: float = settings.MIGRATION_PERIOD_SECS,
        challenge_ttl: float = settings.CHALLENGE_TTL_SECS,
        store: Optional[AccountStore] = None,
    ):
        if not service_id:
            raise InvalidInput("service_id must not be empty")
        self.service_id = service_id
        self.policy = policy
        self.clock = clock or SystemClock()
        self.migration_period = migration_period
        self.challenges = ChallengeStore(challenge_ttl)
        self.store = store
        self.accounts: Dict[str, Account] = {}
        self._registry_lock = threading.Lock()
        self._account_locks: Dict[str, threading.RLock] = {}
        self.commits: List[CommitReport] = []

    @classmethod
    def from_settings(cls, config: ServiceSettings, clock: Optional[Clock] = None) -> "RelyingParty":
        policy = load_policy(config.trust_policy_path) if config.trust_policy_path else TrustPolicy()
        store = AccountStore(config.store_path) if config.store_path else None
        rp = cls(config.service_id, policy, clock, config.migration_period_secs,
                 config.challenge_ttl_secs, store)
        if store is not None and store.exists():
            rp.restore()
        return rp

    def _lock_for(self, username: str) -> threading.RLock:
        with self._registry_lock:
            return self._account_locks.setdefault(username, threading.RLock())

    def _account(self, username: str) -> Account:
        account = self.accounts.get(username)
        if account is None:
            raise UnknownAccount(f"no account {username!r}")
        return account

    def _now(self, now: Optional[float]) -> float:
        return self.clock.now() if now is None else now

    def _check_attestation(self, stmt: AttestationStatement, kind: AttestedKind,
                           subject: bytes, challenge: bytes):
        if stmt.kind != kind or stmt.subject_point != subject:
            raise UntrustedAttestation(f"{kind.value} statement does not cover the submitted key")
        verdict = verify_statement(stmt, self.policy, challenge)
        if not verdict.trusted:
            raise UntrustedAttestation(
                f"chain_ok={verdict.chain_ok} criterion1={verdict.criterion1} criterion2={verdict.criterion2}"
            )

    def _saved(self):
        if self.store is not None:
            self.persist()

    # ------------------------------------------------------------------------
    # endpoints
    # ------------------------------------------------------------------------

    def start_authn(self, username: str) -> StartAuthnResponse:
        """
        Issue a challenge bound to username

        Unknown usernames get a real challenge with no OVK state, the same
        shape a caller would see for an account without metadata.
        """
        now = self.clock.now()
        with self._lock_for(username):
            account = self.accounts.get(username)
            challenge = self.challenges.issue(username, now)
            if account is None:
                return StartAuthnResponse(challenge=challenge)
            self._finalize_if_due(account, now)
            migration = account.migration
            candidates = [p.new_metadata for p in sorted(migration.proposals, key=lambda p: p.first_seen)] \
                if migration else []
            return StartAuthnResponse(
                challenge=challenge,
                credentials=[c.credential_id for c in account.active_credentials()],
                ovpk=account.ovpk,
                metadata=account.metadata,
                candidates=candidates,
                state=account.state,
            )

    def register(self, req: RegisterRequest) -> AccountCreated:
        """
        Create an account bound to an OVPK and its first credential

        Raises:
            DuplicateUser, UntrustedAttestation, MalformedMetadata,
            BadOwnershipSignature, StaleChallenge
        """
        now = self.clock.now()
        with self._lock_for(req.username):
            self.challenges.consume(req.challenge, req.username, now)
            if req.username in self.accounts:
                raise DuplicateUser(f"username {req.username!r} taken")
            req.metadata.check()
            self._check_attestation(req.attestation, AttestedKind.AUTHN_KEY, req.public_key, req.challenge)
            self._check_attestation(req.ovpk_attestation, AttestedKind.OVPK, req.ovpk, req.challenge)
            if not verify_registration(req.ovpk, req.public_key, self.service_id, req.binding_sig):
                raise BadOwnershipSignature()

            cred = CredentialRecord(
                credential_id=credential_id_for(req.public_key),
                public_key=req.public_key,
                binding_sig=req.binding_sig,
                model_name=req.attestation.model_name,
            )
            self.accounts[req.username] = Account(
                username=req.username, ovpk=req.ovpk, metadata=req.metadata, credentials=[cred],
            )
            logger.info("Registered %s on %s (OVPK %s, N=%d)", req.username, self.service_id,
                        fingerprint(req.ovpk), req.metadata.n)
            self._saved()
            return AccountCreated(username=req.username, credential_id=cred.credential_id,
                                  capacity=req.metadata.n)

    def enroll_key(self, req: EnrollRequest) -> KeyBound:
        """
        Bind a sibling device's key authorized by an OVSK signature

        Raises:
            MigrationInProgress, UntrustedAttestation, BadOwnershipSignature,
            NLimitExceeded, CredentialExists, StaleChallenge, UnknownAccount
        """
        now = self.clock.now()
        with self._lock_for(req.username):
            self.challenges.consume(req.challenge, req.username, now)
            account = self._account(req.username)
            self._finalize_if_due(account, now)
            if account.migration is not None:
                raise MigrationInProgress()
            self._check_attestation(req.attestation, AttestedKind.AUTHN_KEY, req.public_key, req.challenge)
            if not verify_registration(account.ovpk, req.public_key, self.service_id, req.ovk_signature):
                raise BadOwnershipSignature()
            cred_id = credential_id_for(req.public_key)
            if account.credential(cred_id) is not None:
                raise CredentialExists(f"{cred_id} already bound")
            if len(account.active_credentials()) >= account.metadata.n:
                raise NLimitExceeded(f"account holds {account.metadata.n} active credentials")

            account.credentials.append(CredentialRecord(
                credential_id=cred_id,
                public_key=req.public_key,
                binding_sig=req.ovk_signature,
                model_name=req.attestation.model_name,
            ))
            active = len(account.active_credentials())
            logger.info("Bound %s to %s (%d/%d)", cred_id, req.username, active, account.metadata.n)
            self._saved()
            return KeyBound(username=req.username, credential_id=cred_id, active_count=active)

    def authn(self, req: AuthnRequest) -> SessionGranted:
        """
        Verify a challenge response; a piggybacked updating message is
        processed after the session is granted

        Raises:
            StaleChallenge, UnknownCredential, RevokedCredential, BadSignature
        """
        now = self.clock.now()
        with self._lock_for(req.username):
            self.challenges.consume(req.challenge, req.username, now)
            account = self._account(req.username)
            self._finalize_if_due(account, now)
            cred = account.credential(req.credential_id)
            if cred is None:
                raise UnknownCredential(req.credential_id)
            if not cred.active:
                raise RevokedCredential(req.credential_id)
            try:
                ok = verify(cred.public_key, authn_payload(req.challenge, self.service_id),
                            req.challenge_signature)
            except OvkError:
                ok = False
            if not ok:
                raise BadSignature()

            ack = None
            if req.updating_message is not None:
                if req.updating_message.sender_credential_id != req.credential_id:
                    raise MalformedUpdate("updating message names another credential")
                ack = self._process_update(account, req.updating_message, now)
            logger.info("Session granted to %s via %s", req.username, req.credential_id)
            return SessionGranted(username=req.username, credential_id=req.credential_id, update=ack)

    # ------------------------------------------------------------------------
    # migration
    # ------------------------------------------------------------------------

    def process_update(self, username: str, sender_credential_id: str, msg: UpdatingMessage,
                       now: Optional[float] = None) -> UpdateAck:
        """
        Record one credential's vote for a new OVPK

        Args:
            username: Account name
            sender_credential_id: Credential that authenticated the session
            msg: Updating message signed by the current OVSK
            now: Arrival time, the clock by default

        Returns:
            UpdateAck

        Raises:
            BadUpdateSignature, MalformedUpdate, RevokedCredential
        """
        now = self._now(now)
        with self._lock_for(username):
            account = self._account(username)
            self._finalize_if_due(account, now)
            if msg.sender_credential_id != sender_credential_id:
                raise MalformedUpdate("updating message names another credential")
            return self._process_update(account, msg, now)

    def _process_update(self, account: Account, msg: UpdatingMessage, now: float) -> UpdateAck:
        sender = account.credential(msg.sender_credential_id)
        if sender is None:
            raise UnknownCredential(msg.sender_credential_id)
        if not sender.active:
            raise RevokedCredential(msg.sender_credential_id)
        msg.new_metadata.check()
        if not verify_update(account.ovpk, self.service_id, msg):
            raise BadUpdateSignature()
        if not verify_registration(msg.new_ovpk, sender.public_key, self.service_id, msg.rebinding_sig):
            raise BadUpdateSignature("re-binding signature does not verify under the proposed OVPK")

        migration = account.migration
        if migration is None:
            migration = MigrationState(
                opened_at=now,
                deadline=now + self.migration_period,
                electorate=[c.credential_id for c in account.active_credentials()],
            )
            account.migration = migration
            logger.info("Migration opened on %s for %s (deadline %.0f)",
                        self.service_id, account.username, migration.deadline)

        proposal = migration.proposal_for(msg.new_ovpk)
        if proposal is not None and proposal.new_metadata != msg.new_metadata:
            raise MalformedUpdate("same OVPK proposed with different metadata")

        if migration.voted(sender.credential_id):
            current = proposal or migration.leader()
            return UpdateAck(status="duplicate", supporters=len(current.supporters),
                             electorate=len(migration.electorate), deadline=migration.deadline)

        if proposal is None:
            proposal = Proposal(new_ovpk=msg.new_ovpk, new_metadata=msg.new_metadata, first_seen=now)
            migration.proposals.append(proposal)
        proposal.supporters.append(sender.credential_id)
        proposal.rebinding[sender.credential_id] = msg.rebinding_sig
        supporters = len(proposal.supporters)
        electorate = len(migration.electorate)
        logger.info("Vote %s -> %s (%d/%d)", sender.credential_id, fingerprint(msg.new_ovpk),
                    supporters, electorate)

        if migration.majority() is proposal:
            report = self._commit(account, proposal, now, by_deadline=False)
            self._saved()
            return UpdateAck(status="committed", supporters=supporters, electorate=electorate,
                             revoked=report.revoked)
        self._saved()
        return UpdateAck(status="pending", supporters=supporters, electorate=electorate,
                         deadline=migration.deadline)

    def _commit(self, account: Account, proposal: Proposal, now: float, by_deadline: bool) -> CommitReport:
        revoked = []
        for cred in account.credentials:
            if cred.credential_id in proposal.supporters:
                cred.binding_sig = proposal.rebinding[cred.credential_id]
            elif cred.active:
                cred.status = CredentialStatus.REVOKED
                revoked.append(cred.credential_id)
        account.ovpk = proposal.new_ovpk
        account.metadata = proposal.new_metadata
        account.migration = None
        report = CommitReport(
            username=account.username,
            new_ovpk=proposal.new_ovpk,
            supporters=list(proposal.supporters),
            revoked=revoked,
            committed_at=now,
            by_deadline=by_deadline,
        )
        self.commits.append(report)
        logger.info("Committed OVPK %s for %s on %s; revoked %s", fingerprint(proposal.new_ovpk),
                    account.username, self.service_id, revoked or "none")
        return report

    def _finalize_if_due(self, account: Account, now: float) -> Optional[CommitReport]:
        migration = account.migration
        if migration is None:
            return None
        winner = migration.majority()
        by_deadline = winner is None
        if by_deadline:
            if now < migration.deadline or not migration.proposals:
                return None
            winner = migration.leader()
        report = self._commit(account, winner, now, by_deadline=by_deadline)
        self._saved()
        return report

    def finalize_migration(self, username: str, now: Optional[float] = None) -> Optional[CommitReport]:
        """
        Commit the winning proposal if a majority exists or the deadline passed

        Winner: majority of the frozen electorate, else most supporters,
        else earliest first_seen.

        Returns:
            CommitReport, or None when no migration is due
        """
        now = self._now(now)
        with self._lock_for(username):
            return self._finalize_if_due(self._account(username), now)

    def finalize_due(self, now: Optional[float] = None) -> List[CommitReport]:
        now = self._now(now)
        reports = []
        for username in sorted(self.accounts):
            report = self.finalize_migration(username, now)
            if report is not None:
                reports.append(report)
        return reports

    # ------------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------------

    def snapshot(self) -> ServiceSnapshot:
        return ServiceSnapshot(service_id=self.service_id, accounts=self.accounts)

    def persist(self, store_path: Optional[Union[str, Path]] = None):
        store = AccountStore(store_path) if store_path is not None else self.store
        if store is None:
            raise InvalidInput("no store configured")
        with self._registry_lock:
            store.save(self.snapshot())

    def restore(self, store_path: Optional[Union[str, Path]] = None):
        """
        Replace in-memory accounts with the stored snapshot

        Raises:
            CorruptStore: the document does not parse or names another service
        """
        store = AccountStore(store_path) if store_path is not None else self.store
        if store is None:
            raise InvalidInput("no store configured")
        snapshot = store.load()
        if snapshot is None:
            return
        if snapshot.service_id != self.service_id:
            raise CorruptStore(f"store belongs to {snapshot.service_id}")
        with self._registry_lock:
            self.accounts = dict(snapshot.accounts)
        logger.info("Restored %d accounts for %s", len(self.accounts), self.service_id)
