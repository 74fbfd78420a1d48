"""
Authenticator
Device-side state: seeds with a retention policy, one credential per service,
a local unlock gate, and the user flows (share seed, register, seamless
enrollment, sign in with updates).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence, Union

from config import settings
from src.attestation.manufacturer import AttestedKind, DeviceIdentity, attest
from src.crypto.suite import EcKeyPair, fingerprint, generate_keypair, sign
from src.errors import (
    ConsentRequired,
    CredentialExists,
    DeviceLocked,
    EpochOrder,
    InvalidInput,
    MalformedMetadata,
    NoCredential,
    NoMatchingSeed,
    RevokedCredential,
    UnknownAccount,
    WrongService,
)
from src.harness.clock import Clock, SystemClock
from src.ovk.derivation import (
    DerivedOvk,
    OvkMetadata,
    UpdatingMessage,
    authn_payload,
    build_update,
    derive_fresh,
    derive_from_metadata,
    find_candidate,
    select_update_seed,
    sign_registration,
)
from src.seed.channels import InMemoryChannel, drive_ring
from src.seed.exchange import NegotiationConfig, RoundMessage, SeedExchange, SeedRecord
from src.wire.client import ServiceClient
from src.wire.messages import (
    AuthnRequest,
    EnrollRequest,
    RegisterRequest,
    StartAuthnResponse,
    UpdateAck,
)

logger = logging.getLogger(__name__)


class RetentionMode(str, Enum):
    MAX_COUNT = "MaxCount"
    EXPIRY = "Expiry"


@dataclass(frozen=True)
class RetentionPolicy:
    """
    How many seeds a device keeps

    MaxCount keeps the newest max_count seeds, deleting older ones only when
    prompt_consent is set. Expiry drops seeds expiry_secs after installation.
    """

    mode: RetentionMode = RetentionMode.MAX_COUNT
    max_count: Optional[int] = 2
    expiry_secs: Optional[float] = None
    prompt_consent: bool = True

    def __post_init__(self):
        if self.mode == RetentionMode.MAX_COUNT and (self.max_count is None or self.max_count < 1):
            raise InvalidInput("MaxCount retention needs max_count >= 1")
        if self.mode == RetentionMode.EXPIRY and (self.expiry_secs is None or self.expiry_secs <= 0):
            raise InvalidInput("Expiry retention needs a positive expiry_secs")


@dataclass
class StoredCredential:
    service_id: str
    username: str
    credential_id: str
    keypair: EcKeyPair


@dataclass
class PendingUpdate:
    """Updating message sent but not yet committed; resent unchanged"""

    message: UpdatingMessage
    new_epoch: int


@dataclass(frozen=True)
class RegistrationReceipt:
    service_id: str
    username: str
    credential_id: str
    ovpk_fingerprint: str
    capacity: int


@dataclass(frozen=True)
class UpdateOutcome:
    status: Literal["pending", "committed", "duplicate", "up_to_date"]
    ack: Optional[UpdateAck] = None


@dataclass(frozen=True)
class SessionProof:
    service_id: str
    username: str
    credential_id: Optional[str]
    outcome: Literal["signed_in", "enrolled", "reenroll_required"]
    update: Optional[UpdateOutcome] = None


class Authenticator:
    """One emulated authenticator; every secret-touching call needs unlock()"""

    def __init__(
        self,
        identity: DeviceIdentity,
        retention: Optional[RetentionPolicy] = None,
        clock: Optional[Clock] = None,
        name: Optional[str] = None,
    ):
        self.identity = identity
        self.retention = retention or RetentionPolicy()
        self.clock = clock or SystemClock()
        self.name = name or identity.model_name
        self.seeds: List[SeedRecord] = []
        self.credentials: Dict[str, StoredCredential] = {}
        self.pending_updates: Dict[str, PendingUpdate] = {}
        self.unlocked = False
        self.renewal_prompt = False
        self.exchange: Optional[SeedExchange] = None

    def __repr__(self) -> str:
        return f"Authenticator({self.name}, epochs={[s.epoch for s in self.seeds]})"

    # ------------------------------------------------------------------------
    # local state
    # ------------------------------------------------------------------------

    def unlock(self, pin_or_biometric_ok: bool):
        if pin_or_biometric_ok:
            self.unlocked = True

    def lock(self):
        self.unlocked = False

    def _require_unlocked(self):
        if not self.unlocked:
            raise DeviceLocked()

    @property
    def latest_seed(self) -> Optional[SeedRecord]:
        return self.seeds[-1] if self.seeds else None

    @property
    def epochs(self) -> List[int]:
        return [s.epoch for s in self.seeds]

    def install_seed(self, record: SeedRecord):
        """
        Append a finalized seed

        Raises:
            EpochOrder: epoch not newer than the latest held seed
        """
        latest = self.latest_seed
        if latest is not None and record.epoch <= latest.epoch:
            raise EpochOrder(f"epoch {record.epoch} does not follow {latest.epoch}")
        if self.retention.mode == RetentionMode.EXPIRY:
            record.expires_at = self.clock.now() + self.retention.expiry_secs
        self.seeds.append(record)
        logger.info("%s installed seed %s (epoch %d, N=%d)", self.name, record.fingerprint,
                    record.epoch, record.n_parties)

    def enforce_retention(self, now: Optional[float] = None) -> List[int]:
        """
        Apply the retention policy

        Returns:
            Deleted epochs

        Raises:
            ConsentRequired: MaxCount needs a deletion the user has not agreed to
        """
        now = self.clock.now() if now is None else now
        if self.retention.mode == RetentionMode.MAX_COUNT:
            excess = len(self.seeds) - self.retention.max_count
            if excess <= 0:
                return []
            if not self.retention.prompt_consent:
                raise ConsentRequired(f"{excess} seed(s) over the limit of {self.retention.max_count}")
            doomed, self.seeds = self.seeds[:excess], self.seeds[excess:]
        else:
            doomed = [s for s in self.seeds if s.expires_at is not None and s.expires_at <= now]
            self.seeds = [s for s in self.seeds if s not in doomed]
            window = self.retention.expiry_secs * settings.RENEWAL_WINDOW_FRACTION
            self.renewal_prompt = (not self.seeds) or any(
                s.expires_at is not None and s.expires_at - now <= window for s in self.seeds
            )
        deleted = [s.epoch for s in doomed]
        if deleted:
            logger.info("%s deleted seed epochs %s", self.name, deleted)
        return deleted

    # ------------------------------------------------------------------------
    # seed sharing
    # ------------------------------------------------------------------------

    def begin_seed_exchange(self, config: NegotiationConfig) -> SeedExchange:
        """
        Create this device's party for a negotiation; start() emits round 1
        and the finalized seed is installed automatically
        """
        self._require_unlocked()
        latest = self.latest_seed
        if latest is not None and config.epoch <= latest.epoch:
            raise EpochOrder(f"epoch {config.epoch} does not follow {latest.epoch}")
        self.exchange = SeedExchange(config, self.identity, unlocked=self.unlocked,
                                     on_finalized=self.install_seed)
        return self.exchange

    def continue_seed_exchange(self, incoming: RoundMessage):
        if self.exchange is None:
            raise InvalidInput("no seed exchange in progress")
        return self.exchange.step(incoming)

    # ------------------------------------------------------------------------
    # service flows
    # ------------------------------------------------------------------------

    def _new_credential_key(self, challenge: bytes):
        keypair = generate_keypair()
        statement = attest(self.identity, AttestedKind.AUTHN_KEY, keypair.public_point, [],
                           challenge, unlocked=self.unlocked)
        return keypair, statement

    def _ovk_for(self, service_id: str, metadata: OvkMetadata) -> DerivedOvk:
        """Re-derive a registered OVK from whichever held seed minted it"""
        for seed in reversed(self.seeds):
            try:
                return derive_from_metadata(seed, service_id, metadata)
            except (WrongService, MalformedMetadata):
                continue
        raise WrongService(f"no held seed verifies the metadata presented by {service_id}")

    def register_account(self, client: ServiceClient, username: str) -> RegistrationReceipt:
        """
        Create an account: fresh credential plus an OVK from the latest seed

        Args:
            client: Client for the service; its origin is the service id
            username: Account name to claim

        Returns:
            RegistrationReceipt
        """
        self._require_unlocked()
        service_id = client.service_id
        if service_id in self.credentials:
            raise CredentialExists(f"{self.name} already holds a credential for {service_id}")
        seed = self.latest_seed
        if seed is None:
            raise NoMatchingSeed("device holds no seed")

        start = client.start_authn(username)
        ovk = derive_fresh(seed, service_id)
        keypair, statement = self._new_credential_key(start.challenge)
        ovpk_statement = attest(self.identity, AttestedKind.OVPK, ovk.ovpk, seed.peer_models,
                                start.challenge, unlocked=self.unlocked)
        created = client.register(RegisterRequest(
            username=username,
            challenge=start.challenge,
            public_key=keypair.public_point,
            attestation=statement,
            ovpk=ovk.ovpk,
            metadata=ovk.metadata,
            ovpk_attestation=ovpk_statement,
            binding_sig=sign_registration(ovk, keypair.public_point),
        ))
        self.credentials[service_id] = StoredCredential(service_id, username, created.credential_id, keypair)
        logger.info("%s registered %s on %s", self.name, username, service_id)
        return RegistrationReceipt(service_id, username, created.credential_id,
                                   fingerprint(ovk.ovpk), created.capacity)

    def _enroll(self, client: ServiceClient, username: str, start: StartAuthnResponse) -> StoredCredential:
        service_id = client.service_id
        if start.metadata is None:
            raise UnknownAccount(f"{username!r} has no OVK on {service_id}")
        # MAC check happens before anything is sent
        ovk = self._ovk_for(service_id, start.metadata)
        keypair, statement = self._new_credential_key(start.challenge)
        bound = client.enroll(EnrollRequest(
            username=username,
            challenge=start.challenge,
            public_key=keypair.public_point,
            attestation=statement,
            ovk_signature=sign_registration(ovk, keypair.public_point),
        ))
        cred = StoredCredential(service_id, username, bound.credential_id, keypair)
        self.credentials[service_id] = cred
        logger.info("%s seamlessly enrolled on %s for %s", self.name, service_id, username)
        return cred

    def _sign_in(self, client: ServiceClient, cred: StoredCredential, start: StartAuthnResponse,
                 message: Optional[UpdatingMessage] = None):
        try:
            return client.authn(AuthnRequest(
                username=cred.username,
                challenge=start.challenge,
                credential_id=cred.credential_id,
                challenge_signature=sign(cred.keypair, authn_payload(start.challenge, client.service_id)),
                updating_message=message,
            ))
        except RevokedCredential:
            logger.warning("%s credential on %s was revoked", self.name, cred.service_id)
            self.credentials.pop(cred.service_id, None)
            self.pending_updates.pop(cred.service_id, None)
            raise

    def _prepare_update(self, service_id: str, cred: StoredCredential,
                        start: StartAuthnResponse) -> Optional[UpdatingMessage]:
        if start.metadata is None:
            raise UnknownAccount(f"{cred.username!r} has no OVK on {service_id}")
        prev_seed, new_seed = select_update_seed(self.seeds, start.metadata, service_id)
        if prev_seed.epoch == new_seed.epoch:
            self.pending_updates.pop(service_id, None)
            return None
        pending = self.pending_updates.get(service_id)
        if pending is not None and pending.new_epoch == new_seed.epoch:
            return pending.message

        prev = derive_from_metadata(prev_seed, service_id, start.metadata)
        nxt = find_candidate(new_seed, service_id, start.candidates)
        if nxt is None:
            nxt = derive_fresh(new_seed, service_id)
            logger.info("%s proposes a fresh OVK on %s", self.name, service_id)
        else:
            logger.info("%s follows a relayed candidate on %s", self.name, service_id)
        message = build_update(prev, nxt, cred.credential_id, cred.keypair.public_point)
        self.pending_updates[service_id] = PendingUpdate(message, new_seed.epoch)
        return message

    def _update_outcome(self, service_id: str, ack: Optional[UpdateAck]) -> UpdateOutcome:
        if ack is None:
            return UpdateOutcome("up_to_date")
        if ack.status == "committed":
            self.pending_updates.pop(service_id, None)
        return UpdateOutcome(ack.status, ack)

    def login_or_enroll(self, client: ServiceClient, username: str, auto_update: bool = True) -> SessionProof:
        """
        Sign in, enrolling seamlessly first when this device has no credential

        With auto_update, a device holding several seeds (or an unsent
        pending update) attaches an updating message to the sign-in.

        Returns:
            SessionProof; outcome reenroll_required when the stale credential
            was revoked and dropped
        """
        self._require_unlocked()
        service_id = client.service_id
        start = client.start_authn(username)
        cred = self.credentials.get(service_id)

        if cred is None:
            cred = self._enroll(client, username, start)
            granted = self._sign_in(client, cred, client.start_authn(username))
            return SessionProof(service_id, username, granted.credential_id, "enrolled")

        message = None
        wants_update = auto_update and (len(self.seeds) > 1 or service_id in self.pending_updates)
        if wants_update:
            message = self._prepare_update(service_id, cred, start)
        try:
            granted = self._sign_in(client, cred, start, message)
        except RevokedCredential:
            return SessionProof(service_id, username, None, "reenroll_required")
        update = self._update_outcome(service_id, granted.update) if wants_update else None
        return SessionProof(service_id, username, granted.credential_id, "signed_in", update)

    def send_update(self, client: ServiceClient, username: str) -> UpdateOutcome:
        """
        Propose the OVK of the latest seed, following a relayed candidate
        when one verifies under it

        Raises:
            NoCredential: no credential for this service
            NoMatchingSeed: no held seed verifies the bound metadata
            RevokedCredential: credential revoked; it is dropped
        """
        self._require_unlocked()
        service_id = client.service_id
        cred = self.credentials.get(service_id)
        if cred is None:
            raise NoCredential(f"{self.name} has no credential for {service_id}")
        start = client.start_authn(username)
        message = self._prepare_update(service_id, cred, start)
        granted = self._sign_in(client, cred, start, message)
        return self._update_outcome(service_id, granted.update)


def run_group_exchange(
    devices: Sequence[Authenticator],
    password: Union[str, Sequence[str]],
    epoch: Optional[int] = None,
    channel=None,
    iterations: Optional[int] = None,
) -> List[SeedRecord]:
    """
    Share a new seed among devices in one process

    Args:
        devices: Unlocked authenticators; list order gives party ids
        password: Password typed on every device, or one per device
        epoch: Defaults to one past the newest epoch any device holds
        channel: Defaults to a fresh InMemoryChannel
        iterations: PBKDF2 count for the envelopes

    Returns:
        The installed SeedRecords, one per device
    """
    if epoch is None:
        epoch = max((d.latest_seed.epoch for d in devices if d.latest_seed), default=0) + 1
    n_parties = len(devices)
    passwords = [password] * n_parties if isinstance(password, str) else list(password)
    if len(passwords) != n_parties:
        raise InvalidInput("one password per device")
    parties = [
        device.begin_seed_exchange(NegotiationConfig(passwords[i], i, n_parties, epoch, iterations))
        for i, device in enumerate(devices)
    ]
    return drive_ring(parties, channel or InMemoryChannel())
