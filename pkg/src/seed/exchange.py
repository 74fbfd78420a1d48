"""
Seed exchange
Password-protected ring Diffie-Hellman among N authenticators. Party i sends
to (i+1) mod N and receives from (i-1) mod N; after N-1 rounds every party
holds (∏ SK_i)·G and hashes its x-coordinate into the shared seed.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.attestation.manufacturer import (
    AttestationStatement,
    AttestedKind,
    DeviceIdentity,
    attest,
    verify_statement_signature,
)
from src.crypto.b64 import B64Bytes
from src.crypto.envelope import EnvelopeCompact, open_envelope, seal
from src.crypto.suite import dh, fingerprint, generate_keypair, pack_fields, point_x, sha256, tags_equal
from src.errors import (
    DuplicatePartyId,
    InvalidInput,
    OvkError,
    ProtocolOrder,
    UntrustedAttestation,
)

logger = logging.getLogger(__name__)

EXCHANGE_CONTEXT = b"ovk/seed-exchange"


@dataclass(frozen=True)
class NegotiationConfig:
    """Parameters every party agrees on before exchanging"""

    password: str = field(repr=False)
    self_id: int
    n_parties: int
    epoch: int
    iterations: Optional[int] = None

    def __post_init__(self):
        if not self.password:
            raise InvalidInput("password must not be empty")
        if self.n_parties < 2:
            raise InvalidInput("a negotiation needs at least two parties")
        if not 0 <= self.self_id < self.n_parties:
            raise InvalidInput(f"party id must be in [0, {self.n_parties - 1}]")
        if self.epoch < 1:
            raise InvalidInput("epoch must be >= 1")

    @property
    def send_to(self) -> int:
        return (self.self_id + 1) % self.n_parties

    @property
    def receive_from(self) -> int:
        return (self.self_id - 1) % self.n_parties


@dataclass
class SeedRecord:
    """A finalized seed; peer_models lists the N-1 other holders"""

    seed: bytes = field(repr=False)
    epoch: int
    peer_models: List[str]
    expires_at: Optional[float] = None

    @property
    def n_parties(self) -> int:
        return len(self.peer_models) + 1

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.seed)


class RoundMessage(BaseModel):
    """One hop of the ring; the file form is {round, from, to, envelope}"""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    round: int = Field(ge=1)
    from_id: int = Field(alias="from", ge=0)
    to_id: int = Field(alias="to", ge=0)
    envelope: str

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True)


class RoundPayload(BaseModel):
    """Plaintext inside a round envelope"""

    model_config = ConfigDict(extra="ignore")

    point: B64Bytes
    attestations: List[AttestationStatement]


def validate_party_ids(ids: Iterable[int], n_parties: int):
    """
    Check that identifiers cover [0, N-1] without overlap

    Raises:
        DuplicatePartyId: two parties share an id
        InvalidInput: an id is out of range
    """
    seen = set()
    for pid in ids:
        if not 0 <= pid < n_parties:
            raise InvalidInput(f"party id {pid} out of range for N={n_parties}")
        if pid in seen:
            raise DuplicatePartyId(f"party id {pid} assigned twice")
        seen.add(pid)


def exchange_context(epoch: int, n_parties: int) -> bytes:
    """Challenge echoed by every DhShare attestation of one negotiation"""
    return sha256(pack_fields(EXCHANGE_CONTEXT, epoch.to_bytes(8, "big"), n_parties.to_bytes(4, "big")))


class SeedExchange:
    """
    One party's negotiation state machine

    The ephemeral key lives only in this object and is dropped on
    finalization or abort.
    """

    def __init__(
        self,
        config: NegotiationConfig,
        identity: DeviceIdentity,
        unlocked: bool = True,
        on_finalized: Optional[Callable[[SeedRecord], None]] = None,
    ):
        self.config = config
        self.identity = identity
        self.unlocked = unlocked
        self.on_finalized = on_finalized
        self.ephemeral = None
        self.expected_round = 1
        self.status = "idle"
        self._own_attestation: Optional[AttestationStatement] = None

    @property
    def self_id(self) -> int:
        return self.config.self_id

    @property
    def last_round(self) -> int:
        return self.config.n_parties - 1

    def _seal(self, round_no: int, payload: RoundPayload) -> RoundMessage:
        envelope = seal(self.config.password, payload.model_dump_json().encode("utf-8"),
                        iterations=self.config.iterations)
        return RoundMessage(round=round_no, from_id=self.self_id, to_id=self.config.send_to,
                            envelope=envelope.serialize())

    def start(self) -> RoundMessage:
        """
        Generate the ephemeral DH key pair and emit the round-1 message

        Returns:
            RoundMessage carrying the attested own share
        """
        if self.status != "idle":
            raise ProtocolOrder("negotiation already started")
        self.ephemeral = generate_keypair()
        context = exchange_context(self.config.epoch, self.config.n_parties)
        self._own_attestation = attest(self.identity, AttestedKind.DH_SHARE, self.ephemeral.public_point,
                                       [], context, unlocked=self.unlocked)
        self.status = "running"
        logger.info("Party %d started seed exchange (epoch %d, N=%d)",
                    self.self_id, self.config.epoch, self.config.n_parties)
        return self._seal(1, RoundPayload(point=self.ephemeral.public_point,
                                          attestations=[self._own_attestation]))

    def _check_attestations(self, round_no: int, payload: RoundPayload):
        context = exchange_context(self.config.epoch, self.config.n_parties)
        if len(payload.attestations) != round_no:
            raise UntrustedAttestation(f"expected {round_no} relayed attestations")
        for stmt in payload.attestations:
            if (stmt.kind != AttestedKind.DH_SHARE
                    or not tags_equal(stmt.challenge_echo, context)
                    or not verify_statement_signature(stmt)):
                raise UntrustedAttestation("share attestation rejected")
        if round_no == 1 and payload.attestations[0].subject_point != payload.point:
            raise UntrustedAttestation("attested share differs from received share")

    def step(self, incoming: RoundMessage) -> Union[RoundMessage, SeedRecord]:
        """
        Consume the partner's message for the expected round

        Args:
            incoming: Message from (self_id - 1) mod N

        Returns:
            Next RoundMessage, or the SeedRecord after round N-1

        Raises:
            ProtocolOrder: wrong round, wrong addressee or not running
            AuthFailure: wrong password or tampered envelope (negotiation aborted)
            InvalidPoint: received point not on the curve (negotiation aborted)
        """
        if self.status != "running":
            raise ProtocolOrder(f"negotiation is {self.status}")
        if incoming.to_id != self.self_id or incoming.from_id != self.config.receive_from:
            raise ProtocolOrder("message is not from this party's partner")
        if incoming.round != self.expected_round:
            raise ProtocolOrder(f"expected round {self.expected_round}, got {incoming.round}")

        try:
            plaintext = open_envelope(self.config.password, EnvelopeCompact.parse(incoming.envelope))
            try:
                payload = RoundPayload.model_validate_json(plaintext)
            except ValidationError as e:
                raise InvalidInput(f"round payload malformed: {e.error_count()} errors")
            self._check_attestations(incoming.round, payload)
            product = dh(self.ephemeral.private_scalar, payload.point)
        except OvkError:
            logger.warning("Party %d aborting seed exchange at round %d", self.self_id, incoming.round)
            self.abort()
            raise

        if incoming.round < self.last_round:
            self.expected_round += 1
            relayed = [self._own_attestation] + list(payload.attestations)
            return self._seal(incoming.round + 1, RoundPayload(point=product, attestations=relayed))

        record = SeedRecord(
            seed=sha256(point_x(product)),
            epoch=self.config.epoch,
            peer_models=[stmt.model_name for stmt in payload.attestations],
        )
        self.ephemeral = None
        self.status = "finished"
        logger.info("Party %d finalized seed %s", self.self_id, record.fingerprint)
        if self.on_finalized is not None:
            self.on_finalized(record)
        return record

    def abort(self):
        """Drop the ephemeral key; idempotent"""
        self.ephemeral = None
        if self.status != "finished":
            self.status = "aborted"
