"""
Stolen-device race
A user and an attacker holding some of the registered authenticators each
re-share a seed and race updating messages to one service. run_race plays it
through the real devices and service; race_oracle applies the vote rules
(majority, then most supporters, then earliest) to every message ordering.
"""
import logging
import random
from itertools import permutations
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.attestation.manufacturer import Manufacturer, TrustPolicy
from src.authenticator.device import Authenticator, RetentionPolicy, run_group_exchange
from src.errors import OvkError, WrongService
from src.harness.clock import ManualClock
from src.ovk.derivation import derive_from_metadata
from src.service.endpoint import ServiceEndpoint
from src.service.relying_party import RelyingParty
from src.wire.client import ServiceClient
from src.wire.transport import LoopbackTransport

logger = logging.getLogger(__name__)

Winner = Literal["user", "attacker"]
Ordering = Tuple[str, ...]

USER = "U"
ATTACKER = "A"
RACE_ORIGIN = "https://race.example"
RACE_MODEL = "OVK-Key-1"
RACE_PERIOD = 100.0


class RaceConfig(BaseModel):
    """
    n: registered authenticators (the account's N)
    n_u: registered authenticators still held by the user
    n_a: registered authenticators held by the attacker
    """

    model_config = ConfigDict(frozen=True)

    n: int = Field(ge=2)
    n_u: int = Field(ge=1)
    n_a: int = Field(ge=1)
    attacker_first: bool

    @model_validator(mode="after")
    def _fits(self):
        if self.n_u + self.n_a > self.n:
            raise ValueError("n_u + n_a must not exceed n")
        return self


def race_orderings(config: RaceConfig) -> List[Ordering]:
    """Distinct message orderings whose first sender matches attacker_first"""
    first = ATTACKER if config.attacker_first else USER
    senders = USER * config.n_u + ATTACKER * config.n_a
    return sorted(o for o in set(permutations(senders)) if o[0] == first)


def oracle_winner(config: RaceConfig, ordering: Ordering) -> Winner:
    """Vote rules applied directly to one ordering"""
    votes = {USER: 0, ATTACKER: 0}
    for sender in ordering:
        votes[sender] += 1
        if votes[sender] > config.n // 2:
            return "user" if sender == USER else "attacker"
    if votes[USER] != votes[ATTACKER]:
        return "user" if votes[USER] > votes[ATTACKER] else "attacker"
    return "user" if ordering[0] == USER else "attacker"


def race_oracle(config: RaceConfig) -> Dict[Ordering, Winner]:
    return {ordering: oracle_winner(config, ordering) for ordering in race_orderings(config)}


def run_race(config: RaceConfig, ordering_seed: int = 0, ordering: Optional[Sequence[str]] = None,
             iterations: Optional[int] = None) -> Winner:
    """
    Play one race through devices and a service

    Args:
        config: Race sizes and who sends first
        ordering_seed: Picks the ordering when none is given
        ordering: Explicit sender sequence of "U" / "A"
        iterations: PBKDF2 count for seed envelopes

    Returns:
        Whose OVPK the service ends up bound to
    """
    if ordering is None:
        ordering = random.Random(ordering_seed).choice(race_orderings(config))
    ordering = tuple(ordering)

    clock = ManualClock()
    maker = Manufacturer("ACME")
    policy = TrustPolicy(trusted_roots=frozenset([maker.root_point]),
                         compliant_models=frozenset([RACE_MODEL]),
                         secure_storage_models=frozenset([RACE_MODEL]))
    rp = RelyingParty(RACE_ORIGIN, policy, clock, migration_period=RACE_PERIOD)
    client = ServiceClient(LoopbackTransport(ServiceEndpoint(rp)))

    def new_device(name: str) -> Authenticator:
        device = Authenticator(maker.issue_device(RACE_MODEL), RetentionPolicy(max_count=4),
                               clock=clock, name=name)
        device.unlock(True)
        return device

    registered = [new_device(f"dev{i}") for i in range(config.n)]
    run_group_exchange(registered, "first password", iterations=iterations)
    registered[0].register_account(client, "victim")
    for device in registered[1:]:
        device.login_or_enroll(client, "victim")

    user_side = registered[:config.n_u]
    attacker_side = registered[config.n_u:config.n_u + config.n_a]
    user_seed = run_group_exchange(user_side + [new_device("replacement")], "user password",
                                   iterations=iterations)[0]
    attacker_seed = run_group_exchange(attacker_side + [new_device("accomplice")], "attacker password",
                                       iterations=iterations)[0]

    queues = {USER: list(user_side), ATTACKER: list(attacker_side)}
    for sender in ordering:
        clock.advance(1.0)
        device = queues[sender].pop(0)
        try:
            outcome = device.send_update(client, "victim")
            logger.debug("%s (%s) -> %s", device.name, sender, outcome.status)
        except OvkError as e:
            # revoked once the other side's proposal has committed
            logger.debug("%s (%s) -> %s", device.name, sender, e.name)
    clock.advance(RACE_PERIOD + 1.0)
    rp.finalize_due()

    metadata = rp.accounts["victim"].metadata
    try:
        derive_from_metadata(user_seed, RACE_ORIGIN, metadata)
        return "user"
    except WrongService:
        derive_from_metadata(attacker_seed, RACE_ORIGIN, metadata)
        return "attacker"


def race_table(max_n: int = 5) -> List[dict]:
    """
    Oracle verdict for every (n, n_u, n_a, attacker_first) up to max_n

    winner is "user" or "attacker" when every ordering agrees, else "depends"
    """
    rows = []
    for n in range(2, max_n + 1):
        for n_u in range(1, n):
            for n_a in range(1, n - n_u + 1):
                for attacker_first in (True, False):
                    config = RaceConfig(n=n, n_u=n_u, n_a=n_a, attacker_first=attacker_first)
                    winners = set(race_oracle(config).values())
                    rows.append({
                        "n": n, "n_u": n_u, "n_a": n_a, "attacker_first": attacker_first,
                        "winner": winners.pop() if len(winners) == 1 else "depends",
                    })
    return rows
