"""
Test the password-protected ring exchange
"""
import sys
sys.path.insert(0, '.')

import pytest

from src.authenticator.device import run_group_exchange
from src.crypto.b64 import b64url_encode
from src.crypto.envelope import seal
from src.crypto.suite import dh, generator_point, point_x, sha256
from src.errors import (
    AuthFailure,
    DeviceLocked,
    DuplicatePartyId,
    EpochOrder,
    InvalidInput,
    ProtocolOrder,
    UntrustedAttestation,
)
from src.seed.channels import DirectoryChannel, InMemoryChannel, drive_ring
from src.seed.exchange import (
    NegotiationConfig,
    RoundMessage,
    SeedExchange,
    SeedRecord,
    validate_party_ids,
)


def _parties(manufacturer, n, password="pw", epoch=1, models=None, passwords=None, epochs=None):
    models = models or ["OVK-Key-1"] * n
    return [
        SeedExchange(
            NegotiationConfig((passwords or [password] * n)[i], i, n, (epochs or [epoch] * n)[i]),
            manufacturer.issue_device(models[i]),
        )
        for i in range(n)
    ]


def _run_recording_scalars(parties, channel):
    for party in parties:
        channel.send(party.start())
    scalars = [party.ephemeral.private_scalar for party in parties]
    records = {}
    for round_no in range(1, len(parties)):
        for party in parties:
            out = party.step(channel.receive(party.self_id, round_no))
            if isinstance(out, SeedRecord):
                records[party.self_id] = out
            else:
                channel.send(out)
    return scalars, [records[p.self_id] for p in parties]


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_all_parties_agree_on_product_seed(manufacturer, n):
    for _ in range(20):
        parties = _parties(manufacturer, n)
        scalars, records = _run_recording_scalars(parties, InMemoryChannel())
        point = generator_point()
        for scalar in scalars:
            point = dh(scalar, point)
        expected = sha256(point_x(point))
        assert all(r.seed == expected for r in records)
        assert all(r.epoch == 1 and r.n_parties == n for r in records)
        assert all(p.ephemeral is None and p.status == "finished" for p in parties)


def test_peer_models_list_the_other_holders(manufacturer):
    models = ["OVK-Key-1", "OVK-Key-1", "OVK-Key-2"]
    records = drive_ring(_parties(manufacturer, 3, models=models), InMemoryChannel())
    for i, record in enumerate(records):
        assert sorted(record.peer_models) == sorted(models[:i] + models[i + 1:])


def test_wrong_password_aborts_everyone(manufacturer):
    parties = _parties(manufacturer, 3, passwords=["pw", "pw", "typo"])
    finalized = []
    for party in parties:
        party.on_finalized = finalized.append
    with pytest.raises(AuthFailure):
        drive_ring(parties, InMemoryChannel())
    assert finalized == []
    assert all(p.status == "aborted" and p.ephemeral is None for p in parties)


def test_tampered_envelope_aborts(manufacturer):
    parties = _parties(manufacturer, 2)
    channel = InMemoryChannel()
    for party in parties:
        channel.send(party.start())
    forged = RoundMessage(round=1, from_id=0, to_id=1, envelope=seal("other", b"{}").serialize())
    channel.inject(forged)
    with pytest.raises(AuthFailure):
        parties[1].step(channel.receive(1, 1))
    assert parties[1].status == "aborted"


def test_epoch_mismatch_rejects_share_attestation(manufacturer):
    parties = _parties(manufacturer, 2, epochs=[1, 2])
    with pytest.raises(UntrustedAttestation):
        drive_ring(parties, InMemoryChannel())


def test_out_of_order_messages(manufacturer):
    parties = _parties(manufacturer, 3)
    with pytest.raises(ProtocolOrder):
        parties[1].step(RoundMessage(round=1, from_id=0, to_id=1, envelope="x"))
    msgs = [p.start() for p in parties]
    with pytest.raises(ProtocolOrder):
        parties[0].start()
    with pytest.raises(ProtocolOrder):
        parties[1].step(msgs[0].model_copy(update={"round": 2}))
    with pytest.raises(ProtocolOrder):
        parties[1].step(msgs[1])
    # rejected ordering problems leave the negotiation running
    assert isinstance(parties[1].step(msgs[0]), RoundMessage)


def test_locked_device_cannot_start(manufacturer):
    party = SeedExchange(NegotiationConfig("pw", 0, 2, 1), manufacturer.issue_device("OVK-Key-1"),
                         unlocked=False)
    with pytest.raises(DeviceLocked):
        party.start()


@pytest.mark.parametrize("kwargs", [
    dict(password="", self_id=0, n_parties=2, epoch=1),
    dict(password="pw", self_id=0, n_parties=1, epoch=1),
    dict(password="pw", self_id=2, n_parties=2, epoch=1),
    dict(password="pw", self_id=0, n_parties=2, epoch=0),
])
def test_negotiation_config_validation(kwargs):
    with pytest.raises(InvalidInput):
        NegotiationConfig(**kwargs)


def test_validate_party_ids():
    validate_party_ids([2, 0, 1], 3)
    with pytest.raises(DuplicatePartyId):
        validate_party_ids([0, 1, 1], 3)
    with pytest.raises(InvalidInput):
        validate_party_ids([0, 3], 3)


def test_in_memory_channel_duplicate_slot(manufacturer):
    msg = _parties(manufacturer, 2)[0].start()
    channel = InMemoryChannel()
    channel.send(msg)
    with pytest.raises(DuplicatePartyId):
        channel.send(msg)


def test_directory_channel_exchange(tmp_path, manufacturer):
    records = drive_ring(_parties(manufacturer, 3), DirectoryChannel(tmp_path / "ring"))
    assert len({r.seed for r in records}) == 1
    assert len(list((tmp_path / "ring").glob("round*.json"))) == 3 * 2


def test_directory_channel_duplicates(tmp_path, manufacturer):
    channel = DirectoryChannel(tmp_path)
    msg = _parties(manufacturer, 3)[0].start()
    channel.send(msg)
    with pytest.raises(DuplicatePartyId):
        channel.send(msg)
    channel.send(msg.model_copy(update={"from_id": 2}))
    with pytest.raises(DuplicatePartyId):
        channel.receive(1, 1, timeout=0)


def test_device_installs_seed_and_enforces_epoch_order(make_device):
    devices = [make_device("A"), make_device("B")]
    records = run_group_exchange(devices, "pw")
    assert [d.epochs for d in devices] == [[1], [1]]
    assert devices[0].latest_seed.seed == records[1].seed
    with pytest.raises(EpochOrder):
        run_group_exchange(devices, "pw", epoch=1)
    devices[0].lock()
    with pytest.raises(DeviceLocked):
        run_group_exchange(devices, "pw")


def test_channel_traffic_carries_no_secrets(manufacturer):
    channel = InMemoryChannel()
    records = drive_ring(_parties(manufacturer, 3, password="sesame street"), channel)
    seed = records[0].seed
    traffic = "\n".join(channel.traffic)
    assert "sesame street" not in traffic
    assert seed.hex() not in traffic
    assert b64url_encode(seed) not in traffic


def test_each_start_draws_a_fresh_ephemeral_scalar(manufacturer):
    identity = manufacturer.issue_device("OVK-Key-1")
    scalars, envelopes = set(), set()
    for _ in range(100):
        party = SeedExchange(NegotiationConfig("pw", 0, 2, 1), identity)
        envelopes.add(party.start().envelope)
        scalars.add(party.ephemeral.private_scalar)
    assert len(scalars) == 100
    assert len(envelopes) == 100


def test_step_after_abort_is_rejected(manufacturer):
    parties = _parties(manufacturer, 2)
    msgs = [p.start() for p in parties]
    parties[1].abort()
    assert parties[1].ephemeral is None
    with pytest.raises(ProtocolOrder):
        parties[1].step(msgs[0])


def test_abort_is_idempotent(manufacturer):
    party = _parties(manufacturer, 2)[0]
    party.start()
    party.abort()
    party.abort()
    assert party.status == "aborted" and party.ephemeral is None
    idle = _parties(manufacturer, 2)[1]
    idle.abort()
    idle.abort()
    assert idle.status == "aborted"
    with pytest.raises(ProtocolOrder):
        idle.start()


def test_abort_after_round_one_keeps_prior_seeds(group):
    before = [list(d.seeds) for d in group]
    parties = [d.begin_seed_exchange(NegotiationConfig("new words", i, 3, 2)) for i, d in enumerate(group)]
    msgs = [p.start() for p in parties]
    forwarded = group[1].continue_seed_exchange(msgs[0])
    assert isinstance(forwarded, RoundMessage) and forwarded.round == 2
    for party in parties:
        party.abort()
    assert [list(d.seeds) for d in group] == before
    assert [d.epochs for d in group] == [[1], [1], [1]]
    with pytest.raises(ProtocolOrder):
        group[2].continue_seed_exchange(forwarded)
    assert [d.epochs for d in group] == [[1], [1], [1]]

    run_group_exchange(group, "new words")
    assert [d.epochs for d in group] == [[1, 2]] * 3


def test_group_exchange_with_a_password_per_device(make_device):
    devices = [make_device("A"), make_device("B")]
    with pytest.raises(InvalidInput):
        run_group_exchange(devices, ["pw"])
    with pytest.raises(AuthFailure):
        run_group_exchange(devices, ["pw", "other"])
    assert [d.epochs for d in devices] == [[], []]
    records = run_group_exchange(devices, ["pw", "pw"])
    assert records[0].seed == records[1].seed
