"""
Test the relying party: challenges, registration checks, capacity, the
migration vote and persistence
"""
import sys
sys.path.insert(0, '.')

import os
import random
from concurrent.futures import ThreadPoolExecutor

import pytest

from conftest import MODEL, ORIGIN, client_for
from src.attestation.manufacturer import AttestedKind, Manufacturer, attest, save_policy
from src.authenticator.device import Authenticator
from src.crypto.suite import generate_keypair, sign
from src.database.account_store import AccountStore
from src.errors import (
    BadOwnershipSignature,
    BadSignature,
    BadUpdateSignature,
    CorruptStore,
    MalformedMetadata,
    MalformedUpdate,
    MigrationInProgress,
    NLimitExceeded,
    RevokedCredential,
    StaleChallenge,
    UnknownAccount,
    UnknownCredential,
    UntrustedAttestation,
)
from src.ovk.derivation import (
    OvkMetadata,
    UpdatingMessage,
    authn_payload,
    build_update,
    derive_fresh,
    derive_from_metadata,
    sign_registration,
    update_payload,
    verify_registration,
)
from src.seed.exchange import SeedRecord
from src.service.relying_party import RelyingParty, ServiceSettings
from src.wire.codec import encode
from src.wire.messages import AuthnRequest, EnrollRequest, RegisterRequest


def _share(devices, epoch=1):
    """Install one seed on every device, as a finished exchange would"""
    seed = os.urandom(32)
    for device in devices:
        peers = [d.identity.model_name for d in devices if d is not device]
        device.install_seed(SeedRecord(seed, epoch, peers))
    return devices[0].latest_seed


def _holders(make_device, n=3):
    devices = [make_device(f"D{i}") for i in range(n)]
    _share(devices)
    return devices


def _register_request(rp, device, username="alice", metadata=None, peer_models=None, ovk=None):
    start = rp.start_authn(username)
    seed = device.latest_seed
    ovk = ovk or derive_fresh(seed, rp.service_id)
    keypair = generate_keypair()
    return RegisterRequest(
        username=username,
        challenge=start.challenge,
        public_key=keypair.public_point,
        attestation=attest(device.identity, AttestedKind.AUTHN_KEY, keypair.public_point, [], start.challenge),
        ovpk=ovk.ovpk,
        metadata=metadata or ovk.metadata,
        ovpk_attestation=attest(device.identity, AttestedKind.OVPK, ovk.ovpk,
                                seed.peer_models if peer_models is None else peer_models, start.challenge),
        binding_sig=sign_registration(ovk, keypair.public_point),
    )


def _enroll_request(rp, device, username="alice"):
    start = rp.start_authn(username)
    ovk = derive_from_metadata(device.latest_seed, rp.service_id, start.metadata)
    keypair = generate_keypair()
    return EnrollRequest(
        username=username,
        challenge=start.challenge,
        public_key=keypair.public_point,
        attestation=attest(device.identity, AttestedKind.AUTHN_KEY, keypair.public_point, [], start.challenge),
        ovk_signature=sign_registration(ovk, keypair.public_point),
    )


def _authn_request(rp, device, username="alice", service_id=None):
    start = rp.start_authn(username)
    cred = device.credentials[rp.service_id]
    return AuthnRequest(
        username=username,
        challenge=start.challenge,
        credential_id=cred.credential_id,
        challenge_signature=sign(cred.keypair, authn_payload(start.challenge, service_id or rp.service_id)),
    )


def _enrolled(rp, devices, username="alice"):
    client = client_for(rp)
    devices[0].register_account(client, username)
    for device in devices[1:]:
        device.login_or_enroll(client, username)
    return devices


def _vote(rp, device, new_seed, candidate=None, username="alice", now=None):
    """Updating message from device's current OVK towards new_seed"""
    sid = rp.service_id
    account = rp.accounts[username]
    prev = derive_from_metadata(device.seeds[0], sid, account.metadata)
    nxt = derive_from_metadata(new_seed, sid, candidate) if candidate else derive_fresh(new_seed, sid)
    cred = device.credentials[sid]
    msg = build_update(prev, nxt, cred.credential_id, cred.keypair.public_point)
    return rp.process_update(username, cred.credential_id, msg, now=now), msg


def _new_seed(devices, epoch=2):
    return SeedRecord(os.urandom(32), epoch, ["OVK-Key-1"] * (len(devices) - 1))


# ============================================================================
# CHALLENGES
# ============================================================================

def test_unknown_user_gets_a_decoy_of_the_same_shape(make_service):
    rp = make_service()
    decoy = rp.start_authn("ghost")
    assert len(decoy.challenge) == 32
    assert decoy.credentials == [] and decoy.candidates == []
    assert decoy.ovpk is None and decoy.metadata is None
    assert decoy.state == "stable"
    assert sorted(encode(decoy).body) == ["candidates", "challenge", "credentials", "state"]
    assert rp.start_authn("ghost").challenge != decoy.challenge


def test_challenge_single_use_and_expiry(make_service, make_device, clock):
    rp = make_service(ttl=30.0)
    devices = _enrolled(rp, _holders(make_device, 2))
    req = _authn_request(rp, devices[0])
    rp.authn(req)
    with pytest.raises(StaleChallenge):
        rp.authn(req)

    late = _authn_request(rp, devices[0])
    clock.advance(31)
    with pytest.raises(StaleChallenge):
        rp.authn(late)

    other_user = rp.start_authn("bob").challenge
    req = _authn_request(rp, devices[0]).model_copy(update={"challenge": other_user})
    with pytest.raises(StaleChallenge):
        rp.authn(req)


def test_challenge_consumed_once_under_threads(make_service, make_device):
    rp = make_service()
    devices = _enrolled(rp, _holders(make_device, 2))
    req = _authn_request(rp, devices[0])

    def attempt(_):
        try:
            rp.authn(req)
            return "ok"
        except StaleChallenge:
            return "stale"

    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(attempt, range(16)))
    assert results.count("ok") == 1
    assert results.count("stale") == 15


def test_authn_failures(make_service, make_device):
    rp = make_service()
    devices = _enrolled(rp, _holders(make_device, 2))
    with pytest.raises(BadSignature):
        rp.authn(_authn_request(rp, devices[0], service_id="https://elsewhere.example"))
    req = _authn_request(rp, devices[0]).model_copy(update={"credential_id": "cred-unknown"})
    with pytest.raises(UnknownCredential):
        rp.authn(req)
    req = _authn_request(rp, devices[0]).model_copy(
        update={"username": "bob", "challenge": rp.start_authn("bob").challenge})
    with pytest.raises(UnknownAccount):
        rp.authn(req)


# ============================================================================
# REGISTRATION / ENROLLMENT
# ============================================================================

def test_register_rejects_malformed_metadata(make_service, make_device):
    rp = make_service()
    device = _holders(make_device, 2)[0]
    bad = OvkMetadata(r=os.urandom(32), m=os.urandom(32), n=0)
    with pytest.raises(MalformedMetadata):
        rp.register(_register_request(rp, device, metadata=bad))
    assert "alice" not in rp.accounts


def test_register_rejects_untrusted_peers(make_service, make_device):
    rp = make_service()
    device = _holders(make_device, 2)[0]
    with pytest.raises(UntrustedAttestation):
        rp.register(_register_request(rp, device, peer_models=["Cheap-Key"]))


def test_register_rejects_foreign_manufacturer(make_service, make_device, clock):
    rp = make_service()
    rogue = Authenticator(Manufacturer("Rogue").issue_device(MODEL), clock=clock)
    rogue.unlock(True)
    _share([rogue, make_device("peer")])
    with pytest.raises(UntrustedAttestation):
        rp.register(_register_request(rp, rogue))


def test_register_rejects_statement_for_another_key(make_service, make_device):
    rp = make_service()
    device = _holders(make_device, 2)[0]
    req = _register_request(rp, device)
    with pytest.raises(UntrustedAttestation):
        rp.register(req.model_copy(update={"public_key": generate_keypair().public_point}))


def test_register_rejects_binding_by_another_ovk(make_service, make_device):
    rp = make_service()
    device = _holders(make_device, 2)[0]
    req = _register_request(rp, device)
    other = derive_fresh(device.latest_seed, rp.service_id)
    forged = req.model_copy(update={"binding_sig": sign_registration(other, req.public_key)})
    with pytest.raises(BadOwnershipSignature):
        rp.register(forged)


def test_enrollment_needs_the_ovsk(make_service, make_device):
    rp = make_service()
    _enrolled(rp, _holders(make_device, 2)[:1])
    outsider = make_device("outsider")
    _share([outsider, make_device("x")])
    start = rp.start_authn("alice")
    keypair = generate_keypair()
    wrong = derive_fresh(outsider.latest_seed, rp.service_id)
    req = EnrollRequest(
        username="alice",
        challenge=start.challenge,
        public_key=keypair.public_point,
        attestation=attest(outsider.identity, AttestedKind.AUTHN_KEY, keypair.public_point, [], start.challenge),
        ovk_signature=sign_registration(wrong, keypair.public_point),
    )
    with pytest.raises(BadOwnershipSignature):
        rp.enroll_key(req)
    assert len(rp.accounts["alice"].credentials) == 1


def test_capacity_never_exceeded_under_shuffles(make_service, make_device):
    rng = random.Random(20)
    # two clones hold the seed of a three-device group
    devices = [make_device(f"D{i}") for i in range(5)]
    seed = os.urandom(32)
    for device in devices:
        device.install_seed(SeedRecord(seed, 1, [MODEL, MODEL]))

    for trial in range(200):
        rp = make_service(origin=f"https://s{trial}.example")
        order = devices[:]
        rng.shuffle(order)
        order[0].register_account(client_for(rp), "alice")
        requests = [_enroll_request(rp, d) for d in order[1:]]
        rng.shuffle(requests)
        bound, refused = 0, 0
        for req in requests:
            try:
                rp.enroll_key(req)
                bound += 1
            except NLimitExceeded:
                refused += 1
            assert len(rp.accounts["alice"].active_credentials()) <= 3
        assert (bound, refused) == (2, 2)


def test_bindings_verify_under_bound_ovpk(make_service, make_device):
    rp = make_service()
    _enrolled(rp, _holders(make_device, 3))
    account = rp.accounts["alice"]
    for cred in account.active_credentials():
        assert verify_registration(account.ovpk, cred.public_key, rp.service_id, cred.binding_sig)


# ============================================================================
# MIGRATION
# ============================================================================

def test_majority_commits_and_rebinds(make_service, make_device):
    rp = make_service()
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    new_seed = _new_seed([a, b, c])
    ack, msg = _vote(rp, a, new_seed)
    assert ack.status == "pending" and ack.deadline == rp.clock.now() + rp.migration_period
    ack, _ = _vote(rp, b, new_seed, candidate=msg.new_metadata)
    assert ack.status == "committed"

    account = rp.accounts["alice"]
    assert account.ovpk == msg.new_ovpk and account.metadata == msg.new_metadata
    assert account.migration is None
    assert ack.revoked == [c.credentials[ORIGIN].credential_id]
    for cred in account.active_credentials():
        assert verify_registration(account.ovpk, cred.public_key, rp.service_id, cred.binding_sig)
    assert rp.commits[-1].by_deadline is False


def test_single_vote_commits_at_deadline(make_service, make_device, clock):
    rp = make_service(period=100.0)
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    _, msg = _vote(rp, a, _new_seed([a, b, c]))
    assert rp.finalize_due(now=clock.now() + 99.0) == []
    reports = rp.finalize_due(now=clock.now() + 100.0)
    assert len(reports) == 1 and reports[0].by_deadline
    assert reports[0].new_ovpk == msg.new_ovpk
    assert sorted(reports[0].revoked) == sorted([b.credentials[ORIGIN].credential_id,
                                                 c.credentials[ORIGIN].credential_id])


def test_tie_goes_to_earliest_proposal(make_service, make_device, clock):
    rp = make_service()
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    t0 = clock.now()
    _, first = _vote(rp, c, _new_seed([a, b, c]), now=t0 + 1)
    _, second = _vote(rp, a, _new_seed([a, b, c]), now=t0 + 2)
    report = rp.finalize_migration("alice", now=t0 + 1 + rp.migration_period)
    assert report.new_ovpk == first.new_ovpk and second.new_ovpk != first.new_ovpk
    assert rp.accounts["alice"].credential(c.credentials[ORIGIN].credential_id).active
    assert not rp.accounts["alice"].credential(a.credentials[ORIGIN].credential_id).active


def test_most_supporters_beats_earliest(make_service, make_device, clock):
    rp = make_service()
    devices = _enrolled(rp, _holders(make_device, 5))
    t0 = clock.now()
    seed_x, seed_y = _new_seed(devices), _new_seed(devices)
    _, x = _vote(rp, devices[0], seed_x, now=t0 + 1)
    _, y = _vote(rp, devices[1], seed_y, now=t0 + 2)
    _vote(rp, devices[2], seed_y, candidate=y.new_metadata, now=t0 + 3)
    report = rp.finalize_migration("alice", now=t0 + 1 + rp.migration_period)
    assert report.new_ovpk == y.new_ovpk and report.by_deadline


def test_first_vote_is_final(make_service, make_device):
    rp = make_service()
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    _vote(rp, a, _new_seed([a, b, c]))
    ack, _ = _vote(rp, a, _new_seed([a, b, c]))
    assert ack.status == "duplicate" and ack.supporters == 1
    assert len(rp.accounts["alice"].migration.proposals) == 1


def test_electorate_frozen_and_enrollment_blocked(make_service, make_device, clock):
    rng = random.Random(3)
    rp = make_service(period=100.0)
    holders = _holders(make_device, 3)
    a, b = _enrolled(rp, holders[:2])
    late = holders[2]
    _vote(rp, a, _new_seed(holders))
    migration = rp.accounts["alice"].migration
    for _ in range(100):
        clock.advance(rng.uniform(0.0, 0.5))
        with pytest.raises(MigrationInProgress):
            rp.enroll_key(_enroll_request(rp, late))
        assert migration.electorate == [a.credentials[ORIGIN].credential_id,
                                        b.credentials[ORIGIN].credential_id]
    assert rp.accounts["alice"].state == "migrating"


def test_same_ovpk_with_other_metadata(make_service, make_device):
    rp = make_service()
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    new_seed = _new_seed([a, b, c])
    _, msg = _vote(rp, a, new_seed)

    sid = rp.service_id
    prev = derive_from_metadata(b.seeds[0], sid, rp.accounts["alice"].metadata)
    # same OVSK, MAC minted for another origin
    twin = derive_fresh(new_seed, "https://other.example", r=msg.new_metadata.r)
    same = derive_fresh(new_seed, sid, r=msg.new_metadata.r)
    assert twin.ovpk == msg.new_ovpk and twin.metadata != msg.new_metadata
    cred = b.credentials[sid]
    forged = UpdatingMessage(
        new_ovpk=twin.ovpk,
        new_metadata=twin.metadata,
        signature=sign(prev.keypair, update_payload(twin.ovpk, twin.metadata, sid)),
        sender_credential_id=cred.credential_id,
        rebinding_sig=sign_registration(same, cred.keypair.public_point),
    )
    with pytest.raises(MalformedUpdate):
        rp.process_update("alice", cred.credential_id, forged)


def test_update_signature_checks(make_service, make_device):
    rp = make_service()
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    sid = rp.service_id
    cred = a.credentials[sid]
    stranger = derive_fresh(_new_seed([a, b, c], epoch=1), sid)
    nxt = derive_fresh(_new_seed([a, b, c]), sid)
    msg = build_update(stranger, nxt, cred.credential_id, cred.keypair.public_point)
    with pytest.raises(BadUpdateSignature):
        rp.process_update("alice", cred.credential_id, msg)

    prev = derive_from_metadata(a.seeds[0], sid, rp.accounts["alice"].metadata)
    msg = build_update(prev, nxt, cred.credential_id, b.credentials[sid].keypair.public_point)
    with pytest.raises(BadUpdateSignature):
        rp.process_update("alice", cred.credential_id, msg)

    msg = build_update(prev, nxt, cred.credential_id, cred.keypair.public_point)
    with pytest.raises(MalformedUpdate):
        rp.process_update("alice", b.credentials[sid].credential_id, msg)
    assert rp.accounts["alice"].migration is None


def test_revoked_credential_cannot_vote_or_sign_in(make_service, make_device):
    rp = make_service()
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    new_seed = _new_seed([a, b, c])
    _, msg = _vote(rp, a, new_seed)
    _vote(rp, b, new_seed, candidate=msg.new_metadata)
    with pytest.raises(RevokedCredential):
        rp.authn(_authn_request(rp, c))


# ============================================================================
# PERSISTENCE
# ============================================================================

def test_store_roundtrip(tmp_path, make_service, make_device):
    store = AccountStore(tmp_path / "svc.json")
    rp = make_service(store=store)
    a, b, c = _enrolled(rp, _holders(make_device, 3))
    _vote(rp, a, _new_seed([a, b, c]))
    assert store.exists()

    restored = make_service(store=store)
    restored.restore()
    assert restored.snapshot().model_dump() == rp.snapshot().model_dump()


def test_restart_mid_migration_matches_uninterrupted(tmp_path, make_service, make_device, clock):
    rng = random.Random(11)
    for trial in range(20):
        store = AccountStore(tmp_path / f"svc{trial}.json")
        origin = f"https://s{trial}.example"
        rp = make_service(origin=origin, store=store)
        devices = _enrolled(rp, _holders(make_device, 3))
        seeds = [_new_seed(devices), _new_seed(devices)]
        t0 = clock.now()
        for device in devices[:rng.randint(1, 2)]:
            if rng.random() < 0.5:
                _vote(rp, device, seeds[rng.randint(0, 1)], now=t0 + rng.uniform(0, 50))
        if rp.accounts["alice"].migration is None:
            _vote(rp, devices[2], seeds[0], now=t0 + 60)

        restored = make_service(origin=origin, store=AccountStore(tmp_path / f"svc{trial}.json"))
        restored.restore()
        end = t0 + 1000.0
        expected = rp.finalize_due(now=end)
        got = restored.finalize_due(now=end)
        assert [r.model_dump() for r in got] == [r.model_dump() for r in expected]


def test_corrupt_store(tmp_path, make_service, make_device):
    path = tmp_path / "svc.json"
    rp = make_service(store=AccountStore(path))
    _enrolled(rp, _holders(make_device, 2))
    text = path.read_text(encoding="utf-8")
    path.write_text(text[: len(text) // 2], encoding="utf-8")
    with pytest.raises(CorruptStore):
        make_service(store=AccountStore(path)).restore()


def test_store_of_another_service(tmp_path, make_service, make_device):
    path = tmp_path / "svc.json"
    rp = make_service(store=AccountStore(path))
    _enrolled(rp, _holders(make_device, 2))
    with pytest.raises(CorruptStore):
        make_service(origin="https://other.example", store=AccountStore(path)).restore()


def test_from_settings_restores(tmp_path, policy, make_service, make_device):
    save_policy(policy, tmp_path / "policy.json")
    path = tmp_path / "svc.json"
    rp = make_service(store=AccountStore(path))
    _enrolled(rp, _holders(make_device, 2))
    config = ServiceSettings(service_id=ORIGIN, store_path=str(path),
                             trust_policy_path=str(tmp_path / "policy.json"), unused="ignored")
    restored = RelyingParty.from_settings(config)
    assert restored.policy == policy
    assert list(restored.accounts) == ["alice"]
