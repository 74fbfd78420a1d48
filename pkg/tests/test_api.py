"""
Test the HTTP surface of a relying party
"""
import sys
sys.path.insert(0, '.')

import json
import logging

import pytest
from fastapi.testclient import TestClient

from api import create_app, default_relying_party
from conftest import ORIGIN
from src.attestation.manufacturer import save_policy
from src.wire.client import ServiceClient
from src.wire.transport import HttpTransport


@pytest.fixture
def rp(make_service):
    return make_service()


@pytest.fixture
def http(rp):
    return TestClient(create_app(rp), base_url=ORIGIN)


def test_health(http, rp):
    response = http.get("/api/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy", "service_id": rp.service_id, "accounts": 0}


def test_start_authn_over_http(http):
    response = http.post("/start-authn", json={"kind": "start_authn_request", "body": {"username": "alice"}})
    assert response.status_code == 200
    frame = response.json()
    assert frame["kind"] == "start_authn_response"
    assert frame["body"]["credentials"] == []


def test_kind_must_match_route(http):
    response = http.post("/enroll", json={"kind": "start_authn_request", "body": {"username": "alice"}})
    assert response.status_code == 400
    assert response.json()["body"]["error"] == "UnknownKind"


def test_body_that_is_not_a_frame(http):
    response = http.post("/authn", content=b"[]", headers={"Content-Type": "application/json"})
    assert response.status_code == 400
    assert response.json() == {"body": {"detail": "request is not a frame", "error": "ParseError"}, "kind": "error"}


def test_error_status_codes(http):
    body = {"username": "alice", "challenge": "AAAA", "credential_id": "cred-x", "challenge_signature": "AAAA"}
    response = http.post("/authn", json={"kind": "authn_request", "body": body})
    assert response.status_code == 401
    assert response.json()["body"]["error"] == "StaleChallenge"


def test_devices_register_and_enroll_over_http(group, http, rp):
    client = ServiceClient(HttpTransport(ORIGIN, client=http))
    assert client.service_id == ORIGIN
    group[0].register_account(client, "alice")
    assert group[1].login_or_enroll(client, "alice").outcome == "enrolled"
    assert len(rp.accounts["alice"].active_credentials()) == 2
    kinds = [json.loads(text)["kind"] for text in client.traffic]
    assert kinds[:4] == ["start_authn_request", "start_authn_response", "register_request", "account_created"]


def test_default_service_without_config_warns(monkeypatch, caplog):
    monkeypatch.delenv("OVK_SERVICE_CONFIG", raising=False)
    with caplog.at_level(logging.WARNING, logger="api"):
        rp = default_relying_party()
    assert not rp.policy.trusted_roots
    assert any("No trust policy" in r.getMessage() for r in caplog.records)


def test_default_service_from_config(tmp_path, monkeypatch, caplog, policy):
    save_policy(policy, tmp_path / "policy.json")
    config = tmp_path / "svc.json"
    config.write_text(json.dumps({"service_id": ORIGIN, "trust_policy_path": str(tmp_path / "policy.json")}),
                      encoding="utf-8")
    monkeypatch.setenv("OVK_SERVICE_CONFIG", str(config))
    with caplog.at_level(logging.WARNING, logger="api"):
        rp = default_relying_party()
    assert rp.policy.trusted_roots == policy.trusted_roots
    assert not [r for r in caplog.records if r.name == "api"]
