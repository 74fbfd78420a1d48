"""
Shared fixtures: one manufacturer, a trust policy over it, a manual clock,
and factories for unlocked devices and loopback services.
"""
import sys
sys.path.insert(0, '.')

from collections import defaultdict
from typing import Dict, List

import pytest
from hypothesis import settings as hypothesis_settings

import src.attestation.manufacturer as manufacturer_module
import src.authenticator.device as device_module
import src.authenticator.device_store as device_store_module
import src.ovk.derivation as derivation_module
import src.seed.exchange as exchange_module
from config import settings
from src.attestation.manufacturer import Manufacturer, TrustPolicy
from src.authenticator.device import Authenticator, RetentionPolicy, run_group_exchange
from src.crypto.b64 import b64url_encode
from src.harness.clock import ManualClock
from src.seed.channels import InMemoryChannel
from src.service.endpoint import ServiceEndpoint
from src.service.relying_party import RelyingParty
from src.wire.client import ServiceClient
from src.wire.transport import HttpTransport, LoopbackTransport

hypothesis_settings.register_profile("ovk", deadline=None, max_examples=50)
hypothesis_settings.load_profile("ovk")

MODEL = "OVK-Key-1"
OTHER_MODEL = "OVK-Key-2"
ORIGIN = "https://service1.example"


@pytest.fixture(autouse=True)
def fast_pbes2(monkeypatch):
    """PBKDF2 at the lowest accepted count keeps seed exchanges quick"""
    monkeypatch.setattr(settings, "PBES2_ITERATIONS", settings.PBES2_MIN_ITERATIONS)


@pytest.fixture
def manufacturer():
    return Manufacturer("ACME")


@pytest.fixture
def policy(manufacturer):
    return TrustPolicy(
        trusted_roots=frozenset([manufacturer.root_point]),
        compliant_models=frozenset([MODEL, OTHER_MODEL]),
        secure_storage_models=frozenset([MODEL, OTHER_MODEL]),
    )


@pytest.fixture
def clock():
    return ManualClock(1000.0)


@pytest.fixture
def make_device(manufacturer, clock):
    def factory(name="dev", model=MODEL, retention=None):
        device = Authenticator(manufacturer.issue_device(model), retention or RetentionPolicy(max_count=4),
                               clock=clock, name=name)
        device.unlock(True)
        return device
    return factory


@pytest.fixture
def make_service(policy, clock):
    def factory(origin=ORIGIN, period=100.0, ttl=300.0, store=None, trust=None):
        return RelyingParty(origin, trust or policy, clock, migration_period=period,
                            challenge_ttl=ttl, store=store)
    return factory


def client_for(rp, origin=None):
    """ServiceClient over loopback; origin overrides what the device sees"""
    return ServiceClient(LoopbackTransport(ServiceEndpoint(rp), origin))


@pytest.fixture
def group(make_device):
    """Three devices sharing an epoch-1 seed"""
    devices = [make_device("A"), make_device("B"), make_device("C", OTHER_MODEL)]
    run_group_exchange(devices, "correct horse battery")
    return devices


class KeyLog:
    """Every private key and seed created while a test runs, plus every frame sent"""

    def __init__(self):
        # module that created the key -> key pairs
        self.keys: Dict[str, list] = defaultdict(list)
        self.seeds = []
        self.traffic: List[str] = []

    def secrets(self) -> List[bytes]:
        return [k.private_bytes for made in self.keys.values() for k in made] + [s.seed for s in self.seeds]

    def leaks(self, traffic=None) -> List[str]:
        text = "\n".join(self.traffic if traffic is None else traffic)
        found = []
        for secret in self.secrets():
            for form in (secret.hex(), secret.hex().upper(), b64url_encode(secret),
                         str(int.from_bytes(secret, "big"))):
                if form in text:
                    found.append(form)
        return found


@pytest.fixture
def key_log(monkeypatch):
    """Request before any fixture that creates keys so those are logged too"""
    log = KeyLog()

    def recording(module, make):
        source = module.__name__.rsplit(".", 1)[-1]

        def wrapper(*args, **kwargs):
            keypair = make(*args, **kwargs)
            log.keys[source].append(keypair)
            return keypair
        return wrapper

    for module in (manufacturer_module, device_module, exchange_module):
        monkeypatch.setattr(module, "generate_keypair", recording(module, module.generate_keypair))
    for module in (manufacturer_module, derivation_module, device_store_module):
        monkeypatch.setattr(module, "scalar_to_keypair", recording(module, module.scalar_to_keypair))

    install_seed = Authenticator.install_seed

    def logged_install(self, record):
        log.seeds.append(record)
        return install_seed(self, record)

    monkeypatch.setattr(Authenticator, "install_seed", logged_install)

    def tapped(cls, name):
        original = getattr(cls, name)

        def wrapper(self, *args, **kwargs):
            start = len(self.traffic)
            try:
                return original(self, *args, **kwargs)
            finally:
                log.traffic.extend(self.traffic[start:])
        monkeypatch.setattr(cls, name, wrapper)

    tapped(LoopbackTransport, "request")
    tapped(HttpTransport, "request")
    tapped(InMemoryChannel, "send")
    return log
