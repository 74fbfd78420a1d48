"""
Scenario engine
Replays a scripted story of devices and services under a manual clock and
reports one record per action. Reports carry no random values, so the same
script gives the same report over loopback and over HTTP.
"""
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Set, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import settings
from src.attestation.manufacturer import Manufacturer, TrustPolicy
from src.authenticator.device import Authenticator, run_group_exchange
from src.errors import AssertionFailed, DeviceUnavailable, OvkError, ScenarioParse
from src.harness.clock import ManualClock
from src.seed.channels import InMemoryChannel
from src.service.endpoint import ServiceEndpoint
from src.service.relying_party import RelyingParty
from src.wire.client import ServiceClient
from src.wire.transport import HttpTransport, LoopbackTransport

logger = logging.getLogger(__name__)

ActionName = Literal["share_seed", "register", "login", "lose_device", "reshare",
                     "update", "advance_clock", "expect"]
ProbeName = Literal["sign_in", "credential_active", "account_state"]

_NEEDS = {
    "share_seed": ("devices",),
    "reshare": ("devices",),
    "register": ("device", "service", "username"),
    "login": ("device", "service", "username"),
    "update": ("device", "service", "username"),
    "lose_device": ("device",),
    "advance_clock": ("seconds",),
}

_PROBE_NEEDS = {
    "sign_in": ("device", "service", "username"),
    "credential_active": ("device", "service", "username", "active"),
    "account_state": ("service", "username"),
}


# ============================================================================
# SCENARIO FILE
# ============================================================================

class DeviceSpec(BaseModel):
    """password is what the user types on this device when a share step names none"""

    model_config = ConfigDict(extra="forbid")

    name: str
    model: str = "OVK-Key-1"
    password: Optional[str] = None
    compromise_at: Optional[float] = None


class ServiceSpec(BaseModel):
    """compliant_models / secure_storage_models default to every device model"""

    model_config = ConfigDict(extra="forbid")

    name: str
    origin: str
    migration_period: float = Field(default=settings.MIGRATION_PERIOD_SECS, gt=0)
    compliant_models: Optional[List[str]] = None
    secure_storage_models: Optional[List[str]] = None


class Action(BaseModel):
    model_config = ConfigDict(extra="forbid")

    action: ActionName
    id: Optional[str] = None
    device: Optional[str] = None
    devices: List[str] = []
    service: Optional[str] = None
    username: Optional[str] = None
    password: Optional[str] = None
    seconds: Optional[float] = None
    actor: Literal["user", "attacker"] = "user"
    auto_update: bool = True
    origin: Optional[str] = None
    # expect
    ref: Optional[str] = None
    probe: Optional[ProbeName] = None
    outcome: Optional[str] = None
    error: Optional[str] = None
    active: Optional[bool] = None
    state: Optional[Literal["stable", "migrating"]] = None
    active_count: Optional[int] = None

    @model_validator(mode="after")
    def _required_fields(self):
        if self.action == "expect":
            if (self.ref is None) == (self.probe is None):
                raise ValueError("expect needs exactly one of ref or probe")
            needed = _PROBE_NEEDS.get(self.probe, ())
        else:
            needed = _NEEDS.get(self.action, ())
        missing = [f for f in needed if getattr(self, f) in (None, [])]
        if missing:
            raise ValueError(f"{self.action} is missing {', '.join(missing)}")
        if self.action == "advance_clock" and self.seconds <= 0:
            raise ValueError("advance_clock needs seconds > 0")
        return self


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    manufacturer: str = "ACME"
    devices: List[DeviceSpec]
    services: List[ServiceSpec]
    script: List[Action]

    @model_validator(mode="after")
    def _references(self):
        devices = {d.name for d in self.devices}
        services = {s.name for s in self.services}
        if len(devices) != len(self.devices) or len(services) != len(self.services):
            raise ValueError("device and service names must be unique")
        by_name = {d.name: d for d in self.devices}
        seen_ids: Set[str] = set()
        for index, step in enumerate(self.script):
            for name in ([step.device] if step.device else []) + step.devices:
                if name not in devices:
                    raise ValueError(f"step {index}: unknown device {name!r}")
            if step.action in ("share_seed", "reshare") and step.password is None:
                unset = [n for n in step.devices if by_name[n].password is None]
                if unset:
                    raise ValueError(f"step {index}: no password for {', '.join(unset)}")
            if step.service is not None and step.service not in services:
                raise ValueError(f"step {index}: unknown service {step.service!r}")
            if step.ref is not None and step.ref not in seen_ids:
                raise ValueError(f"step {index}: expect refers to {step.ref!r} before it ran")
            if step.id is not None:
                if step.id in seen_ids:
                    raise ValueError(f"step {index}: duplicate id {step.id!r}")
                seen_ids.add(step.id)
        return self


def load_scenario(source: Union[str, Path, dict]) -> Scenario:
    """
    Raises:
        ScenarioParse: unreadable file or schema violation
    """
    try:
        if isinstance(source, dict):
            return Scenario.model_validate(source)
        return Scenario.model_validate_json(Path(source).read_text(encoding="utf-8"))
    except OSError as e:
        raise ScenarioParse(f"cannot read scenario: {e.__class__.__name__}")
    except ValidationError as e:
        raise ScenarioParse(f"{e.error_count()} schema errors: {e.errors()[0]['msg']}")


# ============================================================================
# REPORT
# ============================================================================

class StepRecord(BaseModel):
    step: int
    action: str
    id: Optional[str] = None
    ok: bool
    outcome: Optional[str] = None
    error: Optional[str] = None
    update: Optional[str] = None
    reason: Optional[str] = None


class Report(BaseModel):
    scenario: str
    steps: List[StepRecord] = []

    @property
    def passed(self) -> bool:
        return all(s.ok for s in self.steps)

    def failures(self) -> List[StepRecord]:
        return [s for s in self.steps if not s.ok]

    def to_jsonl(self) -> str:
        return "\n".join(s.model_dump_json() for s in self.steps)

    def raise_for_failures(self):
        failed = self.failures()
        if failed:
            raise AssertionFailed(failed[0].step, failed[0].reason or failed[0].error)


# ============================================================================
# RUNNER
# ============================================================================

class ScenarioRunner:
    """
    Owns every device, service and transport of one scenario run

    Args:
        scenario: Parsed scenario
        transport: "loopback" or "http" (in-process FastAPI app)
        iterations: PBKDF2 count for seed envelopes
    """

    def __init__(self, scenario: Scenario, transport: Literal["loopback", "http"] = "loopback",
                 iterations: Optional[int] = None):
        self.scenario = scenario
        self.transport = transport
        self.iterations = iterations
        self.clock = ManualClock()
        self.manufacturer = Manufacturer(scenario.manufacturer)
        self.specs = {d.name: d for d in scenario.devices}
        self.devices: Dict[str, Authenticator] = {}
        for spec in scenario.devices:
            device = Authenticator(self.manufacturer.issue_device(spec.model), clock=self.clock, name=spec.name)
            device.unlock(True)
            self.devices[spec.name] = device
        self.lost: Set[str] = set()
        all_models = sorted({d.model for d in scenario.devices})
        self.services: Dict[str, RelyingParty] = {}
        self.origins: Dict[str, str] = {}
        for spec in scenario.services:
            policy = TrustPolicy(
                trusted_roots=frozenset([self.manufacturer.root_point]),
                compliant_models=frozenset(spec.compliant_models if spec.compliant_models is not None else all_models),
                secure_storage_models=frozenset(
                    spec.secure_storage_models if spec.secure_storage_models is not None else all_models),
            )
            self.services[spec.name] = RelyingParty(spec.origin, policy, self.clock, spec.migration_period)
            self.origins[spec.name] = spec.origin
        self._transports: Dict[Tuple[str, str], Union[LoopbackTransport, HttpTransport]] = {}
        self.channel_traffic: List[str] = []
        # every credential id a device has held per service, for probes
        self.held: Dict[Tuple[str, str], List[str]] = {}
        self.results: Dict[str, StepRecord] = {}

    # ------------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------------

    def client(self, service: str, origin: Optional[str] = None) -> ServiceClient:
        origin = origin or self.origins[service]
        key = (service, origin)
        if key not in self._transports:
            rp = self.services[service]
            if self.transport == "http":
                from fastapi.testclient import TestClient
                from api import create_app
                http_client = TestClient(create_app(rp), base_url=self.origins[service])
                self._transports[key] = HttpTransport(self.origins[service], client=http_client, origin=origin)
            else:
                self._transports[key] = LoopbackTransport(ServiceEndpoint(rp), origin)
        return ServiceClient(self._transports[key])

    def traffic(self) -> List[str]:
        frames = list(self.channel_traffic)
        for transport in self._transports.values():
            frames.extend(transport.traffic)
        return frames

    def _device(self, step: Action, name: Optional[str] = None) -> Authenticator:
        name = name or step.device
        if step.actor == "attacker":
            at = self.specs[name].compromise_at
            if name not in self.lost or at is None or self.clock.now() < at:
                raise DeviceUnavailable(f"{name} is not in the attacker's hands")
        elif name in self.lost:
            raise DeviceUnavailable(f"{name} is lost")
        return self.devices[name]

    def _remember(self, device: str, service: str, credential_id: Optional[str]):
        if credential_id:
            held = self.held.setdefault((device, service), [])
            if credential_id not in held:
                held.append(credential_id)

    # ------------------------------------------------------------------------
    # actions
    # ------------------------------------------------------------------------

    def _share(self, step: Action) -> Tuple[str, Optional[str]]:
        devices = [self._device(step, name) for name in step.devices]
        password = step.password
        if password is None:
            password = [self.specs[n].password for n in step.devices]
        channel = InMemoryChannel()
        try:
            records = run_group_exchange(devices, password, channel=channel, iterations=self.iterations)
        finally:
            self.channel_traffic.extend(channel.traffic)
        return f"epoch {records[0].epoch}", None

    def _register(self, step: Action):
        receipt = self._device(step).register_account(self.client(step.service, step.origin), step.username)
        self._remember(step.device, step.service, receipt.credential_id)
        return "registered", None

    def _login(self, step: Action):
        proof = self._device(step).login_or_enroll(self.client(step.service, step.origin), step.username,
                                                  auto_update=step.auto_update)
        self._remember(step.device, step.service, proof.credential_id)
        return proof.outcome, proof.update.status if proof.update else None

    def _update(self, step: Action):
        outcome = self._device(step).send_update(self.client(step.service, step.origin), step.username)
        return outcome.status, None

    def _lose(self, step: Action):
        self._device(step)
        self.lost.add(step.device)
        return "lost", None

    def _advance(self, step: Action):
        self.clock.advance(step.seconds)
        for rp in self.services.values():
            rp.finalize_due()
        return "advanced", None

    ACTIONS = {
        "share_seed": _share,
        "reshare": _share,
        "register": _register,
        "login": _login,
        "update": _update,
        "lose_device": _lose,
        "advance_clock": _advance,
    }

    # ------------------------------------------------------------------------
    # expectations
    # ------------------------------------------------------------------------

    def _probe(self, step: Action) -> Tuple[Optional[str], Optional[str]]:
        """Returns (observed outcome, observed error name)"""
        rp = self.services[step.service]
        if step.probe == "sign_in":
            device = self.devices[step.device]
            if self.origins[step.service] not in device.credentials:
                return "no_credential", None
            try:
                proof = device.login_or_enroll(self.client(step.service), step.username, auto_update=False)
            except OvkError as e:
                return None, e.name
            return proof.outcome, None
        rp.finalize_due()
        account = rp.accounts.get(step.username)
        if account is None:
            return None, "UnknownAccount"
        if step.probe == "credential_active":
            held = self.held.get((step.device, step.service), [])
            active = any(account.credential(c) is not None and account.credential(c).active for c in held)
            return ("active" if active else "inactive"), None
        return f"{account.state}:{len(account.active_credentials())}", None

    def _expect(self, index: int, step: Action) -> StepRecord:
        if step.ref is not None:
            target = self.results[step.ref]
            observed, error = target.outcome, target.error
        else:
            observed, error = self._probe(step)

        problems = []
        if step.error is not None:
            if error != step.error:
                problems.append(f"error {error!r} != expected {step.error!r}")
        elif error is not None:
            problems.append(f"unexpected error {error}")
        if step.outcome is not None and observed != step.outcome:
            problems.append(f"outcome {observed!r} != expected {step.outcome!r}")
        if step.probe == "credential_active":
            expected = "active" if step.active else "inactive"
            if observed != expected:
                problems.append(f"credential is {observed}, expected {expected}")
        if step.probe == "account_state" and observed is not None:
            state, count = observed.split(":")
            if step.state is not None and state != step.state:
                problems.append(f"state {state} != expected {step.state}")
            if step.active_count is not None and int(count) != step.active_count:
                problems.append(f"{count} active credentials, expected {step.active_count}")
        return StepRecord(step=index, action="expect", id=step.id, ok=not problems,
                          outcome=observed, error=error, reason="; ".join(problems) or None)

    # ------------------------------------------------------------------------

    def run(self) -> Report:
        report = Report(scenario=self.scenario.name)
        referenced = {s.ref for s in self.scenario.script if s.ref}
        for index, step in enumerate(self.scenario.script):
            if step.action == "expect":
                record = self._expect(index, step)
            else:
                try:
                    outcome, update = self.ACTIONS[step.action](self, step)
                    record = StepRecord(step=index, action=step.action, id=step.id, ok=True,
                                        outcome=outcome, update=update)
                except OvkError as e:
                    logger.info("Step %d (%s) raised %s: %s", index, step.action, e.name, e.detail)
                    # an error is only acceptable when a later expect inspects it
                    record = StepRecord(step=index, action=step.action, id=step.id,
                                        ok=step.id in referenced, error=e.name,
                                        reason=None if step.id in referenced else e.name)
            if step.id is not None:
                self.results[step.id] = record
            report.steps.append(record)
            if not record.ok:
                logger.warning("Step %d failed: %s", index, record.reason)
        return report


def run_scenario(source: Union[str, Path, dict, Scenario], transport: str = "loopback",
                 iterations: Optional[int] = None) -> Report:
    """
    Load and run a scenario

    Args:
        source: Path, dict or parsed Scenario
        transport: "loopback" or "http"
        iterations: PBKDF2 count for seed envelopes

    Returns:
        Report with one StepRecord per action
    """
    scenario = source if isinstance(source, Scenario) else load_scenario(source)
    return ScenarioRunner(scenario, transport, iterations).run()
