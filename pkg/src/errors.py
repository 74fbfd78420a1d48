"""
Exception hierarchy shared by devices, services and the harness.

The class name of every error is its wire name: the service endpoint sends
it in error frames and clients raise the same class again by name.
"""
from typing import Dict, Optional, Type


class OvkError(Exception):
    """Base class for every protocol, crypto and harness failure"""

    http_status = 400

    def __init__(self, detail: Optional[str] = None):
        self.detail = detail or self.__class__.__doc__ or self.__class__.__name__
        super().__init__(self.detail)

    @property
    def name(self) -> str:
        return self.__class__.__name__


# ----------------------------------------------------------------------------
# crypto
# ----------------------------------------------------------------------------

class InvalidInput(OvkError):
    """Malformed input length or encoding"""


class OutOfRange(OvkError):
    """Candidate scalar outside [1, n-1]; regenerate the salt and retry"""


class InvalidPoint(OvkError):
    """Point is not on secp256r1 or is the identity"""


class AuthFailure(OvkError):
    """Authenticated decryption failed"""

    http_status = 401


class ParseError(OvkError):
    """Serialization could not be parsed"""


# ----------------------------------------------------------------------------
# device side
# ----------------------------------------------------------------------------

class DeviceLocked(OvkError):
    """Local authentication required before touching secrets"""

    http_status = 403


class ProtocolOrder(OvkError):
    """Message arrived out of order or negotiation is no longer running"""


class DuplicatePartyId(OvkError):
    """Two parties claim the same negotiation identifier"""


class WrongService(OvkError):
    """Metadata MAC does not verify for this service identifier"""


class InternalError(OvkError):
    """Unexpected internal failure"""

    http_status = 500


class EpochOrder(OvkError):
    """Seed epochs must strictly increase"""


class NoMatchingSeed(OvkError):
    """No held seed verifies the registered metadata"""


class ConsentRequired(OvkError):
    """Deleting a seed needs the user's consent"""


class CredentialExists(OvkError):
    """Device already holds a credential for this service"""

    http_status = 409


class NoCredential(OvkError):
    """Device holds no credential for this service"""

    http_status = 404


# ----------------------------------------------------------------------------
# service side
# ----------------------------------------------------------------------------

class DuplicateUser(OvkError):
    """Username already registered"""

    http_status = 409


class UntrustedAttestation(OvkError):
    """Attestation rejected by the trust policy"""

    http_status = 403


class MalformedMetadata(OvkError):
    """OVK metadata violates its invariants"""


class NLimitExceeded(OvkError):
    """Account already holds N active credentials"""

    http_status = 409


class BadOwnershipSignature(OvkError):
    """Ownership signature does not verify under the bound OVPK"""

    http_status = 401


class MigrationInProgress(OvkError):
    """Enrollment is frozen while an OVK migration is open"""

    http_status = 409


class BadSignature(OvkError):
    """Challenge signature does not verify"""

    http_status = 401


class StaleChallenge(OvkError):
    """Challenge unknown, expired or already consumed"""

    http_status = 401


class RevokedCredential(OvkError):
    """Credential has been revoked"""

    http_status = 401


class BadUpdateSignature(OvkError):
    """Updating message does not verify under the current OVPK"""

    http_status = 401


class MalformedUpdate(OvkError):
    """Proposal with a known OVPK but different metadata"""


class UnknownAccount(OvkError):
    """No such account"""

    http_status = 404


class UnknownCredential(OvkError):
    """No such credential on this account"""

    http_status = 404


class CorruptStore(OvkError):
    """Persisted service state could not be read"""

    http_status = 500


# ----------------------------------------------------------------------------
# wire / harness
# ----------------------------------------------------------------------------

class UnknownKind(OvkError):
    """Frame kind is not registered"""


class InvariantViolation(OvkError):
    """Decoded message fails its type invariants"""


class TransportError(OvkError):
    """Transport could not deliver the frame"""

    http_status = 502


class ScenarioParse(OvkError):
    """Scenario file is invalid"""


class DeviceUnavailable(OvkError):
    """Device is lost, or not yet in the attacker's hands"""


class AssertionFailed(OvkError):
    """Scenario expectation did not hold"""

    def __init__(self, step_index: int, detail: Optional[str] = None):
        self.step_index = step_index
        super().__init__(f"step {step_index}: {detail or 'expectation failed'}")


def _collect(cls: Type[OvkError]) -> Dict[str, Type[OvkError]]:
    found = {cls.__name__: cls}
    for sub in cls.__subclasses__():
        found.update(_collect(sub))
    return found


def error_from_name(name: str, detail: Optional[str] = None) -> OvkError:
    """
    Rebuild an error received over the wire

    Args:
        name: Error class name from an error frame
        detail: Human readable detail

    Returns:
        Instance of the matching subclass, TransportError if unknown
    """
    cls = _collect(OvkError).get(name)
    if cls is None or cls is AssertionFailed:
        return TransportError(f"{name}: {detail}")
    return cls(detail)
