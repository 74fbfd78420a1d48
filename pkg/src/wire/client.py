"""
Typed service client used by authenticators
"""
from typing import List, Protocol, Type, TypeVar

from pydantic import BaseModel

from src.errors import InvariantViolation, error_from_name
from src.wire.codec import Frame, decode, encode
from src.wire.messages import (
    AccountCreated,
    AuthnRequest,
    EnrollRequest,
    ErrorReply,
    KeyBound,
    RegisterRequest,
    SessionGranted,
    StartAuthnRequest,
    StartAuthnResponse,
)

Reply = TypeVar("Reply", bound=BaseModel)


class Transport(Protocol):
    origin: str
    traffic: List[str]

    def request(self, frame: Frame) -> Frame: ...


class ServiceClient:
    """Error frames come back as the same OvkError subclass the service raised"""

    def __init__(self, transport: Transport):
        self.transport = transport

    @property
    def service_id(self) -> str:
        """Origin as established by the transport"""
        return self.transport.origin

    @property
    def traffic(self) -> List[str]:
        return self.transport.traffic

    def _call(self, message: BaseModel, expected: Type[Reply]) -> Reply:
        reply = decode(self.transport.request(encode(message)))
        if isinstance(reply, ErrorReply):
            raise error_from_name(reply.error, reply.detail)
        if not isinstance(reply, expected):
            raise InvariantViolation(f"expected {expected.__name__}, got {type(reply).__name__}")
        return reply

    def start_authn(self, username: str) -> StartAuthnResponse:
        return self._call(StartAuthnRequest(username=username), StartAuthnResponse)

    def register(self, req: RegisterRequest) -> AccountCreated:
        return self._call(req, AccountCreated)

    def enroll(self, req: EnrollRequest) -> KeyBound:
        return self._call(req, KeyBound)

    def authn(self, req: AuthnRequest) -> SessionGranted:
        return self._call(req, SessionGranted)
