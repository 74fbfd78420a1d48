"""
Service endpoint
Frame-in, frame-out dispatch in front of a RelyingParty. Loopback and HTTP
transports both go through here, so they see identical bytes.
"""
import logging
from typing import Callable, Dict, Tuple

from pydantic import BaseModel

from src.errors import InternalError, OvkError, UnknownKind
from src.service.relying_party import RelyingParty
from src.wire.codec import Frame, decode, encode
from src.wire.messages import (
    AuthnRequest,
    EnrollRequest,
    ErrorReply,
    RegisterRequest,
    StartAuthnRequest,
)

logger = logging.getLogger(__name__)


class ServiceEndpoint:
    def __init__(self, relying_party: RelyingParty):
        self.relying_party = relying_party
        self._handlers: Dict[str, Callable[[BaseModel], BaseModel]] = {
            "start_authn_request": self._start_authn,
            "register_request": self._register,
            "enroll_request": self._enroll,
            "authn_request": self._authn,
        }

    @property
    def service_id(self) -> str:
        return self.relying_party.service_id

    def _start_authn(self, msg: StartAuthnRequest):
        return self.relying_party.start_authn(msg.username)

    def _register(self, msg: RegisterRequest):
        return self.relying_party.register(msg)

    def _enroll(self, msg: EnrollRequest):
        return self.relying_party.enroll_key(msg)

    def _authn(self, msg: AuthnRequest):
        return self.relying_party.authn(msg)

    def dispatch(self, frame: Frame) -> Tuple[int, Frame]:
        """
        Handle one request frame

        Args:
            frame: Decoded request frame

        Returns:
            (HTTP status, reply frame); protocol failures become error frames
        """
        try:
            handler = self._handlers.get(frame.kind)
            if handler is None:
                raise UnknownKind(f"{frame.kind!r} is not a request kind")
            reply = handler(decode(frame))
            return 200, encode(reply)
        except OvkError as e:
            logger.info("%s rejected %s: %s", self.service_id, frame.kind, e.name)
            return e.http_status, encode(ErrorReply(error=e.name, detail=e.detail))
        except Exception:
            logger.exception("Unhandled failure on %s", frame.kind)
            err = InternalError()
            return err.http_status, encode(ErrorReply(error=err.name, detail=err.detail))

    def handle_text(self, text: str) -> Tuple[int, str]:
        """Raw text in, canonical reply text out"""
        try:
            frame = Frame.from_text(text)
        except OvkError as e:
            return e.http_status, encode(ErrorReply(error=e.name, detail=e.detail)).to_text()
        status, reply = self.dispatch(frame)
        return status, reply.to_text()
