"""
Frame codec
Canonical JSON framing: {"body": {...}, "kind": "..."} with sorted keys and
no insignificant whitespace. The origin hint is supplied by the transport and
never read from the payload.
"""
import json
from dataclasses import dataclass
from typing import Any, Dict, Optional, Type

from pydantic import BaseModel, ValidationError

from src.errors import InvariantViolation, ParseError, UnknownKind
from src.seed.exchange import RoundMessage
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

FRAME_KINDS: Dict[str, Type[BaseModel]] = {
    "start_authn_request": StartAuthnRequest,
    "start_authn_response": StartAuthnResponse,
    "register_request": RegisterRequest,
    "account_created": AccountCreated,
    "enroll_request": EnrollRequest,
    "key_bound": KeyBound,
    "authn_request": AuthnRequest,
    "session_granted": SessionGranted,
    "error": ErrorReply,
    "seed_round": RoundMessage,
}

# request kind -> HTTP path
ROUTES: Dict[str, str] = {
    "start_authn_request": "/start-authn",
    "register_request": "/register",
    "enroll_request": "/enroll",
    "authn_request": "/authn",
}

_KIND_OF: Dict[Type[BaseModel], str] = {model: kind for kind, model in FRAME_KINDS.items()}


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class Frame:
    kind: str
    body: Dict[str, Any]
    service_id_hint: Optional[str] = None

    def to_text(self) -> str:
        return canonical_json({"kind": self.kind, "body": self.body})

    @classmethod
    def from_text(cls, text: str, service_id_hint: Optional[str] = None) -> "Frame":
        """
        Raises:
            ParseError: not a JSON object with a string kind and an object body
        """
        try:
            data = json.loads(text)
        except (TypeError, ValueError):
            raise ParseError("frame is not JSON")
        if not isinstance(data, dict) or not isinstance(data.get("kind"), str) or not isinstance(data.get("body"), dict):
            raise ParseError("frame needs a string kind and an object body")
        return cls(data["kind"], data["body"], service_id_hint)


def encode(message: BaseModel, service_id_hint: Optional[str] = None) -> Frame:
    kind = _KIND_OF.get(type(message))
    if kind is None:
        raise UnknownKind(f"no frame kind for {type(message).__name__}")
    body = message.model_dump(mode="json", by_alias=True, exclude_none=True)
    return Frame(kind, body, service_id_hint)


def decode(frame: Frame) -> BaseModel:
    """
    Turn a frame back into its message

    Raises:
        UnknownKind: kind not registered
        InvariantViolation: body fails the message's validation
    """
    model = FRAME_KINDS.get(frame.kind)
    if model is None:
        raise UnknownKind(f"unknown frame kind {frame.kind!r}")
    try:
        return model.model_validate(frame.body)
    except ValidationError as e:
        raise InvariantViolation(f"{frame.kind}: {e.error_count()} validation errors")
