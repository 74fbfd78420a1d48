"""
Unpadded base64url, the byte encoding of every JSON document on the wire
"""
import base64
import re
from typing import Annotated

from pydantic import BeforeValidator, PlainSerializer

from src.errors import ParseError

_B64URL = re.compile(r"^[A-Za-z0-9_-]*$")


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    if not isinstance(text, str) or not _B64URL.match(text) or len(text) % 4 == 1:
        raise ParseError("invalid base64url segment")
    data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    # only the canonical text of each byte string is accepted
    if b64url_encode(data) != text:
        raise ParseError("non-canonical base64url segment")
    return data


def _coerce_bytes(value):
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    if isinstance(value, str):
        try:
            return b64url_decode(value)
        except ParseError as e:
            raise ValueError(e.detail)
    raise ValueError("expected base64url text")


# bytes field that travels as unpadded base64url text in JSON
B64Bytes = Annotated[
    bytes,
    BeforeValidator(_coerce_bytes),
    PlainSerializer(b64url_encode, return_type=str, when_used="json"),
]
