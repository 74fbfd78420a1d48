"""
Transports
Carry request frames to a service and bring replies back. The transport, not
the peer, decides the origin a device sees (the service_id_hint), standing
in for the origin a TLS connection would authenticate.
"""
import logging
from typing import List, Optional, Protocol, Tuple

import httpx

from src.errors import TransportError, UnknownKind
from src.wire.codec import ROUTES, Frame

logger = logging.getLogger(__name__)


class FrameEndpoint(Protocol):
    service_id: str

    def handle_text(self, text: str) -> Tuple[int, str]: ...


def origin_of(url: str) -> str:
    """scheme://host[:port] of a URL"""
    parsed = httpx.URL(url)
    origin = f"{parsed.scheme}://{parsed.host}"
    if parsed.port is not None:
        origin += f":{parsed.port}"
    return origin


class LoopbackTransport:
    """
    In-process transport

    origin defaults to the endpoint's own service id; tests pass another one
    to model a look-alike origin relaying a real service.
    """

    def __init__(self, endpoint: FrameEndpoint, origin: Optional[str] = None):
        self.endpoint = endpoint
        self.origin = origin or endpoint.service_id
        self.traffic: List[str] = []

    def request(self, frame: Frame) -> Frame:
        text = frame.to_text()
        self.traffic.append(text)
        _, reply = self.endpoint.handle_text(text)
        self.traffic.append(reply)
        return Frame.from_text(reply, service_id_hint=self.origin)


class HttpTransport:
    """
    JSON-over-HTTP transport

    Args:
        base_url: Service URL; its origin becomes the hint unless origin is given
        client: httpx.Client to use (a FastAPI TestClient works too)
        origin: Explicit origin override
    """

    def __init__(self, base_url: str, client: Optional[httpx.Client] = None,
                 origin: Optional[str] = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(base_url=self.base_url, timeout=timeout)
        self.origin = origin or origin_of(self.base_url)
        self.traffic: List[str] = []

    def request(self, frame: Frame) -> Frame:
        path = ROUTES.get(frame.kind)
        if path is None:
            raise UnknownKind(f"{frame.kind!r} has no HTTP route")
        text = frame.to_text()
        self.traffic.append(text)
        try:
            response = self.client.post(path, content=text.encode("utf-8"),
                                        headers={"Content-Type": "application/json"})
        except httpx.HTTPError as e:
            raise TransportError(f"{path}: {e.__class__.__name__}")
        reply = response.text
        self.traffic.append(reply)
        logger.debug("POST %s -> %d", path, response.status_code)
        return Frame.from_text(reply, service_id_hint=self.origin)

    def close(self):
        self.client.close()
