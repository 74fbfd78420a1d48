"""
FastAPI REST API for an OVK relying party
Serves the four service endpoints as JSON frames over HTTP

Usage:
    OVK_SERVICE_CONFIG=svc.json uvicorn api:app --host 127.0.0.1 --port 8000

Or through the CLI:
    python scripts/ovk_cli.py service serve --config svc.json
"""

import sys
sys.path.insert(0, '.')

import logging
import os
from typing import Any, Dict, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from pydantic import BaseModel

from config import settings
from src.errors import ParseError, UnknownKind
from src.service.endpoint import ServiceEndpoint
from src.service.relying_party import RelyingParty, ServiceSettings
from src.wire.codec import Frame, encode
from src.wire.messages import ErrorReply

logger = logging.getLogger(__name__)

# ============================================================================
# PYDANTIC MODELS
# ============================================================================

class FrameIn(BaseModel):
    """Request frame: {"kind": ..., "body": {...}}"""
    kind: str
    body: Dict[str, Any]


# ============================================================================
# HELPER FUNCTIONS
# ============================================================================

def default_relying_party() -> RelyingParty:
    """RelyingParty from $OVK_SERVICE_CONFIG, or an empty-policy one on the configured origin"""
    config_path = os.getenv("OVK_SERVICE_CONFIG")
    if config_path:
        config = ServiceSettings.load(config_path)
    else:
        config = ServiceSettings(service_id=f"http://{settings.SERVICE_HOST}:{settings.SERVICE_PORT}")
    if not config.trust_policy_path:
        logger.warning("No trust policy configured for %s (set OVK_SERVICE_CONFIG); "
                       "every attestation will be rejected", config.service_id)
    return RelyingParty.from_settings(config)


def _frame_response(status: int, frame: Frame) -> Response:
    return Response(content=frame.to_text(), status_code=status, media_type="application/json")


def _error_response(error) -> Response:
    return _frame_response(error.http_status, encode(ErrorReply(error=error.name, detail=error.detail)))


# ============================================================================
# APP FACTORY
# ============================================================================

def create_app(relying_party: Optional[RelyingParty] = None) -> FastAPI:
    """
    Build the HTTP app around one relying party

    Args:
        relying_party: Service state machine; loaded from the environment if omitted

    Returns:
        FastAPI app
    """
    rp = relying_party or default_relying_party()
    endpoint = ServiceEndpoint(rp)

    app = FastAPI(
        title="OVK Relying Party API",
        description="Account registration, seamless key enrollment and OVK migration",
        version="1.0.0"
    )
    app.state.relying_party = rp

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def malformed_frame(request: Request, exc: RequestValidationError):
        return _error_response(ParseError("request is not a frame"))

    def serve(expected_kind: str, frame: FrameIn) -> Response:
        if frame.kind != expected_kind:
            return _error_response(UnknownKind(f"{frame.kind!r} sent to the {expected_kind} route"))
        status, reply = endpoint.dispatch(Frame(frame.kind, frame.body))
        return _frame_response(status, reply)

    # ========================================================================
    # API ENDPOINTS
    # ========================================================================

    @app.get("/api/health")
    def health_check():
        """Health check endpoint"""
        return {
            "status": "healthy",
            "service_id": rp.service_id,
            "accounts": len(rp.accounts),
        }

    @app.post("/start-authn")
    def start_authn(frame: FrameIn):
        """Challenge plus OVK state for a username"""
        return serve("start_authn_request", frame)

    @app.post("/register")
    def register(frame: FrameIn):
        """Create an account bound to an OVPK"""
        return serve("register_request", frame)

    @app.post("/enroll")
    def enroll(frame: FrameIn):
        """Seamless enrollment authorized by an OVSK signature"""
        return serve("enroll_request", frame)

    @app.post("/authn")
    def authn(frame: FrameIn):
        """Challenge response, optionally carrying an updating message"""
        return serve("authn_request", frame)

    return app


app = create_app()

if __name__ == "__main__":
    import uvicorn
    settings.configure_logging()
    uvicorn.run(app, host=settings.SERVICE_HOST, port=settings.SERVICE_PORT)
