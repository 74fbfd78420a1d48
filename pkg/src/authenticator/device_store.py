"""
Device persistence for the CLI
One JSON file per emulated authenticator, standing in for its secure storage.
Seeds and private keys are written here and nowhere else.
"""
import json
import logging
import os
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ValidationError

from src.attestation.manufacturer import DeviceIdentity, ManufacturerCert
from src.authenticator.device import (
    Authenticator,
    PendingUpdate,
    RetentionMode,
    RetentionPolicy,
    StoredCredential,
)
from src.crypto.b64 import B64Bytes
from src.crypto.suite import scalar_to_keypair
from src.errors import CorruptStore
from src.harness.clock import Clock
from src.ovk.derivation import UpdatingMessage
from src.seed.exchange import SeedRecord

logger = logging.getLogger(__name__)


class SeedDoc(BaseModel):
    seed: B64Bytes
    epoch: int
    peer_models: List[str]
    expires_at: Optional[float] = None


class CredentialDoc(BaseModel):
    service_id: str
    username: str
    credential_id: str
    private_key: B64Bytes


class PendingDoc(BaseModel):
    service_id: str
    new_epoch: int
    message: UpdatingMessage


class RetentionDoc(BaseModel):
    mode: RetentionMode = RetentionMode.MAX_COUNT
    max_count: Optional[int] = 2
    expiry_secs: Optional[float] = None
    prompt_consent: bool = True


class DeviceDocument(BaseModel):
    name: str
    attestation_key: B64Bytes
    certificate: ManufacturerCert
    retention: RetentionDoc = RetentionDoc()
    seeds: List[SeedDoc] = []
    credentials: List[CredentialDoc] = []
    pending: List[PendingDoc] = []


def to_document(device: Authenticator) -> DeviceDocument:
    policy = device.retention
    return DeviceDocument(
        name=device.name,
        attestation_key=device.identity.attestation_keypair.private_bytes,
        certificate=device.identity.device_certificate,
        retention=RetentionDoc(mode=policy.mode, max_count=policy.max_count,
                               expiry_secs=policy.expiry_secs, prompt_consent=policy.prompt_consent),
        seeds=[SeedDoc(seed=s.seed, epoch=s.epoch, peer_models=s.peer_models, expires_at=s.expires_at)
               for s in device.seeds],
        credentials=[CredentialDoc(service_id=c.service_id, username=c.username,
                                   credential_id=c.credential_id, private_key=c.keypair.private_bytes)
                     for c in device.credentials.values()],
        pending=[PendingDoc(service_id=sid, new_epoch=p.new_epoch, message=p.message)
                 for sid, p in device.pending_updates.items()],
    )


def from_document(doc: DeviceDocument, clock: Optional[Clock] = None) -> Authenticator:
    cert = doc.certificate
    identity = DeviceIdentity(cert.model_name, scalar_to_keypair(doc.attestation_key), cert)
    retention = RetentionPolicy(doc.retention.mode, doc.retention.max_count,
                                doc.retention.expiry_secs, doc.retention.prompt_consent)
    device = Authenticator(identity, retention, clock, name=doc.name)
    device.seeds = [SeedRecord(s.seed, s.epoch, list(s.peer_models), s.expires_at)
                    for s in sorted(doc.seeds, key=lambda s: s.epoch)]
    for c in doc.credentials:
        device.credentials[c.service_id] = StoredCredential(
            c.service_id, c.username, c.credential_id, scalar_to_keypair(c.private_key))
    for p in doc.pending:
        device.pending_updates[p.service_id] = PendingUpdate(p.message, p.new_epoch)
    return device


class DeviceStore:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def save(self, device: Authenticator):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(to_document(device).model_dump(mode="json"), sort_keys=True, indent=2),
                       encoding="utf-8")
        os.replace(tmp, self.path)
        logger.debug("Saved device %s to %s", device.name, self.path)

    def load(self, clock: Optional[Clock] = None) -> Authenticator:
        """
        Raises:
            CorruptStore: missing or unparseable device file
        """
        try:
            doc = DeviceDocument.model_validate_json(self.path.read_text(encoding="utf-8"))
        except (OSError, ValidationError, ValueError) as e:
            raise CorruptStore(f"{self.path}: {e.__class__.__name__}")
        return from_document(doc, clock)
