"""
Seed exchange channels
Stand-ins for the QR codes users scan between devices: an in-memory mailbox
for tests and a directory of JSON round files for separate processes.
"""
import logging
import os
import time
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

from config import settings
from src.errors import DuplicatePartyId, OvkError, TransportError
from src.seed.exchange import RoundMessage, SeedRecord

logger = logging.getLogger(__name__)


class RingParty(Protocol):
    self_id: int

    def start(self) -> RoundMessage: ...

    def step(self, incoming: RoundMessage) -> Union[RoundMessage, SeedRecord]: ...

    def abort(self): ...


class InMemoryChannel:
    """Mailbox keyed by (round, addressee); records every message sent"""

    def __init__(self):
        self._boxes: Dict[Tuple[int, int], RoundMessage] = {}
        self.traffic: List[str] = []

    def send(self, msg: RoundMessage):
        key = (msg.round, msg.to_id)
        if key in self._boxes:
            raise DuplicatePartyId(f"two round-{msg.round} messages addressed to party {msg.to_id}")
        self._boxes[key] = msg
        self.traffic.append(msg.to_json())

    def receive(self, to_id: int, round_no: int, timeout: Optional[float] = None) -> RoundMessage:
        try:
            return self._boxes.pop((round_no, to_id))
        except KeyError:
            raise TransportError(f"no round-{round_no} message for party {to_id}")

    def inject(self, msg: RoundMessage):
        """Replace a queued message (tests tamper through this)"""
        self._boxes[(msg.round, msg.to_id)] = msg


class DirectoryChannel:
    """
    Directory of round files `roundRR-fromF-toT.json`

    Files are created with a hard link from a temp file, so a second writer
    for the same slot fails instead of overwriting.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def _name(self, round_no: int, from_id: int, to_id: int) -> Path:
        return self.path / f"round{round_no:02d}-from{from_id}-to{to_id}.json"

    def send(self, msg: RoundMessage):
        final = self._name(msg.round, msg.from_id, msg.to_id)
        tmp = self.path / f".{uuid.uuid4().hex}.tmp"
        tmp.write_text(msg.to_json(), encoding="utf-8")
        try:
            os.link(tmp, final)
        except FileExistsError:
            raise DuplicatePartyId(f"{final.name} already written by another party")
        finally:
            tmp.unlink(missing_ok=True)
        logger.debug("Wrote %s", final.name)

    def receive(self, to_id: int, round_no: int, timeout: Optional[float] = None) -> RoundMessage:
        """
        Wait for the round file addressed to this party

        Args:
            to_id: Receiving party
            round_no: Expected round
            timeout: Seconds to wait, settings.CHANNEL_TIMEOUT_SECS by default

        Returns:
            RoundMessage
        """
        deadline = time.monotonic() + (settings.CHANNEL_TIMEOUT_SECS if timeout is None else timeout)
        pattern = f"round{round_no:02d}-from*-to{to_id}.json"
        while True:
            matches = sorted(self.path.glob(pattern))
            if len(matches) > 1:
                raise DuplicatePartyId(f"several senders wrote {pattern}")
            if matches:
                return RoundMessage.model_validate_json(matches[0].read_text(encoding="utf-8"))
            if time.monotonic() >= deadline:
                raise TransportError(f"timed out waiting for {pattern}")
            time.sleep(settings.CHANNEL_POLL_INTERVAL)


def drive_ring(parties: Sequence[RingParty], channel) -> List[SeedRecord]:
    """
    Run a whole ring exchange inside one process

    Args:
        parties: One state machine per party, ids 0..N-1
        channel: InMemoryChannel or DirectoryChannel

    Returns:
        SeedRecords in party order
    """
    n_parties = len(parties)
    results: Dict[int, SeedRecord] = {}
    try:
        for party in parties:
            channel.send(party.start())
        for round_no in range(1, n_parties):
            for party in parties:
                out = party.step(channel.receive(party.self_id, round_no, timeout=0))
                if isinstance(out, SeedRecord):
                    results[party.self_id] = out
                else:
                    channel.send(out)
    except OvkError:
        for party in parties:
            party.abort()
        raise
    return [results[party.self_id] for party in parties]
