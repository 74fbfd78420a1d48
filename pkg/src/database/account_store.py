"""
JSON Store for Service Accounts
Persists accounts, bound OVKs, credentials and open migrations as a single
canonical JSON document
"""
import json
import logging
import os
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from src.errors import CorruptStore
from src.service.accounts import ServiceSnapshot

logger = logging.getLogger(__name__)


class AccountStore:
    """Single-file JSON store; writes go to a temp file and are renamed in"""

    def __init__(self, store_path: Union[str, Path]):
        """
        Initialize the account store

        Args:
            store_path: Path of the JSON document
        """
        self.store_path = Path(store_path)

    def exists(self) -> bool:
        return self.store_path.exists()

    def dumps(self, snapshot: ServiceSnapshot) -> str:
        return json.dumps(snapshot.model_dump(mode="json"), sort_keys=True, indent=2)

    def save(self, snapshot: ServiceSnapshot):
        self.store_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.store_path.with_name(self.store_path.name + ".tmp")
        tmp.write_text(self.dumps(snapshot), encoding="utf-8")
        os.replace(tmp, self.store_path)
        logger.debug("Saved %d accounts to %s", len(snapshot.accounts), self.store_path)

    def load(self) -> Optional[ServiceSnapshot]:
        """
        Read the stored snapshot

        Returns:
            ServiceSnapshot, or None if nothing has been saved yet

        Raises:
            CorruptStore: file exists but does not parse
        """
        if not self.exists():
            return None
        try:
            return ServiceSnapshot.model_validate_json(self.store_path.read_text(encoding="utf-8"))
        except (ValidationError, ValueError, UnicodeDecodeError) as e:
            raise CorruptStore(f"{self.store_path}: {e.__class__.__name__}")
