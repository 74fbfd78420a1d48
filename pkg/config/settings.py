"""
Configuration settings for the OVK authenticator/service toolkit
"""
import logging
import os

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

# Password-based key wrapping (PBES2-HS256+A128KW)
PBES2_ITERATIONS = int(os.getenv("OVK_PBES2_ITERATIONS", "210000"))
PBES2_MIN_ITERATIONS = 1000
PBES2_MAX_ITERATIONS = 10_000_000
PBES2_SALT_BYTES = 16

# OVK derivation
METADATA_R_BYTES = 32
DERIVE_MAX_RETRIES = 64

# Service settings
MIGRATION_PERIOD_SECS = float(os.getenv("OVK_MIGRATION_PERIOD_SECS", "86400"))
CHALLENGE_TTL_SECS = float(os.getenv("OVK_CHALLENGE_TTL_SECS", "300"))
CHALLENGE_BYTES = 32

# HTTP server
SERVICE_HOST = os.getenv("OVK_SERVICE_HOST", "127.0.0.1")
SERVICE_PORT = int(os.getenv("OVK_SERVICE_PORT", "8000"))

# Seed retention
RENEWAL_WINDOW_FRACTION = 0.1

# Seed exchange channel polling
CHANNEL_POLL_INTERVAL = 0.2
CHANNEL_TIMEOUT_SECS = 300.0

LOG_LEVEL = os.getenv("OVK_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = LOG_LEVEL):
    """Install the shared log format for CLI and server processes"""
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT)
