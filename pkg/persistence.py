import csv
import hashlib
import json
import logging
import math
import os
from contextlib import contextmanager
from datetime import datetime, timezone
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from errors import RunLockError

logger = logging.getLogger(__name__)

LEDGER_NAME = "runs.log"
LOCK_NAME = ".lock"
GENESIS = ""


# -----------------------------
# Deterministic writers
# -----------------------------
def plain(value):
    """JSON-safe copy: numpy scalars/arrays unwrapped, non-finite floats spelled out."""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [plain(v) for v in value.tolist()]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def canonical_json(obj) -> str:
    return json.dumps(plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path: str, obj) -> str:
    text = canonical_json(obj)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return text


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence], schema_version: Optional[int] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        if schema_version is not None:
            f.write(f"# schema_version={schema_version}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(plain(list(row)))


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


# -----------------------------
# Hash-chained run ledger
# -----------------------------
def _event_hash(event: dict, prev_hash: str) -> str:
    body = json.dumps({k: event[k] for k in event if k != "hash"}, sort_keys=True)
    return hashlib.sha256((body + prev_hash).encode()).hexdigest()


def get_last_hash(ledger_path: str) -> str:
    if not os.path.exists(ledger_path):
        return GENESIS
    last = None
    with open(ledger_path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                last = line
    if last is None:
        return GENESIS
    return json.loads(last)["hash"]


def append_event(ledger_path: str, event: dict) -> dict:
    """Append one event; each record carries prev_hash and sha256(event + prev_hash)."""
    record = plain(dict(event))
    record["timestamp"] = datetime.now(timezone.utc).isoformat()
    record["prev_hash"] = get_last_hash(ledger_path)
    record["hash"] = _event_hash(record, record["prev_hash"])

    parent = os.path.dirname(os.path.abspath(ledger_path))
    os.makedirs(parent, exist_ok=True)
    with open(ledger_path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
    logger.debug("[LEDGER] %s %s", record.get("event"), record["hash"][:12])
    return record


def verify_ledger(ledger_path: str) -> Tuple[bool, Optional[int]]:
    """(True, None) when the chain is intact, else (False, index of the first bad record)."""
    prev_hash = GENESIS
    with open(ledger_path, "r", encoding="utf-8") as f:
        for index, line in enumerate(line for line in f if line.strip()):
            try:
                event = json.loads(line)
            except ValueError:
                logger.warning("[LEDGER] unreadable record %d", index)
                return False, index
            if event.get("prev_hash") != prev_hash or _event_hash(event, prev_hash) != event.get("hash"):
                logger.warning("[LEDGER] hash mismatch at record %d", index)
                return False, index
            prev_hash = event["hash"]
    return True, None


# -----------------------------
# Output directory lock
# -----------------------------
@contextmanager
def output_lock(directory: str):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockError(f"output directory {directory} is locked by another run")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        try:
            os.remove(path)
        except FileNotFoundError:
            pass
