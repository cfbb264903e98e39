import json, hashlib, time, pathlib

GENESIS = "GENESIS"


def _last_hash(path: pathlib.Path) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            last = None
            for line in f:
                if line.strip():
                    last = json.loads(line)
            return last["entry_hash"] if last else GENESIS
    except FileNotFoundError:
        return GENESIS


def _entry_hash(prev_hash: str, event: dict) -> str:
    payload = json.dumps(event, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256((prev_hash + payload).encode("utf-8")).hexdigest()


def log_event(path, event: dict) -> str:
    """Append one run event to a hash-chained JSONL log and return its hash."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    event = dict(event)
    event["ts"] = int(time.time())
    event["prev_hash"] = _last_hash(path)
    h = _entry_hash(event["prev_hash"], event)
    event["entry_hash"] = h
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(event, ensure_ascii=False, default=str) + "\n")
    return h


def read_events(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def verify_chain(path) -> tuple[bool, str]:
    """Re-derive every entry hash; returns (ok, message) naming the first break."""
    prev = GENESIS
    for n, event in enumerate(read_events(path)):
        recorded = event.pop("entry_hash", None)
        if event.get("prev_hash") != prev:
            return False, f"line {n + 1}: prev_hash does not match previous entry"
        if _entry_hash(prev, event) != recorded:
            return False, f"line {n + 1}: entry_hash mismatch"
        prev = recorded
    return True, "OK"


class EventLog:
    """Optional sink handed to trainers; a None path makes every call a no-op."""

    def __init__(self, path=None):
        self.path = pathlib.Path(path) if path else None

    def __call__(self, action: str, **fields) -> str | None:
        if self.path is None:
            return None
        return log_event(self.path, {"action": action, **fields})
