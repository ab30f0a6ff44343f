import hashlib
from pathlib import Path


def pack_hash(root) -> str:
    """SHA-256 over every file in a pack except run provenance."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
