"""Seeded synthetic corpus: stand-in binaries plus oracle reports from the sandbox model."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .library import NETWORK_TAG
from .oracle import report_to_xml
from .sandbox import SandboxModel, seed_from


def synthetic_binaries(count: int, seed: int) -> list[bytes]:
    """Inert byte blobs with distinct hashes; they are never executed."""
    rng = np.random.default_rng(seed_from("corpus", seed))
    blobs, seen = [], set()
    while len(blobs) < count:
        size = int(rng.integers(64, 512))
        blob = b"MZ" + rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()
        digest = hashlib.md5(blob).hexdigest()
        if digest not in seen:
            seen.add(digest)
            blobs.append(blob)
    return blobs


def write_corpus(
    directory: Path,
    count: int,
    seed: int,
    model: SandboxModel | None = None,
    oracle_source: str = "sim-oracle",
    tag: str = NETWORK_TAG,
) -> dict[str, int]:
    """Write ``binaries/`` (with manifest.csv) and ``oracle/`` (one XML per binary)."""
    model = model or SandboxModel()
    bin_dir = directory / "binaries"
    oracle_dir = directory / "oracle"
    bin_dir.mkdir(parents=True, exist_ok=True)
    oracle_dir.mkdir(parents=True, exist_ok=True)
    lines = ["filename,source_tag,capability_tags"]
    for i, blob in enumerate(synthetic_binaries(count, seed)):
        md5 = hashlib.md5(blob).hexdigest()
        name = f"sample_{i:05d}.bin"
        (bin_dir / name).write_bytes(blob)
        lines.append(f'{name},synthetic,"{tag}"')
        (oracle_dir / f"{md5}.xml").write_text(report_to_xml(model.oracle_report(md5, oracle_source)) + "\n")
    (bin_dir / "manifest.csv").write_text("\n".join(lines) + "\n")
    return {"binaries": count, "reports": count}
