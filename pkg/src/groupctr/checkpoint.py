"""Parameter checkpoints: a text manifest plus a little-endian float64 blob.

A checkpoint is two files sharing a stem: <stem>.manifest lists one
parameter per line (name, rows, cols, byte offset into the blob) after a
header that pins the format version and the embedding schema hash the
parameters were trained against; <stem>.bin concatenates the raw row-major
float64 bytes.  Round trips are bit-exact.
"""

from __future__ import annotations

import os

import numpy as np

from .grids import ParameterStore

MAGIC = "grid-checkpoint v1"
NO_SCHEMA = "-"


class CheckpointError(Exception):
    """The files do not describe a loadable checkpoint."""


class SchemaMismatchError(CheckpointError):
    """The checkpoint was written against a different embedding schema."""


def manifest_path(stem: str) -> str:
    return stem + ".manifest"


def blob_path(stem: str) -> str:
    return stem + ".bin"


def save_checkpoint(stem: str, params: ParameterStore,
                    schema_hash: str | None = None) -> None:
    lines = [MAGIC, f"schema {schema_hash or NO_SCHEMA}"]
    offset = 0
    chunks = []
    for param in params:
        grid = param.grid
        lines.append(f"{param.name} {grid.rows} {grid.cols} {offset}")
        raw = np.ascontiguousarray(grid.data, dtype="<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(manifest_path(stem), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(blob_path(stem), "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)


def read_manifest(stem: str) -> tuple[str, list[tuple[str, int, int, int]]]:
    """Return (schema_hash, [(name, rows, cols, offset), ...])."""
    try:
        with open(manifest_path(stem), "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read manifest: {exc}") from exc
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"not a checkpoint manifest: {manifest_path(stem)}")
    if len(lines) < 2 or not lines[1].startswith("schema "):
        raise CheckpointError("manifest is missing the schema line")
    schema = lines[1].split(" ", 1)[1]
    entries = []
    for line in lines[2:]:
        if not line:
            continue
        parts = line.rsplit(" ", 3)
        if len(parts) != 4:
            raise CheckpointError(f"malformed manifest line: {line!r}")
        name, rows, cols, offset = parts
        entries.append((name, int(rows), int(cols), int(offset)))
    return schema, entries


def load_checkpoint(stem: str, params: ParameterStore,
                    expect_schema_hash: str | None = None) -> None:
    """Load values into an already built ParameterStore, verifying shapes.

    The store must declare exactly the parameters the manifest lists.  When
    expect_schema_hash is given it must match the recorded hash; refusing to
    mix parameters across embedding schemas is what keeps index lookups
    meaningful.
    """
    schema, entries = read_manifest(stem)
    if expect_schema_hash is not None and schema != (expect_schema_hash or NO_SCHEMA):
        raise SchemaMismatchError(
            f"checkpoint schema {schema} does not match expected {expect_schema_hash}")
    names = {name for name, _, _, _ in entries}
    missing = [n for n in params.names() if n not in names]
    extra = [n for n in names if n not in params]
    if missing or extra:
        raise CheckpointError(
            f"parameter set mismatch: missing {missing or 'none'}, extra {extra or 'none'}")
    try:
        with open(blob_path(stem), "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob: {exc}") from exc
    for name, rows, cols, offset in entries:
        param = params[name]
        if param.grid.shape != (rows, cols):
            raise CheckpointError(
                f"shape mismatch for '{name}': store {param.grid.shape}, "
                f"checkpoint ({rows}, {cols})")
        count = rows * cols
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        if values.size != count:
            raise CheckpointError(f"blob truncated while reading '{name}'")
        param.grid.data[:] = values.reshape(rows, cols)


def stored_schema_hash(stem: str) -> str | None:
    schema, _ = read_manifest(stem)
    return None if schema == NO_SCHEMA else schema
