"""Artifact file container: a text manifest followed by a binary payload.

Every dataset/model file starts with UTF-8 ``key = value`` lines (repeated
keys allowed, order preserved, ``#`` comments ignored), a ``---`` separator
line, then raw little-endian binary data.  The manifest echoes enough
configuration to re-run the producing command.
"""

from __future__ import annotations

import hashlib

_SEPARATOR = b"\n---\n"


class DataFormatError(ValueError):
    """Malformed artifact file."""


def write_artifact(path: str, manifest: list[tuple[str, str]], payload: bytes) -> None:
    lines = [f"{k} = {v}" for k, v in manifest]
    blob = "\n".join(lines).encode("utf-8") + _SEPARATOR + payload
    with open(path, "wb") as fh:
        fh.write(blob)


def read_artifact(path: str) -> tuple[list[tuple[str, str]], bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = blob.find(_SEPARATOR)
    if pos < 0:
        raise DataFormatError(f"{path}: missing manifest separator")
    manifest = []
    for raw in blob[:pos].decode("utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: bad manifest line {line!r}")
        key, value = line.split("=", 1)
        manifest.append((key.strip(), value.strip()))
    return manifest, blob[pos + len(_SEPARATOR) :]


def manifest_get(manifest: list[tuple[str, str]], key: str, default: str | None = None) -> str:
    for k, v in manifest:
        if k == key:
            return v
    if default is not None:
        return default
    raise DataFormatError(f"manifest is missing required key {key!r}")


def manifest_get_all(manifest: list[tuple[str, str]], key: str) -> list[str]:
    return [v for k, v in manifest if k == key]


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
