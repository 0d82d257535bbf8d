# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Helper functions dealing with the files on the file system."""

from __future__ import annotations

import gzip
import hashlib
import os
from pathlib import Path
import tempfile

from t2caps.util.errors import DataFormatError

_HASH_CHUNK = 1 << 20


def ensure_dir(base_dir: Path, name: str = "") -> Path:
    """Retrieve a directory for cached or produced files to be in, creating one if
    needed.

    :param base_dir: Base directory to create the directory in
    :param name: Optional sub-directory name
    :return: Full directory path
    """
    if not str(base_dir):
        base_dir = Path.home()
    target = base_dir / name if name else base_dir
    target.mkdir(parents=True, exist_ok=True)
    return target


def get_lock_dir_path(output_dir: Path) -> Path:
    """Return the name of the lock directory guarding a run directory.

    :param output_dir: Run output directory

    :return: Full path to the run lock directory
    """
    return output_dir.parent / f"{output_dir.name}-lock"


def resolve_data_file(path: Path) -> Path:
    """Find a dataset file, also accepting its gzip-compressed variant.

    :param path: Expected uncompressed path
    :raise DataFormatError: If neither the file nor a ``.gz`` sibling exists
    :return: Path of the file that exists
    """
    if path.is_file():
        return path
    gz_path = path.with_name(f"{path.name}.gz")
    if gz_path.is_file():
        return gz_path
    raise DataFormatError(f"Missing dataset file: {path} (or {gz_path.name})")


def read_bytes(path: Path) -> bytes:
    """Read a whole file, transparently decompressing ``.gz`` files.

    :param path: File to read
    :raise DataFormatError: If the file cannot be read
    :return: File contents
    """
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except OSError as ex:
        raise DataFormatError(f"Unable to read {path}: {ex}") from ex


def sha256_of(path: Path) -> str:
    """Stream a SHA-256 digest of a file.

    :param path: File to hash
    :return: Hex digest
    """
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_HASH_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def read_checksum_file(path: Path) -> dict[str, str]:
    """Parse a ``sha256sum``-style file into a mapping of file name to digest.

    :param path: Checksum file, one "<digest>  <name>" entry per line
    :raise DataFormatError: On lines without both a digest and a name
    :return: Mapping of file name to lower-case hex digest
    """
    sums: dict[str, str] = {}
    text = path.read_text(encoding="utf-8", errors="replace")
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            digest, name = line.split(maxsplit=1)
        except ValueError as ex:
            raise DataFormatError(
                f"{path}:{number}: bad checksum line {line!r}",
            ) from ex
        sums[name.strip().lstrip("*")] = digest.lower()
    return sums


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write a file through a temporary sibling so readers never see partial files.

    :param path: Destination file
    :param payload: Bytes to write
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
