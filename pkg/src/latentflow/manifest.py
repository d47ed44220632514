"""Output-directory bookkeeping: every artifact is listed with its SHA-256."""

from __future__ import annotations

import hashlib
import os


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactWriter:
    """Tracks files written under an output directory.

    finalize() writes 'manifest.txt' with one 'sha256  relpath' line per
    artifact, sorted by path, so identical runs produce identical manifests.
    """

    def __init__(self, out_dir):
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self._paths = set()

    def path(self, relpath: str) -> str:
        """Absolute path for an artifact; parent dirs are created."""
        full = os.path.join(self.out_dir, relpath)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        return full

    def add(self, path) -> str:
        full = os.path.abspath(str(path))
        rel = os.path.relpath(full, self.out_dir)
        if rel.startswith(".."):
            raise ValueError(f"artifact {path} is outside {self.out_dir}")
        self._paths.add(rel)
        return str(path)

    def write(self, relpath: str, writer_fn) -> str:
        """writer_fn(full_path) writes the file; registers and returns it."""
        full = self.path(relpath)
        writer_fn(full)
        return self.add(full)

    def finalize(self) -> str:
        manifest = os.path.join(self.out_dir, "manifest.txt")
        lines = [
            f"{sha256_file(os.path.join(self.out_dir, rel))}  {rel}"
            for rel in sorted(self._paths)
        ]
        with open(manifest, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        return manifest
