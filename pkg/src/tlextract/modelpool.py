"""Directory-backed pool of candidate pre-trained checkpoints.

The attack assumes access to the public zoo of pre-trained models; here the
zoo is a directory of WBIN files following the naming convention

    <vendor>_<framework>_<arch>_<variant>.wbin

(fields themselves never contain underscores — composite names such as
``graph-xla`` or ``enc6-h256`` use hyphens).  The index is rebuilt by
scanning the directory: no manifest to go stale.  Scanning checks each
file's magic so the index only ever points at parseable WBIN files; the
full payload is parsed on load.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import _MAGIC, Checkpoint, read_wbin, write_wbin
from .errors import ToolkitError

POOL_SUFFIX = ".wbin"
DEFAULT_VARIANT = "pretrained"

PoolKey = tuple[str, str, str, str]  # (vendor, framework, arch, variant)


def pool_filename(vendor: str, framework: str, arch: str,
                  variant: str = DEFAULT_VARIANT) -> str:
    parts = (vendor, framework, arch, variant)
    for p in parts:
        if "_" in p or not p:
            raise ToolkitError(
                f"pool name field {p!r} must be non-empty and free of '_'",
                code="bad-pool-name")
    return "_".join(parts) + POOL_SUFFIX


def _has_magic(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(len(_MAGIC)) == _MAGIC
    except OSError:
        return False


@dataclass
class ModelPool:
    root: Path
    index: dict[PoolKey, Path] = field(default_factory=dict)

    @classmethod
    def scan(cls, root) -> "ModelPool":
        root = Path(root)
        if not root.is_dir():
            raise ToolkitError(f"pool directory {root} does not exist",
                               code="bad-pool")
        index: dict[PoolKey, Path] = {}
        for path in sorted(root.glob("*" + POOL_SUFFIX)):
            parts = path.stem.split("_")
            if len(parts) != 4:
                warnings.warn(f"pool file {path.name} ignored: name is not "
                              "vendor_framework_arch_variant")
                continue
            if not _has_magic(path):
                warnings.warn(f"pool file {path.name} ignored: bad magic")
                continue
            index[tuple(parts)] = path
        return cls(root=root, index=index)

    def __len__(self) -> int:
        return len(self.index)

    def lookup(self, vendor: str, framework: str, arch: str,
               variant: str = DEFAULT_VARIANT) -> Path | None:
        return self.index.get((vendor, framework, arch, variant))

    def load(self, vendor: str, framework: str, arch: str,
             variant: str = DEFAULT_VARIANT) -> Checkpoint:
        path = self.lookup(vendor, framework, arch, variant)
        if path is None:
            raise ToolkitError(
                f"pool has no entry {vendor}/{framework}/{arch}/{variant}",
                code="pool-miss")
        return read_wbin(path)

    def add(self, ckpt: Checkpoint, arch: str | None = None,
            variant: str | None = None) -> Path:
        """File the checkpoint under its metadata-derived name."""
        name = pool_filename(
            ckpt.metadata["vendor"], ckpt.metadata["framework"],
            arch or ckpt.metadata["arch"],
            variant or ckpt.metadata.get("variant", DEFAULT_VARIANT))
        path = self.root / name
        tmp = path.with_suffix(".tmp-%d" % os.getpid())
        write_wbin(ckpt, tmp)
        os.replace(tmp, path)
        self.index[tuple(path.stem.split("_"))] = path
        return path
