import hashlib
import json
import logging
import threading
from pathlib import Path
from typing import Dict, List, Optional, Union

from app.core.errors import ArtifactError, RejectedInputError
from app.services.interfaces import BaseArtifactStore

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class ArtifactStore(BaseArtifactStore):
    """按名称登记的序列化模型（去噪器、分类器），可整体持久化到目录"""

    def __init__(self):
        self._blobs: Dict[str, bytes] = {}
        self._kinds: Dict[str, str] = {}
        self._lock = threading.Lock()

    def register(self, name: str, kind: str, blob: bytes) -> None:
        if not name or "/" in name or name.startswith("."):
            raise RejectedInputError(f"invalid artifact name: {name!r}")
        with self._lock:
            self._blobs[name] = bytes(blob)
            self._kinds[name] = kind
        logger.debug(f"Registered artifact {name} ({kind}, {len(blob)} bytes)")

    def get(self, name: str) -> bytes:
        try:
            return self._blobs[name]
        except KeyError:
            raise ArtifactError(name, "artifact not registered")

    def kind(self, name: str) -> str:
        self.get(name)
        return self._kinds[name]

    def names(self, kind: Optional[str] = None) -> List[str]:
        return sorted(n for n in self._blobs if kind is None or self._kinds[n] == kind)

    def __contains__(self, name: str) -> bool:
        return name in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)

    def manifest(self) -> List[Dict[str, Union[str, int]]]:
        return [
            {
                "name": name,
                "kind": self._kinds[name],
                "file": f"{name}.bin",
                "bytes": len(self._blobs[name]),
                "sha256": hashlib.sha256(self._blobs[name]).hexdigest(),
            }
            for name in self.names()
        ]

    def persist(self, directory: Union[str, Path]) -> List[Path]:
        """写出所有模型和 manifest.json，返回写出的文件路径"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for entry in self.manifest():
            path = directory / entry["file"]
            path.write_bytes(self._blobs[entry["name"]])
            written.append(path)
        manifest_path = directory / MANIFEST
        manifest_path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True), encoding="utf-8")
        written.append(manifest_path)
        logger.info(f"Persisted {len(self)} artifacts to {directory}")
        return written

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ArtifactStore":
        """从目录读回，逐个校验大小和摘要"""
        directory = Path(directory)
        manifest_path = directory / MANIFEST
        try:
            entries = json.loads(manifest_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ArtifactError(manifest_path, "manifest not found")
        except json.JSONDecodeError as e:
            raise ArtifactError(manifest_path, f"corrupt manifest: {e}")
        store = cls()
        for entry in entries:
            path = directory / entry["file"]
            try:
                blob = path.read_bytes()
            except FileNotFoundError:
                raise ArtifactError(path, "artifact listed in manifest is missing")
            if len(blob) != entry["bytes"] or hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise ArtifactError(path, "artifact does not match its manifest entry")
            store.register(entry["name"], entry["kind"], blob)
        logger.info(f"Loaded {len(store)} artifacts from {directory}")
        return store
