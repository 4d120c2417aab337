"""IVOA dataset identifiers and the replica catalogue (which site holds what)."""

from __future__ import annotations

import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

SCHEME = "ivo://"


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class AlreadyExists(Exception):
    pass


@dataclass(frozen=True)
class IvoId:
    authority: str
    resource_path: str
    storage_path: str

    @property
    def namespace(self) -> str:
        return self.storage_path.split("/", 1)[0]

    @property
    def name(self) -> str:
        return self.storage_path.rsplit("/", 1)[-1]

    @property
    def dataset_id(self) -> str:
        """The identifier without its resource path, as DataLink advertises it."""
        return f"{SCHEME}{self.authority}?{self.storage_path}"

    def __str__(self) -> str:
        return f"{SCHEME}{self.authority}{self.resource_path}?{self.storage_path}"


def parse_ivoid(text: str) -> IvoId:
    """Parse ``ivo://<authority>[/<resource path>]?<namespace>/.../<name>``."""
    if not isinstance(text, str) or not text.startswith(SCHEME):
        raise ParseError("identifier must start with 'ivo://'", 0)
    q = text.find("?")
    if q < 0:
        raise ParseError("identifier has no '?' before the storage path", len(text))
    head = text[len(SCHEME):q]
    slash = head.find("/")
    authority, resource_path = (head, "") if slash < 0 else (head[:slash], head[slash:])
    if not authority:
        raise ParseError("empty authority", len(SCHEME))
    storage_path = text[q + 1:]
    if not storage_path:
        raise ParseError("empty storage path", q + 1)
    if "/" not in storage_path:
        raise ParseError("storage path needs a namespace and a name", q + 1)
    ivoid = IvoId(authority, resource_path, storage_path)
    if not ivoid.namespace:
        raise ParseError("empty namespace", q + 1)
    if not ivoid.name:
        raise ParseError("empty dataset name", len(text))
    return ivoid


@dataclass(frozen=True)
class ReplicaRecord:
    ivoid: IvoId
    site_id: str
    relative_path: str = ""

    def __post_init__(self):
        if not self.site_id:
            raise ValueError("site_id must be non-empty")
        if not self.relative_path:
            object.__setattr__(self, "relative_path", self.ivoid.storage_path)

    def to_dict(self) -> dict:
        return {"ivoid": str(self.ivoid), "site_id": self.site_id, "relative_path": self.relative_path}

    @classmethod
    def from_dict(cls, doc: dict) -> ReplicaRecord:
        return cls(parse_ivoid(doc["ivoid"]), doc["site_id"], doc.get("relative_path") or "")


class ReplicaCatalogue:
    """In-memory replica catalogue, optionally mirrored to a snapshot file.

    The snapshot holds one record per line: ivoid, site_id and relative_path
    separated by tabs. It is rewritten atomically after every mutation.
    """

    def __init__(self, snapshot_path: str | os.PathLike | None = None):
        # readers take the current tuple; writers swap in a new one
        self._records: tuple[ReplicaRecord, ...] = ()
        self._lock = threading.Lock()
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        if self.snapshot_path and self.snapshot_path.exists():
            for record in load_snapshot(self.snapshot_path.read_text()):
                self._add(record)

    def _add(self, record: ReplicaRecord):
        for r in self._records:
            if r.ivoid == record.ivoid and r.site_id == record.site_id:
                raise AlreadyExists(f"{record.ivoid} already registered at {record.site_id}")
        self._records = self._records + (record,)

    def register_replica(self, record: ReplicaRecord) -> None:
        with self._lock:
            self._add(record)
            if self.snapshot_path:
                _atomic_write(self.snapshot_path, dump_snapshot(self._records))

    def resolve_replicas(self, ivoid: IvoId) -> list[ReplicaRecord]:
        return [r for r in self._records if r.ivoid == ivoid]

    def search(self, namespace: str, name: str) -> list[ReplicaRecord]:
        return [r for r in self._records if r.ivoid.namespace == namespace and r.ivoid.name == name]

    def records(self) -> list[ReplicaRecord]:
        return list(self._records)


def register_replica(catalogue: ReplicaCatalogue, record: ReplicaRecord) -> None:
    catalogue.register_replica(record)


def resolve_replicas(catalogue: ReplicaCatalogue, ivoid: IvoId) -> list[ReplicaRecord]:
    return catalogue.resolve_replicas(ivoid)


def dump_snapshot(records) -> str:
    return "".join(f"{r.ivoid}\t{r.site_id}\t{r.relative_path}\n" for r in records)


def load_snapshot(text: str) -> list[ReplicaRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"snapshot line {lineno}: expected 3 tab-separated fields")
        records.append(ReplicaRecord(parse_ivoid(fields[0]), fields[1], fields[2]))
    return records


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


class ReplicaIn(BaseModel):
    ivoid: str
    site_id: str
    relative_path: str = ""


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse({"error_code": code, "message": message}, status_code=status)


def create_app(catalogue: ReplicaCatalogue) -> FastAPI:
    app = FastAPI(title="Replica catalogue")

    @app.post("/replicas", status_code=201)
    def post_replica(body: ReplicaIn):
        try:
            record = ReplicaRecord(parse_ivoid(body.ivoid), body.site_id, body.relative_path)
            catalogue.register_replica(record)
        except ParseError as exc:
            return _error(400, "invalid_ivoid", str(exc))
        except ValueError as exc:
            return _error(400, "invalid_record", str(exc))
        except AlreadyExists as exc:
            return _error(409, "already_exists", str(exc))
        return record.to_dict()

    @app.get("/replicas")
    def get_replicas(ivo: str | None = None, namespace: str | None = None, name: str | None = None):
        if ivo is not None:
            try:
                records = catalogue.resolve_replicas(parse_ivoid(ivo))
            except ParseError as exc:
                return _error(400, "invalid_ivoid", str(exc))
        elif namespace is not None and name is not None:
            records = catalogue.search(namespace, name)
        else:
            return _error(400, "missing_query", "pass either ivo or both namespace and name")
        return {"replicas": [r.to_dict() for r in records]}

    @app.get("/health")
    def health():
        return {"status": "ok", "service": "catalogue"}

    return app
