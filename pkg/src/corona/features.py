"""Dense feature matrices, textual attributes and the CRNF binary format.

CRNF layout (all little-endian)::

    b"CRNF" | version u32 | rows u32 | cols u32 | rows*cols float32, row-major

Checkpoints are a run of CRNF sections in one ``.crnf`` file plus a JSON
manifest naming each section and its original shape.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import AlignmentError, IngestionError, MissingArtifactError, UnknownIdError, ValidationError

log = logging.getLogger(__name__)

MAGIC = b"CRNF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureHeaderError(IngestionError):
    pass


class TruncatedPayloadError(IngestionError):
    pass


class NonFiniteError(ValidationError):
    pass


def encode_matrix(matrix) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValidationError(f"expected a 2-d matrix, got shape {m.shape}")
    body = np.ascontiguousarray(m, dtype="<f4")
    return _HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1]) + body.tobytes()


def decode_matrix(buf: bytes, offset: int = 0, source="<buffer>") -> tuple[np.ndarray, int]:
    """Decode one CRNF section starting at ``offset``; returns (matrix, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise FeatureHeaderError("file too short for a CRNF header", source)
    magic, version, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FeatureHeaderError(f"bad magic {magic!r}", source)
    if version != VERSION:
        raise FeatureHeaderError(f"unsupported CRNF version {version}", source)
    start = offset + _HEADER.size
    nbytes = rows * cols * 4
    if len(buf) - start < nbytes:
        raise TruncatedPayloadError(
            f"payload holds {(len(buf) - start) // 4} values, header promises {rows * cols}", source)
    mat = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=start).reshape(rows, cols)
    return mat.astype(np.float32), start + nbytes


def save_features(path, matrix) -> None:
    Path(path).write_bytes(encode_matrix(matrix))


def load_features(path, expected_rows: int | None = None, expected_dim: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"feature file not found: {path}")
    buf = path.read_bytes()
    mat, end = decode_matrix(buf, 0, path)
    if end != len(buf):
        raise FeatureHeaderError(f"{len(buf) - end} trailing bytes after payload", path)
    if not np.isfinite(mat).all():
        raise NonFiniteError(f"{path}: feature matrix contains NaN or Inf")
    if expected_rows is not None and mat.shape[0] != expected_rows:
        raise AlignmentError(f"{path}: {mat.shape[0]} rows, graph has {expected_rows}")
    if expected_dim is not None and mat.shape[1] != expected_dim:
        raise AlignmentError(f"{path}: dimension {mat.shape[1]}, expected {expected_dim}")
    return mat


def save_tensors(prefix, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> tuple[Path, Path]:
    """Write ``prefix.crnf`` and ``prefix.json``."""
    prefix = Path(prefix)
    blobs, entries, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        mat = arr.reshape(1, -1) if arr.ndim < 2 else arr.reshape(arr.shape[0], -1)
        blob = encode_matrix(mat)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    bin_path = prefix.with_suffix(".crnf")
    man_path = prefix.with_suffix(".json")
    bin_path.write_bytes(b"".join(blobs))
    manifest = {"format": "CRNF", "version": VERSION, "tensors": entries, **(meta or {})}
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return bin_path, man_path


def load_tensors(prefix) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    bin_path, man_path = prefix.with_suffix(".crnf"), prefix.with_suffix(".json")
    if not bin_path.exists() or not man_path.exists():
        raise MissingArtifactError(f"checkpoint not found: {prefix}")
    manifest = json.loads(man_path.read_text())
    buf = bin_path.read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        mat, _ = decode_matrix(buf, entry["offset"], bin_path)
        arr = mat.astype(np.float64).reshape(entry["shape"])
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{bin_path}: tensor {entry['name']} is not finite")
        out[entry["name"]] = arr
    return out, manifest


@dataclass(frozen=True)
class FeatureStore:
    """User features (row = internal user id) and item features (row = internal item id)."""

    user_features: np.ndarray
    item_features: np.ndarray

    def __post_init__(self):
        uf = np.asarray(self.user_features, dtype=np.float64)
        vf = np.asarray(self.item_features, dtype=np.float64)
        if uf.ndim != 2 or vf.ndim != 2:
            raise ValidationError("feature matrices must be 2-d")
        if uf.shape[1] != vf.shape[1]:
            raise AlignmentError(f"user dim {uf.shape[1]} != item dim {vf.shape[1]}")
        if not (np.isfinite(uf).all() and np.isfinite(vf).all()):
            raise NonFiniteError("feature matrices must be finite")
        object.__setattr__(self, "user_features", uf)
        object.__setattr__(self, "item_features", vf)

    @property
    def d(self) -> int:
        return self.user_features.shape[1]

    def check_alignment(self, graph) -> None:
        if self.user_features.shape[0] != graph.n_users:
            raise AlignmentError(f"{self.user_features.shape[0]} user feature rows, graph has {graph.n_users} users")
        if self.item_features.shape[0] != graph.n_items:
            raise AlignmentError(f"{self.item_features.shape[0]} item feature rows, graph has {graph.n_items} items")

    @classmethod
    def load(cls, user_path, item_path, graph=None, d: int | None = None) -> "FeatureStore":
        uf = load_features(user_path, graph.n_users if graph else None, d)
        vf = load_features(item_path, graph.n_items if graph else None, d)
        return cls(uf, vf)

    def save(self, user_path, item_path) -> None:
        save_features(user_path, self.user_features)
        save_features(item_path, self.item_features)


def _check_year(value, where):
    text = str(value)
    if not (len(text) == 4 and text.isdigit()):
        raise ValidationError(f"{where}: year {value!r} is not a 4-digit integer")
    return int(text)


class TextAttributes:
    """Profiles for users and structured records for items, aligned with graph ids."""

    def __init__(self, user_profiles: list[dict], item_texts: list[dict], item_ids: list[str] | None = None):
        self.user_profiles = [dict(p) for p in user_profiles]
        self.item_texts = [dict(t) for t in item_texts]
        self.item_ids = list(item_ids) if item_ids is not None else [str(i) for i in range(len(item_texts))]
        for i, rec in enumerate(self.item_texts):
            if "year" in rec and rec["year"] not in (None, ""):
                rec["year"] = _check_year(rec["year"], f"item {self.item_ids[i]}")

    @classmethod
    def from_records(cls, graph, user_records: Iterable[dict], item_records: Iterable[dict]) -> "TextAttributes":
        profiles = [{} for _ in range(graph.n_users)]
        texts = [{} for _ in range(graph.n_items)]
        for rec in user_records:
            rec = dict(rec)
            ext = str(rec.pop("id"))
            try:
                profiles[graph.user_index(ext)] = rec
            except UnknownIdError:
                log.warning("profile for unknown user %s ignored", ext)
        for rec in item_records:
            rec = dict(rec)
            ext = str(rec.pop("id"))
            try:
                texts[graph.item_index(ext)] = rec
            except UnknownIdError:
                log.warning("text for unknown item %s ignored", ext)
        return cls(profiles, texts, list(graph.item_ids))

    @classmethod
    def load(cls, graph, users_path, items_path) -> "TextAttributes":
        return cls.from_records(graph, read_jsonl(users_path), read_jsonl(items_path))

    def save(self, graph, users_path, items_path) -> None:
        write_jsonl(users_path, ({"id": graph.user_ids[i], **p} for i, p in enumerate(self.user_profiles)))
        write_jsonl(items_path, ({"id": graph.item_ids[i], **t} for i, t in enumerate(self.item_texts)))

    def profile(self, u: int) -> dict:
        if not 0 <= u < len(self.user_profiles):
            raise UnknownIdError(f"unknown user {u}")
        return dict(self.user_profiles[u])

    def item_text(self, ids: Iterable[int]) -> list[dict]:
        """Records for ``ids`` in ascending internal-id order."""
        out = []
        for v in sorted({int(i) for i in ids}):
            if not 0 <= v < len(self.item_texts):
                raise UnknownIdError(f"unknown item {v}")
            out.append({"id": self.item_ids[v], **self.item_texts[v]})
        return out

    def history_texts(self, item_sequence: Iterable[int]) -> list[dict]:
        """Records in the given (interaction) order, duplicates kept."""
        recs = []
        for v in item_sequence:
            if not 0 <= v < len(self.item_texts):
                raise UnknownIdError(f"unknown item {v}")
            recs.append({"id": self.item_ids[v], **self.item_texts[v]})
        return recs


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"text file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"invalid JSON: {exc.msg}", path, n) from None
            if not isinstance(obj, dict) or "id" not in obj:
                raise IngestionError("record must be an object with an 'id' field", path, n)
            out.append(obj)
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
