"""File formats and dataset ingestion.

Binary layout family (all little-endian):

    bytes 0-3    magic (4 ASCII bytes)
    bytes 4-5    version, uint16 (currently 1)
    bytes 6-7    reserved, uint16 (must be 0)
    bytes 8-11   count a, uint32
    bytes 12-15  count b, uint32
    payload      IEEE-754 binary32 values, row-major

Concrete members:

    "IDOW"  embedding file      a = rows n, b = dim q,  payload n*q floats
    "IDOA"  adapter checkpoint  a = out p, b = in q,    payload p*q (W) + p (b)
    "IDOT"  synthetic truth     a = instances, b = q,   payload n*q prototypes + q*q shift

The dataset manifest is a JSON document (schema documented in the README);
`load_manifest` validates it eagerly so downstream modules never re-check.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DIFFICULTIES,
    ORIGINS,
    BoundingBox,
    GroundTruth,
    Proposal,
    ReferenceImage,
    Scene,
)
from .errors import EngineError

MAGIC_EMBEDDINGS = b"IDOW"
MAGIC_ADAPTER = b"IDOA"
MAGIC_TRUTH = b"IDOT"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1

_HEADER = struct.Struct("<4sHHII")


@contextmanager
def atomic_output(path: str | os.PathLike):
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _write_array_file(path, magic: bytes, a: int, b: int, payload: np.ndarray) -> None:
    payload = np.ascontiguousarray(payload, dtype="<f4")
    if payload.size and not np.all(np.isfinite(payload)):
        raise EngineError("NonFinite", f"refusing to write non-finite values to {path}")
    header = _HEADER.pack(magic, FORMAT_VERSION, 0, a, b)
    with atomic_output(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())


def _read_array_file(path, magic: bytes) -> tuple[int, int, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise EngineError("Truncated", f"{path}: {len(blob)} bytes is shorter than the 16-byte header")
    got_magic, version, reserved, a, b = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise EngineError("BadMagic", f"{path}: expected magic {magic!r}, found {got_magic!r}")
    if version != FORMAT_VERSION:
        raise EngineError("VersionMismatch", f"{path}: unsupported version {version}")
    if reserved != 0:
        raise EngineError("VersionMismatch", f"{path}: reserved header field is {reserved}, expected 0")
    if magic == MAGIC_ADAPTER:
        n_values = a * b + a
    elif magic == MAGIC_TRUTH:
        n_values = a * b + b * b
    else:
        n_values = a * b
    expected = _HEADER.size + 4 * n_values
    if len(blob) < expected:
        raise EngineError("Truncated", f"{path}: expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise EngineError("TrailingBytes", f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).copy()
    if values.size and not np.all(np.isfinite(values)):
        raise EngineError("NonFinite", f"{path}: payload contains NaN or Inf")
    return a, b, values


def write_embeddings(matrix: np.ndarray, path: str | os.PathLike) -> None:
    """Write an n x q float32 embedding file (bit-exact round trip with read)."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise EngineError("BadShape", f"embedding matrix must be 2-D, got shape {matrix.shape}")
    n, q = matrix.shape
    _write_array_file(path, MAGIC_EMBEDDINGS, n, q, matrix)


def read_embeddings(path: str | os.PathLike) -> np.ndarray:
    """Read an embedding file back as an n x q float32 matrix."""
    n, q, values = _read_array_file(path, MAGIC_EMBEDDINGS)
    return values.reshape(n, q)


def write_adapter_checkpoint(weight: np.ndarray, bias: np.ndarray, path: str | os.PathLike) -> None:
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    p, q = weight.shape
    if bias.shape != (p,):
        raise EngineError("BadShape", f"bias shape {bias.shape} does not match weight rows {p}")
    payload = np.concatenate([weight.astype("<f4").ravel(), bias.astype("<f4").ravel()])
    _write_array_file(path, MAGIC_ADAPTER, p, q, payload)


def read_adapter_checkpoint(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Return (weight, bias) as float64 arrays."""
    p, q, values = _read_array_file(path, MAGIC_ADAPTER)
    weight = values[: p * q].reshape(p, q).astype(np.float64)
    bias = values[p * q :].astype(np.float64)
    return weight, bias


def write_truth(prototypes: np.ndarray, shift: np.ndarray, path: str | os.PathLike) -> None:
    prototypes = np.asarray(prototypes)
    shift = np.asarray(shift)
    n, q = prototypes.shape
    if shift.shape != (q, q):
        raise EngineError("BadShape", f"shift shape {shift.shape} does not match dim {q}")
    payload = np.concatenate([prototypes.astype("<f4").ravel(), shift.astype("<f4").ravel()])
    _write_array_file(path, MAGIC_TRUTH, n, q, payload)


def read_truth(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Return (prototypes, shift) as float64 arrays."""
    n, q, values = _read_array_file(path, MAGIC_TRUTH)
    prototypes = values[: n * q].reshape(n, q).astype(np.float64)
    shift = values[n * q :].reshape(q, q).astype(np.float64)
    return prototypes, shift


@dataclass(frozen=True)
class DistractorPool:
    """Embeddings of random background content, used as universal negatives."""

    embeddings: np.ndarray  # k x q float32; may be empty
    source: str = ""

    def __len__(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass
class DatasetManifest:
    """A fully validated dataset: references, scenes, and their embeddings.

    Invariants are established once by `load_manifest`; downstream code may
    assume every index resolves and every dimension agrees.
    """

    dim: int
    size_thresholds: tuple[float, float]
    references: list[ReferenceImage]
    scenes: list[Scene]
    reference_matrix: np.ndarray  # concatenation of all reference groups
    proposal_matrix: np.ndarray
    distractors: DistractorPool | None = None
    base_dir: Path = field(default_factory=Path)

    def reference_instances(self) -> set[int]:
        return {r.instance for r in self.references}

    def references_of(self, instance: int, origin: str | None = None) -> list[ReferenceImage]:
        return [
            r
            for r in self.references
            if r.instance == instance and (origin is None or r.origin == origin)
        ]

    def scene_by_id(self, scene_id: str) -> Scene:
        for scene in self.scenes:
            if scene.scene_id == scene_id:
                return scene
        raise EngineError("UnknownScene", f"scene {scene_id!r} is not in the manifest")


def _require(cond: bool, code: str, message: str) -> None:
    if not cond:
        raise EngineError(code, message)


def _as_box(value, where: str) -> BoundingBox:
    _require(
        isinstance(value, list) and len(value) == 4 and all(isinstance(v, (int, float)) for v in value),
        "SchemaViolation",
        f"{where}: box must be a [x, y, w, h] number list, got {value!r}",
    )
    return BoundingBox(float(value[0]), float(value[1]), float(value[2]), float(value[3]))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse and validate a dataset manifest plus every file it references."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise EngineError("MissingFile", f"manifest {path} does not exist")
    except json.JSONDecodeError as exc:
        raise EngineError("SchemaViolation", f"{path}: not valid JSON ({exc})")
    base = path.parent

    _require(isinstance(doc, dict), "SchemaViolation", f"{path}: top level must be an object")
    _require(
        doc.get("format_version") == MANIFEST_VERSION,
        "SchemaViolation",
        f"{path}: format_version must be {MANIFEST_VERSION}, got {doc.get('format_version')!r}",
    )
    dim = doc.get("dim")
    _require(isinstance(dim, int) and dim > 0, "SchemaViolation", f"dim must be a positive integer, got {dim!r}")

    thresholds = doc.get("size_thresholds", [1024.0, 9216.0])
    _require(
        isinstance(thresholds, list) and len(thresholds) == 2,
        "SchemaViolation",
        f"size_thresholds must be [a_s, a_m], got {thresholds!r}",
    )
    a_s, a_m = float(thresholds[0]), float(thresholds[1])
    _require(a_s < a_m, "SchemaViolation", f"size_thresholds must be increasing, got ({a_s}, {a_m})")

    # Reference groups: each group is one embedding file; rows get global
    # indices in group order so one concatenated matrix backs all references.
    groups = doc.get("reference_groups")
    _require(isinstance(groups, list) and groups, "SchemaViolation", "reference_groups must be a non-empty list")
    references: list[ReferenceImage] = []
    blocks: list[np.ndarray] = []
    offset = 0
    for gi, group in enumerate(groups):
        where = f"reference_groups[{gi}]"
        _require(isinstance(group, dict), "SchemaViolation", f"{where} must be an object")
        origin = group.get("origin", "real")
        _require(origin in ORIGINS, "SchemaViolation", f"{where}: origin must be one of {ORIGINS}, got {origin!r}")
        gpath = group.get("path")
        _require(isinstance(gpath, str), "SchemaViolation", f"{where}: path must be a string")
        matrix = read_embeddings(base / gpath)
        _require(
            matrix.shape[1] == dim,
            "DimMismatch",
            f"{where}: file {gpath} has dim {matrix.shape[1]}, manifest declares {dim}",
        )
        items = group.get("items")
        _require(isinstance(items, list), "SchemaViolation", f"{where}: items must be a list")
        for ii, item in enumerate(items):
            iw = f"{where}.items[{ii}]"
            _require(isinstance(item, dict), "SchemaViolation", f"{iw} must be an object")
            instance = item.get("instance")
            _require(
                isinstance(instance, int) and instance >= 0,
                "SchemaViolation",
                f"{iw}: instance must be a non-negative integer, got {instance!r}",
            )
            row = item.get("row")
            _require(isinstance(row, int) and row >= 0, "SchemaViolation", f"{iw}: row must be a non-negative integer")
            _require(
                row < matrix.shape[0],
                "DanglingIndex",
                f"{iw}: row {row} is out of bounds for {gpath} with {matrix.shape[0]} rows",
            )
            view = item.get("view_index", 0)
            _require(isinstance(view, int) and view >= 0, "SchemaViolation", f"{iw}: view_index must be a non-negative integer")
            references.append(ReferenceImage(instance=instance, row=offset + row, origin=origin, view_index=view))
        blocks.append(matrix)
        offset += matrix.shape[0]
    reference_matrix = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, dim), dtype=np.float32)

    ppath = doc.get("proposals_file")
    if ppath is None:
        proposal_matrix = np.zeros((0, dim), dtype=np.float32)
    else:
        _require(isinstance(ppath, str), "SchemaViolation", "proposals_file must be a string path")
        proposal_matrix = read_embeddings(base / ppath)
        _require(
            proposal_matrix.shape[1] == dim,
            "DimMismatch",
            f"proposals_file {ppath} has dim {proposal_matrix.shape[1]}, manifest declares {dim}",
        )

    distractors = None
    dsec = doc.get("distractors")
    if dsec is not None:
        _require(isinstance(dsec, dict), "SchemaViolation", "distractors must be an object")
        dpath = dsec.get("path")
        _require(isinstance(dpath, str), "SchemaViolation", "distractors.path must be a string")
        dmat = read_embeddings(base / dpath)
        _require(
            dmat.shape[1] == dim,
            "DimMismatch",
            f"distractor file {dpath} has dim {dmat.shape[1]}, manifest declares {dim}",
        )
        count = dsec.get("count", dmat.shape[0])
        _require(
            count == dmat.shape[0],
            "SchemaViolation",
            f"distractors.count is {count} but {dpath} holds {dmat.shape[0]} rows",
        )
        distractors = DistractorPool(embeddings=dmat, source=dsec.get("source", dpath))

    known_instances = {r.instance for r in references}
    scenes: list[Scene] = []
    seen_ids: set[str] = set()
    for si, sdoc in enumerate(doc.get("scenes", [])):
        where = f"scenes[{si}]"
        _require(isinstance(sdoc, dict), "SchemaViolation", f"{where} must be an object")
        sid = sdoc.get("id")
        _require(isinstance(sid, str) and sid, "SchemaViolation", f"{where}: id must be a non-empty string")
        _require(sid not in seen_ids, "DuplicateScene", f"scene id {sid!r} appears more than once")
        seen_ids.add(sid)
        width, height = sdoc.get("width"), sdoc.get("height")
        _require(
            isinstance(width, int) and width > 0 and isinstance(height, int) and height > 0,
            "SchemaViolation",
            f"{where}: width/height must be positive integers",
        )
        difficulty = sdoc.get("difficulty", "untagged")
        _require(
            difficulty in DIFFICULTIES,
            "SchemaViolation",
            f"{where}: difficulty must be one of {DIFFICULTIES}, got {difficulty!r}",
        )
        proposals = []
        for pi, pdoc in enumerate(sdoc.get("proposals", [])):
            pw = f"{where}.proposals[{pi}]"
            _require(isinstance(pdoc, dict), "SchemaViolation", f"{pw} must be an object")
            row = pdoc.get("row")
            _require(isinstance(row, int) and row >= 0, "SchemaViolation", f"{pw}: row must be a non-negative integer")
            _require(
                row < proposal_matrix.shape[0],
                "DanglingIndex",
                f"{pw}: row {row} is out of bounds for the proposal file with {proposal_matrix.shape[0]} rows",
            )
            score = pdoc.get("detector_score")
            if score is not None:
                _require(
                    isinstance(score, (int, float)) and 0.0 <= score <= 1.0,
                    "SchemaViolation",
                    f"{pw}: detector_score must be in [0, 1], got {score!r}",
                )
                score = float(score)
            proposals.append(Proposal(box=_as_box(pdoc.get("box"), pw), row=row, detector_score=score))
        gts = []
        for gi_, gdoc in enumerate(sdoc.get("ground_truth", [])):
            gw = f"{where}.ground_truth[{gi_}]"
            _require(isinstance(gdoc, dict), "SchemaViolation", f"{gw} must be an object")
            instance = gdoc.get("instance")
            _require(
                isinstance(instance, int) and instance >= 0,
                "SchemaViolation",
                f"{gw}: instance must be a non-negative integer",
            )
            novel = bool(gdoc.get("novel", False))
            _require(
                novel or instance in known_instances,
                "UnknownInstance",
                f"{gw}: instance {instance} has no references and is not flagged novel",
            )
            gts.append(GroundTruth(instance=instance, box=_as_box(gdoc.get("box"), gw), novel=novel))
        scenes.append(
            Scene(
                scene_id=sid,
                width=width,
                height=height,
                difficulty=difficulty,
                proposals=tuple(proposals),
                ground_truth=tuple(gts),
            )
        )

    return DatasetManifest(
        dim=dim,
        size_thresholds=(a_s, a_m),
        references=references,
        scenes=scenes,
        reference_matrix=reference_matrix,
        proposal_matrix=proposal_matrix,
        distractors=distractors,
        base_dir=base,
    )


def write_json(doc, path: str | os.PathLike) -> None:
    """Atomically write a JSON document with a stable layout."""
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def write_text(text: str, path: str | os.PathLike) -> None:
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
