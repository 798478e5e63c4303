"""Crop images, run the backbone, and emit a loadable dataset directory.

The job description lists reference entries (each with an instance id) and
scene entries (each with proposal boxes). Reference crops land in
``references.idow``; proposal crops in ``proposals.idow``; ``manifest.json``
ties them together and passes the engine's ``validate`` subcommand as is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .backbones import load_backbone
from .errors import BridgeError
from .formats import write_embeddings, write_manifest


@dataclass(frozen=True)
class ImageEntry:
    image: Path
    boxes: list[tuple[float, float, float, float]]
    instance: int | None = None  # None marks a scene entry
    scene_id: str | None = None


@dataclass(frozen=True)
class ExtractionJob:
    entries: list[ImageEntry]
    backbone: str = "grid"
    resolution: int = 518
    pooling: str = "cls"
    out_dir: Path = field(default_factory=lambda: Path("extracted"))


def load_job(boxes_path: Path | None, images: list[Path], backbone: str, resolution: int,
             pooling: str, out_dir: Path) -> ExtractionJob:
    """Build a job from a boxes JSON file plus whole-image reference paths.

    Each ``--images`` path becomes one reference instance covered by a single
    full-image box; the boxes file may add further reference entries
    (``instance`` present) and scene entries (``instance`` absent).
    """
    entries: list[ImageEntry] = []
    next_instance = 0
    for path in images:
        entries.append(ImageEntry(image=path, boxes=[], instance=next_instance))
        next_instance += 1
    if boxes_path is not None:
        try:
            doc = json.loads(Path(boxes_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise BridgeError("BadJob", f"boxes file {boxes_path} does not exist")
        except json.JSONDecodeError as exc:
            raise BridgeError("BadJob", f"{boxes_path}: not valid JSON ({exc})")
        if not isinstance(doc, list):
            raise BridgeError("BadJob", "boxes file must be a JSON array of entries")
        base = Path(boxes_path).parent
        for i, entry in enumerate(doc):
            if not isinstance(entry, dict) or "image" not in entry:
                raise BridgeError("BadJob", f"entry {i} must be an object with an 'image' field")
            boxes = entry.get("boxes", [])
            if not isinstance(boxes, list):
                raise BridgeError("BadJob", f"entry {i}: boxes must be a list")
            parsed = []
            for b in boxes:
                if not (isinstance(b, list) and len(b) == 4):
                    raise BridgeError("BadJob", f"entry {i}: each box must be [x, y, w, h]")
                parsed.append(tuple(float(v) for v in b))
            image = Path(entry["image"])
            if not image.is_absolute():
                image = base / image
            instance = entry.get("instance")
            if instance is not None and (not isinstance(instance, int) or instance < 0):
                raise BridgeError("BadJob", f"entry {i}: instance must be a non-negative integer")
            entries.append(
                ImageEntry(
                    image=image,
                    boxes=parsed,
                    instance=instance,
                    scene_id=entry.get("id"),
                )
            )
    if not entries:
        raise BridgeError("BadJob", "nothing to extract: give --images and/or --boxes")
    return ExtractionJob(entries=entries, backbone=backbone, resolution=resolution,
                         pooling=pooling, out_dir=out_dir)


def _open_image(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except FileNotFoundError:
        raise BridgeError("UnreadableImage", f"image {path} does not exist")
    except Exception as exc:
        raise BridgeError("UnreadableImage", f"could not read {path}: {exc}")


def _crop(img: Image.Image, box, path: Path) -> Image.Image:
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise BridgeError("OutOfBoundsBox", f"{path}: box {box} has non-positive sides")
    if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
        raise BridgeError(
            "OutOfBoundsBox", f"{path}: box {box} exceeds the {img.width}x{img.height} image"
        )
    return img.crop((int(round(x)), int(round(y)), int(round(x + w)), int(round(y + h))))


def extract(job: ExtractionJob) -> Path:
    """Run the job; returns the manifest path inside the output directory."""
    backbone = load_backbone(job.backbone, job.resolution, job.pooling)

    reference_crops, reference_items = [], []
    proposal_crops, scene_docs = [], []
    view_counter: dict[int, int] = {}
    for entry in job.entries:
        img = _open_image(entry.image)
        boxes = entry.boxes or [(0.0, 0.0, float(img.width), float(img.height))]
        if entry.instance is not None:
            for box in boxes:
                view = view_counter.get(entry.instance, 0)
                view_counter[entry.instance] = view + 1
                reference_items.append(
                    {"instance": entry.instance, "row": len(reference_crops), "view_index": view}
                )
                reference_crops.append(_crop(img, box, entry.image))
        else:
            proposals = []
            for box in boxes:
                proposals.append(
                    {"row": len(proposal_crops), "box": [box[0], box[1], box[2], box[3]]}
                )
                proposal_crops.append(_crop(img, box, entry.image))
            scene_docs.append(
                {
                    "id": entry.scene_id or entry.image.stem,
                    "width": img.width,
                    "height": img.height,
                    "difficulty": "untagged",
                    "proposals": proposals,
                    "ground_truth": [],
                }
            )
    if not reference_items:
        raise BridgeError("BadJob", "a dataset needs at least one reference entry")

    seen = set()
    for doc in scene_docs:
        if doc["id"] in seen:
            raise BridgeError("BadJob", f"duplicate scene id {doc['id']!r}; give explicit 'id' fields")
        seen.add(doc["id"])

    references = backbone.extract(reference_crops)
    out = Path(job.out_dir)
    write_embeddings(references, out / "references.idow")
    manifest = {
        "format_version": 1,
        "dim": int(references.shape[1]),
        "size_thresholds": [1024.0, 9216.0],
        "reference_groups": [
            {"path": "references.idow", "origin": "real", "items": reference_items}
        ],
        "scenes": scene_docs,
    }
    if proposal_crops:
        proposals = backbone.extract(proposal_crops)
        write_embeddings(proposals, out / "proposals.idow")
        manifest["proposals_file"] = "proposals.idow"
    manifest_path = out / "manifest.json"
    write_manifest(manifest, manifest_path)
    return manifest_path
