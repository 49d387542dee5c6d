"""Caption-dataset ingestion (COCO captions layout) and the synthetic toy corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..embedding import save_png
from ..errors import DatasetError


@dataclass
class InstanceSpec:
    instance_id: str
    target_path: str
    caption: str
    competitor_paths: list[str]
    negative_prompt: str = ""
    bootstrap_status: str = "pending"
    initial_p: float | None = None
    bad_image_path: str | None = None
    bootstrap_seed: int | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise DatasetError(f"instance {self.instance_id} has an empty caption")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceSpec":
        return cls(**d)


def _resolve_manifest(dataset_path) -> tuple[Path, Path]:
    p = Path(dataset_path)
    if p.is_dir():
        candidates = sorted(p.glob("annotations/captions_*.json")) + sorted(p.glob("captions*.json"))
        if not candidates:
            raise DatasetError(f"no captions_*.json manifest under {p}")
        manifest = candidates[0]
        root = p
    else:
        if not p.exists():
            raise DatasetError(f"dataset manifest {p} does not exist")
        manifest = p
        root = p.parent.parent if p.parent.name == "annotations" else p.parent
    return manifest, root


def _image_dir(root: Path) -> Path:
    for name in ("images", "val2017", "train2017", "val2014", "train2014"):
        if (root / name).is_dir():
            return root / name
    return root


def load_instances(dataset_path, count: int, n: int = 4, seed: int = 0) -> list[InstanceSpec]:
    """Seeded sample of ``count`` image-caption pairs with ``n - 1`` distinct competitors each.

    The caption of an image is its lowest-id annotation. Competitors are drawn
    from the other images of the dataset, never the target itself.
    """
    if count == 0:
        return []
    manifest, root = _resolve_manifest(dataset_path)
    try:
        data = json.loads(manifest.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read {manifest}: {exc}") from exc
    images = {img["id"]: img["file_name"] for img in data.get("images", [])}
    captions: dict = {}
    for ann in sorted(data.get("annotations", []), key=lambda a: a.get("id", 0)):
        captions.setdefault(ann["image_id"], ann["caption"].strip())
    ids = sorted(i for i in images if captions.get(i))
    if len(ids) < count:
        raise DatasetError(f"dataset has {len(ids)} captioned images, {count} requested")
    if len(ids) < n:
        raise DatasetError(f"dataset needs at least {n} images for {n}-way trials")
    img_dir = _image_dir(root)
    rng = np.random.default_rng(seed)
    chosen = [ids[i] for i in rng.choice(len(ids), size=count, replace=False)]
    specs = []
    for image_id in chosen:
        others = [i for i in ids if i != image_id]
        comps = [others[j] for j in rng.choice(len(others), size=n - 1, replace=False)]
        specs.append(InstanceSpec(
            instance_id=str(image_id),
            target_path=str(img_dir / images[image_id]),
            caption=captions[image_id],
            competitor_paths=[str(img_dir / images[c]) for c in comps],
        ))
    return specs


# ---------------------------------------------------------------------------
# toy corpus
# ---------------------------------------------------------------------------

_COLORS = ["red", "green", "blue", "yellow", "white", "black", "brown", "orange"]
_OBJECTS = ["apple", "cat", "dog", "car", "chair", "clock", "bicycle", "umbrella", "vase", "train"]
_PLACES = ["table", "street", "bench", "field", "shelf", "beach", "kitchen counter", "sofa"]
_RELATIONS = ["on", "near", "beside", "in front of"]


def toy_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth synthetic scene: a tinted background plus a few soft colored blobs."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.ones((size, size, 3)) * rng.uniform(0.2, 0.8, size=3)
    img += 0.15 * (xx[..., None] - 0.5) * rng.normal(size=3) + 0.15 * (yy[..., None] - 0.5) * rng.normal(size=3)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.06, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * (rng.uniform(0, 1, size=3) - img.mean(axis=(0, 1))) * rng.uniform(0.5, 1.0)
    return np.clip(img, 0.0, 1.0)


def toy_caption(rng: np.random.Generator) -> str:
    return (f"a {_COLORS[rng.integers(len(_COLORS))]} {_OBJECTS[rng.integers(len(_OBJECTS))]} "
            f"{_RELATIONS[rng.integers(len(_RELATIONS))]} a {_PLACES[rng.integers(len(_PLACES))]}")


def make_toy_dataset(root, count: int = 40, seed: int = 0, size: int = 64) -> Path:
    """Write ``count`` synthetic images and a COCO-style captions manifest under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images, annotations = [], []
    for i in range(count):
        name = f"{i:06d}.png"
        save_png(toy_image(rng, size), root / "images" / name)
        images.append({"id": i + 1, "file_name": name, "height": size, "width": size})
        annotations.append({"id": i + 1, "image_id": i + 1, "caption": toy_caption(rng)})
    manifest = root / "annotations" / "captions_toy.json"
    manifest.write_text(json.dumps({"images": images, "annotations": annotations}, indent=1))
    return manifest
