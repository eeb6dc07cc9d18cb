"""Pascal-VOC annotation parsing and dataset tooling.

LabelImg writes one ``<annotation>`` XML per image; this module parses
that schema, re-serializes it, validates whole datasets, and produces
deterministic train/test splits. Boxes here are pixel coordinates; they
are normalized only when handed to the geometry layer.
"""

from __future__ import annotations

import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .geometry import BoundingBox

# The annotation workflow targets roughly fifty images per animal; the
# validator warns below this unless told otherwise.
DEFAULT_MIN_PER_CLASS = 50


class VocError(ValueError):
    """Raised for structurally invalid annotation documents."""


@dataclass(frozen=True)
class VocObject:
    label: str
    box: BoundingBox  # pixel coordinates

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("object label must be non-empty")


@dataclass(frozen=True)
class AnnotatedImage:
    """One labeled image: size metadata plus its object boxes."""

    filename: str
    width: int
    height: int
    depth: int
    objects: tuple[VocObject, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        if not self.filename:
            raise ValueError("filename must be non-empty")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def labels(self) -> list[str]:
        return [o.label for o in self.objects]


@dataclass(frozen=True)
class Dataset:
    """Annotated images plus a dense label -> class id index."""

    images: tuple[AnnotatedImage, ...]
    label_index: Mapping[str, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "label_index", dict(self.label_index))
        ids = sorted(self.label_index.values())
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be dense from 0, got {ids}")
        for img in self.images:
            for obj in img.objects:
                if obj.label not in self.label_index:
                    raise ValueError(f"label {obj.label!r} missing from the label index")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.label_index, key=self.label_index.__getitem__))

    @classmethod
    def build(cls, images: Iterable[AnnotatedImage]) -> "Dataset":
        """Derive the label index from sorted unique object labels."""
        images = tuple(images)
        labels = sorted({o.label for img in images for o in img.objects})
        return cls(images=images, label_index={l: i for i, l in enumerate(labels)})

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        """Read ``<root>/annotations/*.xml`` (sorted by filename)."""
        ann_dir = Path(root) / "annotations"
        if not ann_dir.is_dir():
            raise VocError(f"no annotations directory under {root}")
        images = []
        for path in sorted(ann_dir.glob("*.xml")):
            try:
                images.append(parse_voc_xml(path.read_text()))
            except VocError as exc:
                raise VocError(f"{path.name}: {exc}") from exc
        return cls.build(images)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class Finding:
    level: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.level.upper()}\t{self.code}\t{self.message}"


def _require(parent: ET.Element, tag: str, where: str) -> ET.Element:
    child = parent.find(tag)
    if child is None:
        raise VocError(f"{where}: missing <{tag}>")
    return child


def _number(parent: ET.Element, tag: str, where: str) -> float:
    node = _require(parent, tag, where)
    text = (node.text or "").strip()
    try:
        return float(text)
    except ValueError:
        raise VocError(f"{where}: <{tag}> is not a number: {text!r}") from None


def parse_voc_xml(text: str) -> AnnotatedImage:
    """Parse one LabelImg Pascal-VOC document.

    Unknown elements are ignored. Errors name the offending element and,
    for objects, the object's position in the document.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise VocError(f"malformed XML: {exc}") from exc
    if root.tag != "annotation":
        raise VocError(f"root element is <{root.tag}>, expected <annotation>")

    filename = (_require(root, "filename", "annotation").text or "").strip()
    if not filename:
        raise VocError("annotation: <filename> is empty")
    size = _require(root, "size", "annotation")
    width = int(_number(size, "width", "size"))
    height = int(_number(size, "height", "size"))
    depth = int(_number(size, "depth", "size"))
    if width < 1 or height < 1:
        raise VocError(f"size: invalid dimensions {width}x{height}")

    objects = []
    for idx, obj in enumerate(root.iter("object")):
        where = f"object[{idx}]"
        name = (_require(obj, "name", where).text or "").strip()
        if not name:
            raise VocError(f"{where}: <name> is empty")
        bnd = _require(obj, "bndbox", where)
        xmin = _number(bnd, "xmin", f"{where}/bndbox")
        ymin = _number(bnd, "ymin", f"{where}/bndbox")
        xmax = _number(bnd, "xmax", f"{where}/bndbox")
        ymax = _number(bnd, "ymax", f"{where}/bndbox")
        if xmax <= xmin or ymax <= ymin:
            raise VocError(
                f"{where}/bndbox: degenerate box ({xmin}, {ymin}, {xmax}, {ymax})"
            )
        if xmin < 0 or ymin < 0 or xmax > width or ymax > height:
            raise VocError(
                f"{where}/bndbox: box ({xmin}, {ymin}, {xmax}, {ymax}) "
                f"outside image {width}x{height}"
            )
        objects.append(VocObject(label=name, box=BoundingBox(xmin, ymin, xmax, ymax)))
    return AnnotatedImage(
        filename=filename, width=width, height=height, depth=depth, objects=tuple(objects)
    )


def _coord(value: float) -> str:
    # Integers stay bare; fractional coordinates keep up to three decimals.
    rounded = round(value, 3)
    if rounded == int(rounded):
        return str(int(rounded))
    return f"{rounded:.3f}".rstrip("0")


def serialize_voc(a: AnnotatedImage) -> str:
    """Emit the LabelImg schema; parse(serialize(parse(x))) is stable."""
    lines = [
        "<annotation>",
        f"  <filename>{a.filename}</filename>",
        "  <size>",
        f"    <width>{a.width}</width>",
        f"    <height>{a.height}</height>",
        f"    <depth>{a.depth}</depth>",
        "  </size>",
    ]
    for obj in a.objects:
        b = obj.box
        lines += [
            "  <object>",
            f"    <name>{obj.label}</name>",
            "    <bndbox>",
            f"      <xmin>{_coord(b.xmin)}</xmin>",
            f"      <ymin>{_coord(b.ymin)}</ymin>",
            f"      <xmax>{_coord(b.xmax)}</xmax>",
            f"      <ymax>{_coord(b.ymax)}</ymax>",
            "    </bndbox>",
            "  </object>",
        ]
    lines.append("</annotation>")
    return "\n".join(lines) + "\n"


def validate_dataset(d: Dataset, min_per_class: int = DEFAULT_MIN_PER_CLASS) -> list[Finding]:
    """Check a dataset and report findings; never raises.

    Errors: empty dataset, duplicate filenames, boxes outside their
    image. Warnings: classes with fewer than ``min_per_class`` images.
    Ordering is deterministic: errors first, then warnings by label.
    """
    findings: list[Finding] = []
    if not d.images:
        findings.append(Finding("error", "empty_dataset", "dataset contains no images"))
        return findings

    seen: dict[str, int] = {}
    for img in d.images:
        seen[img.filename] = seen.get(img.filename, 0) + 1
    for name in sorted(n for n, c in seen.items() if c > 1):
        findings.append(
            Finding("error", "duplicate_filename", f"{name} appears {seen[name]} times")
        )

    for img in d.images:
        for idx, obj in enumerate(img.objects):
            b = obj.box
            if b.xmin < 0 or b.ymin < 0 or b.xmax > img.width or b.ymax > img.height:
                findings.append(
                    Finding(
                        "error",
                        "box_out_of_bounds",
                        f"{img.filename} object[{idx}] box {b.as_tuple()} "
                        f"outside image {img.width}x{img.height}",
                    )
                )

    image_counts: dict[str, int] = {}
    for img in d.images:
        for label in set(img.labels()):
            image_counts[label] = image_counts.get(label, 0) + 1
    for label in sorted(d.label_index):
        count = image_counts.get(label, 0)
        if count < min_per_class:
            findings.append(
                Finding(
                    "warning",
                    "class_below_min",
                    f"class {label!r} has {count} images, below recommended {min_per_class}",
                )
            )
    return findings


def _stratum_key(img: AnnotatedImage) -> str:
    return img.objects[0].label if img.objects else ""


def split(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic seeded shuffle + prefix split.

    Images are stratified by their first object's label when every such
    label covers at least two images; otherwise the whole list is
    shuffled as one pool. Both halves keep the parent's label index so
    class ids stay aligned across the split.
    """
    rng = random.Random(spec.seed)
    by_key: dict[str, list[AnnotatedImage]] = {}
    for img in d.images:
        by_key.setdefault(_stratum_key(img), []).append(img)

    labeled = {k: v for k, v in by_key.items() if k}
    stratified = bool(labeled) and all(len(v) >= 2 for v in labeled.values())
    pools = (
        [by_key[k] for k in sorted(by_key)] if stratified else [list(d.images)]
    )

    train: list[AnnotatedImage] = []
    test: list[AnnotatedImage] = []
    for pool in pools:
        pool = list(pool)
        rng.shuffle(pool)
        n_train = round(spec.train_fraction * len(pool))
        train += pool[:n_train]
        test += pool[n_train:]
    return (
        Dataset(images=tuple(train), label_index=dict(d.label_index)),
        Dataset(images=tuple(test), label_index=dict(d.label_index)),
    )


@dataclass(frozen=True)
class DatasetStats:
    class_counts: Mapping[str, int]  # object counts per label
    size_histogram: tuple[int, ...]  # 10 bins of sqrt(box area) / image side


def stats(d: Dataset) -> DatasetStats:
    """Per-class object counts and a relative box-size histogram.

    Box size is sqrt(box area / image area) in [0, 1], binned into ten
    equal bins; a full-image box lands in the top bin.
    """
    counts: dict[str, int] = {label: 0 for label in d.label_index}
    bins = [0] * 10
    for img in d.images:
        for obj in img.objects:
            counts[obj.label] = counts.get(obj.label, 0) + 1
            rel = (obj.box.area / (img.width * img.height)) ** 0.5
            bins[min(int(rel * 10), 9)] += 1
    return DatasetStats(class_counts=counts, size_histogram=tuple(bins))
