"""Dataset scanning, pair loading and panorama north alignment.

Layouts are described by glob patterns relative to the dataset root plus a
regular expression that pulls the sample id out of each file stem, so real
trees and tiny test fixtures go through the same code.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import DecodeError, DimensionMismatch, Image, load_image
from .voxel import HeightField, load_height

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class RootMissing(FileNotFoundError):
    pass


class EmptyDataset(ValueError):
    pass


class MissingFile(FileNotFoundError):
    pass


class DuplicateId(ValueError):
    pass


class NorthConvention(str, enum.Enum):
    CENTER_COLUMN = "CenterColumn"
    FIRST_COLUMN = "FirstColumn"


@dataclass(frozen=True)
class Layout:
    name: str
    satellite: str
    panorama: str
    convention: NorthConvention
    pano_resolution: tuple[int, int]  # (height, width)
    height: str | None = None
    satellite_id: str = r"(?P<id>.+)"
    panorama_id: str = r"(?P<id>.+)"
    height_id: str = r"(?P<id>.+)"
    height_scale: float = 1.0
    random_split: float | None = None  # train fraction when no split file is given

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        d = dict(d)
        d["convention"] = NorthConvention(d["convention"])
        d["pano_resolution"] = tuple(d["pano_resolution"])
        return cls(**d)


LAYOUTS = {
    "CVUSA": Layout(
        "CVUSA", "bingmap/*", "streetview/*", NorthConvention.CENTER_COLUMN, (256, 1024),
        random_split=0.8,
    ),
    "CVACT": Layout(
        "CVACT", "satview_polish/*", "streetview/*", NorthConvention.CENTER_COLUMN, (512, 1024),
        satellite_id=r"(?P<id>.+)_satView_polish", panorama_id=r"(?P<id>.+)_grdView",
    ),
    "OmniCity": Layout(
        "OmniCity", "satellite/*", "panorama/*", NorthConvention.FIRST_COLUMN, (512, 1024),
        height="height/*",
    ),
}


@dataclass(frozen=True)
class SampleRecord:
    id: str
    satellite: str
    panorama: str
    height: str | None = None
    split: str = "unassigned"


@dataclass
class Manifest:
    dataset: str
    root: str
    samples: list[SampleRecord]
    warnings: list[str] = field(default_factory=list)
    layout: dict | None = None

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DuplicateId(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def get(self, sample_id: str) -> SampleRecord:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(f"sample {sample_id!r} not in manifest")

    def to_json(self) -> str:
        return json.dumps(
            {
                "dataset": self.dataset,
                "root": self.root,
                "layout": self.layout,
                "samples": [asdict(s) for s in self.samples],
                "warnings": self.warnings,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        return cls(
            d["dataset"], d["root"], [SampleRecord(**s) for s in d["samples"]], d.get("warnings", []),
            d.get("layout"),
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Manifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def resolved_layout(self) -> Layout:
        if self.layout is not None:
            return Layout.from_dict(self.layout)
        return LAYOUTS[self.dataset]


def _index(root: Path, pattern: str, id_regex: str, suffixes) -> dict[str, Path]:
    rx = re.compile(id_regex)
    found = {}
    for p in sorted(root.glob(pattern)):
        if not p.is_file() or p.suffix.lower() not in suffixes:
            continue
        m = rx.fullmatch(p.stem)
        if m is None:
            continue
        found[m.group("id")] = p
    return found


def _read_split_file(path) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    splits = {}
    for split in ("train", "test"):
        for sid in data.get(split, []):
            splits[str(sid)] = split
    return splits


def scan_dataset(
    root: str | os.PathLike,
    layout: str | Layout,
    split_file: str | os.PathLike | None = None,
    seed: int = 0,
) -> Manifest:
    """Pair satellite, panorama (and height) files under ``root``.

    Unpaired files are reported in ``Manifest.warnings``.  Splits come from
    ``split_file`` (``{"train": [...], "test": [...]}``) when given; otherwise
    layouts with ``random_split`` are split reproducibly from ``seed`` and the
    rest are left ``"unassigned"``.
    """
    root = Path(root)
    if not root.is_dir():
        raise RootMissing(f"dataset root {root} does not exist")
    lay = LAYOUTS[layout] if isinstance(layout, str) else layout
    sats = _index(root, lay.satellite, lay.satellite_id, IMAGE_SUFFIXES)
    panos = _index(root, lay.panorama, lay.panorama_id, IMAGE_SUFFIXES)
    heights = (
        _index(root, lay.height, lay.height_id, IMAGE_SUFFIXES | {".cvdf"}) if lay.height else {}
    )

    warnings = []
    for sid in sorted(set(sats) ^ set(panos)):
        orphan = sats.get(sid) or panos.get(sid)
        warnings.append(f"unpaired file {orphan.relative_to(root)}")
    ids = sorted(set(sats) & set(panos))
    if lay.height:
        for sid in ids:
            if sid not in heights:
                warnings.append(f"sample {sid} has no height map matching {lay.height}")
        for sid in sorted(set(heights) - set(ids)):
            warnings.append(f"unpaired file {heights[sid].relative_to(root)}")
    if not ids:
        raise EmptyDataset(f"no satellite/panorama pairs under {root} for layout {lay.name}")

    if split_file is not None:
        assigned = _read_split_file(split_file)
    elif lay.random_split is not None:
        order = np.random.default_rng(seed).permutation(len(ids))
        n_train = int(round(lay.random_split * len(ids)))
        assigned = {ids[i]: ("train" if rank < n_train else "test") for rank, i in enumerate(order)}
    else:
        assigned = {}

    rel = lambda p: p.relative_to(root).as_posix()  # noqa: E731
    samples = [
        SampleRecord(
            sid,
            rel(sats[sid]),
            rel(panos[sid]),
            rel(heights[sid]) if sid in heights else None,
            assigned.get(sid, "unassigned"),
        )
        for sid in ids
    ]
    for w in warnings:
        log.warning(w)
    return Manifest(lay.name, str(root), samples, warnings, _layout_dict(lay))


def _layout_dict(lay: Layout) -> dict:
    d = asdict(lay)
    d["convention"] = lay.convention.value
    d["pano_resolution"] = list(lay.pano_resolution)
    return d


@dataclass(frozen=True, eq=False)
class SamplePair:
    id: str
    satellite: Image
    panorama: Image
    height: HeightField | None
    convention: NorthConvention
    split: str


def resize_image(img: Image, size: tuple[int, int]) -> Image:
    """Bilinear resize to ``(height, width)``; same-size input is returned unchanged."""
    h, w = size
    if (img.height, img.width) == (h, w):
        return img
    chans = [
        np.asarray(
            PILImage.fromarray(img.pixels[:, :, c].astype(np.float32), mode="F").resize(
                (w, h), PILImage.BILINEAR
            ),
            dtype=np.float64,
        )
        for c in range(img.channels)
    ]
    return Image(np.clip(np.stack(chans, axis=-1), 0.0, 1.0))


def align_panorama(p: Image, convention: NorthConvention | str) -> Image:
    """Rotate so north sits in the center column (first-column panoramas shift by W/2)."""
    if NorthConvention(convention) is NorthConvention.CENTER_COLUMN:
        return p
    if p.width % 2:
        raise DimensionMismatch("panorama width must be even to re-center north")
    return Image(np.roll(p.pixels, p.width // 2, axis=1))


def load_pair(
    manifest: Manifest,
    sample_id: str,
    pano_resolution: tuple[int, int] | None = None,
    sat_resolution: tuple[int, int] | None = None,
    align: bool = False,
) -> SamplePair:
    """Decode one sample and resize it.

    ``pano_resolution`` defaults to the layout's working resolution;
    ``sat_resolution`` defaults to the stored satellite size.  With ``align``
    the panorama is rotated to the north-at-center convention.
    """
    lay = manifest.resolved_layout()
    rec = manifest.get(sample_id)
    root = Path(manifest.root)

    def path(rel):
        p = root / rel
        if not p.is_file():
            raise MissingFile(f"missing file {p}")
        return p

    sat = load_image(path(rec.satellite))
    pano = load_image(path(rec.panorama))
    height = load_height(path(rec.height), lay.height_scale) if rec.height else None
    pano = resize_image(pano, tuple(pano_resolution or lay.pano_resolution))
    if sat_resolution is not None:
        sat = resize_image(sat, tuple(sat_resolution))
    convention = lay.convention
    if align:
        pano = align_panorama(pano, convention)
        convention = NorthConvention.CENTER_COLUMN
    return SamplePair(rec.id, sat, pano, height, convention, rec.split)


__all__ = [
    "DecodeError",
    "DuplicateId",
    "EmptyDataset",
    "LAYOUTS",
    "Layout",
    "Manifest",
    "MissingFile",
    "NorthConvention",
    "RootMissing",
    "SamplePair",
    "SampleRecord",
    "align_panorama",
    "load_pair",
    "resize_image",
    "scan_dataset",
]
