#!/usr/bin/python
# -*- coding: utf-8 -*-
# Copyright (c) 2023, BTDNet contributors
#
# Permission to use, copy, modify, and/or distribute this software for any purpose
# with or without fee is hereby granted, provided that the above copyright notice
# and this permission notice appear in all copies.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES WITH
# REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF MERCHANTABILITY AND
# FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR ANY SPECIAL, DIRECT, INDIRECT,
# OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES WHATSOEVER RESULTING FROM LOSS OF USE,
# DATA OR PROFITS, WHETHER IN AN ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS
# ACTION, ARISING OUT OF OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS
# SOFTWARE.

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import scipy.ndimage as ndi
from PIL import Image, UnidentifiedImageError
from skimage.filters import threshold_otsu
from skimage.transform import resize
from torch.utils.data import Dataset
from tqdm import tqdm

from btdnet.support import (CorruptSlice, DegenerateRegion, EmptyVolume, FileManager, InvalidLength,
                            InvalidParameter, ManifestMismatch, MissingModality, VolumeTooLong)

PAD_VALUE = -1.0
LENGTH_MODES = ("pad", "resample")
MANIFEST_NAME = "manifest.json"
PREP_META_NAME = "prep_meta.json"


class Modality(str, Enum):
    FLAIR = "FLAIR"
    T1w = "T1w"
    T1wCE = "T1wCE"
    T2 = "T2"


# Fusion order.
MODALITIES: Tuple[Modality, ...] = (Modality.FLAIR, Modality.T1w, Modality.T1wCE, Modality.T2)


class BBox(NamedTuple):
    """Tight bounding box, ``bottom`` and ``right`` exclusive."""
    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    def union(self, other:"BBox") -> "BBox":
        return BBox(min(self.top, other.top), min(self.left, other.left),
                    max(self.bottom, other.bottom), max(self.right, other.right))


@dataclass
class Volume:
    """
    One modality's ordered slice stack.

    ``pixels`` holds raw grayscale slices (``n × H × W``) on ingest and
    ``n × S × S × 3`` arrays in ``[-1, 1]`` after preprocessing. Slices at
    indices ``>= length`` are padding.

    :param modality: The modality the stack belongs to.
    :type modality: Modality.
    :param pixels: The stacked slices.
    :type pixels: numpy.ndarray.
    :param length: The true (pre-padding) number of slices.
    :type length: int.
    """
    modality: Modality
    pixels: np.ndarray
    length: int

    def __post_init__(self):
        if not 1 <= self.length <= self.pixels.shape[0]:
            raise InvalidLength(
                f"{self.modality.value}: true length {self.length} outside [1, {self.pixels.shape[0]}].")

    @property
    def padded_length(self) -> int:
        return self.pixels.shape[0]

    @property
    def real(self) -> np.ndarray:
        return self.pixels[:self.length]


@dataclass
class Scan:
    scan_id: str
    volumes: Dict[Modality, Volume]
    label: int

    def __post_init__(self):
        missing = [m.value for m in MODALITIES if m not in self.volumes]
        if missing:
            raise MissingModality(f"Scan {self.scan_id} lacks {', '.join(missing)}.")
        if self.label not in (0, 1):
            raise ManifestMismatch(f"Scan {self.scan_id} has label {self.label!r}, expected 0 or 1.")

    @property
    def target(self) -> np.ndarray:
        """The one-hot label pair."""
        return np.eye(2, dtype=np.float64)[self.label]

    def map_volumes(self, fn) -> "Scan":
        return Scan(self.scan_id, {m: fn(v) for m, v in self.volumes.items()}, self.label)


@dataclass
class ManifestEntry:
    scan_id: str
    label: int
    counts: Dict[Modality, int]

    def directory(self, modality:Modality) -> str:
        return f"{self.scan_id}/{modality.value}"

    def to_json(self) -> Dict[str, Any]:
        return {"scan_id": self.scan_id, "label": self.label,
                "counts": {m.value: self.counts[m] for m in MODALITIES if m in self.counts}}

    @classmethod
    def from_json(cls, record:Dict[str, Any]) -> "ManifestEntry":
        try:
            counts = {Modality(k): int(v) for k, v in record["counts"].items()}
            return cls(str(record["scan_id"]), int(record["label"]), counts)
        except (KeyError, ValueError, TypeError) as e:
            raise ManifestMismatch(f"Malformed manifest entry {record!r}: {e}") from e


@dataclass
class Manifest:
    """
    The list of scans of a dataset rooted at ``root``, stored as ``<root>/manifest.json``: ::

        [{"scan_id": "s0000", "label": 1, "counts": {"FLAIR": 100, "T1w": 80, "T1wCE": 80, "T2": 120}}]

    :param root: The dataset root.
    :type root: pathlib.Path.
    :param entries: The manifest entries.
    :type entries: List[ManifestEntry].
    """
    root: Path
    entries: List[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for entry in self.entries:
            if entry.scan_id in seen:
                raise ManifestMismatch(f"Duplicate scan_id {entry.scan_id} in manifest.")
            seen.add(entry.scan_id)

    @classmethod
    def load(cls, root) -> "Manifest":
        path = Path(root) / MANIFEST_NAME
        if not path.is_file():
            raise ManifestMismatch(f"No {MANIFEST_NAME} under {root}.")
        records = FileManager(path).import_json()
        return cls(Path(root), [ManifestEntry.from_json(r) for r in records])

    def dump(self) -> None:
        FileManager(self.root / MANIFEST_NAME).dump_json([e.to_json() for e in self.entries], beautiful=True)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, scan_id:str) -> ManifestEntry:
        for entry in self.entries:
            if entry.scan_id == scan_id:
                return entry
        raise KeyError(scan_id)

    @property
    def labels(self) -> List[int]:
        return [e.label for e in self.entries]

    @property
    def scan_ids(self) -> List[str]:
        return [e.scan_id for e in self.entries]


def _read_slice(path:Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I;16B", "I;16L", "I", "L", "F"):
                img = img.convert("L")
            return np.asarray(img, dtype=np.float32)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise CorruptSlice(f"Cannot read slice {path}: {e}") from e


def _slice_files(directory:Path) -> List[Path]:
    files = list()
    for path in directory.iterdir():
        if path.suffix.lower() != ".png":
            continue
        if not path.stem.isdigit():
            raise CorruptSlice(f"Slice file {path} is not named by an integer index.")
        files.append(path)
    return sorted(files, key=lambda p: int(p.stem))


def load_scan(entry:ManifestEntry, root) -> Scan:
    """
    Load the raw slice stacks of one scan from ``<root>/<scan_id>/<MODALITY>/<idx:05d>.png``.
    Slices are sorted by their numeric index.

    :param entry: The manifest entry of the scan.
    :type entry: ManifestEntry.
    :param root: The dataset root.
    :type root: str.
    :returns: Scan -- A scan holding raw volumes.
    """
    root = Path(root)
    volumes = dict()
    for modality in MODALITIES:
        directory = root / entry.directory(modality)
        if not directory.is_dir():
            raise MissingModality(f"Scan {entry.scan_id}: missing directory {directory}.")
        files = _slice_files(directory)
        expected = entry.counts.get(modality)
        if expected is None or len(files) != expected:
            raise ManifestMismatch(
                f"Scan {entry.scan_id} {modality.value}: manifest says {expected} slices, found {len(files)}.")
        if not files:
            raise ManifestMismatch(f"Scan {entry.scan_id} {modality.value}: no slices.")
        slices = [_read_slice(f) for f in files]
        shapes = {s.shape for s in slices}
        if len(shapes) != 1 or len(slices[0].shape) != 2:
            raise CorruptSlice(f"Scan {entry.scan_id} {modality.value}: inconsistent slice shapes {sorted(shapes)}.")
        volumes[modality] = Volume(modality, np.stack(slices), len(slices))
    return Scan(entry.scan_id, volumes, entry.label)


def segment_brain(slice_pixels:np.ndarray, min_area_frac:float) -> Optional[BBox]:
    """
    Locate the brain in a raw slice: Otsu threshold, then the largest
    4-connected foreground component.

    :param slice_pixels: A raw 2-D slice.
    :type slice_pixels: numpy.ndarray.
    :param min_area_frac: Minimum component area, as a fraction of the slice area.
    :type min_area_frac: float.
    :returns: BBox -- The tight bounding box of the component, or None when there is no large enough component.
    """
    pixels = np.asarray(slice_pixels, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
    if pixels.size == 0 or pixels.max() == pixels.min():
        return None
    foreground = pixels > threshold_otsu(pixels)
    labels, count = ndi.label(foreground)
    if count == 0:
        return None
    areas = np.bincount(labels.ravel())
    areas[0] = 0
    largest = int(np.argmax(areas))
    if areas[largest] < min_area_frac * pixels.size:
        return None
    rows, cols = ndi.find_objects(labels == largest)[0]
    return BBox(rows.start, cols.start, rows.stop, cols.stop)


def _segment_all(volume:Volume, min_area_frac:float) -> List[Optional[BBox]]:
    return [segment_brain(s, min_area_frac) for s in volume.real]


def filter_slices(volume:Volume, min_area_frac:float) -> Volume:
    """Drop the slices that show no (or only a minuscule portion of) brain."""
    boxes = _segment_all(volume, min_area_frac)
    keep = [i for i, box in enumerate(boxes) if box is not None]
    if not keep:
        raise EmptyVolume(f"{volume.modality.value}: every slice was below the brain-area threshold.")
    if len(keep) == volume.length and volume.padded_length == volume.length:
        return volume
    return Volume(volume.modality, volume.pixels[keep], len(keep))


def volume_bbox(volume:Volume, min_area_frac:float) -> BBox:
    """The union of the per-slice brain boxes, shared by every slice of the volume."""
    boxes = [b for b in _segment_all(volume, min_area_frac) if b is not None]
    if not boxes:
        raise EmptyVolume(f"{volume.modality.value}: no brain region found.")
    union = boxes[0]
    for box in boxes[1:]:
        union = union.union(box)
    return union


def crop_resize_normalize(slice_pixels:np.ndarray, bbox:BBox, intensity_range:Optional[Tuple[float, float]]=None,
                          size:int=224) -> np.ndarray:
    """
    Crop a slice to ``bbox``, bilinearly resize it to ``size × size``,
    linearly map ``intensity_range`` onto ``[-1, 1]`` and replicate it to 3 channels.

    :param slice_pixels: A 2-D slice, or a 3-channel slice whose first channel is used.
    :type slice_pixels: numpy.ndarray.
    :param bbox: The crop box.
    :type bbox: BBox.
    :param intensity_range: The (min, max) intensities of the volume. If None, a 3-channel slice is taken as
        already normalized to [-1, 1] and a 2-D slice uses the crop's own range.
    :type intensity_range: Tuple[float, float].
    :param size: The output side length.
    :type size: int.
    :returns: numpy.ndarray -- A ``size × size × 3`` float32 array with values in [-1, 1].
    """
    pixels = np.asarray(slice_pixels, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
        if intensity_range is None:
            intensity_range = (-1.0, 1.0)
    if bbox.height <= 0 or bbox.width <= 0:
        raise DegenerateRegion(f"Degenerate crop box {tuple(bbox)}.")
    crop = pixels[bbox.top:bbox.bottom, bbox.left:bbox.right]
    if crop.shape != (bbox.height, bbox.width):
        raise DegenerateRegion(f"Crop box {tuple(bbox)} exceeds slice shape {pixels.shape}.")
    if crop.shape != (size, size):
        crop = resize(crop, (size, size), order=1, mode="edge", preserve_range=True, anti_aliasing=False)
    low, high = intensity_range if intensity_range is not None else (crop.min(), crop.max())
    if high > low:
        normalized = 2.0 * (crop - low) / (high - low) - 1.0
    else:
        normalized = np.zeros_like(crop)
    normalized = np.clip(normalized, -1.0, 1.0).astype(np.float32)
    return np.repeat(normalized[..., None], 3, axis=2)


def preprocess_volume(volume:Volume, min_area_frac:float=0.02, size:int=224) -> Tuple[Volume, Dict[str, Any]]:
    """
    Run segmentation, slice filtering, cropping with the per-volume union box,
    resizing and per-volume normalization.

    :returns: Tuple[Volume, dict] -- The preprocessed (unpadded) volume and what was applied to it.
    """
    filtered = filter_slices(volume, min_area_frac)
    box = volume_bbox(filtered, min_area_frac)
    region = filtered.real[:, box.top:box.bottom, box.left:box.right]
    low, high = float(region.min()), float(region.max())
    pixels = np.stack([crop_resize_normalize(s, box, (low, high), size) for s in filtered.real])
    meta = {"bbox": list(box), "intensity_range": [low, high],
            "raw_length": volume.length, "length": filtered.length}
    return Volume(volume.modality, pixels, filtered.length), meta


def pad_volume(volume:Volume, t:int, strict:bool=True) -> Volume:
    """
    Append constant (-1) padding slices up to length ``t``. The first ``length`` slices are kept as they are.

    :param strict: If True, a volume longer than ``t`` raises VolumeTooLong; otherwise it is center-truncated.
    :type strict: bool.
    """
    real = volume.real
    length = volume.length
    if length > t:
        if strict:
            raise VolumeTooLong(f"{volume.modality.value}: {length} slices exceed the padded length {t}.")
        start = (length - t) // 2
        print(f"[pad_volume: WARNING] {volume.modality.value}: truncating {length} slices to the central {t}")
        return Volume(volume.modality, real[start:start + t].copy(), t)
    if length == t:
        return Volume(volume.modality, real, length)
    padding = np.full((t - length,) + real.shape[1:], PAD_VALUE, dtype=real.dtype)
    return Volume(volume.modality, np.concatenate([real, padding]), length)


def pad_scan(scan:Scan, lengths:Dict[str, int], strict:bool=True) -> Scan:
    return scan.map_volumes(lambda v: pad_volume(v, lengths[v.modality.value], strict))


def resample_volume(volume:Volume, t:int) -> Volume:
    """
    Bring a volume to exactly ``t`` real slices without padding: long volumes
    lose evenly spaced slices, short ones repeat them. Slice order is kept.
    """
    if t <= 0:
        raise InvalidLength(f"{volume.modality.value}: cannot resample to {t} slices.")
    real = volume.real
    if volume.length == t:
        return Volume(volume.modality, real, t)
    indices = np.rint(np.linspace(0, volume.length - 1, t)).astype(np.int64)
    return Volume(volume.modality, real[indices].copy(), t)


def fit_scan(scan:Scan, lengths:Dict[str, int], mode:str="pad", strict:bool=True) -> Scan:
    """
    Give every volume of a scan its configured length, either by padding
    (``pad``) or by dropping and repeating slices (``resample``).
    """
    if mode == "pad":
        return pad_scan(scan, lengths, strict)
    if mode == "resample":
        return scan.map_volumes(lambda v: resample_volume(v, lengths[v.modality.value]))
    raise InvalidParameter(f"Unknown length mode '{mode}', expected one of {LENGTH_MODES}.")


@dataclass
class SliceStats:
    """Slice counts of a manifest, one row per (scan, modality) and one total per modality."""
    per_scan: pd.DataFrame
    totals: pd.DataFrame


def dataset_stats(manifest:Manifest) -> SliceStats:
    rows = [{"scan_id": e.scan_id, "modality": m.value, "count": e.counts[m]}
            for e in manifest.entries for m in MODALITIES if m in e.counts]
    per_scan = pd.DataFrame(rows, columns=["scan_id", "modality", "count"])
    totals = (per_scan.groupby("modality", sort=False)["count"].sum()
              .reindex([m.value for m in MODALITIES if m.value in set(per_scan["modality"])])
              .rename("total").reset_index())
    return SliceStats(per_scan, totals)


def write_report(stats:SliceStats, out_dir, plot:bool=True) -> List[Path]:
    """
    Write ``slice_totals.csv``, ``slice_counts.csv`` and, optionally, the ``slices.png`` plot.

    :returns: List[pathlib.Path] -- The written files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "slice_totals.csv", out_dir / "slice_counts.csv"]
    stats.totals.to_csv(written[0], index=False)
    stats.per_scan.to_csv(written[1], index=False)
    if plot and not stats.per_scan.empty:
        fig, (ax_totals, ax_scans) = plt.subplots(1, 2, figsize=(12, 4))
        ax_totals.bar(stats.totals["modality"], stats.totals["total"], color="tab:blue")
        ax_totals.set_title("Total slices per modality")
        table = stats.per_scan.pivot(index="scan_id", columns="modality", values="count")
        for modality in stats.totals["modality"]:
            ax_scans.plot(range(len(table)), table[modality].to_numpy(), label=modality, linewidth=1)
        ax_scans.set_xlabel("scan")
        ax_scans.set_ylabel("slices")
        ax_scans.set_title("Slices per modality within each scan")
        ax_scans.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "slices.png", dpi=120)
        plt.close(fig)
        written.append(out_dir / "slices.png")
    print(f"[write_report: INFO] Report written to {out_dir}")
    return written


def prep_root_of(root) -> Path:
    root = Path(root)
    return root.parent / f"{root.name}_prep"


def preprocess_dataset(manifest:Manifest, out_root=None, min_area_frac:float=0.02, size:int=224) -> Manifest:
    """
    Preprocess every scan of a manifest into ``<root>_prep/<scan_id>/<MODALITY>.npy``
    (float32, ``l × S × S``, one channel) and write the cache's own ``manifest.json``
    (post-filter counts) and ``prep_meta.json``.

    :returns: Manifest -- The manifest of the preprocessed cache.
    """
    out_root = Path(out_root) if out_root is not None else prep_root_of(manifest.root)
    out_root.mkdir(parents=True, exist_ok=True)
    entries, volumes_meta = list(), dict()
    print(f"[preprocess_dataset: INFO] Preprocessing {len(manifest)} scans into {out_root}")
    for entry in tqdm(manifest.entries):
        scan = load_scan(entry, manifest.root)
        counts = dict()
        volumes_meta[entry.scan_id] = dict()
        scan_dir = out_root / entry.scan_id
        scan_dir.mkdir(exist_ok=True)
        for modality, volume in scan.volumes.items():
            prepared, meta = preprocess_volume(volume, min_area_frac, size)
            np.save(scan_dir / f"{modality.value}.npy", prepared.pixels[..., 0])
            counts[modality] = prepared.length
            volumes_meta[entry.scan_id][modality.value] = meta
        entries.append(ManifestEntry(entry.scan_id, entry.label, counts))
    prepared_manifest = Manifest(out_root, entries)
    prepared_manifest.dump()
    FileManager(out_root / PREP_META_NAME).dump_json(
        {"source_root": str(manifest.root), "min_area_frac": min_area_frac, "size": size,
         "volumes": volumes_meta}, beautiful=True)
    return prepared_manifest


def load_prepared_scan(entry:ManifestEntry, prep_root) -> Scan:
    """Load one scan of the preprocessed cache, channels replicated to 3."""
    volumes = dict()
    for modality in MODALITIES:
        path = Path(prep_root) / entry.scan_id / f"{modality.value}.npy"
        if not path.is_file():
            raise MissingModality(f"Scan {entry.scan_id}: missing prepared volume {path}.")
        pixels = np.load(path)
        if pixels.shape[0] != entry.counts.get(modality):
            raise ManifestMismatch(
                f"Scan {entry.scan_id} {modality.value}: cache holds {pixels.shape[0]} slices, "
                f"manifest says {entry.counts.get(modality)}.")
        volumes[modality] = Volume(modality, np.repeat(pixels[..., None], 3, axis=3), pixels.shape[0])
    return Scan(entry.scan_id, volumes, entry.label)


class ScanDataset(Dataset):
    """
    Scans of a preprocessed cache, padded to the configured lengths.
    When ``transform`` is given, it is called as ``transform(scan, rng)`` with a
    random generator derived from ``(seed, epoch, index)``, so that the
    transformed scans do not depend on the number of loading workers.

    :param manifest: The manifest of the preprocessed cache.
    :type manifest: Manifest.
    :param scan_ids: The subset of scans to serve.
    :type scan_ids: Sequence[str].
    :param lengths: The padded length per modality name.
    :type lengths: Dict[str, int].
    :param length_mode: ``pad`` keeps the true lengths, ``resample`` fixes every volume at its configured length.
    :type length_mode: str.
    """
    def __init__(self, manifest:Manifest, scan_ids:Sequence[str], lengths:Dict[str, int], strict:bool=True,
                 transform=None, seed:int=0, length_mode:str="pad"):
        if length_mode not in LENGTH_MODES:
            raise InvalidParameter(f"Unknown length mode '{length_mode}', expected one of {LENGTH_MODES}.")
        self.manifest = manifest
        self.entries = [manifest[s] for s in scan_ids]
        self.lengths = lengths
        self.strict = strict
        self.transform = transform
        self.seed = seed
        self.length_mode = length_mode
        self.epoch = 0

    def set_epoch(self, epoch:int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index:int) -> Scan:
        scan = load_prepared_scan(self.entries[index], self.manifest.root)
        scan = fit_scan(scan, self.lengths, self.length_mode, self.strict)
        if self.transform is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            scan = self.transform(scan, rng)
        return scan

    @property
    def labels(self) -> List[int]:
        return [e.label for e in self.entries]

    @property
    def scan_ids(self) -> List[str]:
        return [e.scan_id for e in self.entries]
