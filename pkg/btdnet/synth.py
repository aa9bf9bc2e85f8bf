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

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
from PIL import Image
from tqdm import tqdm

from btdnet.data import MODALITIES, Manifest, ManifestEntry
from btdnet.support import DEFAULT_CONFIG, FileManager, InvalidParameter, IoError

LEDGER_NAME = "ledger.json"
# 16-bit gray level of the brain tissue per modality
TISSUE_LEVEL = {"FLAIR": 0.45, "T1w": 0.55, "T1wCE": 0.6, "T2": 0.5}
SIGNAL_MODALITIES = ("FLAIR", "T2")
# class-0 blob; class 1 adds separability times the deltas
BLOB_RADIUS, BLOB_RADIUS_DELTA = 0.08, 0.07
BLOB_BOOST, BLOB_BOOST_DELTA = 0.1, 0.35
FULL_SCALE = 40000


@dataclass(frozen=True)
class SynthConfig:
    """
    :param num_scans: How many scans to generate.
    :type num_scans: int.
    :param image_size: Side of the square raw slices.
    :type image_size: int.
    :param counts: Inclusive [min, max] slice count per modality name.
    :type counts: Dict[str, Tuple[int, int]].
    :param separability: Scale of the difference between the class-1 and class-0 blobs; 0 removes the signal.
    :type separability: float.
    :param balance: Fraction of class-1 scans.
    :type balance: float.
    """
    num_scans: int = 200
    image_size: int = 64
    counts: Dict[str, Tuple[int, int]] = field(
        default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_CONFIG["synth"]["counts"].items()})
    separability: float = 1.0
    balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_scans < 1 or self.image_size < 16:
            raise InvalidParameter("num_scans must be positive and image_size at least 16.")
        if not 0.0 <= self.balance <= 1.0 or self.separability < 0:
            raise InvalidParameter("balance must lie in [0, 1] and separability must be non-negative.")
        for name in (m.value for m in MODALITIES):
            low, high = self.counts.get(name, (0, 0))
            if not 1 <= low <= high:
                raise InvalidParameter(f"Invalid slice-count range for {name}: {self.counts.get(name)}.")

    @classmethod
    def from_config(cls, config:Dict[str, Any]) -> "SynthConfig":
        synth = dict(config["synth"])
        synth["counts"] = {k: tuple(v) for k, v in synth["counts"].items()}
        return cls(**synth)


def _labels(config:SynthConfig) -> List[int]:
    positives = int(round(config.num_scans * config.balance))
    labels = np.array([1] * positives + [0] * (config.num_scans - positives))
    np.random.default_rng(config.seed).shuffle(labels)
    return labels.tolist()


def _blob(rng:np.random.Generator, label:int, count:int, separability:float) -> Dict[str, Any]:
    shift = separability * label
    span = max(1, int(round(count * rng.uniform(0.4, 0.6))))
    first = int(rng.integers(0, count - span + 1))
    return {"center": [float(rng.uniform(-0.12, 0.12)), float(rng.uniform(-0.12, 0.12))],
            "radius": float(BLOB_RADIUS + shift * BLOB_RADIUS_DELTA + rng.uniform(-0.01, 0.01)),
            "boost": float(BLOB_BOOST + shift * BLOB_BOOST_DELTA + rng.uniform(-0.03, 0.03)),
            "slices": [first, first + span]}


def _render_volume(rng:np.random.Generator, modality:str, count:int, size:int, brain:Dict[str, Any],
                   blob:Dict[str, Any]) -> np.ndarray:
    grid = (np.arange(size) + 0.5) / size - 0.5
    y, x = np.meshgrid(grid, grid, indexing="ij")
    cy, cx = brain["center"]
    ay, ax = brain["axes"]
    volume = np.zeros((count, size, size), dtype=np.float64)
    for z in range(count):
        u = 2.0 * (z + 0.5) / count - 1.0
        shrink = np.sqrt(1.0 - 0.75 * u * u)
        inside = ((y - cy) / (ay * shrink)) ** 2 + ((x - cx) / (ax * shrink)) ** 2 <= 1.0
        tissue = TISSUE_LEVEL[modality] + rng.normal(0.0, 0.03, size=(size, size))
        if blob is not None and blob["slices"][0] <= z < blob["slices"][1]:
            by, bx = cy + blob["center"][0], cx + blob["center"][1]
            disc = (y - by) ** 2 + (x - bx) ** 2 <= blob["radius"] ** 2
            tissue = tissue + blob["boost"] * disc
        volume[z] = np.where(inside, np.clip(tissue, 0.05, 1.0), 0.0)
    return np.round(volume * FULL_SCALE).astype(np.uint16)


def _write_volume(directory:Path, volume:np.ndarray) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for index, pixels in enumerate(volume):
            Image.fromarray(pixels).save(directory / f"{index:05d}.png")
    except OSError as e:
        raise IoError(f"Cannot write slices under {directory}: {e}") from e


def generate_synthetic(config:SynthConfig, out_root) -> Manifest:
    """
    Write a synthetic dataset: for every scan and modality a stack of 16-bit
    PNG slices showing an ellipsoid "brain" on a black background. Every scan
    carries an interior blob over a contiguous slice range of FLAIR and T2;
    class-1 blobs are larger and brighter, by an amount scaled by
    ``separability``. Next to the manifest, ``ledger.json`` records the
    ground-truth brain and blob parameters and the slice counts.

    :param config: The generator settings.
    :type config: SynthConfig.
    :param out_root: The dataset root.
    :type out_root: str.
    :returns: Manifest -- The manifest written to ``<out_root>/manifest.json``.
    """
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create {out_root}: {e}") from e
    labels = _labels(config)
    children = np.random.SeedSequence(config.seed).spawn(config.num_scans)
    entries, ledger = list(), list()
    for index in tqdm(range(config.num_scans), desc="Generating scans"):
        rng = np.random.default_rng(children[index])
        scan_id, label = f"s{index:04d}", labels[index]
        brain = {"center": [float(rng.uniform(-0.04, 0.04)), float(rng.uniform(-0.04, 0.04))],
                 "axes": [float(rng.uniform(0.3, 0.4)), float(rng.uniform(0.26, 0.36))]}
        counts, blobs = dict(), dict()
        for modality in MODALITIES:
            low, high = config.counts[modality.value]
            count = int(rng.integers(low, high + 1))
            blob = _blob(rng, label, count, config.separability) if modality.value in SIGNAL_MODALITIES else None
            volume = _render_volume(rng, modality.value, count, config.image_size, brain, blob)
            _write_volume(out_root / scan_id / modality.value, volume)
            counts[modality] = count
            if blob is not None:
                blobs[modality.value] = blob
        entries.append(ManifestEntry(scan_id, label, counts))
        ledger.append({"scan_id": scan_id, "label": label, "brain": brain, "blobs": blobs,
                       "counts": {m.value: c for m, c in counts.items()}})
    manifest = Manifest(out_root, entries)
    manifest.dump()
    config_record = asdict(config)
    config_record["counts"] = {k: list(v) for k, v in config.counts.items()}
    FileManager(out_root / LEDGER_NAME).dump_json({"config": config_record, "scans": ledger}, beautiful=True)
    print(f"[synth: INFO] {config.num_scans} scans ({sum(labels)} positive) written to {out_root}")
    return manifest


def ledger_totals(out_root) -> Dict[str, int]:
    """Total slice count per modality according to the generator ledger."""
    ledger = FileManager(Path(out_root) / LEDGER_NAME).import_json()
    totals = {m.value: 0 for m in MODALITIES}
    for scan in ledger["scans"]:
        for name, count in scan["counts"].items():
            totals[name] += count
    return totals
