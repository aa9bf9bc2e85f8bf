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

import io, json, math, os, shutil, tempfile, unittest
from collections import deque
from contextlib import redirect_stdout
from copy import deepcopy
from functools import partial
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from btdnet.augment import (TransformSpec, apply_transform, derangement, geometric_transform, mix_scans,
                            sample_lambda, sample_transform, transform_scan, tta_versions)
from btdnet.cli import main
from btdnet.data import (MODALITIES, PAD_VALUE, BBox, Manifest, Modality, Scan, ScanDataset, Volume,
                         crop_resize_normalize, dataset_stats, filter_slices, fit_scan, load_prepared_scan,
                         load_scan, pad_volume, prep_root_of, preprocess_dataset, preprocess_volume,
                         resample_volume, segment_brain, write_report)
from btdnet.evaluation import (aggregate_folds, evaluate_fold, macro_f1, tta_predict, write_eval_report)
from btdnet.network import (BTDNet, ModelConfig, StreamNet, collate_scans, load_checkpoint, mask_and_concat,
                            payload_digest, restore_model, save_checkpoint)
from btdnet.objective import (FocalParams, Objective, focal_loss, focal_terms, mixed_batch_loss, total_loss)
from btdnet.selftest import gradcheck_report, random_scan, replace_padding, run_selftest, tiny_config
from btdnet.support import (DEFAULT_CONFIG, CheckpointMismatch, ConfigError, CorruptSlice, DegenerateRegion,
                            EmptyFold, EmptyInput, EmptyVolume, FileManager, InsufficientClass, InvalidLength,
                            InvalidParameter, IoError, ManifestMismatch, MissingModality, NonFiniteInput,
                            ShapeMismatch, VolumeTooLong, load_config)
from btdnet.synth import SynthConfig, generate_synthetic, ledger_totals
from btdnet.training import (SAM, FoldSplit, TrainConfig, Trainer, build_mixed_batch, sam_step,
                             stratified_kfold)

TEST_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config.json")
ROOT_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config.json")
SMALL_COUNTS = {m.value: (4, 6) for m in MODALITIES}


def _ellipse_slice(size:int=40, level:float=100.0) -> np.ndarray:
    y, x = np.mgrid[:size, :size]
    inside = ((y - size / 2) / (size * 0.3)) ** 2 + ((x - size / 2) / (size * 0.25)) ** 2 <= 1.0
    return np.where(inside, level, 0.0).astype(np.float32)


def _largest_component_bbox(mask:np.ndarray):
    # breadth-first flood fill over 4-neighbours, components numbered in raster order
    seen = np.zeros_like(mask, dtype=bool)
    best, best_area, tied = None, 0, False
    for r0 in range(mask.shape[0]):
        for c0 in range(mask.shape[1]):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            queue, pixels = deque([(r0, c0)]), list()
            seen[r0, c0] = True
            while queue:
                r, c = queue.popleft()
                pixels.append((r, c))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < mask.shape[0] and 0 <= nc < mask.shape[1] and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            if len(pixels) > best_area:
                rows, cols = [p[0] for p in pixels], [p[1] for p in pixels]
                best, best_area = BBox(min(rows), min(cols), max(rows) + 1, max(cols) + 1), len(pixels)
                tied = False
            elif len(pixels) == best_area:
                tied = True
    return best, tied


def _macro_f1_oracle(pred, true) -> float:
    scores = list()
    for cls in (0, 1):
        tp = sum(1 for p, t in zip(pred, true) if p == cls and t == cls)
        fp = sum(1 for p, t in zip(pred, true) if p == cls and t != cls)
        fn = sum(1 for p, t in zip(pred, true) if p != cls and t == cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return sum(scores) / 2


def _float64_scan(rng, lengths, size, scan_id="x", label=0) -> Scan:
    volumes = dict()
    for modality in MODALITIES:
        length = int(rng.integers(1, lengths[modality.value] + 1))
        pixels = rng.uniform(-1.0, 1.0, size=(length, size, size, 3))
        volumes[modality] = pad_volume(Volume(modality, pixels, length), lengths[modality.value])
    return Scan(scan_id, volumes, label)


class _ConstantModel(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.tensor(logits, dtype=torch.float32)

    def forward(self, inputs, lengths):
        return self.logits.expand(next(iter(inputs.values())).shape[0], 2)


class _MarkerModel(nn.Module):
    """Reads the label back from the first FLAIR pixel; ``flip`` makes it always wrong."""
    def __init__(self, flip:bool=False):
        super().__init__()
        self.sign = -1.0 if flip else 1.0

    def forward(self, inputs, lengths):
        marker = self.sign * inputs["FLAIR"][:, 0, 0, 0, 0]
        return torch.stack([-marker, marker], dim=1)


def _marked_scans(rng, labels, lengths, size):
    scans = list()
    for index, label in enumerate(labels):
        scan = random_scan(rng, lengths, size, f"m{index}", label)
        scan.volumes[Modality.FLAIR].pixels[0, 0, 0, :] = 1.0 if label else -1.0
        scans.append(scan)
    return scans


class Test_Support(unittest.TestCase):
    def test_load_config_defaults(self):
        self.assertEqual(load_config(None), DEFAULT_CONFIG)

    def test_load_config_files(self):
        config = load_config(TEST_CONFIG)
        self.assertEqual(config["data"]["lengths"], {"FLAIR": 8, "T1w": 8, "T1wCE": 8, "T2": 8})
        self.assertEqual(config["loss"], DEFAULT_CONFIG["loss"])
        root = load_config(ROOT_CONFIG)
        self.assertEqual(set(root["data"]["lengths"].values()), {32})
        self.assertEqual(root["network"]["backbone"], "tiny_cnn")

    def test_partial_mapping_merge(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "c.json")
            FileManager(path).dump_json({"data": {"lengths": {"FLAIR": 32}}})
            config = load_config(path)
        self.assertEqual(config["data"]["lengths"], {"FLAIR": 32, "T1w": 200, "T1wCE": 200, "T2": 250})

    def test_unknown_and_mistyped_keys(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "c.json")
            for content in ({"train": {"bogus": 1}}, {"bogus": {}}, {"train": {"batch_size": "four"}},
                            {"data": {"lengths": {"DWI": 10}}}, {"augment": {"use_tta": 1}}):
                FileManager(path).dump_json(content)
                with self.assertRaises(ConfigError):
                    load_config(path)

    def test_invalid_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "c.json")
            with open(path, "w") as f:
                f.write("{not json")
            with self.assertRaises(ConfigError):
                load_config(path)

    def test_overrides(self):
        config = load_config(TEST_CONFIG, {"train.seed": 3, "loss.gamma": 0})
        self.assertEqual(config["train"]["seed"], 3)
        self.assertEqual(config["loss"]["gamma"], 0.0)
        self.assertEqual(config["train"]["folds"], 2)

    def test_jsonl(self):
        with tempfile.TemporaryDirectory() as tmp:
            manager = FileManager(os.path.join(tmp, "log.jsonl"))
            manager.append_jsonl({"epoch": 1, "val_f1": 0.5})
            manager.append_jsonl({"epoch": 2, "val_f1": None})
            self.assertEqual(manager.import_jsonl(), [{"epoch": 1, "val_f1": 0.5}, {"epoch": 2, "val_f1": None}])

    def test_io_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(IoError):
                FileManager(os.path.join(tmp, "missing", "x.json")).dump_json({})


class Test_Data(unittest.TestCase):
    def test_segment_brain_largest_component(self):
        pixels = np.zeros((40, 40), dtype=np.float32)
        pixels[5:20, 5:20] = 1.0
        # touches the first square only diagonally
        pixels[20:30, 20:30] = 1.0
        self.assertEqual(segment_brain(pixels, 0.02), BBox(5, 5, 20, 20))

    def test_segment_brain_against_flood_fill(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = rng.random((24, 24)) < 0.45
            pixels = mask.astype(np.float64)
            expected, tied = _largest_component_bbox(mask)
            if tied:
                continue
            self.assertEqual(segment_brain(pixels, 0.0), expected)

    def test_segment_brain_empty(self):
        self.assertIsNone(segment_brain(np.zeros((32, 32)), 0.02))
        pixels = np.zeros((40, 40))
        pixels[1:3, 1:3] = 1.0
        self.assertIsNone(segment_brain(pixels, 0.02))

    def test_crop_resize_normalize(self):
        pixels = np.arange(16, dtype=np.float32).reshape(4, 4)
        out = crop_resize_normalize(pixels, BBox(0, 0, 4, 4), (0.0, 15.0), size=4)
        self.assertEqual(out.shape, (4, 4, 3))
        self.assertEqual(out.dtype, np.float32)
        np.testing.assert_allclose(out[..., 0], 2.0 * pixels / 15.0 - 1.0, atol=1e-6)
        np.testing.assert_array_equal(out[..., 0], out[..., 2])
        resized = crop_resize_normalize(_ellipse_slice(), BBox(8, 10, 32, 30), size=16)
        self.assertEqual(resized.shape, (16, 16, 3))
        self.assertLessEqual(float(resized.max()), 1.0)
        self.assertGreaterEqual(float(resized.min()), -1.0)

    def test_crop_resize_normalize_constant_and_degenerate(self):
        out = crop_resize_normalize(np.full((8, 8), 7.0), BBox(0, 0, 8, 8), size=8)
        np.testing.assert_array_equal(out, np.zeros((8, 8, 3), dtype=np.float32))
        with self.assertRaises(DegenerateRegion):
            crop_resize_normalize(np.ones((8, 8)), BBox(3, 3, 3, 6), size=8)

    def test_crop_resize_normalize_prepared_slice_unchanged(self):
        rng = np.random.default_rng(4)
        channel = rng.uniform(-0.5, 0.5, size=(224, 224)).astype(np.float32)
        prepared = np.repeat(channel[..., None], 3, axis=2)
        out = crop_resize_normalize(prepared, BBox(0, 0, 224, 224))
        self.assertLessEqual(float(np.abs(out - prepared).max()), 1e-6)

    def test_crop_resize_normalize_checkerboard(self):
        board = (np.indices((224, 224)).sum(axis=0) % 2).astype(np.float64)
        upsampled = np.repeat(np.repeat(board, 2, axis=0), 2, axis=1)
        out = crop_resize_normalize(upsampled, BBox(0, 0, 448, 448), (0.0, 1.0), size=224)
        np.testing.assert_allclose(out[..., 0], 2.0 * board - 1.0, atol=1e-6)

    def test_filter_slices_idempotent(self):
        raw = np.stack([np.zeros((40, 40), dtype=np.float32), _ellipse_slice(), _ellipse_slice(level=50.0)])
        once = filter_slices(Volume(Modality.FLAIR, raw, 3), 0.02)
        twice = filter_slices(once, 0.02)
        self.assertEqual(twice.length, once.length)
        np.testing.assert_array_equal(twice.pixels, once.pixels)

    def test_filter_and_preprocess_volume(self):
        raw = np.stack([_ellipse_slice(), np.zeros((40, 40), dtype=np.float32), _ellipse_slice(level=200.0)])
        volume = Volume(Modality.FLAIR, raw, 3)
        self.assertEqual(filter_slices(volume, 0.02).length, 2)
        prepared, meta = preprocess_volume(volume, 0.02, size=16)
        self.assertEqual(prepared.pixels.shape, (2, 16, 16, 3))
        self.assertEqual(meta["raw_length"], 3)
        self.assertEqual(meta["length"], 2)
        self.assertEqual(meta["intensity_range"][1], 200.0)
        with self.assertRaises(EmptyVolume):
            filter_slices(Volume(Modality.T2, np.zeros((2, 40, 40), dtype=np.float32), 2), 0.02)

    def test_pad_volume(self):
        pixels = np.random.default_rng(0).uniform(-1, 1, size=(3, 4, 4, 3)).astype(np.float32)
        padded = pad_volume(Volume(Modality.T1w, pixels, 3), 5)
        self.assertEqual(padded.padded_length, 5)
        self.assertEqual(padded.length, 3)
        np.testing.assert_array_equal(padded.pixels[:3], pixels)
        self.assertTrue(np.all(padded.pixels[3:] == PAD_VALUE))

    def test_resample_volume(self):
        pixels = np.arange(7, dtype=np.float32)[:, None, None, None] * np.ones((7, 2, 2, 3), dtype=np.float32)
        volume = Volume(Modality.T2, pixels, 7)
        shorter = resample_volume(volume, 4)
        self.assertEqual((shorter.length, shorter.padded_length), (4, 4))
        np.testing.assert_array_equal(shorter.pixels[:, 0, 0, 0], [0, 2, 4, 6])
        longer = resample_volume(Volume(Modality.T2, pixels[:3], 3), 5)
        self.assertEqual((longer.length, longer.padded_length), (5, 5))
        np.testing.assert_array_equal(longer.pixels[:, 0, 0, 0], [0, 0, 1, 2, 2])
        np.testing.assert_array_equal(resample_volume(volume, 7).pixels, pixels)

    def test_fit_scan_modes(self):
        rng = np.random.default_rng(1)
        volumes = {m: Volume(m, rng.uniform(-1, 1, size=(2 + i, 2, 2, 3)), 2 + i)
                   for i, m in enumerate(MODALITIES)}
        scan = Scan("x", volumes, 1)
        lengths = {m.value: 5 for m in MODALITIES}
        padded = fit_scan(scan, lengths, "pad")
        self.assertEqual([padded.volumes[m].length for m in MODALITIES], [2, 3, 4, 5])
        resampled = fit_scan(scan, lengths, "resample")
        self.assertEqual([resampled.volumes[m].length for m in MODALITIES], [5, 5, 5, 5])
        self.assertTrue(all(v.padded_length == 5 for v in resampled.volumes.values()))
        with self.assertRaises(InvalidParameter):
            fit_scan(scan, lengths, "stretch")

    def test_pad_volume_too_long(self):
        pixels = np.arange(7, dtype=np.float32)[:, None, None, None] * np.ones((7, 2, 2, 3), dtype=np.float32)
        with self.assertRaises(VolumeTooLong):
            pad_volume(Volume(Modality.T2, pixels, 7), 5)
        truncated = pad_volume(Volume(Modality.T2, pixels, 7), 5, strict=False)
        self.assertEqual(truncated.length, 5)
        np.testing.assert_array_equal(truncated.pixels[:, 0, 0, 0], [1, 2, 3, 4, 5])

    def test_invalid_volume_and_scan(self):
        with self.assertRaises(InvalidLength):
            Volume(Modality.T2, np.zeros((3, 2, 2)), 0)
        volume = Volume(Modality.T2, np.zeros((3, 2, 2)), 3)
        with self.assertRaises(MissingModality):
            Scan("x", {Modality.T2: volume}, 0)


class Test_Dataset(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.raw_root = Path(cls.tmp.name) / "raw"
        cls.manifest = generate_synthetic(SynthConfig(6, 32, SMALL_COUNTS, seed=5), cls.raw_root)
        cls.prepared = preprocess_dataset(Manifest.load(cls.raw_root), size=32)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_ingest(self):
        manifest = Manifest.load(self.raw_root)
        self.assertEqual(manifest.scan_ids, self.manifest.scan_ids)
        scan = load_scan(manifest.entries[0], self.raw_root)
        for modality in MODALITIES:
            self.assertEqual(scan.volumes[modality].length, manifest.entries[0].counts[modality])
            self.assertEqual(scan.volumes[modality].pixels.shape[1:], (32, 32))
        again = load_scan(manifest.entries[0], self.raw_root)
        for modality in MODALITIES:
            np.testing.assert_array_equal(again.volumes[modality].pixels, scan.volumes[modality].pixels)

    def test_missing_modality_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp) / "d"
            manifest = generate_synthetic(SynthConfig(2, 32, SMALL_COUNTS, seed=2), root)
            entry = manifest.entries[0]
            shutil.rmtree(root / entry.scan_id / "T1wCE")
            with self.assertRaises(MissingModality):
                load_scan(entry, root)

    def test_prepared_cache(self):
        self.assertEqual(self.prepared.root, prep_root_of(self.raw_root))
        self.assertTrue((self.prepared.root / "prep_meta.json").is_file())
        scan = load_prepared_scan(self.prepared.entries[0], self.prepared.root)
        volume = scan.volumes[Modality.FLAIR]
        self.assertEqual(volume.pixels.shape, (volume.length, 32, 32, 3))
        self.assertLessEqual(float(volume.pixels.max()), 1.0)
        self.assertGreaterEqual(float(volume.pixels.min()), -1.0)

    def test_manifest_mismatch_and_corrupt_slice(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp) / "d"
            manifest = generate_synthetic(SynthConfig(2, 32, SMALL_COUNTS, seed=1), root)
            entry = manifest.entries[0]
            (root / entry.scan_id / "T1w" / "00000.png").unlink()
            with self.assertRaises(ManifestMismatch):
                load_scan(entry, root)
            other = manifest.entries[1]
            with open(root / other.scan_id / "T2" / "00000.png", "wb") as f:
                f.write(b"not an image")
            with self.assertRaises(CorruptSlice):
                load_scan(other, root)

    def test_scan_dataset(self):
        lengths = {m.value: 8 for m in MODALITIES}
        transform = partial(transform_scan, rotation_deg=15.0, hflip_prob=0.5)
        dataset = ScanDataset(self.prepared, self.prepared.scan_ids, lengths, transform=transform, seed=3)
        self.assertEqual(len(dataset), 6)
        first, again = dataset[0], dataset[0]
        volume = first.volumes[Modality.T2]
        self.assertEqual(volume.pixels.shape, (8, 32, 32, 3))
        np.testing.assert_array_equal(volume.pixels, again.volumes[Modality.T2].pixels)
        self.assertTrue(np.all(volume.pixels[volume.length:] == PAD_VALUE))
        dataset.set_epoch(1)
        self.assertFalse(np.array_equal(volume.pixels, dataset[0].volumes[Modality.T2].pixels))

    def test_report_matches_ledger(self):
        stats = dataset_stats(self.manifest)
        totals = dict(zip(stats.totals["modality"], stats.totals["total"]))
        self.assertEqual(totals, ledger_totals(self.raw_root))
        with tempfile.TemporaryDirectory() as tmp:
            written = write_report(stats, tmp, plot=True)
            self.assertEqual(len(written), 3)
            self.assertTrue(all(p.is_file() for p in written))


class Test_Synth(unittest.TestCase):
    def test_balanced_labels_and_counts(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_synthetic(SynthConfig(20, 32, SMALL_COUNTS, seed=2), tmp)
        self.assertEqual(sum(manifest.labels), 10)
        for modality in MODALITIES:
            counts = [e.counts[modality] for e in manifest.entries]
            self.assertTrue(all(4 <= c <= 6 for c in counts))
            self.assertGreaterEqual(len(set(counts)), 2)

    def test_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            digests = list()
            for name in ("a", "b"):
                generate_synthetic(SynthConfig(3, 32, SMALL_COUNTS, seed=7), Path(tmp) / name)
                root = Path(tmp) / name
                digests.append({str(p.relative_to(root)): FileManager(p).sha256()
                                for p in sorted(root.rglob("*")) if p.is_file()})
        self.assertEqual(digests[0], digests[1])

    def test_unwritable(self):
        with tempfile.TemporaryDirectory() as tmp:
            blocker = Path(tmp) / "file"
            blocker.write_text("x")
            with self.assertRaises(IoError):
                generate_synthetic(SynthConfig(1, 32, SMALL_COUNTS), blocker / "sub")

    def test_invalid_config(self):
        with self.assertRaises(InvalidParameter):
            SynthConfig(4, 32, {"FLAIR": (5, 3)})


class Test_Augment(unittest.TestCase):
    def test_transform_determinism(self):
        a = sample_transform(np.random.default_rng(4))
        b = sample_transform(np.random.default_rng(4))
        self.assertEqual(a, b)
        self.assertLessEqual(abs(a.rotation_deg), 15.0)

    def test_apply_transform(self):
        pixels = np.random.default_rng(0).uniform(-1, 1, size=(16, 16, 3)).astype(np.float32)
        np.testing.assert_array_equal(apply_transform(pixels, TransformSpec(False, 0.0)), pixels)
        np.testing.assert_array_equal(apply_transform(pixels, TransformSpec(True, 0.0)), pixels[:, ::-1])
        rotated = apply_transform(pixels, TransformSpec(False, 12.0))
        self.assertEqual(rotated.shape, pixels.shape)
        self.assertEqual(float(rotated[0, 0, 0]), PAD_VALUE)
        self.assertGreaterEqual(float(rotated.min()), -1.0)

    def test_geometric_transform_keeps_padding(self):
        rng = np.random.default_rng(1)
        real = np.repeat(rng.uniform(-1, 1, size=(1, 16, 16, 3)), 3, axis=0).astype(np.float32)
        volume = pad_volume(Volume(Modality.FLAIR, real, 3), 6)
        out = geometric_transform(volume, rng, per_slice=True)
        np.testing.assert_array_equal(out.pixels[3:], volume.pixels[3:])
        shared = geometric_transform(volume, np.random.default_rng(2), per_slice=False)
        np.testing.assert_array_equal(shared.pixels[0], shared.pixels[1])
        np.testing.assert_array_equal(shared.pixels[1], shared.pixels[2])

    def test_sample_lambda(self):
        rng = np.random.default_rng(0)
        values = [sample_lambda(0.2, rng) for _ in range(100)]
        self.assertTrue(all(0.0 <= v <= 1.0 for v in values))
        with self.assertRaises(InvalidParameter):
            sample_lambda(0.0, rng)

    def test_mix_endpoints(self):
        rng = np.random.default_rng(3)
        lengths = {m.value: 5 for m in MODALITIES}
        a, b = _float64_scan(rng, lengths, 8, "a", 0), _float64_scan(rng, lengths, 8, "b", 1)
        for lam, source in ((1.0, a), (0.0, b)):
            mixed = mix_scans(a, b, lam)
            np.testing.assert_array_equal(mixed.target, source.target)
            for modality in MODALITIES:
                np.testing.assert_array_equal(mixed.volumes[modality].pixels, source.volumes[modality].pixels)
                self.assertEqual(mixed.volumes[modality].length, source.volumes[modality].length)
        middle = mix_scans(a, b, 0.5)
        np.testing.assert_array_equal(middle.target, [0.5, 0.5])
        for modality in MODALITIES:
            expected = (a.volumes[modality].pixels + b.volumes[modality].pixels) / 2
            np.testing.assert_allclose(middle.volumes[modality].pixels, expected, rtol=0, atol=1e-12)
            self.assertEqual(middle.volumes[modality].length,
                             max(a.volumes[modality].length, b.volumes[modality].length))

    def test_selftest_mix_check_in_double_precision(self):
        lengths = {m.value: 3 for m in MODALITIES}
        scan = random_scan(np.random.default_rng(0), lengths, 4, dtype=np.float64)
        self.assertTrue(all(v.pixels.dtype == np.float64 for v in scan.volumes.values()))
        results = {name: passed for name, passed, _ in run_selftest(load_config(TEST_CONFIG))}
        self.assertTrue(results["mix_endpoints"])

    def test_mix_symmetry(self):
        rng = np.random.default_rng(5)
        lengths = {m.value: 4 for m in MODALITIES}
        a, b = _float64_scan(rng, lengths, 8, "a", 0), _float64_scan(rng, lengths, 8, "b", 1)
        ab, ba = mix_scans(a, b, 0.25), mix_scans(b, a, 0.75)
        np.testing.assert_array_equal(ab.target, ba.target)
        for modality in MODALITIES:
            np.testing.assert_array_equal(ab.volumes[modality].pixels, ba.volumes[modality].pixels)

    def test_mix_errors(self):
        rng = np.random.default_rng(6)
        a = _float64_scan(rng, {m.value: 4 for m in MODALITIES}, 8)
        b = _float64_scan(rng, {m.value: 5 for m in MODALITIES}, 8)
        with self.assertRaises(ShapeMismatch):
            mix_scans(a, b, 0.5)
        with self.assertRaises(InvalidParameter):
            mix_scans(a, a, 1.5)

    def test_derangement(self):
        rng = np.random.default_rng(0)
        for size in (2, 3, 4, 9):
            perm = derangement(size, rng)
            self.assertEqual(sorted(perm.tolist()), list(range(size)))
            self.assertTrue(all(perm[k] != k for k in range(size)))
        with self.assertRaises(InvalidParameter):
            derangement(1, rng)

    def test_tta_versions(self):
        scan = random_scan(np.random.default_rng(8), {m.value: 6 for m in MODALITIES}, 16)
        versions = tta_versions(scan, angle=0.0)
        self.assertEqual(len(versions), 4)
        for modality in MODALITIES:
            volume = scan.volumes[modality]
            np.testing.assert_array_equal(versions[0].volumes[modality].pixels, volume.pixels)
            flipped = versions[1].volumes[modality].pixels
            np.testing.assert_array_equal(flipped[:volume.length], volume.pixels[:volume.length, :, ::-1])
            np.testing.assert_array_equal(flipped[volume.length:], volume.pixels[volume.length:])
            np.testing.assert_array_equal(versions[2].volumes[modality].pixels, volume.pixels)
        with self.assertRaises(InvalidParameter):
            tta_versions(scan)


class Test_Network(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.config = tiny_config()
        self.model_config = ModelConfig.from_config(self.config)
        self.rng = np.random.default_rng(0)

    def _scans(self, count):
        return [random_scan(self.rng, self.model_config.lengths, self.model_config.image_size, str(i), i % 2)
                for i in range(count)]

    def test_routing_groups(self):
        full_size = ModelConfig()
        self.assertEqual(full_size.routing_groups(), {"FLAIR_T2": ["FLAIR", "T2"], "T1w_T1wCE": ["T1w", "T1wCE"]})
        self.assertEqual(len(BTDNet(full_size).routing), 2)
        separate = ModelConfig(share_routing=False)
        self.assertEqual(separate.group_of(Modality.T1wCE), "T1wCE")
        self.assertEqual(list(self.model_config.routing_groups()), ["FLAIR_T1w_T1wCE_T2"])

    def test_forward_shapes(self):
        inputs, lengths, targets = collate_scans(self._scans(3))
        self.assertEqual(tuple(inputs["FLAIR"].shape), (3, 8, 3, 32, 32))
        self.assertEqual(tuple(targets.shape), (3, 2))
        model = BTDNet(self.model_config).eval()
        logits, trace = model(inputs, lengths, trace=True)
        self.assertEqual(tuple(logits.shape), (3, 2))
        self.assertEqual(tuple(trace.rnn_outputs["T2"].shape), (3, 8, 8))
        self.assertEqual(tuple(trace.masked["T2"].shape), (3, 64))
        self.assertEqual(tuple(trace.fused.shape), (3, 8))
        stream = StreamNet(self.model_config, "T1w").eval()
        self.assertEqual(tuple(stream(inputs, lengths).shape), (3, 2))

    def test_variants(self):
        inputs, lengths, _ = collate_scans(self._scans(2))
        for overrides in ({"network.rnn_kind": "gru"}, {"network.use_mask": False},
                          {"network.share_routing": False}):
            model = BTDNet(ModelConfig.from_config(tiny_config(**overrides))).eval()
            self.assertEqual(tuple(model(inputs, lengths).shape), (2, 2))

    def test_without_routing(self):
        config = ModelConfig.from_config(tiny_config(**{"network.use_routing": False}))
        self.assertEqual(config.routed_dim("T2"), 8 * 8)
        model = BTDNet(config).eval()
        self.assertTrue(all(isinstance(layer, nn.Identity) for layer in model.routing.values()))
        self.assertEqual(model.fusion.dense.in_features, 4 * 8 * 8)
        inputs, lengths, _ = collate_scans(self._scans(2))
        with torch.no_grad():
            logits, trace = model(inputs, lengths, trace=True)
        self.assertEqual(tuple(logits.shape), (2, 2))
        self.assertTrue(torch.equal(trace.routed["FLAIR"], trace.masked["FLAIR"]))
        stream = StreamNet(config, "T1w").eval()
        self.assertEqual(stream.head.in_features, 8 * 8)
        with torch.no_grad():
            self.assertEqual(tuple(stream(inputs, lengths).shape), (2, 2))

    def test_mask_and_concat(self):
        outputs = torch.ones(2, 4, 3)
        masked = mask_and_concat(outputs, torch.tensor([2, 4]))
        self.assertEqual(tuple(masked.shape), (2, 12))
        self.assertEqual(masked[0].tolist(), [1.0] * 6 + [0.0] * 6)
        self.assertEqual(masked[1].tolist(), [1.0] * 12)
        self.assertEqual(mask_and_concat(outputs[0], 1).tolist(), [1.0] * 3 + [0.0] * 9)
        for bad in ([0, 4], [2, 5]):
            with self.assertRaises(InvalidLength):
                mask_and_concat(outputs, torch.tensor(bad))

    def test_padding_invariance(self):
        model = BTDNet(self.model_config).eval()
        with torch.no_grad():
            for scan in self._scans(20):
                base = model(*collate_scans([scan])[:2])
                other = model(*collate_scans([replace_padding(scan, self.rng)])[:2])
                self.assertLessEqual(float((base - other).abs().max()), 1e-6)

    def test_masked_gradient_is_zero(self):
        model = BTDNet(self.model_config).train()
        inputs, lengths, targets = collate_scans(self._scans(4))
        for tensor in inputs.values():
            tensor.requires_grad_(True)
        logits, trace = model(inputs, lengths, trace=True)
        for outputs in trace.rnn_outputs.values():
            outputs.retain_grad()
        Objective()(logits, targets).backward()
        for name, tensor in inputs.items():
            for k, length in enumerate(lengths[name].tolist()):
                self.assertEqual(int(torch.count_nonzero(tensor.grad[k, length:])), 0)
                self.assertEqual(int(torch.count_nonzero(trace.rnn_outputs[name].grad[k, length:])), 0)

    def test_shape_errors(self):
        model = BTDNet(self.model_config).eval()
        with self.assertRaises(ShapeMismatch):
            model.analysis.cnn_features(torch.zeros(2, 3, 16, 16))
        inputs, lengths, _ = collate_scans(self._scans(1))
        inputs["T2"] = inputs["T2"][:, :5]
        with self.assertRaises(ShapeMismatch):
            model(inputs, lengths)

    def test_checkpoint_round_trip(self):
        model = BTDNet(self.model_config)
        with tempfile.TemporaryDirectory() as tmp:
            first = save_checkpoint(Path(tmp) / "a.bin", model, {"fold": 0})
            restored = restore_model(Path(tmp) / "a.bin")
            second = save_checkpoint(Path(tmp) / "b.bin", restored)
            archive = load_checkpoint(Path(tmp) / "b.bin")
        self.assertEqual(first, second)
        self.assertEqual(archive["digest"], second)
        self.assertEqual(archive["config"], self.model_config)
        self.assertEqual(payload_digest(restored.state_dict()), first)

    def test_checkpoint_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CheckpointMismatch):
                load_checkpoint(Path(tmp) / "missing.bin")
            garbage = Path(tmp) / "garbage.bin"
            garbage.write_bytes(b"not a checkpoint")
            with self.assertRaises(CheckpointMismatch):
                load_checkpoint(garbage)
            save_checkpoint(Path(tmp) / "m.bin", BTDNet(self.model_config))
            wider = ModelConfig.from_config(tiny_config(**{"network.routing_units": 16}))
            with self.assertRaises(CheckpointMismatch):
                restore_model(Path(tmp) / "m.bin", wider)


class Test_Objective(unittest.TestCase):
    def test_gamma_zero_is_half_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = torch.from_numpy(rng.normal(0.0, 3.0, size=(1000, 2)))
        labels = torch.from_numpy(rng.integers(0, 2, size=1000))
        targets = F.one_hot(labels, 2).to(torch.float64)
        focal = focal_loss(logits, targets, FocalParams(0.5, 0.0))
        self.assertAlmostEqual(float(focal), 0.5 * float(F.cross_entropy(logits, labels, reduction="sum")),
                               delta=1e-9)

    def test_against_scalar_formula(self):
        params = FocalParams(0.25, 2.0)
        cases = [((0.3, 1.2), 1), ((2.0, -1.0), 0), ((-0.5, 0.4), 0), ((1.5, 1.5), 1)]
        for (l0, l1), label in cases:
            p = 1.0 / (1.0 + math.exp(l0 - l1))
            if label == 1:
                expected = -0.25 * (1 - p) ** 2 * math.log(p)
            else:
                expected = -0.75 * p ** 2 * math.log(1 - p)
            logits = torch.tensor([[l0, l1]], dtype=torch.float64)
            target = F.one_hot(torch.tensor([label]), 2).to(torch.float64)
            self.assertAlmostEqual(float(focal_loss(logits, target, params)), expected, delta=1e-12)

    def test_literal_form_and_reductions(self):
        logits = torch.tensor([[0.2, -0.4], [1.0, 2.0]], dtype=torch.float64)
        targets = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        positive = focal_terms(logits, torch.tensor([[0.0, 1.0]] * 2, dtype=torch.float64))
        negative = focal_terms(logits, torch.tensor([[1.0, 0.0]] * 2, dtype=torch.float64))
        literal = focal_terms(logits, targets, literal=True)
        torch.testing.assert_close(literal, positive + negative)
        total = focal_loss(logits, targets, reduction="sum")
        self.assertAlmostEqual(float(focal_loss(logits, targets, reduction="mean")), float(total) / 2, delta=1e-12)

    def test_confident_correct_prediction_costs_nothing(self):
        logits = torch.tensor([[-30.0, 30.0]], dtype=torch.float64)
        self.assertLess(float(focal_loss(logits, torch.tensor([[0.0, 1.0]], dtype=torch.float64))), 1e-20)
        self.assertTrue(math.isfinite(float(focal_loss(-logits, torch.tensor([[0.0, 1.0]], dtype=torch.float64)))))

    def test_saturated_logits_keep_finite_gradient(self):
        for targets in ([[0.0, 1.0]], [[1.0, 0.0]]):
            logits = torch.tensor([[0.0, 200.0]], requires_grad=True)
            loss = focal_loss(logits, torch.tensor(targets), FocalParams(0.25, 0.5))
            loss.backward()
            self.assertTrue(math.isfinite(float(loss)))
            self.assertTrue(bool(torch.isfinite(logits.grad).all()))

    def test_errors(self):
        with self.assertRaises(InvalidParameter):
            FocalParams(1.0, 2.0)
        with self.assertRaises(InvalidParameter):
            FocalParams(0.25, -1.0)
        with self.assertRaises(NonFiniteInput):
            focal_loss(torch.tensor([[float("nan"), 0.0]]), torch.tensor([[1.0, 0.0]]))
        with self.assertRaises(ShapeMismatch):
            focal_loss(torch.zeros(2, 3), torch.zeros(2, 3))
        with self.assertRaises(InvalidParameter):
            Objective(kind="hinge")

    def test_soft_labels_decompose(self):
        rng = np.random.default_rng(1)
        logits = torch.from_numpy(rng.normal(size=(8, 2)))
        y_i = F.one_hot(torch.from_numpy(rng.integers(0, 2, 8)), 2).double()
        y_j = F.one_hot(torch.from_numpy(rng.integers(0, 2, 8)), 2).double()
        objective = Objective()
        soft = objective(logits, 0.3 * y_i + 0.7 * y_j)
        self.assertAlmostEqual(float(soft), float(0.3 * objective(logits, y_i) + 0.7 * objective(logits, y_j)),
                               delta=1e-12)

    def test_total_loss_with_lambda_one(self):
        rng = np.random.default_rng(2)
        logits_r = torch.from_numpy(rng.normal(size=(4, 2)))
        logits_j = torch.from_numpy(rng.normal(size=(4, 2)))
        y_i = F.one_hot(torch.tensor([0, 1, 1, 0]), 2).double()
        y_j = F.one_hot(torch.tensor([1, 1, 0, 0]), 2).double()
        params = FocalParams()
        total = total_loss(logits_r, logits_r, logits_j, y_i, y_j, 1.0, params)
        expected = 2 * focal_loss(logits_r, y_i, params) + focal_loss(logits_j, y_j, params)
        self.assertEqual(float(total), float(expected))

    def test_loss_kinds(self):
        logits = torch.tensor([[0.2, -0.4], [1.0, 2.0]], dtype=torch.float64)
        labels = torch.tensor([0, 1])
        targets = F.one_hot(labels, 2).double()
        ce = Objective(kind="categorical_ce")(logits, targets)
        self.assertAlmostEqual(float(ce), float(F.cross_entropy(logits, labels, reduction="sum")), delta=1e-12)
        bce = Objective(kind="binary_ce")(logits, targets)
        expected = F.binary_cross_entropy_with_logits(logits[:, 1], targets[:, 1], reduction="sum")
        self.assertAlmostEqual(float(bce), float(expected), delta=1e-12)

    def test_mixed_batch_with_lambda_one(self):
        torch.manual_seed(0)
        config = tiny_config()
        model_config = ModelConfig.from_config(config)
        rng = np.random.default_rng(3)
        scans = [random_scan(rng, model_config.lengths, 32, str(i), i % 2) for i in range(4)]
        batch = build_mixed_batch(scans, rng, lam=1.0)
        model = BTDNet(model_config).eval()
        objective = Objective.from_config(config)
        with torch.no_grad():
            loss, logits_r = mixed_batch_loss(model, batch, objective)
            logits_v = model(batch.virtual_inputs, batch.virtual_lengths)
        torch.testing.assert_close(logits_v, logits_r, rtol=0, atol=0)
        self.assertAlmostEqual(float(loss), 3 * float(objective(logits_r, batch.targets)), delta=1e-4)

    def test_gradient_check(self):
        report = gradcheck_report(tiny_config(), seed=0, num_params=100)
        self.assertEqual(report.checked, 100)
        self.assertLess(report.max_rel_error, 1e-4)


class Test_Training(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.config = load_config(TEST_CONFIG)
        raw = Path(cls.tmp.name) / "raw"
        generate_synthetic(SynthConfig.from_config(cls.config), raw)
        cls.prepared = preprocess_dataset(Manifest.load(raw), size=32)
        cls.trainer = Trainer(cls.config, cls.prepared, Path(cls.tmp.name) / "run", progress=False)
        cls.results = cls.trainer.cross_validate([0])

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_stratified_kfold_exact(self):
        split = stratified_kfold([1] * 5 + [0] * 5, 5, seed=0)
        labels = [1] * 5 + [0] * 5
        for fold in split.folds:
            self.assertEqual(sorted(labels[int(s)] for s in fold), [0, 1])

    def test_stratified_kfold_large(self):
        labels = [1] * 307 + [0] * 278
        split = stratified_kfold(labels, 5, seed=11)
        ids = sorted((s for fold in split.folds for s in fold), key=int)
        self.assertEqual(ids, [str(i) for i in range(585)])
        for fold in split.folds:
            positives = sum(labels[int(s)] for s in fold)
            self.assertLessEqual(abs(positives - 307 * len(fold) / 585), 1.0)
        self.assertEqual(stratified_kfold(labels, 5, seed=11).folds, split.folds)
        self.assertEqual(set(split.train_ids(0)) | set(split.val_ids(0)), set(ids))

    def test_stratified_kfold_insufficient(self):
        with self.assertRaises(InsufficientClass):
            stratified_kfold([1] * 3 + [0] * 10, 5)

    def test_sam_toy_quadratic(self):
        for rho, expected in ((0.0, 0.8), (0.1, 0.78)):
            theta = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
            optimizer = SAM([theta], torch.optim.SGD, rho=rho, lr=0.1, momentum=0.0)
            loss = sam_step(optimizer, lambda: (theta ** 2).sum())
            self.assertEqual(loss, 1.0)
            self.assertAlmostEqual(float(theta), expected, delta=1e-12)

    def test_sam_zero_gradient(self):
        theta = nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
        optimizer = SAM([theta], torch.optim.SGD, rho=0.05, lr=0.1, momentum=0.9)
        sam_step(optimizer, lambda: (theta ** 2).sum())
        self.assertEqual(float(theta), 0.0)

    def test_sam_without_rho_is_sgd(self):
        torch.manual_seed(0)
        model = nn.Sequential(nn.Linear(4, 8), nn.GELU(), nn.Linear(8, 1)).double()
        twin = deepcopy(model)
        sam = SAM(model.parameters(), torch.optim.SGD, rho=0.0, lr=0.05, momentum=0.9)
        sgd = torch.optim.SGD(twin.parameters(), lr=0.05, momentum=0.9)
        data = torch.from_numpy(np.random.default_rng(0).normal(size=(100, 16, 4)))
        for x in data:
            sam_step(sam, lambda: model(x).pow(2).mean())
            sgd.zero_grad()
            twin(x).pow(2).mean().backward()
            sgd.step()
        for p, q in zip(model.parameters(), twin.parameters()):
            self.assertEqual(float((p - q).abs().max()), 0.0)

    def test_sam_invalid_rho(self):
        with self.assertRaises(InvalidParameter):
            SAM([nn.Parameter(torch.zeros(1))], torch.optim.SGD, rho=-0.1, lr=0.1)

    def test_train_config(self):
        self.assertEqual(TrainConfig.from_config(DEFAULT_CONFIG).batch_size, 4)
        for bad in ({"batch_size": 1}, {"folds": 1}, {"lr_phase1": 0.0}, {"sam_rho": -1.0}):
            with self.assertRaises(InvalidParameter):
                TrainConfig(**bad)

    def test_build_mixed_batch(self):
        rng = np.random.default_rng(0)
        lengths = {m.value: 8 for m in MODALITIES}
        scans = [random_scan(rng, lengths, 32, str(i), i % 2) for i in range(4)]
        batch = build_mixed_batch(scans, rng, alpha=0.2)
        self.assertTrue(0.0 <= batch.lam <= 1.0)
        self.assertTrue(all(int(batch.perm[k]) != k for k in range(4)))
        self.assertEqual(batch.virtual_inputs["FLAIR"].shape, batch.real_inputs["FLAIR"].shape)
        plain = build_mixed_batch(scans, rng, use_mix=False)
        self.assertIsNone(plain.virtual_inputs)

    def test_cross_validation_outputs(self):
        run = Path(self.tmp.name) / "run"
        for modality in MODALITIES:
            self.assertTrue(self.trainer.checkpoint_path(0, 1, modality.value).is_file())
        self.assertTrue((run / "ckpt" / "fold0" / "phase2_best.bin").is_file())
        records = FileManager(run / "train_log.jsonl").import_jsonl()
        self.assertEqual(len(records), 5)
        for record in records:
            self.assertTrue({"epoch", "phase", "fold", "train_loss", "val_f1", "lr", "timestamp"} <= set(record))
        meta = FileManager(run / "run_meta.json").import_json()
        self.assertEqual(meta["split"], self.trainer.split.to_json())
        score = self.results["0"]["phase2"]
        self.assertTrue(0.0 <= score <= 1.0)

    def test_fixed_length_without_mask_or_routing(self):
        overrides = {"data.length_mode": "resample", "network.use_mask": False, "network.use_routing": False}
        config = load_config(TEST_CONFIG, overrides)
        trainer = Trainer(config, self.prepared, Path(self.tmp.name) / "fixed", progress=False)
        scan = trainer._dataset(self.prepared.scan_ids[:1], False)[0]
        self.assertTrue(all(v.length == v.padded_length == 8 for v in scan.volumes.values()))
        results = trainer.cross_validate([0])
        self.assertTrue(0.0 <= results["0"]["phase2"] <= 1.0)
        model = restore_model(trainer.checkpoint_path(0, 2))
        self.assertFalse(model.config.use_routing)

    def test_phase2_initialization(self):
        model = BTDNet(self.trainer.model_config)
        stream_ckpts = {m.value: self.trainer.checkpoint_path(0, 1, m.value) for m in MODALITIES}
        sources = self.trainer.init_from_streams(model, stream_ckpts)
        stream = load_checkpoint(stream_ckpts[sources["analysis"]])["state_dict"]
        for key, value in model.state_dict().items():
            if key.startswith("analysis."):
                self.assertTrue(torch.equal(value, stream[key]), key)

    def test_phase2_mismatch(self):
        config = load_config(TEST_CONFIG, {"network.routing_units": 16})
        trainer = Trainer(config, self.prepared, Path(self.tmp.name) / "wide", split=self.trainer.split,
                          progress=False)
        stream_ckpts = {m.value: self.trainer.checkpoint_path(0, 1, m.value) for m in MODALITIES}
        with self.assertRaises(CheckpointMismatch):
            trainer.init_from_streams(BTDNet(trainer.model_config), stream_ckpts)

    def test_zero_epochs_saves_initialization(self):
        config = load_config(TEST_CONFIG, {"train.epochs_phase1": 0})
        trainer = Trainer(config, self.prepared, Path(self.tmp.name) / "zero", split=self.trainer.split,
                          progress=False)
        result = trainer.train_phase1("FLAIR", 0)
        torch.manual_seed(trainer._seed(1, 0, 0))
        fresh = StreamNet(trainer.model_config, "FLAIR")
        self.assertEqual(load_checkpoint(result.checkpoint)["digest"], payload_digest(fresh.state_dict()))

    def test_deterministic_loss_curves(self):
        config = load_config(TEST_CONFIG, {"train.epochs_phase1": 2, "train.patience": 5})
        curves = list()
        for name in ("det_a", "det_b"):
            trainer = Trainer(config, self.prepared, Path(self.tmp.name) / name, split=self.trainer.split,
                              progress=False)
            curves.append(trainer.train_phase1("T2", 1).train_losses)
        self.assertEqual(len(curves[0]), 2)
        self.assertEqual(curves[0], curves[1])

    def test_empty_fold(self):
        split = FoldSplit([[], self.prepared.scan_ids])
        trainer = Trainer(self.config, self.prepared, Path(self.tmp.name) / "empty", split=split, progress=False)
        with self.assertRaises(EmptyFold):
            trainer.train_phase1("FLAIR", 0)

    def test_one_scan_batch_is_reported(self):
        ids = self.prepared.scan_ids
        split = FoldSplit([ids[:7], ids[7:]])
        trainer = Trainer(self.config, self.prepared, Path(self.tmp.name) / "odd", split=split, progress=False)
        output = io.StringIO()
        with redirect_stdout(output):
            trainer.train_phase1("FLAIR", 0)
        self.assertIn("[Trainer: WARNING] fold 0 phase 1 FLAIR: skipped a one-scan batch in epoch 1",
                      output.getvalue())

    def test_eval_command_follows_use_tta(self):
        run = self.trainer.out_dir
        command = ["eval", "--config", TEST_CONFIG, "--root", str(self.prepared.root), "--out", str(run),
                   "--fold", "0"]
        self.assertEqual(main(command), 0)
        self.assertEqual(FileManager(run / "eval_report.json").import_json()["tta_seed"], 0)
        self.assertEqual(main(command + ["--no-tta"]), 0)
        self.assertIsNone(FileManager(run / "eval_report.json").import_json()["tta_seed"])


class Test_Evaluation(unittest.TestCase):
    def test_macro_f1_cases(self):
        truth = [0] * 50 + [1] * 50
        self.assertEqual(macro_f1(truth, truth), 1.0)
        self.assertAlmostEqual(macro_f1([0] * 100, truth), 1 / 3, delta=1e-12)
        self.assertEqual(macro_f1([1 - t for t in truth], truth), 0.0)
        with self.assertRaises(ShapeMismatch):
            macro_f1([0, 1], [0])
        with self.assertRaises(EmptyInput):
            macro_f1([], [])

    def test_macro_f1_against_confusion_matrix(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred = rng.integers(0, 2, 1000).tolist()
            true = rng.integers(0, 2, 1000).tolist()
            score = macro_f1(pred, true)
            self.assertAlmostEqual(score, _macro_f1_oracle(pred, true), delta=1e-12)
            swapped = macro_f1([1 - p for p in pred], [1 - t for t in true])
            self.assertAlmostEqual(score, swapped, delta=1e-12)
            self.assertTrue(0.0 <= score <= 1.0)

    def test_tta_constant_model(self):
        scan = random_scan(np.random.default_rng(0), {m.value: 4 for m in MODALITIES}, 16)
        p_final, label, outputs = tta_predict(_ConstantModel([0.3, -1.2]), scan, np.random.default_rng(1))
        self.assertEqual(p_final.tolist(), (4 * torch.tensor([0.3, -1.2])).tolist())
        self.assertEqual(label, 0)
        self.assertEqual(len(outputs), 4)
        _, tie, _ = tta_predict(_ConstantModel([0.5, 0.5]), scan, angle=3.0)
        self.assertEqual(tie, 0)

    def test_tta_identity_and_sum(self):
        torch.manual_seed(0)
        model_config = ModelConfig.from_config(tiny_config())
        model = BTDNet(model_config).eval()
        scan = random_scan(np.random.default_rng(2), model_config.lengths, 32)
        with torch.no_grad():
            plain = model(*collate_scans([scan])[:2])[0]
        p_final, label, _ = tta_predict(model, scan, angle=0.0, hflip=False)
        self.assertTrue(torch.equal(p_final, 4 * plain))
        self.assertEqual(label, int(bool(plain[1] > plain[0])))
        p_final, _, _ = tta_predict(model, scan, angle=7.0)
        with torch.no_grad():
            separate = sum(model(*collate_scans([v])[:2])[0] for v in tta_versions(scan, angle=7.0))
        torch.testing.assert_close(p_final, separate, rtol=0, atol=1e-6)

    def test_evaluate_fold_oracles(self):
        rng = np.random.default_rng(4)
        lengths = {m.value: 4 for m in MODALITIES}
        scans = _marked_scans(rng, [0, 1, 1, 0, 1, 0], lengths, 16)
        self.assertEqual(evaluate_fold(_MarkerModel(), scans).macro_f1, 1.0)
        self.assertEqual(evaluate_fold(_MarkerModel(flip=True), scans).macro_f1, 0.0)
        with self.assertRaises(EmptyFold):
            evaluate_fold(_MarkerModel(), [])

    def test_prediction_dump(self):
        torch.manual_seed(0)
        model_config = ModelConfig.from_config(tiny_config())
        model = BTDNet(model_config).eval()
        rng = np.random.default_rng(5)
        scans = [random_scan(rng, model_config.lengths, 32, f"s{i}", i % 2) for i in range(4)]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "preds_fold0.jsonl"
            evaluation = evaluate_fold(model, scans, use_tta=True, tta_seed=3, dump_path=path)
            records = FileManager(path).import_jsonl()
        self.assertEqual([r["scan_id"] for r in records], ["s0", "s1", "s2", "s3"])
        self.assertTrue(all(len(r["logits"]) == 4 for r in records))
        self.assertEqual(evaluation.macro_f1, macro_f1([r["label"] for r in records], [r["truth"] for r in records]))
        again = evaluate_fold(model, scans, use_tta=False)
        self.assertEqual(again.macro_f1, evaluate_fold(model, scans, use_tta=False).macro_f1)

    def test_aggregate_folds(self):
        report = aggregate_folds([0.6, 0.7])
        self.assertAlmostEqual(report.mean, 0.65, delta=1e-12)
        self.assertAlmostEqual(report.spread, 0.1, delta=1e-12)
        self.assertEqual(aggregate_folds([0.5, 0.5, 0.5]).spread, 0.0)
        single = aggregate_folds([0.42])
        self.assertEqual((single.mean, single.spread), (0.42, 0.0))
        self.assertEqual(str(aggregate_folds([0.6, 0.7])), "65.0 ± 10.0")
        with self.assertRaises(EmptyInput):
            aggregate_folds([])

    def test_write_eval_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "eval_report.json"
            write_eval_report(path, aggregate_folds([0.6, 0.8]), "abc", 0)
            with open(path) as f:
                report = json.load(f)
        self.assertEqual(set(report), {"per_fold", "mean", "spread", "config_digest", "tta_seed"})
        self.assertEqual(report["per_fold"], [0.6, 0.8])


class Test_Cli(unittest.TestCase):
    def test_synth_prep_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = os.path.join(tmp, "d")
            self.assertEqual(main(["synth", "--config", TEST_CONFIG, "--n", "6", "--seed", "7", "--out", root]), 0)
            self.assertEqual(main(["prep", "--config", TEST_CONFIG, "--root", root]), 0)
            self.assertTrue(os.path.isfile(os.path.join(tmp, "d_prep", "manifest.json")))
            self.assertEqual(main(["report", "--config", TEST_CONFIG, "--root", root]), 0)
            self.assertTrue(os.path.isfile(os.path.join(root, "report", "slice_totals.csv")))

    def test_exit_codes(self):
        with tempfile.TemporaryDirectory() as tmp:
            missing = os.path.join(tmp, "missing.bin")
            self.assertEqual(main(["eval", "--config", TEST_CONFIG, "--ckpt", missing]), 1)
        self.assertEqual(main(["bogus"]), 2)
        self.assertEqual(main(["train", "--config", TEST_CONFIG, "--nope"]), 2)

    def test_selftest(self):
        results = run_selftest(load_config(TEST_CONFIG))
        self.assertTrue(all(passed for _, passed, _ in results), results)
        self.assertEqual(main(["selftest", "--config", TEST_CONFIG]), 0)


def _synthetic_run(config, workdir:Path):
    raw = workdir / "raw"
    generate_synthetic(SynthConfig.from_config(config), raw)
    prepared = preprocess_dataset(Manifest.load(raw), min_area_frac=config["data"]["min_area_frac"],
                                  size=config["data"]["size"])
    results = Trainer(config, prepared, workdir / "run", progress=False).cross_validate()
    phase1 = {m.value: float(np.mean([r["phase1"][m.value] for r in results.values()])) for m in MODALITIES}
    phase2 = float(np.mean([r["phase2"] for r in results.values()]))
    return phase1, phase2


@unittest.skipUnless(os.environ.get("BTDNET_ACCEPTANCE"), "set BTDNET_ACCEPTANCE=1 for the full synthetic runs")
class Test_Acceptance(unittest.TestCase):
    def test_separable_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            phase1, phase2 = _synthetic_run(load_config(ROOT_CONFIG), Path(tmp))
        print(f"[Test_Acceptance: INFO] phase 1 {phase1}, phase 2 {phase2:.4f}")
        self.assertGreaterEqual(phase2, 0.90)
        self.assertGreaterEqual(phase2, max(phase1.values()) - 0.02)

    def test_null_signal_stays_at_chance(self):
        scores = list()
        for seed in range(3):
            config = load_config(ROOT_CONFIG, {"synth.separability": 0.0, "synth.seed": seed, "train.seed": seed})
            with tempfile.TemporaryDirectory() as tmp:
                scores.append(_synthetic_run(config, Path(tmp))[1])
        print(f"[Test_Acceptance: INFO] null-signal macro-F1 per seed {scores}")
        self.assertLessEqual(abs(float(np.mean(scores)) - 0.5), 0.15)


if __name__ == '__main__':
    unittest.main()
