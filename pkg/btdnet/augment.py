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

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.ndimage as ndi

from btdnet.data import PAD_VALUE, Modality, Scan, Volume
from btdnet.support import InvalidParameter, ShapeMismatch


@dataclass(frozen=True)
class TransformSpec:
    hflip: bool
    rotation_deg: float


def _check_rotation_range(rotation_deg:float) -> None:
    if rotation_deg < 0:
        raise InvalidParameter(f"The rotation range must be symmetric about 0, got ±{rotation_deg}.")


def sample_transform(rng:np.random.Generator, rotation_deg:float=15.0, hflip_prob:float=0.5) -> TransformSpec:
    _check_rotation_range(rotation_deg)
    if not 0.0 <= hflip_prob <= 1.0:
        raise InvalidParameter(f"hflip_prob must lie in [0, 1], got {hflip_prob}.")
    hflip = bool(rng.random() < hflip_prob)
    angle = float(rng.uniform(-rotation_deg, rotation_deg))
    return TransformSpec(hflip, angle)


def apply_transform(slice_pixels:np.ndarray, spec:TransformSpec) -> np.ndarray:
    """
    Flip (left-right) then rotate one ``H × W [× C]`` slice. Pixels rotated in
    from outside the frame are black (-1); the result is clamped to [-1, 1].
    """
    out = slice_pixels[:, ::-1] if spec.hflip else slice_pixels
    if spec.rotation_deg != 0.0:
        out = ndi.rotate(out, spec.rotation_deg, axes=(1, 0), reshape=False, order=1,
                         mode="constant", cval=PAD_VALUE)
    return np.clip(out, -1.0, 1.0).astype(slice_pixels.dtype, copy=False)


def geometric_transform(volume:Volume, rng:np.random.Generator, rotation_deg:float=15.0,
                        hflip_prob:float=0.5, per_slice:bool=True) -> Volume:
    """
    Apply an independently sampled flip/rotation to every real slice of a volume.
    Padding slices are left untouched.

    :param volume: A preprocessed volume, padded or not.
    :type volume: Volume.
    :param rng: The random source; the same seed yields the same output.
    :type rng: numpy.random.Generator.
    :param per_slice: If False, one transform is sampled and applied to every slice.
    :type per_slice: bool.
    :returns: Volume -- The transformed volume.
    """
    pixels = volume.pixels.copy()
    shared = None if per_slice else sample_transform(rng, rotation_deg, hflip_prob)
    for index in range(volume.length):
        spec = shared or sample_transform(rng, rotation_deg, hflip_prob)
        pixels[index] = apply_transform(volume.pixels[index], spec)
    return Volume(volume.modality, pixels, volume.length)


def transform_scan(scan:Scan, rng:np.random.Generator, rotation_deg:float=15.0, hflip_prob:float=0.5,
                   per_slice:bool=True) -> Scan:
    return scan.map_volumes(lambda v: geometric_transform(v, rng, rotation_deg, hflip_prob, per_slice))


def sample_lambda(alpha:float, rng:np.random.Generator) -> float:
    """Draw the mixing coefficient from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise InvalidParameter(f"The Beta parameter must be positive, got {alpha}.")
    return float(rng.beta(alpha, alpha))


@dataclass
class VirtualExample:
    """
    A convex combination of two transformed scans and of their labels.

    :param volumes: The mixed volumes, one per modality.
    :type volumes: Dict[Modality, Volume].
    :param target: The soft label pair, summing to 1.
    :type target: numpy.ndarray.
    :param lam: The mixing coefficient.
    :type lam: float.
    :param sources: The indices of the two source scans in their batch.
    :type sources: Tuple[int, int].
    """
    volumes: Dict[Modality, Volume]
    target: np.ndarray
    lam: float
    sources: Tuple[int, int] = (0, 1)


def _mixed_length(length_i:int, length_j:int, lam:float) -> int:
    # a source with zero weight contributes no real slices
    if lam == 1.0:
        return length_i
    if lam == 0.0:
        return length_j
    return max(length_i, length_j)


def mix_scans(scan_i:Scan, scan_j:Scan, lam:float, sources:Tuple[int, int]=(0, 1)) -> VirtualExample:
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameter(f"λ must lie in [0, 1], got {lam}.")
    volumes = dict()
    for modality, volume_i in scan_i.volumes.items():
        volume_j = scan_j.volumes[modality]
        a, b = volume_i.pixels, volume_j.pixels
        if a.shape != b.shape:
            raise ShapeMismatch(f"{modality.value}: cannot mix shapes {a.shape} and {b.shape}.")
        mixed = lam * a + (1.0 - lam) * b
        # rounding must not leave the segment between the two voxels
        mixed = np.clip(mixed, np.minimum(a, b), np.maximum(a, b)).astype(a.dtype, copy=False)
        volumes[modality] = Volume(modality, mixed, _mixed_length(volume_i.length, volume_j.length, lam))
    target = lam * scan_i.target + (1.0 - lam) * scan_j.target
    return VirtualExample(volumes, target, lam, sources)


def derangement(size:int, rng:np.random.Generator) -> np.ndarray:
    """A random permutation of ``range(size)`` without fixed points (size >= 2)."""
    if size < 2:
        raise InvalidParameter(f"Pairing needs at least 2 scans, got {size}.")
    order = rng.permutation(size)
    perm = np.empty(size, dtype=np.int64)
    perm[order] = np.roll(order, -1)
    return perm


def tta_versions(scan:Scan, rng:Optional[np.random.Generator]=None, rotation_deg:float=15.0,
                 angle:Optional[float]=None, hflip:bool=True) -> List[Scan]:
    """
    Build the four test-time versions of a scan: the scan itself, its flipped
    copy, a rotated copy and a flipped and rotated copy. Each version applies
    the same transform to every real slice of every modality.

    :param rng: The random source the rotation angle is drawn from, when ``angle`` is None.
    :type rng: numpy.random.Generator.
    :param angle: A fixed rotation angle in degrees.
    :type angle: float.
    :param hflip: If False, the "flipped" versions are not flipped; with ``angle=0`` every version is the identity.
    :type hflip: bool.
    :returns: List[Scan] -- ``[X, F_X, R_X, FR_X]``.
    """
    if angle is None:
        _check_rotation_range(rotation_deg)
        if rng is None:
            raise InvalidParameter("tta_versions needs either a random source or a fixed angle.")
        angle = float(rng.uniform(-rotation_deg, rotation_deg))
    versions = [scan.map_volumes(lambda v: Volume(v.modality, v.pixels.copy(), v.length))]
    for spec in (TransformSpec(hflip, 0.0), TransformSpec(False, angle), TransformSpec(hflip, angle)):
        versions.append(scan.map_volumes(lambda v, spec=spec: _transform_whole(v, spec)))
    return versions


def _transform_whole(volume:Volume, spec:TransformSpec) -> Volume:
    pixels = volume.pixels.copy()
    for index in range(volume.length):
        pixels[index] = apply_transform(volume.pixels[index], spec)
    return Volume(volume.modality, pixels, volume.length)
