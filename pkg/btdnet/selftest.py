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

from copy import deepcopy
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from btdnet.augment import mix_scans
from btdnet.data import MODALITIES, Scan, Volume, pad_volume
from btdnet.evaluation import macro_f1, tta_predict
from btdnet.network import BTDNet, ModelConfig, collate_scans
from btdnet.objective import FocalParams, GradCheckReport, Objective, focal_loss, loss_gradient_check
from btdnet.support import DEFAULT_CONFIG, load_config
from btdnet.training import SAM, build_mixed_batch, sam_step, stratified_kfold

CheckResult = Tuple[str, bool, str]

TINY_SHAPES = {"data.lengths": {m.value: 8 for m in MODALITIES}, "data.size": 32,
               "network.backbone": "tiny_cnn", "network.rnn_units": 8, "network.routing_units": 8,
               "network.fusion_units": 8}


def tiny_config(config:Optional[Dict[str, Any]]=None, **overrides) -> Dict[str, Any]:
    """A copy of ``config`` (or of the defaults) with desk-sized shapes: t=8, 32×32 slices, tiny_cnn."""
    config = deepcopy(config or DEFAULT_CONFIG)
    for dotted, value in {**TINY_SHAPES, **overrides}.items():
        section, _, key = dotted.partition(".")
        config[section][key] = deepcopy(value)
    return load_config(None, {f"{s}.{k}": v for s, values in config.items() for k, v in values.items()})


def random_scan(rng:np.random.Generator, lengths:Dict[str, int], size:int, scan_id:str="x", label:int=0,
                min_length:int=1, dtype=np.float32) -> Scan:
    """A padded scan of uniform noise in [-1, 1] with random true lengths."""
    volumes = dict()
    for modality in MODALITIES:
        t = lengths[modality.value]
        length = int(rng.integers(min_length, t + 1))
        pixels = rng.uniform(-1.0, 1.0, size=(length, size, size, 3)).astype(dtype)
        volumes[modality] = pad_volume(Volume(modality, pixels, length), t)
    return Scan(scan_id, volumes, label)


def replace_padding(scan:Scan, rng:np.random.Generator) -> Scan:
    def refill(volume:Volume) -> Volume:
        pixels = volume.pixels.copy()
        pixels[volume.length:] = rng.uniform(-1.0, 1.0, size=pixels[volume.length:].shape)
        return Volume(volume.modality, pixels, volume.length)
    return scan.map_volumes(refill)


def _check_padding_invariance(config, rng) -> CheckResult:
    model_config = ModelConfig.from_config(config)
    model = BTDNet(model_config).eval()
    worst = 0.0
    with torch.no_grad():
        for index in range(20):
            scan = random_scan(rng, model_config.lengths, model_config.image_size, str(index))
            base = model(*collate_scans([scan])[:2])
            other = model(*collate_scans([replace_padding(scan, rng)])[:2])
            worst = max(worst, float((base - other).abs().max()))
    return "padding_invariance", worst <= 1e-6, f"max |Δlogit| {worst:.3g}"


def _check_masked_gradient(config, rng) -> CheckResult:
    model_config = ModelConfig.from_config(config)
    model = BTDNet(model_config).train()
    scans = [random_scan(rng, model_config.lengths, model_config.image_size, str(i), i % 2) for i in range(4)]
    batch = build_mixed_batch(scans, rng, config["augment"]["mix_alpha"])
    for inputs in (batch.real_inputs, batch.virtual_inputs):
        for tensor in inputs.values():
            tensor.requires_grad_(True)
    logits_r, trace = model(batch.real_inputs, batch.real_lengths, trace=True)
    for outputs in trace.rnn_outputs.values():
        outputs.retain_grad()
    logits_v = model(batch.virtual_inputs, batch.virtual_lengths)
    loss = Objective.from_config(config).total(logits_v, logits_r, logits_r[batch.perm], batch.targets,
                                               batch.targets[batch.perm], batch.lam)
    loss.backward()
    leaks = 0
    for inputs, lengths in ((batch.real_inputs, batch.real_lengths), (batch.virtual_inputs, batch.virtual_lengths)):
        for name, tensor in inputs.items():
            for k, length in enumerate(lengths[name].tolist()):
                leaks += int(torch.count_nonzero(tensor.grad[k, length:]))
    for name, outputs in trace.rnn_outputs.items():
        for k, length in enumerate(batch.real_lengths[name].tolist()):
            leaks += int(torch.count_nonzero(outputs.grad[k, length:]))
    return "masked_gradient_zero", leaks == 0, f"{leaks} non-zero gradient entries behind the mask"


def _check_focal_reduction(config, rng) -> CheckResult:
    logits = torch.from_numpy(rng.normal(0.0, 3.0, size=(1000, 2)))
    labels = torch.from_numpy(rng.integers(0, 2, size=1000))
    targets = F.one_hot(labels, 2).to(torch.float64)
    focal = focal_loss(logits, targets, FocalParams(0.5, 0.0), reduction="sum")
    bce = F.cross_entropy(logits, labels, reduction="sum")
    error = abs(float(focal) - 0.5 * float(bce))
    return "focal_gamma0_is_half_ce", error <= 1e-9, f"|FL - CE/2| {error:.3g}"


def _check_mix_endpoints(config, rng) -> CheckResult:
    model_config = ModelConfig.from_config(config)
    a = random_scan(rng, model_config.lengths, model_config.image_size, "a", 0, dtype=np.float64)
    b = random_scan(rng, model_config.lengths, model_config.image_size, "b", 1, dtype=np.float64)
    ok = True
    for lam, source in ((1.0, a), (0.0, b)):
        mixed = mix_scans(a, b, lam)
        ok &= bool(np.array_equal(mixed.target, source.target))
        for modality in MODALITIES:
            ok &= bool(np.array_equal(mixed.volumes[modality].pixels, source.volumes[modality].pixels))
            ok &= mixed.volumes[modality].length == source.volumes[modality].length
    middle = mix_scans(a, b, 0.5)
    for modality in MODALITIES:
        expected = (a.volumes[modality].pixels + b.volumes[modality].pixels) / 2
        ok &= bool(np.abs(middle.volumes[modality].pixels - expected).max() <= 1e-12)
    return "mix_endpoints", ok, "λ=1 gives X_i, λ=0 gives X_j, λ=0.5 the midpoint"


def _check_tta_identity(config, rng) -> CheckResult:
    model_config = ModelConfig.from_config(config)
    model = BTDNet(model_config).eval()
    scan = random_scan(rng, model_config.lengths, model_config.image_size)
    with torch.no_grad():
        plain = model(*collate_scans([scan])[:2])[0]
    p_final, label, _ = tta_predict(model, scan, angle=0.0, hflip=False)
    exact = bool(torch.equal(p_final, 4 * plain))
    scaled = int(bool(3.5 * p_final[1] > 3.5 * p_final[0])) == label
    return "tta_identity", exact and scaled, "p_final = 4 × logits with identity versions"


def _check_macro_f1(config, rng) -> CheckResult:
    truth = [0] * 50 + [1] * 50
    degenerate = macro_f1([0] * 100, truth)
    perfect = macro_f1(truth, truth)
    return "macro_f1_degenerate", abs(degenerate - 1 / 3) <= 1e-12 and perfect == 1.0, f"all-0 scores {degenerate}"


def _check_stratified_split(config, rng) -> CheckResult:
    labels = [1] * 307 + [0] * 278
    split = stratified_kfold(labels, 5, seed=int(rng.integers(1 << 31)))
    ids = [s for fold in split.folds for s in fold]
    partition = sorted(ids, key=int) == [str(i) for i in range(585)]
    deviation = 0.0
    for fold in split.folds:
        positives = sum(labels[int(s)] for s in fold)
        deviation = max(deviation, abs(positives - 307 * len(fold) / 585))
    return "stratified_kfold", partition and deviation <= 1.0, f"max class deviation {deviation:.3f}"


def _toy_quadratic(rho:float) -> float:
    theta = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    optimizer = SAM([theta], torch.optim.SGD, rho=rho, lr=0.1, momentum=0.0)
    sam_step(optimizer, lambda: (theta ** 2).sum())
    return float(theta)


def _check_sam(config, rng) -> CheckResult:
    hand = abs(_toy_quadratic(0.1) - 0.78) <= 1e-12 and abs(_toy_quadratic(0.0) - 0.8) <= 1e-12
    torch.manual_seed(int(rng.integers(1 << 31)))
    reference = nn.Sequential(nn.Linear(4, 8), nn.GELU(), nn.Linear(8, 1)).double()
    twin = deepcopy(reference)
    sam = SAM(reference.parameters(), torch.optim.SGD, rho=0.0, lr=0.05, momentum=0.9)
    sgd = torch.optim.SGD(twin.parameters(), lr=0.05, momentum=0.9)
    data = torch.from_numpy(rng.normal(size=(100, 16, 4)))
    for x in data:
        sam_step(sam, lambda: reference(x).pow(2).mean())
        sgd.zero_grad()
        twin(x).pow(2).mean().backward()
        sgd.step()
    bitwise = all(torch.equal(p, q) for p, q in zip(reference.parameters(), twin.parameters()))
    return "sam_reduction", hand and bitwise, "toy step 0.78 and ρ=0 equal to SGD+momentum over 100 steps"


def gradcheck_report(config:Dict[str, Any], seed:int=0, num_params:int=100) -> GradCheckReport:
    """Finite-difference check of the total loss on a float64 desk-sized model."""
    config = tiny_config(config, **{"data.lengths": {m.value: 6 for m in MODALITIES}})
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model_config = ModelConfig.from_config(config)
    model = BTDNet(model_config).double().train()
    scans = [random_scan(rng, model_config.lengths, model_config.image_size, str(i), i % 2) for i in range(4)]
    batch = build_mixed_batch(scans, rng, config["augment"]["mix_alpha"], dtype=torch.float64)
    return loss_gradient_check(model, batch, Objective.from_config(config), num_params=num_params, seed=seed)


def _check_gradients(config, rng) -> CheckResult:
    report = gradcheck_report(config, int(rng.integers(1 << 31)))
    return "gradient_check", report.passed(1e-4), f"max relative error {report.max_rel_error:.3g} on {report.checked}"


CHECKS: List[Callable[[Dict[str, Any], np.random.Generator], CheckResult]] = [
    _check_padding_invariance, _check_masked_gradient, _check_focal_reduction, _check_mix_endpoints,
    _check_tta_identity, _check_macro_f1, _check_stratified_split, _check_sam, _check_gradients]


def run_selftest(config:Optional[Dict[str, Any]]=None, seed:int=0) -> List[CheckResult]:
    """
    Run the invariant suite on desk-sized random models and scans.

    :param config: The configuration whose network and loss settings are checked.
    :type config: dict.
    :returns: List[Tuple[str, bool, str]] -- The name, outcome and detail of every check.
    """
    config = tiny_config(config)
    results = list()
    for check in CHECKS:
        rng = np.random.default_rng([seed, len(results)])
        torch.manual_seed(seed + len(results))
        name, passed, detail = check(config, rng)
        print(f"[selftest: {'INFO' if passed else 'ERROR'}] {name}: {'ok' if passed else 'FAILED'} ({detail})")
        results.append((name, passed, detail))
    return results
