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
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.metrics import f1_score
from torch import Tensor, nn
from tqdm import tqdm

from btdnet.augment import tta_versions
from btdnet.data import Scan
from btdnet.network import collate_scans
from btdnet.support import EmptyFold, EmptyInput, FileManager, ShapeMismatch


def macro_f1(pred_labels:Sequence[int], true_labels:Sequence[int]) -> float:
    """
    The unweighted mean of the F1 scores of class 0 and class 1. A class with
    neither predictions nor members scores 0.

    :param pred_labels: Predicted labels in {0, 1}.
    :type pred_labels: Sequence[int].
    :param true_labels: True labels in {0, 1}.
    :type true_labels: Sequence[int].
    :returns: float -- A value in [0, 1].
    """
    if len(pred_labels) != len(true_labels):
        raise ShapeMismatch(f"{len(pred_labels)} predictions for {len(true_labels)} labels.")
    if len(true_labels) == 0:
        raise EmptyInput("macro_f1 needs at least one label.")
    return float(f1_score(list(true_labels), list(pred_labels), labels=[0, 1], average="macro", zero_division=0))


def decide(logits:Tensor) -> int:
    # ties go to class 0
    return int(bool(logits[1] > logits[0]))


def _forward(model:nn.Module, scan:Scan, dtype:torch.dtype, device) -> Tensor:
    inputs, lengths, _ = collate_scans([scan], dtype, device)
    with torch.no_grad():
        return model(inputs, lengths)[0]


def tta_predict(model:nn.Module, scan:Scan, rng:Optional[np.random.Generator]=None, angle:Optional[float]=None,
                rotation_deg:float=15.0, hflip:bool=True, dtype:torch.dtype=torch.float32,
                device:Union[str, torch.device]="cpu") -> Tuple[Tensor, int, List[Tensor]]:
    """
    Predict a padded scan from its four test-time versions by summing their logits.

    :param model: The model, switched to evaluation mode.
    :type model: torch.nn.Module.
    :param scan: A preprocessed, padded scan.
    :type scan: Scan.
    :param rng: Source of the rotation angle when ``angle`` is None.
    :type rng: numpy.random.Generator.
    :returns: Tuple -- The summed logits, the predicted label and the four per-version logit vectors.
    """
    model.eval()
    outputs = [_forward(model, version, dtype, device)
               for version in tta_versions(scan, rng, rotation_deg, angle, hflip)]
    p_final = (outputs[0] + outputs[1]) + (outputs[2] + outputs[3])
    return p_final, decide(p_final), outputs


@dataclass
class Prediction:
    scan_id: str
    logits: List[List[float]]
    p_final: List[float]
    label: int
    truth: int

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class FoldEvaluation:
    macro_f1: float
    predictions: List[Prediction] = field(default_factory=list)


def predict_scans(model:nn.Module, scans:Iterable[Scan], use_tta:bool=False, tta_seed:int=0,
                  rotation_deg:float=15.0, dtype:torch.dtype=torch.float32,
                  device:Union[str, torch.device]="cpu", progress:bool=False) -> List[Prediction]:
    """
    Predict every scan. With TTA one rotation angle is drawn from ``tta_seed``
    and shared by every scan of the run.
    """
    model.eval()
    angle = float(np.random.default_rng(tta_seed).uniform(-rotation_deg, rotation_deg)) if use_tta else None
    predictions = list()
    for scan in tqdm(scans, desc="Predicting", disable=not progress):
        if use_tta:
            p_final, label, outputs = tta_predict(model, scan, angle=angle, dtype=dtype, device=device)
        else:
            p_final = _forward(model, scan, dtype, device)
            label, outputs = decide(p_final), [p_final]
        predictions.append(Prediction(scan.scan_id, [o.tolist() for o in outputs], p_final.tolist(), label,
                                      scan.label))
    return predictions


def evaluate_fold(model:nn.Module, scans:Sequence[Scan], use_tta:bool=False, tta_seed:int=0,
                  rotation_deg:float=15.0, dump_path=None, dtype:torch.dtype=torch.float32,
                  device:Union[str, torch.device]="cpu", progress:bool=False) -> FoldEvaluation:
    """
    Score a model on the validation scans of a fold.

    :param scans: The padded validation scans (a list or a ``ScanDataset``).
    :type scans: Sequence[Scan].
    :param use_tta: Predict from the four test-time versions instead of a plain forward pass.
    :type use_tta: bool.
    :param dump_path: If given, the per-scan predictions are written there as JSON lines.
    :type dump_path: str.
    :returns: FoldEvaluation -- The macro-F1 and the per-scan predictions.
    """
    if len(scans) == 0:
        raise EmptyFold("The validation fold is empty.")
    iterable = (scans[i] for i in range(len(scans)))
    predictions = predict_scans(model, iterable, use_tta, tta_seed, rotation_deg, dtype, device, progress)
    score = macro_f1([p.label for p in predictions], [p.truth for p in predictions])
    if dump_path is not None:
        FileManager(dump_path).dump_jsonl(p.to_json() for p in predictions)
    return FoldEvaluation(score, predictions)


@dataclass(frozen=True)
class FoldReport:
    """
    Fold scores summarised as mean ± spread, where the spread is the
    difference between the best and the worst fold.
    """
    per_fold: Tuple[float, ...]
    mean: float
    spread: float

    def __str__(self) -> str:
        return f"{100 * self.mean:.1f} ± {100 * self.spread:.1f}"


def aggregate_folds(scores:Sequence[float]) -> FoldReport:
    if len(scores) == 0:
        raise EmptyInput("No fold scores to aggregate.")
    values = tuple(float(s) for s in scores)
    return FoldReport(values, float(np.mean(values)), max(values) - min(values))


def write_eval_report(path, report:FoldReport, config_digest:str, tta_seed:Optional[int]) -> None:
    FileManager(path).dump_json({"per_fold": list(report.per_fold), "mean": report.mean, "spread": report.spread,
                                 "config_digest": config_digest, "tta_seed": tta_seed}, beautiful=True)
