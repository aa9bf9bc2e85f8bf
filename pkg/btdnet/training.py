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
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from sklearn.model_selection import StratifiedKFold
from torch import Tensor, nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from btdnet import __version__
from btdnet.augment import derangement, mix_scans, sample_lambda, transform_scan
from btdnet.data import MODALITIES, Manifest, Modality, Scan, ScanDataset
from btdnet.evaluation import evaluate_fold
from btdnet.network import (BTDNet, ModelConfig, StreamNet, collate_scans, load_checkpoint, load_state,
                            save_checkpoint)
from btdnet.objective import MixedBatch, Objective, mixed_batch_loss
from btdnet.support import (CheckpointMismatch, EmptyFold, FileManager, InsufficientClass, InvalidParameter,
                            config_digest)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    momentum: float = 0.9
    sam_rho: float = 0.05
    epochs_phase1: int = 30
    epochs_phase2: int = 20
    patience: int = 7
    folds: int = 5
    seed: int = 0
    workers: int = 0
    phase2_from_scratch: bool = False
    device: str = "cpu"
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise InvalidParameter("Learning rates must be positive.")
        if self.folds < 2:
            raise InvalidParameter(f"Cross-validation needs at least 2 folds, got {self.folds}.")
        if self.batch_size < 2:
            raise InvalidParameter(f"MixAugment needs batches of at least 2 scans, got {self.batch_size}.")
        if self.sam_rho < 0:
            raise InvalidParameter(f"sam_rho must be non-negative, got {self.sam_rho}.")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameter(f"momentum must lie in [0, 1), got {self.momentum}.")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0 or self.patience < 1 or self.workers < 0:
            raise InvalidParameter("Epoch budgets and workers must be non-negative and patience positive.")
        if self.dtype not in DTYPES:
            raise InvalidParameter(f"Unknown dtype '{self.dtype}', expected one of {sorted(DTYPES)}.")

    @classmethod
    def from_config(cls, config:Dict[str, Any]) -> "TrainConfig":
        return cls(**config["train"])

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


@dataclass
class FoldSplit:
    """
    A partition of the scan ids into ``k`` validation folds. The training set
    of fold ``f`` is every id outside fold ``f``.
    """
    folds: List[List[str]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def val_ids(self, fold:int) -> List[str]:
        self._check(fold)
        return list(self.folds[fold])

    def train_ids(self, fold:int) -> List[str]:
        self._check(fold)
        return [s for f, ids in enumerate(self.folds) if f != fold for s in ids]

    def _check(self, fold:int) -> None:
        if not 0 <= fold < self.k:
            raise InvalidParameter(f"Fold {fold} does not exist, the split has {self.k} folds.")

    def to_json(self) -> List[List[str]]:
        return [list(ids) for ids in self.folds]


def stratified_kfold(labels:Sequence[int], k:int=5, seed:int=0,
                     scan_ids:Optional[Sequence[str]]=None) -> FoldSplit:
    """
    Split a labelled dataset into ``k`` folds preserving the class proportions.

    :param labels: One label in {0, 1} per scan.
    :type labels: Sequence[int].
    :param k: The number of folds.
    :type k: int.
    :param seed: The shuffling seed.
    :type seed: int.
    :param scan_ids: The ids of the scans. If None, the positions are used.
    :type scan_ids: Sequence[str].
    :returns: FoldSplit -- The validation folds.
    """
    if k < 2:
        raise InvalidParameter(f"Cross-validation needs at least 2 folds, got {k}.")
    scan_ids = [str(i) for i in range(len(labels))] if scan_ids is None else list(scan_ids)
    if len(scan_ids) != len(labels):
        raise InvalidParameter(f"{len(scan_ids)} scan ids for {len(labels)} labels.")
    labels = np.asarray(labels, dtype=np.int64)
    for cls in (0, 1):
        count = int((labels == cls).sum())
        if count < k:
            raise InsufficientClass(f"Class {cls} has {count} members, fewer than the {k} folds.")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    folds = [[scan_ids[i] for i in sorted(val)] for _, val in splitter.split(np.zeros(len(labels)), labels)]
    return FoldSplit(folds)


class SAM(torch.optim.Optimizer):
    """
    Sharpness-aware minimization around a base optimizer. The gradient is first
    taken at the current parameters θ, the parameters are moved to
    ``θ + ρ·g/‖g‖₂`` (global norm over every parameter), the gradient is taken
    again there and the base optimizer updates the original θ with it.
    With ``rho=0`` or a zero gradient no perturbation happens and the update is
    the base optimizer's step.

    :param params: The parameters to optimize.
    :param base_optimizer: The optimizer class applying the update, e.g. ``torch.optim.SGD``.
    :param rho: The neighbourhood radius, non-negative.
    :type rho: float.
    """
    def __init__(self, params, base_optimizer=torch.optim.SGD, rho:float=0.05, **kwargs):
        if rho < 0.0:
            raise InvalidParameter(f"rho must be non-negative, got {rho}.")
        defaults = dict(rho=rho, **kwargs)
        super().__init__(params, defaults)
        self.base_optimizer = base_optimizer(self.param_groups, **kwargs)
        self.param_groups = self.base_optimizer.param_groups
        self.defaults.update(self.base_optimizer.defaults)

    @torch.no_grad()
    def first_step(self, zero_grad:bool=False) -> bool:
        """
        Move to the perturbed point. Returns False when nothing was perturbed,
        in which case the gradient at θ is kept for the base step.
        """
        grads = [p.grad for group in self.param_groups for p in group["params"] if p.grad is not None]
        if not grads:
            return False
        grad_norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads]))
        if float(grad_norm) == 0.0 or all(group["rho"] == 0.0 for group in self.param_groups):
            return False
        for group in self.param_groups:
            scale = group["rho"] / grad_norm
            for p in group["params"]:
                if p.grad is None:
                    continue
                self.state[p]["theta"] = p.detach().clone()
                p.add_(p.grad * scale.to(p))
        if zero_grad:
            self.zero_grad()
        return True

    @torch.no_grad()
    def second_step(self, zero_grad:bool=False) -> None:
        for group in self.param_groups:
            for p in group["params"]:
                theta = self.state[p].pop("theta", None)
                if theta is not None:
                    p.copy_(theta)
        self.base_optimizer.step()
        if zero_grad:
            self.zero_grad()

    @torch.no_grad()
    def step(self, closure:Optional[Callable[[], Tensor]]=None) -> None:
        """
        :param closure: Recomputes the loss and its gradient; it has already been called once by the caller.
        """
        if closure is None:
            raise InvalidParameter("SAM needs a closure that recomputes the loss and its gradient.")
        closure = torch.enable_grad()(closure)
        if self.first_step(zero_grad=True):
            closure()
        self.second_step()

    def load_state_dict(self, state_dict):
        super().load_state_dict(state_dict)
        self.base_optimizer.param_groups = self.param_groups


def sam_step(optimizer:SAM, compute_loss:Callable[[], Tensor]) -> float:
    """
    One sharpness-aware update. ``compute_loss`` must evaluate the same batch
    (same λ, same virtual examples) each time it is called.

    :returns: float -- The loss at the parameters before the update.
    """
    def closure():
        loss = compute_loss()
        loss.backward()
        return loss

    optimizer.zero_grad()
    loss = closure()
    optimizer.step(closure)
    optimizer.zero_grad()
    return float(loss.detach())


def build_mixed_batch(scans:Sequence[Scan], rng:np.random.Generator, alpha:float=0.2, use_mix:bool=True,
                      dtype:torch.dtype=torch.float32, device:Union[str, torch.device]="cpu",
                      lam:Optional[float]=None) -> MixedBatch:
    """
    Collate a batch of transformed, padded scans and pair them into virtual
    examples. Scan ``k`` is mixed with scan ``perm[k]``, ``perm`` being a
    derangement, with one λ ~ Beta(alpha, alpha) for the whole batch.

    :param lam: Force the mixing coefficient instead of sampling it.
    :type lam: float.
    """
    real_inputs, real_lengths, targets = collate_scans(scans, dtype, device)
    if not use_mix or len(scans) < 2:
        return MixedBatch(real_inputs, real_lengths, targets)
    perm = derangement(len(scans), rng)
    lam = sample_lambda(alpha, rng) if lam is None else float(lam)
    virtual = [mix_scans(scans[k], scans[int(perm[k])], lam, (k, int(perm[k]))) for k in range(len(scans))]
    virtual_inputs, virtual_lengths, _ = collate_scans(virtual, dtype, device)
    return MixedBatch(real_inputs, real_lengths, targets, virtual_inputs, virtual_lengths,
                      torch.as_tensor(perm, dtype=torch.long, device=device), lam)


@dataclass
class StageResult:
    checkpoint: Path
    best_f1: Optional[float]
    best_epoch: int
    train_losses: List[float] = field(default_factory=list)


def _identity_collate(scans:List[Scan]) -> List[Scan]:
    return scans


class Trainer:
    """
    Two-phase training over the folds of a stratified split. Phase 1 trains one
    stream per modality, each with a temporary two-unit head; phase 2 starts
    the multimodal network from the phase-1 streams and trains it end-to-end.
    Every epoch appends one record to ``<out_dir>/train_log.jsonl``.

    :param config: The complete configuration.
    :type config: dict.
    :param manifest: The manifest of the preprocessed cache.
    :type manifest: Manifest.
    :param out_dir: Where checkpoints, the training log and the run metadata go.
    :type out_dir: str.
    :param split: The folds. If None, a stratified split is drawn with the training seed.
    :type split: FoldSplit.
    """
    def __init__(self, config:Dict[str, Any], manifest:Manifest, out_dir, split:Optional[FoldSplit]=None,
                 progress:bool=True):
        self.config = config
        self.train_config = TrainConfig.from_config(config)
        self.model_config = ModelConfig.from_config(config)
        self.objective = Objective.from_config(config)
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.progress = progress
        if split is None:
            split = stratified_kfold(manifest.labels, self.train_config.folds, self.train_config.seed,
                                     manifest.scan_ids)
        self.split = split
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log = FileManager(self.out_dir / "train_log.jsonl")

    @property
    def dtype(self) -> torch.dtype:
        return self.train_config.torch_dtype

    def checkpoint_path(self, fold:int, phase:int, modality:Optional[str]=None) -> Path:
        name = f"phase1_{modality}_best.bin" if phase == 1 else "phase2_best.bin"
        return self.out_dir / "ckpt" / f"fold{fold}" / name

    def _seed(self, phase:int, fold:int, stream:int) -> int:
        return int(np.random.SeedSequence([self.train_config.seed, phase, fold, stream]).generate_state(1)[0])

    def _dataset(self, scan_ids:Sequence[str], train:bool, seed:int=0) -> ScanDataset:
        data, augment = self.config["data"], self.config["augment"]
        transform = None
        if train and augment["use_geometric"]:
            transform = partial(transform_scan, rotation_deg=augment["rotation_deg"],
                                hflip_prob=augment["hflip_prob"], per_slice=augment["per_slice"])
        return ScanDataset(self.manifest, scan_ids, data["lengths"], data["strict_length"], transform, seed,
                           data["length_mode"])

    def _fit(self, model:nn.Module, phase:int, fold:int, stream:int, path:Path, tag:str) -> StageResult:
        tc = self.train_config
        train_ids, val_ids = self.split.train_ids(fold), self.split.val_ids(fold)
        if not train_ids or not val_ids:
            raise EmptyFold(f"Fold {fold} has {len(train_ids)} training and {len(val_ids)} validation scans.")
        lr, epochs = (tc.lr_phase1, tc.epochs_phase1) if phase == 1 else (tc.lr_phase2, tc.epochs_phase2)
        seed = self._seed(phase, fold, stream)
        meta = {"phase": phase, "fold": fold, "stream": tag, "seed": tc.seed}
        if epochs == 0:
            save_checkpoint(path, model, {**meta, "epoch": 0, "val_f1": None})
            return StageResult(path, None, 0)
        train_set = self._dataset(train_ids, True, seed)
        val_set = self._dataset(val_ids, False)
        loader = DataLoader(train_set, batch_size=tc.batch_size, shuffle=True, num_workers=tc.workers,
                            collate_fn=_identity_collate, generator=torch.Generator().manual_seed(seed))
        optimizer = SAM(model.parameters(), torch.optim.SGD, rho=tc.sam_rho, lr=lr, momentum=tc.momentum)
        augment = self.config["augment"]
        best = StageResult(path, None, 0)
        stale = 0
        for epoch in tqdm(range(1, epochs + 1), desc=f"Fold {fold} phase {phase} {tag}", disable=not self.progress):
            train_set.set_epoch(epoch)
            model.train()
            losses = list()
            for index, scans in enumerate(loader):
                if len(scans) < 2:
                    # batch normalization needs two samples
                    print(f"[Trainer: WARNING] fold {fold} phase {phase} {tag}: "
                          f"skipped a one-scan batch in epoch {epoch}")
                    continue
                rng = np.random.default_rng([seed, epoch, index])
                batch = build_mixed_batch(scans, rng, augment["mix_alpha"], augment["use_mix"], self.dtype,
                                          tc.device)
                losses.append(sam_step(optimizer, lambda: mixed_batch_loss(model, batch, self.objective)[0]))
            val_f1 = evaluate_fold(model, val_set, use_tta=False, dtype=self.dtype, device=tc.device).macro_f1
            train_loss = float(np.mean(losses)) if losses else None
            best.train_losses.append(train_loss)
            self.log.append_jsonl({"epoch": epoch, "phase": phase, "fold": fold, "stream": tag,
                                   "train_loss": train_loss, "val_f1": val_f1, "lr": lr,
                                   "timestamp": datetime.now(timezone.utc).isoformat()})
            if best.best_f1 is None or val_f1 > best.best_f1:
                save_checkpoint(path, model, {**meta, "epoch": epoch, "val_f1": val_f1})
                best.best_f1, best.best_epoch, stale = val_f1, epoch, 0
            else:
                stale += 1
                if stale >= tc.patience:
                    print(f"[Trainer: INFO] fold {fold} phase {phase} {tag}: early stop at epoch {epoch}")
                    break
        print(f"[Trainer: INFO] fold {fold} phase {phase} {tag}: best macro-F1 {best.best_f1:.4f} "
              f"at epoch {best.best_epoch}")
        return best

    def train_phase1(self, modality:Union[Modality, str], fold:int) -> StageResult:
        """
        Train the stream of one modality on the training scans of a fold and
        keep the checkpoint with the best validation macro-F1.

        :returns: StageResult -- The checkpoint path, best score and loss curve.
        """
        modality = Modality(modality)
        stream = MODALITIES.index(modality)
        torch.manual_seed(self._seed(1, fold, stream))
        model = StreamNet(self.model_config, modality).to(device=self.train_config.device, dtype=self.dtype)
        print(f"[Trainer: INFO] fold {fold} phase 1 {modality.value}")
        return self._fit(model, 1, fold, stream, self.checkpoint_path(fold, 1, modality.value), modality.value)

    def init_from_streams(self, model:BTDNet, stream_ckpts:Dict[str, Any]) -> Dict[str, str]:
        """
        Copy phase-1 weights into the multimodal network. The shared CNN and
        RNN come from the stream with the best validation score; each routing
        dense layer comes from the best stream of its group. Temporary heads
        are dropped and the fusion layers keep their fresh initialization.

        :param stream_ckpts: A checkpoint path per modality name.
        :type stream_ckpts: dict.
        :returns: dict -- The stream each part was taken from.
        """
        archives = dict()
        for modality in MODALITIES:
            if modality.value not in stream_ckpts:
                raise CheckpointMismatch(f"No phase-1 checkpoint for {modality.value}.")
            archive = load_checkpoint(stream_ckpts[modality.value])
            if archive["kind"] != StreamNet.kind or archive["modality"] != modality.value:
                raise CheckpointMismatch(f"{stream_ckpts[modality.value]} is not a {modality.value} stream.")
            if archive["config"] != model.config:
                raise CheckpointMismatch(f"{stream_ckpts[modality.value]} was trained with a different architecture.")
            archives[modality.value] = archive

        def score(name:str) -> float:
            value = archives[name]["meta"].get("val_f1")
            return -1.0 if value is None else value

        def best_of(names:List[str]) -> str:
            # max keeps the first of equal scores, i.e. modality order
            return max(names, key=score)

        sources = {"analysis": best_of([m.value for m in MODALITIES])}
        if model.config.use_routing:
            for group, members in model.config.routing_groups().items():
                sources[f"routing.{group}"] = best_of(members)
        for prefix, name in sources.items():
            state = archives[name]["state_dict"]
            part = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            load_state(model.get_submodule(prefix), part)
        return sources

    def train_phase2(self, fold:int, stream_ckpts:Optional[Dict[str, Any]]=None) -> StageResult:
        """
        Train the multimodal network end-to-end on a fold, starting from the
        phase-1 streams unless ``train.phase2_from_scratch`` is set.
        """
        torch.manual_seed(self._seed(2, fold, 0))
        model = BTDNet(self.model_config)
        if not self.train_config.phase2_from_scratch:
            if stream_ckpts is None:
                stream_ckpts = {m.value: self.checkpoint_path(fold, 1, m.value) for m in MODALITIES}
            sources = self.init_from_streams(model, stream_ckpts)
            print(f"[Trainer: INFO] fold {fold} phase 2 initialized from {sources}")
        model = model.to(device=self.train_config.device, dtype=self.dtype)
        return self._fit(model, 2, fold, 0, self.checkpoint_path(fold, 2), "full")

    def cross_validate(self, folds:Optional[Sequence[int]]=None) -> Dict[str, Any]:
        """
        Run both phases on every fold and write ``run_meta.json``.

        :param folds: The folds to run. If None, every fold.
        :type folds: Sequence[int].
        :returns: dict -- Per-fold phase-1 and phase-2 validation scores and checkpoints.
        """
        folds = list(range(self.split.k)) if folds is None else list(folds)
        started = datetime.now(timezone.utc).isoformat()
        results = dict()
        for fold in folds:
            phase1 = dict()
            if not self.train_config.phase2_from_scratch:
                phase1 = {m.value: self.train_phase1(m, fold) for m in MODALITIES}
            phase2 = self.train_phase2(fold, {m: r.checkpoint for m, r in phase1.items()} or None)
            results[str(fold)] = {"phase1": {m: r.best_f1 for m, r in phase1.items()},
                                  "phase2": phase2.best_f1, "checkpoint": str(phase2.checkpoint)}
        FileManager(self.out_dir / "run_meta.json").dump_json({
            "version": __version__, "config": self.config, "config_digest": config_digest(self.config),
            "seed": self.train_config.seed, "split": self.split.to_json(), "folds": folds,
            "started": started, "finished": datetime.now(timezone.utc).isoformat(), "results": results
        }, beautiful=True)
        return results
