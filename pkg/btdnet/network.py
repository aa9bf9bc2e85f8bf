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
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import hashlib
import json

import numpy as np
import torch
import torchvision
from torch import Tensor, nn

from btdnet.data import MODALITIES, Modality
from btdnet.support import CheckpointMismatch, InvalidLength, InvalidParameter, ShapeMismatch

CHECKPOINT_VERSION = "btdnet-ckpt-v1"
INIT_SCHEME = "fan-in uniform (dense, conv); orthogonal per gate (recurrent)"

FEATURE_DIMS = {"tiny_cnn": 32, "resnet18_gap": 512, "resnet50_gap": 2048}
RNN_KINDS = {"lstm": nn.LSTM, "gru": nn.GRU}
DEFAULT_LENGTHS = {"FLAIR": 250, "T1w": 200, "T1wCE": 200, "T2": 250}


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "tiny_cnn"
    weights: Optional[str] = None

    def __post_init__(self):
        if self.kind not in FEATURE_DIMS:
            raise InvalidParameter(f"Unknown backbone '{self.kind}', expected one of {sorted(FEATURE_DIMS)}.")

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIMS[self.kind]


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters.

    :param backbone: The per-slice CNN.
    :type backbone: BackboneConfig.
    :param rnn_units: Width V of the recurrent layer.
    :type rnn_units: int.
    :param routing_units: Width V' of the routing dense layers.
    :type routing_units: int.
    :param fusion_units: Width V'' of the fusion dense layer.
    :type fusion_units: int.
    :param lengths: Padded length t per modality name.
    :type lengths: Dict[str, int].
    :param share_routing: If True, modalities with equal t share one routing dense layer.
    :type share_routing: bool.
    :param use_mask: If False, the mask layer is bypassed and every RNN row is routed.
    :type use_mask: bool.
    :param use_routing: If False, the masked concatenation goes straight to the fusion layer.
    :type use_routing: bool.
    """
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rnn_kind: str = "lstm"
    rnn_units: int = 128
    routing_units: int = 64
    fusion_units: int = 128
    lengths: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_LENGTHS))
    num_classes: int = 2
    image_size: int = 224
    share_routing: bool = True
    use_mask: bool = True
    use_routing: bool = True
    freeze_backbone_bn: bool = True

    def __post_init__(self):
        widths = [self.rnn_units, self.routing_units, self.fusion_units, self.image_size]
        if any(w <= 0 for w in widths) or any(t <= 0 for t in self.lengths.values()):
            raise InvalidParameter("Every width and every padded length must be positive.")
        if self.num_classes != 2:
            raise InvalidParameter(f"The output head has two units, got num_classes={self.num_classes}.")
        if self.rnn_kind not in RNN_KINDS:
            raise InvalidParameter(f"Unknown rnn_kind '{self.rnn_kind}', expected one of {sorted(RNN_KINDS)}.")
        missing = [m.value for m in MODALITIES if m.value not in self.lengths]
        if missing:
            raise InvalidParameter(f"No padded length for {missing}.")

    @classmethod
    def from_config(cls, config:Dict[str, Any]) -> "ModelConfig":
        network = config["network"]
        return cls(backbone=BackboneConfig(network["backbone"], network["weights"]),
                   rnn_kind=network["rnn_kind"], rnn_units=network["rnn_units"],
                   routing_units=network["routing_units"], fusion_units=network["fusion_units"],
                   lengths=dict(config["data"]["lengths"]), image_size=config["data"]["size"],
                   share_routing=network["share_routing"], use_mask=network["use_mask"],
                   use_routing=network["use_routing"], freeze_backbone_bn=network["freeze_backbone_bn"])

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, record:Dict[str, Any]) -> "ModelConfig":
        record = dict(record)
        record["backbone"] = BackboneConfig(**record["backbone"])
        return cls(**record)

    def group_of(self, modality:Union[Modality, str]) -> str:
        """The name of the routing layer a modality goes through."""
        name = Modality(modality).value
        if not self.share_routing:
            return name
        t = self.lengths[name]
        return "_".join(m.value for m in MODALITIES if self.lengths[m.value] == t)

    def routing_groups(self) -> Dict[str, List[str]]:
        groups: Dict[str, List[str]] = dict()
        for modality in MODALITIES:
            groups.setdefault(self.group_of(modality), list()).append(modality.value)
        return groups

    def routed_dim(self, modality:Union[Modality, str]) -> int:
        """The width of what a modality contributes to the fusion layer."""
        if self.use_routing:
            return self.routing_units
        return self.lengths[Modality(modality).value] * self.rnn_units


class TinyCNN(nn.Module):
    """Three strided conv blocks and global average pooling."""
    feature_dim = FEATURE_DIMS["tiny_cnn"]

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten())

    def forward(self, x:Tensor) -> Tensor:
        return self.features(x)


class ResNetGAP(nn.Module):
    """A torchvision ResNet whose classification layer is dropped; global average pooling is kept."""
    def __init__(self, kind:str="resnet18_gap", weights:Optional[str]=None):
        super().__init__()
        builder = torchvision.models.resnet18 if kind == "resnet18_gap" else torchvision.models.resnet50
        self.net = builder(weights=None)
        self.net.fc = nn.Identity()
        self.feature_dim = FEATURE_DIMS[kind]
        if weights:
            self._load_weights(weights)

    def _load_weights(self, path:str) -> None:
        try:
            state = torch.load(path, map_location="cpu")
        except (OSError, RuntimeError) as e:
            raise CheckpointMismatch(f"Cannot read backbone weights {path}: {e}") from e
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        missing, _ = self.net.load_state_dict(state, strict=False)
        if missing:
            raise CheckpointMismatch(f"Backbone weights {path} lack {len(missing)} tensors, e.g. {missing[0]}.")

    def forward(self, x:Tensor) -> Tensor:
        return self.net(x)


def build_backbone(config:BackboneConfig) -> nn.Module:
    if config.kind == "tiny_cnn":
        return TinyCNN()
    return ResNetGAP(config.kind, config.weights)


class VolumeAnalysis(nn.Module):
    """
    The per-slice CNN followed by a one-directional RNN over the slice sequence.
    One instance is shared by every modality.
    """
    def __init__(self, config:ModelConfig):
        super().__init__()
        self.image_size = config.image_size
        self.freeze_backbone_bn = config.freeze_backbone_bn
        self.backbone = build_backbone(config.backbone)
        self.rnn = RNN_KINDS[config.rnn_kind](config.backbone.feature_dim, config.rnn_units, batch_first=True)
        gates = 4 if config.rnn_kind == "lstm" else 3
        for name, weight in self.rnn.named_parameters():
            if name.startswith("weight_hh"):
                for chunk in weight.data.chunk(gates, 0):
                    nn.init.orthogonal_(chunk)

    def train(self, mode:bool=True) -> "VolumeAnalysis":
        super().train(mode)
        if self.freeze_backbone_bn:
            # running statistics of backbone normalization stay fixed so slices never interact
            for module in self.backbone.modules():
                if isinstance(module, nn.modules.batchnorm._BatchNorm):
                    module.eval()
        return self

    def cnn_features(self, slices:Tensor) -> Tensor:
        """
        Extract one feature vector per slice.

        :param slices: ``N × 3 × S × S`` slices (or a single ``3 × S × S`` slice).
        :type slices: torch.Tensor.
        :returns: torch.Tensor -- ``N × D`` features.
        """
        single = slices.dim() == 3
        if single:
            slices = slices.unsqueeze(0)
        if slices.dim() != 4 or tuple(slices.shape[1:]) != (3, self.image_size, self.image_size):
            raise ShapeMismatch(
                f"Expected slices of shape 3×{self.image_size}×{self.image_size}, got {tuple(slices.shape)}.")
        features = self.backbone(slices)
        return features[0] if single else features

    def rnn_sequence(self, features:Tensor) -> Tensor:
        """Map ``B × t × D`` (or ``t × D``) features to ``B × t × V`` causal outputs."""
        single = features.dim() == 2
        outputs, _ = self.rnn(features.unsqueeze(0) if single else features)
        return outputs[0] if single else outputs

    def forward(self, volumes:Tensor) -> Tensor:
        batch, t = volumes.shape[:2]
        features = self.cnn_features(volumes.reshape(batch * t, *volumes.shape[2:]))
        return self.rnn_sequence(features.reshape(batch, t, -1))


def mask_and_concat(outputs:Tensor, lengths:Union[Tensor, Sequence[int], int], use_mask:bool=True) -> Tensor:
    """
    Keep the first ``l`` RNN rows of every sample, zero the rest, and flatten row-major.
    The mask is multiplicative, so rows at or beyond ``l`` also receive zero gradient.

    :param outputs: ``B × t × V`` (or ``t × V``) RNN outputs.
    :type outputs: torch.Tensor.
    :param lengths: The true length of every sample.
    :type lengths: torch.Tensor.
    :returns: torch.Tensor -- ``B × (t·V)`` (or ``t·V``) masked features.
    """
    single = outputs.dim() == 2
    if single:
        outputs = outputs.unsqueeze(0)
    batch, t, _ = outputs.shape
    lengths = torch.as_tensor(lengths, device=outputs.device).reshape(-1)
    if lengths.numel() != batch:
        raise ShapeMismatch(f"{lengths.numel()} lengths for a batch of {batch}.")
    if bool(((lengths < 1) | (lengths > t)).any()):
        raise InvalidLength(f"Lengths {lengths.tolist()} outside [1, {t}].")
    if use_mask:
        mask = torch.arange(t, device=outputs.device).unsqueeze(0) < lengths.unsqueeze(1)
        outputs = outputs * mask.unsqueeze(-1).to(outputs.dtype)
    flat = outputs.reshape(batch, -1)
    return flat[0] if single else flat


class MaskLayer(nn.Module):
    def __init__(self, use_mask:bool=True):
        super().__init__()
        self.use_mask = use_mask

    def forward(self, outputs:Tensor, lengths:Tensor) -> Tensor:
        return mask_and_concat(outputs, lengths, self.use_mask)


class RoutingDense(nn.Module):
    """Dense layer with batch normalization and GELU on the masked concatenation."""
    def __init__(self, in_features:int, units:int):
        super().__init__()
        self.dense = nn.Linear(in_features, units)
        self.norm = nn.BatchNorm1d(units)
        self.activation = nn.GELU()

    def forward(self, masked:Tensor) -> Tensor:
        single = masked.dim() == 1
        out = self.activation(self.norm(self.dense(masked.unsqueeze(0) if single else masked)))
        return out[0] if single else out


class ModalityFusion(nn.Module):
    def __init__(self, in_features:int, units:int, num_classes:int=2):
        super().__init__()
        self.dense = nn.Linear(in_features, units)
        self.activation = nn.GELU()
        self.output = nn.Linear(units, num_classes)

    def fuse(self, routed:Sequence[Tensor]) -> Tensor:
        return self.activation(self.dense(torch.cat(list(routed), dim=-1)))

    def forward(self, routed:Sequence[Tensor]) -> Tensor:
        return self.output(self.fuse(routed))


@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass, keyed by modality name."""
    rnn_outputs: Dict[str, Tensor] = field(default_factory=dict)
    masked: Dict[str, Tensor] = field(default_factory=dict)
    routed: Dict[str, Tensor] = field(default_factory=dict)
    fused: Optional[Tensor] = None
    logits: Optional[Tensor] = None


class _RoutedNetwork(nn.Module):
    def __init__(self, config:ModelConfig, groups:Sequence[str]):
        super().__init__()
        self.config = config
        self.analysis = VolumeAnalysis(config)
        self.mask = MaskLayer(config.use_mask)
        members = config.routing_groups()
        self.routing = nn.ModuleDict({
            group: RoutingDense(config.lengths[members[group][0]] * config.rnn_units, config.routing_units)
            if config.use_routing else nn.Identity()
            for group in groups})

    def route(self, modality:str, volumes:Tensor, lengths:Tensor, trace:Optional[ForwardTrace]=None) -> Tensor:
        t = self.config.lengths[modality]
        if volumes.shape[1] != t:
            raise ShapeMismatch(f"{modality}: expected {t} slices, got {volumes.shape[1]}.")
        outputs = self.analysis(volumes)
        masked = self.mask(outputs, lengths)
        routed = self.routing[self.config.group_of(modality)](masked)
        if trace is not None:
            trace.rnn_outputs[modality] = outputs
            trace.masked[modality] = masked
            trace.routed[modality] = routed
        return routed


class BTDNet(_RoutedNetwork):
    """
    The multimodal network: shared CNN and RNN, mask layer, routing dense layers
    (shared by modalities of equal padded length), modality fusion and a
    two-unit output layer returning raw logits.

    :param config: The architecture hyperparameters.
    :type config: ModelConfig.
    """
    kind = "full"

    def __init__(self, config:ModelConfig):
        super().__init__(config, list(config.routing_groups()))
        self.fusion = ModalityFusion(sum(config.routed_dim(m) for m in MODALITIES), config.fusion_units,
                                     config.num_classes)

    def forward(self, inputs:Dict[str, Tensor], lengths:Dict[str, Tensor], trace:bool=False):
        """
        :param inputs: ``B × t × 3 × S × S`` padded volumes per modality name.
        :type inputs: Dict[str, torch.Tensor].
        :param lengths: True lengths per modality name.
        :type lengths: Dict[str, torch.Tensor].
        :param trace: If True, the intermediate tensors are returned as well.
        :type trace: bool.
        :returns: torch.Tensor -- ``B × 2`` logits, or ``(logits, ForwardTrace)``.
        """
        record = ForwardTrace() if trace else None
        routed = [self.route(m.value, inputs[m.value], lengths[m.value], record) for m in MODALITIES]
        fused = self.fusion.fuse(routed)
        logits = self.fusion.output(fused)
        if record is None:
            return logits
        record.fused, record.logits = fused, logits
        return logits, record


class StreamNet(_RoutedNetwork):
    """
    A single-modality stream with a temporary linear two-unit head on its
    routed features, used to pretrain the stream before end-to-end training.
    """
    kind = "stream"

    def __init__(self, config:ModelConfig, modality:Union[Modality, str]):
        modality = Modality(modality).value
        super().__init__(config, [config.group_of(modality)])
        self.modality = modality
        self.head = nn.Linear(config.routed_dim(modality), config.num_classes)

    def forward(self, inputs:Dict[str, Tensor], lengths:Dict[str, Tensor], trace:bool=False):
        record = ForwardTrace() if trace else None
        routed = self.route(self.modality, inputs[self.modality], lengths[self.modality], record)
        logits = self.head(routed)
        if record is None:
            return logits
        record.logits = logits
        return logits, record


def collate_scans(scans:Sequence[Any], dtype:torch.dtype=torch.float32,
                  device:Union[str, torch.device]="cpu") -> Tuple[Dict[str, Tensor], Dict[str, Tensor], Tensor]:
    """
    Stack padded scans (or virtual examples) into model inputs.

    :returns: Tuple -- volumes per modality (``B × t × 3 × S × S``), true lengths per modality, ``B × 2`` targets.
    """
    inputs, lengths = dict(), dict()
    for modality in MODALITIES:
        volumes = [s.volumes[modality] for s in scans]
        shapes = {v.pixels.shape for v in volumes}
        if len(shapes) != 1:
            raise ShapeMismatch(f"{modality.value}: cannot batch volumes of shapes {sorted(shapes)}.")
        stacked = torch.from_numpy(np.stack([v.pixels for v in volumes]))
        inputs[modality.value] = stacked.permute(0, 1, 4, 2, 3).to(device=device, dtype=dtype).contiguous()
        lengths[modality.value] = torch.tensor([v.length for v in volumes], dtype=torch.long, device=device)
    targets = torch.from_numpy(np.stack([np.asarray(s.target, dtype=np.float64) for s in scans]))
    return inputs, lengths, targets.to(device=device, dtype=dtype)


def payload_digest(state_dict:Dict[str, Tensor]) -> str:
    """SHA-256 over every tensor's name, dtype, shape and bytes, in key order."""
    digest = hashlib.sha256()
    for key in sorted(state_dict):
        tensor = state_dict[key].detach().cpu().contiguous()
        digest.update(key.encode("utf8"))
        digest.update(f"{tensor.dtype}{tuple(tensor.shape)}".encode("utf8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path, model:Union[BTDNet, StreamNet], meta:Optional[Dict[str, Any]]=None) -> str:
    """
    Write a ``btdnet-ckpt-v1`` archive: every tensor of the model's state keyed
    by its hierarchical name, the model configuration as embedded JSON and free
    metadata (phase, fold, validation score, ...).

    :returns: str -- The digest of the parameter payload.
    """
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    digest = payload_digest(state)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": CHECKPOINT_VERSION, "kind": model.kind,
                "modality": getattr(model, "modality", None),
                "config": json.dumps(model.config.to_json(), sort_keys=True),
                "meta": dict(meta or dict()), "digest": digest, "state_dict": state}, path)
    return digest


def load_checkpoint(path) -> Dict[str, Any]:
    if not Path(path).is_file():
        raise CheckpointMismatch(f"Checkpoint {path} does not exist.")
    try:
        archive = torch.load(path, map_location="cpu")
    except Exception as e:
        raise CheckpointMismatch(f"Checkpoint {path} cannot be read: {e}") from e
    if not isinstance(archive, dict) or archive.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"Checkpoint {path} is not a {CHECKPOINT_VERSION} archive.")
    archive["config"] = ModelConfig.from_json(json.loads(archive["config"]))
    return archive


def load_state(model:nn.Module, state:Dict[str, Tensor], strict:bool=True) -> None:
    try:
        model.load_state_dict(state, strict=strict)
    except RuntimeError as e:
        raise CheckpointMismatch(f"Checkpoint does not fit the model: {e}") from e


def restore_model(path, config:Optional[ModelConfig]=None, dtype:torch.dtype=torch.float32) -> Union[BTDNet, StreamNet]:
    """
    Rebuild the model stored in a checkpoint.

    :param config: If given, the model is built from it and the checkpoint must fit it.
    :type config: ModelConfig.
    """
    archive = load_checkpoint(path)
    config = config or archive["config"]
    if archive["kind"] == StreamNet.kind:
        model = StreamNet(config, archive["modality"])
    else:
        model = BTDNet(config)
    load_state(model, archive["state_dict"])
    return model.to(dtype)
