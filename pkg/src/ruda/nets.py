"""Encoders, classifier and domain discriminator, plus the model bundle that
tracks which components are frozen."""
from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1
COMPONENTS = ("source_encoder", "target_encoder", "classifier", "discriminator")


class DivergenceError(RuntimeError):
    """A forward pass, loss or gradient became non-finite."""


@dataclass
class EncoderSpec:
    kind: str = "mlp"  # "mlp" or "conv_lenet"
    input_shape: tuple = (2,)
    feature_dim: int = 500
    hidden_sizes: tuple = (64, 64)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.hidden_sizes = tuple(self.hidden_sizes)
        if self.kind not in ("mlp", "conv_lenet"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.kind == "conv_lenet" and self.input_shape != (1, 28, 28):
            raise ValueError("conv_lenet requires input_shape (1, 28, 28)")


@dataclass
class ClassifierSpec:
    feature_dim: int = 500
    num_classes: int = 10


@dataclass
class DiscriminatorSpec:
    feature_dim: int = 500
    hidden: tuple = (500, 500)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)


class LeNetEncoder(nn.Module):
    """conv(20, 5x5) -> pool -> conv(50, 5x5) -> pool -> fc(F) with ReLU."""

    def __init__(self, feature_dim: int = 500):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 20, kernel_size=5),
            nn.MaxPool2d(2),
            nn.ReLU(),
            nn.Conv2d(20, 50, kernel_size=5),
            nn.MaxPool2d(2),
            nn.ReLU(),
        )
        self.fc = nn.Sequential(nn.Linear(50 * 4 * 4, feature_dim), nn.ReLU())

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


def mlp(sizes, final_activation: bool = False) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2 or final_activation:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def make_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.kind == "conv_lenet":
        return LeNetEncoder(spec.feature_dim)
    in_dim = int(np.prod(spec.input_shape))
    return nn.Sequential(nn.Flatten(), mlp([in_dim, *spec.hidden_sizes, spec.feature_dim]))


@dataclass
class ModelBundle:
    enc_spec: EncoderSpec
    cls_spec: ClassifierSpec
    disc_spec: DiscriminatorSpec
    source_encoder: nn.Module
    target_encoder: nn.Module
    classifier: nn.Module
    discriminator: nn.Module
    frozen: set = field(default_factory=set)

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENTS:
            raise KeyError(name)
        return getattr(self, name)

    def freeze(self, *names: str):
        for name in names:
            for p in self.component(name).parameters():
                p.requires_grad_(False)
            self.frozen.add(name)

    def checksum(self, name: str) -> str:
        return state_checksum(self.component(name).state_dict())

    def checksums(self) -> dict:
        return {name: self.checksum(name) for name in COMPONENTS}

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    @property
    def num_classes(self) -> int:
        return self.cls_spec.num_classes

    @property
    def feature_dim(self) -> int:
        return self.enc_spec.feature_dim


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_models(enc: EncoderSpec, cls: ClassifierSpec, disc: DiscriminatorSpec,
                 seed: int = 0) -> ModelBundle:
    """Initialize all four components from ``seed``; the target encoder starts
    as a copy of the source encoder."""
    if not enc.feature_dim == cls.feature_dim == disc.feature_dim:
        raise ValueError(
            f"feature_dim mismatch: encoder {enc.feature_dim}, classifier "
            f"{cls.feature_dim}, discriminator {disc.feature_dim}"
        )
    if cls.num_classes < 2:
        raise ValueError("classifier needs at least 2 classes")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        source = make_encoder(enc)
        classifier = nn.Linear(cls.feature_dim, cls.num_classes)
        discriminator = mlp([disc.feature_dim, *disc.hidden, 2])
    return ModelBundle(enc, cls, disc, source, copy.deepcopy(source), classifier, discriminator)


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise DivergenceError(f"non-finite values in {what}")
    return t


def _as_tensor(x, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.array(x))
    return x.to(dtype)


def encode(bundle: ModelBundle, which: str, inputs) -> torch.Tensor:
    if which not in ("source", "target"):
        raise ValueError("which must be 'source' or 'target'")
    net = bundle.source_encoder if which == "source" else bundle.target_encoder
    x = _as_tensor(inputs, net)
    expected = bundle.enc_spec.input_shape
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"inputs of shape {tuple(x.shape[1:])} do not match encoder input {expected}")
    return _check_finite(net(x), f"{which} encoder output")


def classifier_logits(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    return bundle.classifier(_check_finite(features, "classifier input"))


def classify(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    """Class probabilities, one softmax row per feature vector."""
    return torch.softmax(classifier_logits(bundle, features), dim=1)


def discriminate(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    """Probability that each feature vector came from the source domain."""
    logits = bundle.discriminator(_check_finite(features, "discriminator input"))
    return torch.softmax(logits, dim=1)[:, 0]


@torch.no_grad()
def encode_all(bundle: ModelBundle, which: str, instances: np.ndarray,
               batch_size: int = 2048) -> torch.Tensor:
    if len(instances) == 0:
        return torch.zeros(0, bundle.feature_dim)
    chunks = [encode(bundle, which, instances[i:i + batch_size])
              for i in range(0, len(instances), batch_size)]
    return torch.cat(chunks)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, bundle: ModelBundle, iteration: int = 0,
                    centroids: Optional[torch.Tensor] = None, extra: Optional[dict] = None):
    """Write all parameter sets and specs atomically (write then rename)."""
    payload = {
        "format": "ruda-checkpoint",
        "version": CHECKPOINT_VERSION,
        "specs": {
            "encoder": asdict(bundle.enc_spec),
            "classifier": asdict(bundle.cls_spec),
            "discriminator": asdict(bundle.disc_spec),
        },
        "state": {name: bundle.component(name).state_dict() for name in COMPONENTS},
        "frozen": sorted(bundle.frozen),
        "iteration": int(iteration),
        "centroids": None if centroids is None else centroids.detach().clone(),
        "extra": extra or {},
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(bundle, centroids, iteration)`` from a checkpoint file."""
    payload = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
    if payload.get("format") != "ruda-checkpoint":
        raise ValueError(f"{path}: not a ruda checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    specs = payload["specs"]
    bundle = build_models(
        EncoderSpec(**specs["encoder"]),
        ClassifierSpec(**specs["classifier"]),
        DiscriminatorSpec(**specs["discriminator"]),
    )
    for name in COMPONENTS:
        bundle.component(name).load_state_dict(payload["state"][name])
    bundle.freeze(*payload["frozen"])
    return bundle, payload["centroids"], payload["iteration"]
