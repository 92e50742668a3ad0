"""Linear probing of frozen, average-pooled target-encoder features."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Parameter
from .train import adamw_update
from .vit import patchify


class ProbeDataError(ValueError):
    """The labelled data cannot support a probe (e.g. a class is missing)."""


@dataclass
class ProbeConfig:
    steps: int = 300
    lr: float = 0.05
    weight_decay: float = 1e-4
    val_fraction: float = 0.25
    seed: int = 0
    chunk: int = 256


@dataclass
class ProbeResult:
    train_accuracy: float
    val_accuracy: float
    num_classes: int
    feature_dim: int
    seed: int
    majority_rate: float

    def as_dict(self):
        return asdict(self)


def parameter_checksum(module):
    """SHA-256 over every parameter's name, shape and bytes."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def pooled_features(encoder, images, patch_size, chunk=256):
    """Mean over patches of the encoder output, computed without a graph."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            patches = patchify(images[i:i + chunk], patch_size)
            out.append(encoder(patches).data.mean(axis=-2))
    return np.concatenate(out, axis=0)


def split(n, val_fraction, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0E]))
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return order[n_val:], order[:n_val]


def fit_linear(features, labels, num_classes, cfg: ProbeConfig):
    """Full-batch AdamW on a softmax classifier over standardised features.

    Returns (weight, bias, mean, std) so held-out rows can be scored the same way.
    """
    labels = np.asarray(labels)
    missing = sorted(set(range(num_classes)) - set(labels.tolist()))
    if missing:
        raise ProbeDataError(f"classes {missing} absent from the training split")
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-6
    x = Tensor(((features - mu) / sd).astype(np.float64))
    w = Parameter(np.zeros((num_classes, features.shape[1]), dtype=np.float64))
    b = Parameter(np.zeros(num_classes, dtype=np.float64))
    params = {"w": w, "b": b}
    moments = {k: (np.zeros_like(p.data), np.zeros_like(p.data)) for k, p in params.items()}
    for step in range(cfg.steps):
        w.grad = b.grad = None
        loss = ad.cross_entropy(ad.linear(x, w, b), labels)
        loss.backward()
        adamw_update(params, {k: p.grad for k, p in params.items()}, moments, step + 1,
                     cfg.lr, cfg.weight_decay)
    return w.data, b.data, mu, sd


def accuracy(features, labels, weight, bias, mu, sd):
    logits = ((features - mu) / sd) @ weight.T + bias
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def linear_probe(encoder, images, labels, num_classes, patch_size, cfg: ProbeConfig | None = None):
    """Train and score a linear classifier on frozen encoder features.

    The encoder is only read; a checksum comparison guards that.
    """
    cfg = cfg or ProbeConfig()
    before = parameter_checksum(encoder)
    feats = pooled_features(encoder, images, patch_size, cfg.chunk).astype(np.float64)
    tr, va = split(len(labels), cfg.val_fraction, cfg.seed)
    labels = np.asarray(labels)
    w, b, mu, sd = fit_linear(feats[tr], labels[tr], num_classes, cfg)
    if parameter_checksum(encoder) != before:
        raise RuntimeError("probe modified the frozen encoder")
    counts = np.bincount(labels[va], minlength=num_classes)
    return ProbeResult(
        train_accuracy=accuracy(feats[tr], labels[tr], w, b, mu, sd),
        val_accuracy=accuracy(feats[va], labels[va], w, b, mu, sd),
        num_classes=num_classes,
        feature_dim=feats.shape[1],
        seed=cfg.seed,
        majority_rate=float(counts.max() / max(len(va), 1)),
    )
