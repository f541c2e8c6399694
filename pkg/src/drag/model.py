"""The assembled pipeline: backbone -> CGL -> region maps -> attention -> GCN -> classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import correlation as corr
from . import regions
from . import tensor as T
from .backbone import (
    BackboneConfig,
    backbone_classifier_head,
    backbone_forward,
    global_channel_mean,
    init_backbone,
    init_head,
)
from .errors import ContractError, FormatError
from .tensor import Tensor

MODES = ("full", "fixed_correlation", "no_gcn", "frozen_cgl")
GROUPS = ("backbone", "head", "cgl", "gcn")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_regions: int = 8
    cgl_hidden: int = 64
    d_k: int = 16

    def __post_init__(self):
        if self.n_regions < 1 or self.n_regions > self.channels:
            raise ContractError(f"need 1 <= N <= C, got N={self.n_regions}, C={self.channels}")

    @property
    def channels(self):
        return self.backbone.channels

    @property
    def side(self):
        return self.backbone.side

    @property
    def node_dim(self):
        return self.side * self.side


@dataclass
class Outputs:
    F_b: Tensor
    F_c: Tensor
    cr_prime: Tensor
    F_w: Tensor
    A: Tensor | None
    F_p: Tensor | None
    probs: Tensor


def check_mode(mode):
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


class DRAG:
    """Parameter container plus forward passes for every ablation mode."""

    def __init__(self, config: ModelConfig, seed=0, mode="full"):
        self.config = config
        self.mode = check_mode(mode)
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
        c, n, d = config.channels, config.n_regions, config.node_dim
        self.params = {}
        self.params.update(init_backbone(config.backbone, streams[0]))
        self.params.update(init_head(config.backbone, streams[1]))
        self.params.update(regions.init_cgl(c, n, config.cgl_hidden, streams[2]))
        self.params.update(corr.init_attention(d, config.d_k, n, streams[3]))
        self.params.update(corr.init_gcn(d, streams[3]))
        self.params.update(corr.init_classifier(n, d, streams[3]))

    def group(self, name) -> dict:
        if name not in GROUPS:
            raise ContractError(f"unknown parameter group {name!r}")
        return {k: v for k, v in self.params.items() if k.startswith(name + ".")}

    def features(self, images) -> Tensor:
        return backbone_forward(images, self.params, self.config.backbone)

    def pretrain_probs(self, images) -> Tensor:
        return backbone_classifier_head(self.features(images), self.params)

    def forward(self, images, mode=None) -> Outputs:
        mode = check_mode(mode or self.mode)
        F_b = self.features(images)
        F_c = global_channel_mean(F_b)
        cr_prime = regions.cgl_forward(F_b, self.params)
        F_w = regions.region_features(F_b, cr_prime)
        if mode == "no_gcn":
            probs = corr.classify(F_c, F_w, self.params)
            return Outputs(F_b, F_c, cr_prime, F_w, None, None, probs)
        if mode == "fixed_correlation":
            A = corr.fixed_correlation(F_w.shape[0], self.config.n_regions)
        else:
            A = corr.attention_correlation(F_w, self.params)
        F_p = corr.propagate(F_w, A, self.params)
        probs = corr.classify(F_c, F_p, self.params)
        return Outputs(F_b, F_c, cr_prime, F_w, A, F_p, probs)

    def predict_proba(self, images, batch_size=256, mode=None) -> np.ndarray:
        """Private-class probability per image, computed without building graphs."""
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i : i + batch_size], mode).probs.data[:, 1])
        return np.concatenate(out) if out else np.zeros(0)

    # -- state -------------------------------------------------------------

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = sorted(set(self.params) - set(state))
        if missing:
            raise FormatError(f"checkpoint lacks tensor {missing[0]!r}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise FormatError(f"tensor {name!r}: checkpoint shape {value.shape} != model shape {p.shape}")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=np.float64)
            p.grad = None


def ablation_forward(mode, model: DRAG, images) -> Tensor:
    """Class probabilities under one of the ablation modes."""
    return model.forward(images, check_mode(mode)).probs


def cls_loss(probs, labels, eps=regions.EPS) -> Tensor:
    """Binary cross-entropy on the private-class probability, batch-mean."""
    probs = T.as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    p = probs[:, 1]
    terms = Tensor(y) * T.log(p + eps) + Tensor(1.0 - y) * T.log((1.0 + eps) - p)
    return T.scale(T.reduce_sum(terms), -1.0 / len(y))


def total_loss(out: Outputs, labels) -> Tensor:
    """Classification loss plus the two region losses."""
    return cls_loss(out.probs, labels) + regions.dis_loss(out.F_w) + regions.div_loss(out.F_w)
