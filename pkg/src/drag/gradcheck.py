"""Finite-difference check of the whole pipeline on a small fixed instance."""

from __future__ import annotations

import time

import numpy as np

from . import regions
from . import tensor as T
from .model import DRAG, cls_loss

TOLERANCE = 1e-4
STEP = 1e-4


def pipeline_instance(cfg):
    """Model, images and labels for the check, all fixed by ``cfg.seed``."""
    mc = cfg.model_config()
    model = DRAG(mc, seed=cfg.seed, mode=cfg.mode)
    rng = np.random.default_rng([cfg.seed, 1])
    side = mc.backbone.input_size
    images = rng.uniform(0.0, 1.0, (cfg.gradcheck_batch, mc.backbone.input_channels, side, side))
    labels = np.arange(cfg.gradcheck_batch) % 2
    return model, images, labels


def pipeline_errors(cfg):
    """``({param: worst relative error}, seconds)`` for the total training loss."""
    model, images, labels = pipeline_instance(cfg)

    def f():
        out = model.forward(images, cfg.mode)
        return cls_loss(out.probs, labels), regions.dis_loss(out.F_w), regions.div_loss(out.F_w)

    t0 = time.perf_counter()
    errs = T.gradient_errors(f, model.params, eps=STEP, max_entries=cfg.gradcheck_max_entries or None, seed=cfg.seed)
    return errs, time.perf_counter() - t0
