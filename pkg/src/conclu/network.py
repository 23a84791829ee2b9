"""Shared per-point encoder, classification head, projector, and predictor.

All four networks are stacks of (linear, batch-norm, LeakyReLU) blocks built
from diffcore primitives. The encoder and head operate point-wise with
shared weights, so they are permutation-equivariant by construction; the
global feature is the columnwise max over points. Batch norm in the
per-point stacks normalizes over the N points of each cloud by default
(``bn_scope="cloud"``); setting ``bn_scope="batch"`` normalizes over all
points of all clouds passed in one call instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ShapeError

BN_EPS = 1e-5


@dataclass
class NetworkConfig:
    """Widths and sizes for the four sub-networks.

    Desk-scale defaults; paper-scale widths (1024/256 projector, 512
    predictor) remain reachable through these fields.
    """

    encoder_widths: tuple = (3, 64, 128, 256)
    head_widths: Optional[tuple] = None  # defaults to (256, 128, num_prototypes)
    proj_hidden: int = 128
    proj_out: int = 64
    pred_hidden: int = 32
    num_prototypes: int = 64
    bn_scope: str = "cloud"  # "cloud": per-cloud point stats; "batch": all rows
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder_widths, list):
            self.encoder_widths = tuple(self.encoder_widths)
        if isinstance(self.head_widths, list):
            self.head_widths = tuple(self.head_widths)
        if self.head_widths is None:
            self.head_widths = (256, 128, self.num_prototypes)
        if len(self.encoder_widths) < 2 or self.encoder_widths[0] != 3:
            raise ConfigError(
                f"encoder_widths must start at 3, got {self.encoder_widths}"
            )
        if len(self.head_widths) != 3:
            raise ConfigError(
                f"classification head needs exactly 3 layers, got {self.head_widths}"
            )
        if self.head_widths[-1] != self.num_prototypes:
            raise ConfigError(
                f"head output {self.head_widths[-1]} != num_prototypes "
                f"{self.num_prototypes}"
            )
        all_widths = (
            list(self.encoder_widths)
            + list(self.head_widths)
            + [self.proj_hidden, self.proj_out, self.pred_hidden]
        )
        if any(w < 1 for w in all_widths):
            raise ConfigError(f"all widths must be positive, got {all_widths}")
        if self.bn_scope not in ("cloud", "batch"):
            raise ConfigError(f"bn_scope must be 'cloud' or 'batch', got {self.bn_scope}")

    @property
    def feature_dim(self):
        return self.encoder_widths[-1]


def _layer_dims(cfg):
    """(name, in_dim, out_dim, has_bn, has_act) for every linear layer."""
    layers = []
    ws = cfg.encoder_widths
    for i in range(len(ws) - 1):
        layers.append((f"enc{i}", ws[i], ws[i + 1], True, True))
    hin = cfg.feature_dim
    for i, hout in enumerate(cfg.head_widths):
        last = i == len(cfg.head_widths) - 1
        layers.append((f"head{i}", hin, hout, True, not last))
        hin = hout
    pdims = (cfg.feature_dim, cfg.proj_hidden, cfg.proj_hidden, cfg.proj_out)
    for i in range(3):
        last = i == 2
        layers.append((f"proj{i}", pdims[i], pdims[i + 1], True, not last))
    layers.append(("pred0", cfg.proj_out, cfg.pred_hidden, True, True))
    layers.append(("pred1", cfg.pred_hidden, cfg.proj_out, False, False))
    return layers


class ModelState:
    """All learnable tensors plus batch-norm and optimizer state.

    ``params`` maps layer-qualified names to requires-grad tensors in a
    deterministic insertion order; ``stats`` holds the running batch-norm
    statistics; ``opt_m``/``opt_v`` are the optimizer's first and second
    moments, created lazily on the first update.
    """

    def __init__(self, cfg, params, stats):
        self.cfg = cfg
        self.params = params
        self.stats = stats
        self.opt_m = {}
        self.opt_v = {}
        self.step = 0

    def parameter_names(self):
        return list(self.params)

    def parameter_count(self):
        return sum(p.values.size for p in self.params.values())

    def check_finite(self):
        for name, p in self.params.items():
            if not np.isfinite(p.values).all():
                raise ShapeError(f"parameter {name} became non-finite")


def init_model(cfg):
    """Fan-in uniform weights, zero biases, identity batch-norm affine."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    stats = {}
    for name, din, dout, has_bn, _ in _layer_dims(cfg):
        bound = 1.0 / np.sqrt(din)
        params[f"{name}.w"] = dc.Tensor(
            rng.uniform(-bound, bound, (din, dout)), requires_grad=True
        )
        params[f"{name}.b"] = dc.Tensor(np.zeros(dout), requires_grad=True)
        if has_bn:
            params[f"{name}.bn_scale"] = dc.Tensor(np.ones(dout), requires_grad=True)
            params[f"{name}.bn_shift"] = dc.Tensor(np.zeros(dout), requires_grad=True)
            stats[name] = dc.RunningStats(dout)
    return ModelState(cfg, params, stats)


def _block(state, name, x, mode, group_size, update_stats, activate):
    p = state.params
    out = dc.matmul(x, p[f"{name}.w"])
    if f"{name}.bn_scale" in p:
        # bias is absorbed by the batch-norm shift: with zero init it gets
        # exactly zero gradient through normalization and never moves, so
        # applying it would add a constant 0 per column
        out = dc.batch_norm(
            out,
            p[f"{name}.bn_scale"],
            p[f"{name}.bn_shift"],
            eps=BN_EPS,
            mode=mode,
            stats=state.stats[name],
            update_running=update_stats,
            group_size=group_size,
        )
    else:
        out = dc.add(out, p[f"{name}.b"])
    if activate:
        out = dc.leaky_relu(out)
    return out


def _point_group_size(state, n_rows, points_per_cloud, mode):
    if mode == "eval":
        return None
    if state.cfg.bn_scope == "batch":
        return n_rows
    return points_per_cloud


def encode(state, points, mode="train", points_per_cloud=None, update_stats=False):
    """Per-point features for one cloud or a stack of equally sized clouds.

    ``points`` is an (R, 3) array (or tensor); with ``points_per_cloud``
    set, rows are contiguous blocks of that many points per cloud and
    batch-norm statistics are computed per block (bn_scope "cloud") or over
    all rows (bn_scope "batch").
    """
    x = dc.as_tensor(points)
    if x.values.ndim != 2 or x.values.shape[1] != 3:
        raise ShapeError(f"encoder input must be (N,3), got {x.values.shape}")
    n_rows = x.values.shape[0]
    ppc = n_rows if points_per_cloud is None else int(points_per_cloud)
    gs = _point_group_size(state, n_rows, ppc, mode)
    for i in range(len(state.cfg.encoder_widths) - 1):
        x = _block(state, f"enc{i}", x, mode, gs, update_stats, activate=True)
    return x


def class_logits(state, features, mode="train", points_per_cloud=None, update_stats=False):
    """Per-point prototype logits from point-wise features."""
    x = dc.as_tensor(features)
    if x.values.ndim != 2 or x.values.shape[1] != state.cfg.feature_dim:
        raise ShapeError(
            f"head input must be (N,{state.cfg.feature_dim}), got {x.values.shape}"
        )
    n_rows = x.values.shape[0]
    ppc = n_rows if points_per_cloud is None else int(points_per_cloud)
    gs = _point_group_size(state, n_rows, ppc, mode)
    for i in range(3):
        x = _block(state, f"head{i}", x, mode, gs, update_stats, activate=i < 2)
    return x


def global_feature(features):
    """Permutation-invariant cloud summary: columnwise max over points."""
    return dc.max_pool_rows(features)


def project_matrix(state, h, mode="train", update_stats=False):
    """Projector applied to a (k, d) stack of global features.

    Train-mode batch norm normalizes over the k stacked vectors, so the
    trainer passes all views of the batch in one call.
    """
    x = dc.as_tensor(h)
    for i in range(3):
        x = _block(state, f"proj{i}", x, mode, None, update_stats, activate=i < 2)
    return x


def predict_matrix(state, z, mode="train", update_stats=False):
    """Predictor applied to a (k, proj_out) stack of projections."""
    x = dc.as_tensor(z)
    x = _block(state, "pred0", x, mode, None, update_stats, activate=True)
    return _block(state, "pred1", x, mode, None, update_stats, activate=False)


def project(state, h, mode="eval", update_stats=False):
    """Projection of a single global feature vector."""
    h = dc.as_tensor(h)
    if h.values.ndim != 1:
        raise ShapeError(f"project expects a vector, got shape {h.values.shape}")
    out = project_matrix(state, dc.stack_rows([h]), mode=mode, update_stats=update_stats)
    return dc.take_row(out, 0)


def predict(state, z, mode="eval", update_stats=False):
    """Prediction from a single projection vector."""
    z = dc.as_tensor(z)
    if z.values.ndim != 1:
        raise ShapeError(f"predict expects a vector, got shape {z.values.shape}")
    out = predict_matrix(state, dc.stack_rows([z]), mode=mode, update_stats=update_stats)
    return dc.take_row(out, 0)
