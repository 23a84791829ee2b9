"""Joint training loop: two augmented views per cloud, balanced-transport
pseudo-labels (E-step), and one decoupled-weight-decay adaptive update per
batch (M-step).

Determinism contract: given (config, dataset, seed) the run produces
bit-identical checkpoints on one platform. All randomness flows through a
single Generator whose state is serialized into every checkpoint, so a
resumed run continues the uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import network, objectives, transport
from .errors import (
    CheckpointFormatError,
    ConCluError,
    ConfigError,
    EmptyInputError,
    NumericError,
)
from .geometry import AugmentConfig, make_views
from .network import ModelState, NetworkConfig, init_model
from .objectives import LossBreakdown

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"CCLU"
CHECKPOINT_VERSION = 1

LOSS_MODES = ("joint", "global_only", "local_only")

LOG_HEADER = ["step", "epoch", "lr"] + list(LossBreakdown.CSV_FIELDS)


@dataclass
class TrainConfig:
    """Hyperparameters of the pretraining run."""

    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.7
    lr_decay_every: int = 20
    weight_decay: float = 1e-2
    eta: float = 2e-3
    sinkhorn_epsilon: float = 1e-3
    sinkhorn_iters: int = 20
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    loss_mode: str = "joint"
    checkpoint_every: int = 20

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        for name in ("epochs", "batch_size", "lr", "lr_decay", "lr_decay_every",
                     "sinkhorn_epsilon", "sinkhorn_iters", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.eta < 0:
            raise ConfigError("weight_decay and eta must be >= 0")


def lr_at(epoch, cfg):
    """Step-decay schedule: lr * decay^(epoch // every)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def _attach_cloud_index(exc, index):
    exc.cloud_index = index
    if hasattr(exc, "add_note"):
        exc.add_note(f"while processing cloud {index} of the batch")
    return exc


def forward_batch(state, view_pairs, cfg, update_stats=False,
                  frozen_gammas=None, frozen_z=None):
    """Loss over a batch of (view_a, view_b) cloud pairs.

    Pure function of (state, views, cfg) when ``update_stats`` is false;
    records onto the active tape if one is open. Returns the scalar loss
    tensor and the averaged LossBreakdown.

    ``frozen_gammas`` (per cloud: (gamma_a, gamma_b) arrays) bypasses the
    transport solve, pinning the targets; ``frozen_z`` (per cloud:
    (za, zb) arrays) replaces the live stopped projections with constants.
    Both exist so gradient checks can differentiate exactly the function
    the training step differentiates.
    """
    if not view_pairs:
        raise EmptyInputError("empty batch")
    b = len(view_pairs)
    n_pts = view_pairs[0][0].n
    for va, vb in view_pairs:
        if va.n != n_pts or vb.n != n_pts:
            raise ConfigError("all views in a batch must have the same point count")

    stacked = np.concatenate(
        [v.points for pair in view_pairs for v in pair], axis=0
    )
    feats = network.encode(
        state, stacked, mode="train", points_per_cloud=n_pts, update_stats=update_stats
    )

    do_local = cfg.loss_mode != "global_only"
    do_global = cfg.loss_mode != "local_only"

    s_stack = None
    if do_local:
        logits = network.class_logits(
            state, feats, mode="train", points_per_cloud=n_pts, update_stats=update_stats
        )
        s_stack = objectives.class_probabilities(logits)

    z_rows = q_rows = None
    if do_global:
        pooled = [
            network.global_feature(dc.take_rows(feats, blk * n_pts, (blk + 1) * n_pts))
            for blk in range(2 * b)
        ]
        h = dc.stack_rows(pooled)
        z_rows = network.project_matrix(state, h, mode="train", update_stats=update_stats)
        q_rows = network.predict_matrix(state, z_rows, mode="train", update_stats=update_stats)

    view_states = []
    if do_local:
        costs = []
        for i, pair in enumerate(view_pairs):
            try:
                per_view = []
                for v, cloud in enumerate(pair):
                    blk = 2 * i + v
                    s_view = dc.take_rows(s_stack, blk * n_pts, (blk + 1) * n_pts)
                    protos = objectives.prototypes(cloud.points, s_view)
                    per_view.append((s_view, protos))
                    if frozen_gammas is None:
                        costs.append(
                            transport.cost_matrix(cloud.points, protos.c.values)
                        )
                view_states.append(per_view)
            except ConCluError as exc:
                raise _attach_cloud_index(exc, i)
        if frozen_gammas is not None:
            gammas = [list(pair) for pair in frozen_gammas]
        else:
            gammas = _solve_pseudo_labels(costs, cfg)

    per_cloud_terms = []
    sums = {k: 0.0 for k in ("ce_a", "ce_b", "orth_a", "orth_b", "local", "global_")}
    for i in range(b):
        try:
            if do_local:
                views = [
                    (gammas[i][v],) + view_states[i][v] for v in range(2)
                ]
                local_t, parts = objectives.local_loss(views[0], views[1], eta=cfg.eta)
                per_cloud_terms.append(local_t)
                for k, val in parts.items():
                    sums[k] += val
                sums["local"] += local_t.item()
            if do_global:
                qa, qb = dc.take_row(q_rows, 2 * i), dc.take_row(q_rows, 2 * i + 1)
                if frozen_z is not None:
                    za, zb = dc.as_tensor(frozen_z[i][0]), dc.as_tensor(frozen_z[i][1])
                else:
                    za, zb = dc.take_row(z_rows, 2 * i), dc.take_row(z_rows, 2 * i + 1)
                glob_t = objectives.global_loss(qa, zb, qb, za)
                per_cloud_terms.append(glob_t)
                sums["global_"] += glob_t.item()
        except ConCluError as exc:
            raise _attach_cloud_index(exc, i)

    loss = per_cloud_terms[0]
    for term in per_cloud_terms[1:]:
        loss = dc.add(loss, term)
    loss = dc.scale(loss, 1.0 / b)

    bd = LossBreakdown(
        ce_a=sums["ce_a"] / b,
        ce_b=sums["ce_b"] / b,
        orth_a=sums["orth_a"] / b,
        orth_b=sums["orth_b"] / b,
        local=sums["local"] / b,
        global_=sums["global_"] / b,
        total=(sums["local"] + sums["global_"]) / b,
        eta=cfg.eta,
    )
    if not np.isfinite(bd.total):
        raise NumericError(f"non-finite loss at step {state.step}: {bd}")
    return loss, bd


def _solve_pseudo_labels(costs, cfg):
    """Row-stochastic transport targets for every view in the batch.

    Solves all views' plans in one vectorized call; on a numeric failure,
    re-solves per view to attach the offending cloud index. Rows carry the
    solver residual (columns are exact), so each gamma is row-renormalized
    for the cross-entropy.
    """
    try:
        plans = transport.sinkhorn_batch(
            np.stack(costs), epsilon=cfg.sinkhorn_epsilon, iters=cfg.sinkhorn_iters
        )
    except NumericError:
        plans = []
        for k, d in enumerate(costs):
            try:
                plans.append(
                    transport.sinkhorn(
                        d, epsilon=cfg.sinkhorn_epsilon, iters=cfg.sinkhorn_iters
                    )
                )
            except ConCluError as exc:
                raise _attach_cloud_index(exc, k // 2)
    gammas = []
    for k in range(0, len(plans), 2):
        pair = []
        for plan in (plans[k], plans[k + 1]):
            gamma = transport.pseudo_labels(plan)
            gamma /= np.maximum(gamma.sum(axis=1, keepdims=True), 1e-300)
            pair.append(gamma)
        gammas.append(pair)
    return gammas


def make_batch_views(batch, cfg, rng):
    """Two augmentation draws per cloud, seeds taken from the run generator."""
    seeds = rng.integers(0, 2**63 - 1, len(batch))
    return [make_views(pc, cfg.augment, int(s)) for pc, s in zip(batch, seeds)]


def step_on_views(state, view_pairs, cfg, lr=None):
    """Backward + optimizer update on already-augmented view pairs."""
    if lr is None:
        lr = cfg.lr
    with dc.Tape():
        loss, bd = forward_batch(state, view_pairs, cfg, update_stats=True)
        grads = dc.backward(loss)
    optimizer_update(state, grads, cfg, lr)
    return state, bd


def train_step(state, batch, cfg, rng, lr=None):
    """One fused clustering + contrasting update over a batch of clouds.

    E-step: balanced-transport pseudo-labels per view from the detached
    cost matrix. M-step: one optimizer update on the averaged loss.
    """
    return step_on_views(state, make_batch_views(batch, cfg, rng), cfg, lr)


def optimizer_update(state, grads, cfg, lr=None):
    """Bias-corrected adaptive-moment step with decoupled weight decay.

    Decay is skipped for batch-norm scale/shift parameters. Parameters with
    no recorded gradient (untouched branches) are treated as zero-gradient.
    """
    if lr is None:
        lr = cfg.lr
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in state.params.items():
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.values)
        elif not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
        m = state.opt_m.get(name)
        v = state.opt_v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        state.opt_m[name] = m
        state.opt_v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if cfg.weight_decay > 0 and not name.endswith(("bn_scale", "bn_shift")):
            update = update + cfg.weight_decay * p.values
        p.values = p.values - lr * update
    state.step = t
    state.check_finite()
    return state


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


class _LogWriter:
    """Appends per-step loss rows to a CSV file, flushing on every write."""

    def __init__(self, path):
        self.path = path
        self.rows = []
        self._fh = None
        if path is not None:
            exists = os.path.exists(path) and os.path.getsize(path) > 0
            self._fh = open(path, "a", newline="")
            self._csv = csv.writer(self._fh)
            if not exists:
                self._csv.writerow(LOG_HEADER)
                self._fh.flush()

    def write(self, step, epoch, lr, bd):
        row = [step, epoch, f"{lr:.12g}"] + [f"{v:.12g}" for v in bd.as_row()]
        self.rows.append(row)
        if self._fh is not None:
            self._csv.writerow(row)
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def train(dataset, net_cfg, cfg, log_path=None, checkpoint_dir=None, resume_from=None):
    """Run the full schedule; returns (final state, list of log rows).

    Clouds must be normalized and share a fixed point count (or
    ``cfg.augment.out_points`` must pin one). Checkpoints are written every
    ``cfg.checkpoint_every`` epochs and at the end when ``checkpoint_dir``
    is given; ``resume_from`` restores model, optimizer, RNG, and epoch
    counter so the resumed run matches an uninterrupted one bit-exactly.
    """
    if not dataset:
        raise EmptyInputError("training dataset is empty")
    if resume_from is not None:
        state, rng, start_epoch = load_checkpoint(resume_from)
    else:
        state = init_model(net_cfg)
        rng = np.random.default_rng(cfg.seed)
        start_epoch = 0

    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    log = _LogWriter(log_path)
    step = state.step
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = rng.permutation(len(dataset))
            for chunk in _batches(order, cfg.batch_size):
                batch = [dataset[i] for i in chunk]
                _, bd = train_step(state, batch, cfg, rng, lr=lr)
                step = state.step
                log.write(step, epoch, lr, bd)
            done = epoch + 1
            if checkpoint_dir is not None and (
                done % cfg.checkpoint_every == 0 or done == cfg.epochs
            ):
                save_checkpoint(
                    os.path.join(checkpoint_dir, f"epoch_{done:04d}.ckpt"),
                    state,
                    rng,
                    done,
                )
    finally:
        log.close()
    return state, log.rows


# ---------------------------------------------------------------------------
# checkpoint serialization


def net_cfg_dict(cfg):
    return {
        "encoder_widths": list(cfg.encoder_widths),
        "head_widths": list(cfg.head_widths),
        "proj_hidden": cfg.proj_hidden,
        "proj_out": cfg.proj_out,
        "pred_hidden": cfg.pred_hidden,
        "num_prototypes": cfg.num_prototypes,
        "bn_scope": cfg.bn_scope,
        "seed": cfg.seed,
    }


def _named_tensors(state):
    """Deterministic (name, array) list covering params, stats, moments."""
    items = []
    for name, p in state.params.items():
        items.append((name, p.values))
    for name, st in state.stats.items():
        items.append((f"{name}.run_mean", st.mean))
        items.append((f"{name}.run_var", st.var))
    for name in state.opt_m:
        items.append((f"{name}.opt_m", state.opt_m[name]))
        items.append((f"{name}.opt_v", state.opt_v[name]))
    return items


def save_checkpoint(path, state, rng, epoch):
    """Versioned binary: magic, u32 version, JSON header, named f64 tensors."""
    header = {
        "net_cfg": net_cfg_dict(state.cfg),
        "epoch": int(epoch),
        "step": int(state.step),
        "rng_state": rng.bit_generator.state,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tensors = _named_tensors(state)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Parse a checkpoint into (ModelState, Generator, epoch).

    The file is validated fully before any state object is returned, so a
    truncated or mismatched file never yields partial state.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        header = json.loads(_read_exact(fh, blob_len, "header"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = _read_exact(fh, 8 * size, f"tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after last tensor")

    net_cfg = NetworkConfig(**header["net_cfg"])
    state = init_model(net_cfg)
    for name in state.params:
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint missing parameter {name}")
        state.params[name] = dc.Tensor(tensors[name], requires_grad=True)
    for name, st in state.stats.items():
        st.mean = tensors[f"{name}.run_mean"].copy()
        st.var = tensors[f"{name}.run_var"].copy()
    for name in state.params:
        if f"{name}.opt_m" in tensors:
            state.opt_m[name] = tensors[f"{name}.opt_m"].copy()
            state.opt_v[name] = tensors[f"{name}.opt_v"].copy()
    state.step = header["step"]

    rng = np.random.default_rng(0)
    rng_state = header["rng_state"]
    rng_state["state"] = {k: int(v) for k, v in rng_state["state"].items()}
    rng.bit_generator.state = rng_state
    return state, rng, header["epoch"]
