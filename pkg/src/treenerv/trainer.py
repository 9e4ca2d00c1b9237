"""Warm-up then tree-growing training loop."""

from __future__ import annotations

import bisect
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, mse_loss
from .codec import mse_to_psnr, prune_global, quantize_affine, video_psnr
from .decoder import Decoder, DecoderConfig
from .model import TreeNerv
from .tree import TreeGrid

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Gop",
    "GopStats",
    "Adam",
    "partition_gops",
    "select_topk",
    "grow",
    "cosine_lr",
    "initial_node_count",
    "FitResult",
    "fit",
    "evaluate",
    "TuneConfig",
    "tune_for_compression",
]

LOG_HEADER = "epoch,lr,loss,psnr,nodes"


@dataclass
class TrainConfig:
    epochs: int = 300
    warmup_epochs: int = 40
    growth_interval: int = 10
    growth_stages: int = 4
    topk: int = 10
    init_ratio: float = 0.1
    init_nodes: Optional[int] = None
    lr0: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_frame_mask: Optional[Sequence[bool]] = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.topk < 1:
            raise ValueError(f"topk must be >= 1, got {self.topk}")
        if min(self.warmup_epochs, self.growth_interval, self.growth_stages) < 0:
            raise ValueError("warmup_epochs, growth_interval and growth_stages must be non-negative")
        if self.growth_stages and self.growth_interval < 1:
            raise ValueError("growth_interval must be >= 1 when growing")
        if self.growth_stages and self.warmup_epochs < 1:
            # growth ranks GOPs by the losses of a finished epoch
            raise ValueError("warmup_epochs must be >= 1 when growing")
        if self.warmup_epochs + self.growth_stages * self.growth_interval > self.epochs:
            raise ValueError(
                f"warmup ({self.warmup_epochs}) + {self.growth_stages} stages x {self.growth_interval} "
                f"epochs exceeds the {self.epochs}-epoch budget"
            )
        if not 0 < self.init_ratio <= 1:
            raise ValueError(f"init_ratio must be in (0, 1], got {self.init_ratio}")

    def growth_epochs(self) -> list[int]:
        """Epoch counts after which a growth stage runs (counted from warm-up end)."""
        return [self.warmup_epochs + s * self.growth_interval for s in range(self.growth_stages)]

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["train_frame_mask"] is not None:
            d["train_frame_mask"] = [bool(b) for b in d["train_frame_mask"]]
        return d


def initial_node_count(length: int, config: TrainConfig) -> int:
    if config.init_nodes is not None:
        return int(config.init_nodes)
    return max(2, int(round(config.init_ratio * length)))


# -- GOP bookkeeping ----------------------------------------------------------


@dataclass
class Gop:
    lower: float
    upper: float
    frames: list = field(default_factory=list)
    loss_sum: float = 0.0
    count: int = 0

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.count if self.count else 0.0


@dataclass
class GopStats:
    gops: list

    def __len__(self) -> int:
        return len(self.gops)

    def locate(self, t: float) -> int:
        lowers = [g.lower for g in self.gops]
        i = bisect.bisect_right(lowers, t) - 1
        return min(max(i, 0), len(self.gops) - 1)

    def add(self, t: float, loss: float) -> None:
        g = self.gops[self.locate(t)]
        g.loss_sum += loss
        g.count += 1

    def reset(self) -> None:
        for g in self.gops:
            g.loss_sum = 0.0
            g.count = 0

    @property
    def mean_losses(self) -> list[float]:
        return [g.mean_loss for g in self.gops]

    @property
    def frame_total(self) -> int:
        return sum(len(g.frames) for g in self.gops)


def partition_gops(grid: TreeGrid, frame_indices: Sequence[int]) -> GopStats:
    """Split frames into ``[k_j, k_{j+1})`` intervals; the last one is closed."""
    keys = grid.in_order_keys()
    if len(keys) < 2:
        raise ValueError("partitioning needs at least two keys")
    gops = [Gop(a, b) for a, b in zip(keys[:-1], keys[1:])]
    for t in frame_indices:
        if not keys[0] <= t <= keys[-1]:
            raise AssertionError(f"frame {t} outside key range [{keys[0]}, {keys[-1]}]")
        i = min(bisect.bisect_right(keys, t) - 1, len(gops) - 1)
        gops[i].frames.append(t)
    return GopStats(gops)


def select_topk(stats: GopStats, k: int) -> list[Gop]:
    """The ``k`` GOPs with the largest mean loss; ties go to earlier intervals."""
    if k > len(stats):
        raise ValueError(f"k={k} exceeds the {len(stats)} available GOPs")
    order = sorted(range(len(stats)), key=lambda i: (-stats.gops[i].mean_loss, stats.gops[i].lower))
    return [stats.gops[i] for i in sorted(order[:k])]


def grow(grid: TreeGrid, stats: GopStats, k: int, optimizer: Optional["Adam"] = None) -> list[float]:
    """Split each of the top-``k`` GOPs at its midpoint; returns the new keys."""
    new_keys = []
    for gop in select_topk(stats, k):
        k_in = grid.midpoint_insert(gop.lower, gop.upper)
        new_keys.append(k_in)
        if optimizer is not None:
            optimizer.reset(grid.find(k_in).value)
    return new_keys


def cosine_lr(epoch: float, config: TrainConfig) -> float:
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with per-tensor step counts, so sparsely touched node values get
    correct bias correction."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[int, list] = {}

    def reset(self, p: Tensor) -> None:
        self.state[id(p)] = [0, np.zeros(p.shape), np.zeros(p.shape)]

    def step(self, params: Sequence[Tensor], lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for p in params:
            if p.grad is None:
                continue
            st = self.state.get(id(p))
            if st is None:
                self.reset(p)
                st = self.state[id(p)]
            st[0] += 1
            t, m, v = st
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None


# -- fitting ------------------------------------------------------------------


@dataclass
class FitResult:
    model: TreeNerv
    log_rows: list
    grow_events: list
    node_trace: list
    initial_keys: list
    final_psnr: float
    config: TrainConfig

    @property
    def grown_keys(self) -> list[float]:
        return [k for _, keys in self.grow_events for k in keys]

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write(
            f"# optimizer=adam beta1={self.config.beta1} beta2={self.config.beta2} eps={self.config.eps} "
            "(substitutes adan)\n"
        )
        buf.write(LOG_HEADER + "\n")
        events = {e: keys for e, keys in self.grow_events}
        for row in self.log_rows:
            buf.write(f"{row['epoch']},{row['lr']!r},{row['loss']!r},{row['psnr']!r},{row['nodes']}\n")
            if row["epoch"] in events:
                keys = ",".join(repr(k) for k in events[row["epoch"]])
                buf.write(f"# grow epoch={row['epoch']} keys=[{keys}]\n")
        return buf.getvalue()


def _spawn_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def evaluate(model: TreeNerv, frames: Mapping[int, np.ndarray]) -> tuple[float, dict]:
    """Mean per-frame PSNR and the per-frame PSNR table."""
    per = {}
    for t in sorted(frames):
        pred = model.render(float(t))
        per[t] = video_psnr([pred], [frames[t]])
    return float(np.mean(list(per.values()))), per


def fit(
    frames: Mapping[int, np.ndarray],
    length: int,
    decoder_config: DecoderConfig,
    config: Optional[TrainConfig] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> FitResult:
    """Train a tree-grid model on ``frames`` (index -> C x H x W array in [0, 1]).

    Only the indices present in ``frames`` (after the optional training mask)
    are ever read.
    """
    config = config or TrainConfig()
    config.validate()
    if length < 2:
        raise ValueError("video must have at least 2 frames")
    indices = sorted(frames)
    if config.train_frame_mask is not None:
        mask = list(config.train_frame_mask)
        if len(mask) != length:
            raise ValueError(f"train_frame_mask has {len(mask)} entries for a {length}-frame video")
        indices = [i for i in indices if mask[i]]
    if not indices:
        raise ValueError("no training frames")
    shape = np.asarray(frames[indices[0]]).shape
    c, hh, ww = shape
    if decoder_config.output_size != (hh, ww) or decoder_config.output_channels != c:
        raise ValueError(f"decoder renders {decoder_config.output_channels}x{decoder_config.output_size}, frames are {shape}")
    targets = {}
    for i in indices:
        arr = np.asarray(frames[i], dtype=np.float32)
        if arr.shape != shape:
            raise ValueError(f"frame {i} has shape {arr.shape}, expected {shape}")
        targets[i] = arr

    n_init = initial_node_count(length, config)
    grid_seed, dec_seed, shuffle_seed = _spawn_seeds(config.seed, 3)
    grid = TreeGrid.from_uniform(length, n_init, decoder_config.input_shape, seed=grid_seed)
    decoder = Decoder.build(decoder_config, seed=dec_seed)
    model = TreeNerv(grid, decoder)
    rng = np.random.default_rng(shuffle_seed)
    opt = Adam(config.beta1, config.beta2, config.eps)
    dec_params = decoder.parameters()

    stats = partition_gops(grid, indices)
    growth_at = set(config.growth_epochs())
    rows, events = [], []
    trace = [grid.node_count]
    initial_keys = grid.in_order_keys()

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        stats.reset()
        losses, psnrs = [], []
        for t in rng.permutation(indices).tolist():
            with Tape() as tape:
                bounds = grid.query_bounds(float(t))
                pred = decoder.forward(grid.time_embedding(float(t)))
                loss = mse_loss(pred, targets[t])
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}, frame {t}")
            tape.backward(loss)
            touched = [bounds.lower] if bounds.exact else [bounds.lower, bounds.upper]
            opt.step(dec_params + touched, lr)
            stats.add(float(t), value)
            losses.append(value)
            psnrs.append(mse_to_psnr(value))
        done = epoch + 1
        row = {"epoch": done, "lr": lr, "loss": float(np.mean(losses)), "psnr": float(np.mean(psnrs)),
               "nodes": grid.node_count}
        if done in growth_at:
            k = min(config.topk, len(stats))
            if k < config.topk:
                log.info("topk %d clipped to %d available GOPs", config.topk, k)
            new_keys = grow(grid, stats, k, opt)
            report = grid.validate()
            if not report:
                raise AssertionError(f"tree invariant broken after growth: {report.message}")
            events.append((done, new_keys))
            stats = partition_gops(grid, indices)
            if stats.frame_total != len(indices):
                raise AssertionError("GOP partition lost frames")
            trace.append(grid.node_count)
            row["nodes"] = grid.node_count
            log.info("epoch %d: grew %s -> %d nodes", done, new_keys, grid.node_count)
        rows.append(row)
        log.debug("epoch %d lr=%.5f loss=%.6f psnr=%.2f", done, lr, row["loss"], row["psnr"])
        if on_epoch is not None:
            on_epoch(row)

    final_psnr, _ = evaluate(model, targets)
    return FitResult(model, rows, events, trace, initial_keys, final_psnr, config)


# -- compression-aware fine-tuning --------------------------------------------


@dataclass
class TuneConfig:
    """Schedule for :func:`tune_for_compression`.

    ``prune_epochs`` retrain the surviving weights after pruning. Then each
    decoder tensor, head first, is snapped to its quantization grid and frozen,
    and the tensors still in float (plus the node values) train for
    ``quant_epochs`` to absorb the rounding error.
    """

    prune_epochs: int = 20
    prune_lr: float = 1e-3
    quant_epochs: int = 5
    quant_lr: float = 3e-4
    seed: int = 0

    def validate(self) -> None:
        if self.prune_epochs < 0 or self.quant_epochs < 0:
            raise ValueError("tuning epochs must be >= 0")
        if self.prune_lr <= 0 or self.quant_lr <= 0:
            raise ValueError("tuning learning rates must be > 0")


def _tune_epochs(model, targets, params, keep, epochs, lr0, seed) -> None:
    if epochs == 0:
        return
    opt = Adam()
    rng = np.random.default_rng(seed)
    grid, decoder = model.grid, model.decoder
    every = decoder.parameters()
    for epoch in range(epochs):
        lr = lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        for t in rng.permutation(sorted(targets)).tolist():
            with Tape() as tape:
                bounds = grid.query_bounds(float(t))
                loss = mse_loss(decoder.forward(grid.time_embedding(float(t))), targets[t])
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError(f"non-finite loss while tuning, frame {t}")
            tape.backward(loss)
            touched = [bounds.lower] if bounds.exact else [bounds.lower, bounds.upper]
            opt.step(list(params) + touched, lr)
            for p in every:
                p.grad = None
                if id(p) in keep:
                    p.data[~keep[id(p)]] = 0.0


def tune_for_compression(
    model: TreeNerv,
    frames: Mapping[int, np.ndarray],
    prune_fraction: float = 0.1,
    bits: int = 8,
    config: Optional[TuneConfig] = None,
) -> TreeNerv:
    """Return a copy of ``model`` retrained so that ``compress(copy,
    prune_fraction, bits)`` loses little PSNR.

    The copy's pruned weights are exactly zero and every decoder tensor already
    sits on its ``bits``-bit grid, so compressing it only rounds the node values.
    ``model`` itself is untouched.
    """
    config = config or TuneConfig()
    config.validate()
    targets = {int(t): np.asarray(f, dtype=np.float32) for t, f in frames.items()}
    if not targets:
        raise ValueError("no frames to tune on")
    mask, decoder = prune_global(model.decoder, prune_fraction)
    items = [(n.key, Tensor(n.value.data.copy(), requires_grad=True)) for n in model.grid.preorder()]
    tuned = TreeNerv(TreeGrid.from_preorder(items, model.grid.value_shape, model.grid.length), decoder)

    pruned = mask.to_bool() if mask.runs else np.zeros(mask.total, dtype=bool)
    keep, pos = {}, 0
    for w in decoder.weight_tensors():
        keep[id(w)] = ~pruned[pos:pos + w.size].reshape(w.shape)
        pos += w.size
    params = decoder.parameters()
    _tune_epochs(tuned, targets, params, keep, config.prune_epochs, config.prune_lr, config.seed)

    # Output side first: tensors nearer the input stay in float longer and
    # can keep compensating.
    seeds = _spawn_seeds(config.seed, len(params))
    for i in reversed(range(len(params))):
        p = params[i]
        sel = keep.get(id(p), np.ones(p.shape, dtype=bool))
        snapped = np.zeros_like(p.data)
        if sel.any():
            snapped[sel] = quantize_affine(p.data[sel], bits).dequantize()
        p.data = snapped
        _tune_epochs(tuned, targets, params[:i], keep, config.quant_epochs, config.quant_lr, seeds[i])
    log.info("tuned for %.0f%% pruning and %d-bit quantization", 100 * prune_fraction, bits)
    return tuned
