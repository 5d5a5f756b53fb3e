"""End-to-end pipeline: encode, match, decode, plus the training loop.

Processing policy per frame: memorized frames run dense under the mixed
strategy so the features other frames reuse or match against stay full
quality; query-only frames run sparse. The first frame's dense pass runs
the whole network (including a throwaway decode) so every gated layer has
cached state before any sparse pass needs it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from . import matching
from .flops import FlopCounter, SparsityReport
from .gating import POLICY_COMPUTE
from .losses import (
    LossConfig,
    ScheduleState,
    bootstrap_fraction,
    bootstrapped_ce,
    global_sparse_loss,
    layer_sparse_loss,
    relax_bounds,
    scalar,
    total_loss,
)
from .nets import InferCtx, Model, TrainCtx, run_block
from .tensor import softmax_raw
from .tensorio import read_tensor, write_tensor
from .validation import VideoSequence, check_binary_mask, check_video_sequence

STRATEGIES = ("fully", "semi-mixed", "mixed")
VARIANTS = ("triple", "static", "residual", "dense")


@dataclass
class PipelineConfig:
    stage_channels: Tuple[int, int, int] = (8, 16, 32)
    key_channels: int = 8
    value_channels: int = 32
    variant: str = "triple"
    strategy: str = "mixed"
    sparsify_memory_encoder: bool = False
    memory_interval: int = 5
    tau: float = 1.0
    seed: int = 0
    iterations: int = 2000
    lr_peak: float = 2e-3
    lr_floor: float = 1e-6
    warmup_frac: float = 0.05
    cosine_start_frac: float = 0.2
    weight_decay: float = 0.05
    dtype: str = "float64"
    clip_max_gap: int = 5
    force_policy: Optional[int] = None
    corrupt_memory_at: int = 0  # 1-based frame number, 0 disables
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.memory_interval < 1:
            raise ValueError("memory_interval must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def arch(self) -> dict:
        return {
            "stage_channels": tuple(self.stage_channels),
            "key_channels": self.key_channels,
            "value_channels": self.value_channels,
            "variant": self.variant,
            "tau": self.tau,
            "dtype": self.dtype,
        }


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the last good weights."""

    def __init__(self, iteration: int, weights: Dict[str, np.ndarray], log_rows: list):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.weights = weights
        self.log_rows = log_rows


def frame_processing(strategy: str, variant: str, role: str, frame_no: int) -> str:
    if variant == "dense" or frame_no == 1:
        return "dense"
    if strategy == "mixed":
        return "dense" if role == "memory" else "sparse"
    # semi-mixed forces only the annotated first frame dense; fully only the
    # very first frame, which has no previous state either way
    return "sparse"


def _assert_frame_policy(strategy, variant, role, frame_no, processing):
    if variant == "dense":
        assert processing == "dense"
        return
    if strategy == "mixed":
        assert (role == "memory") == (processing == "dense")
    elif strategy == "semi-mixed":
        assert (frame_no == 1) == (processing == "dense")
    else:
        assert (frame_no == 1) == (processing == "dense")


def _memory_encoder_processing(cfg: PipelineConfig, first_memory: bool) -> str:
    if cfg.variant == "dense" or cfg.strategy == "mixed" or first_memory:
        return "dense"
    return "sparse" if cfg.sparsify_memory_encoder else "dense"


# ---------------------------------------------------------------------------
# forward passes, written once against the ctx protocol


def encode_query(ctx, model: Model, frame) -> dict:
    x = ctx.act(ctx.layer(model.q_stem, frame))
    f4 = run_block(ctx, model.q_blocks[0], x)
    f8 = run_block(ctx, model.q_blocks[1], f4)
    f16 = run_block(ctx, model.q_blocks[2], f8)
    key = ctx.layer(model.q_key, f16)
    value = ctx.layer(model.q_value, f16)
    shp = key.shape if not isinstance(key, ag.Node) else key.value.shape
    spatial = shp[1] * shp[2]
    return {
        "f4": f4,
        "f8": f8,
        "f16": f16,
        "key2d": ctx.reshape(key, (model.key_channels, spatial)),
        "value2d": ctx.reshape(value, (model.value_channels, spatial)),
    }


def encode_memory(ctx, model: Model, frame_with_mask, f16_query):
    x = ctx.act(ctx.layer(model.m_stem, frame_with_mask))
    for blk in model.m_blocks:
        x = run_block(ctx, blk, x)
    fused = ctx.concat(x, f16_query, axis=0)
    for blk in model.m_fuse:
        fused = run_block(ctx, blk, fused)
    shp = fused.shape if not isinstance(fused, ag.Node) else fused.value.shape
    return ctx.reshape(fused, (model.value_channels, shp[1] * shp[2]))


def decode(ctx, model: Model, readout_2d, f8, f4, h: int, w: int):
    x = ctx.reshape(readout_2d, (2 * model.value_channels, h // 16, w // 16))
    x = ctx.upsample(x, 2)
    x = ctx.concat(x, f8, axis=0)
    x = run_block(ctx, model.d_blocks[0], x)
    x = ctx.upsample(x, 2)
    x = ctx.concat(x, f4, axis=0)
    x = run_block(ctx, model.d_blocks[1], x)
    logits = ctx.layer(model.d_head, x)
    return ctx.upsample(logits, 4)


def predict_frame(ctx, model: Model, frame, bank_keys, bank_values, h: int, w: int):
    q = encode_query(ctx, model, frame)
    s = ctx.similarity(q["key2d"], bank_keys)
    ro = ctx.readout(q["value2d"], bank_values, s)
    logits = decode(ctx, model, ro, q["f8"], q["f4"], h, w)
    return logits, q


# ---------------------------------------------------------------------------
# inference


def segment_video(
    model: Model,
    seq: VideoSequence,
    cfg: PipelineConfig,
    dump_sink: Optional[Callable] = None,
) -> Tuple[List[np.ndarray], SparsityReport]:
    """Propagate the first frame's mask through the sequence.

    Returns per-frame masks (the first one is the given ground truth) and
    the aggregated sparsity/FLOPs report.
    """
    check_video_sequence(seq)
    h, w = seq.resolution
    spatial = (h // 16) * (w // 16)
    dtype = model.dtype

    model.reset_states()
    model.set_force_policy(cfg.force_policy)
    counter = FlopCounter()
    ctx = InferCtx(counter, mask_sink=dump_sink)
    bank = matching.MemoryBank(model.key_channels, model.value_channels, spatial)
    gt0 = check_binary_mask(seq.gt_masks[0])
    masks: List[np.ndarray] = [gt0.copy()]

    counter.begin_frame("memory", "dense")
    ctx.processing = "dense"
    ctx.frame_index = 0
    x0 = seq.frames[0].data.astype(dtype)
    q = encode_query(ctx, model, x0)
    x4 = np.concatenate([x0, gt0[None].astype(dtype)], axis=0)
    v = encode_memory(ctx, model, x4, q["f16"])
    bank.append(q["key2d"], v)
    # throwaway decode: primes the decoder's cached state for sparse frames
    s = ctx.similarity(q["key2d"], bank.keys)
    ro = ctx.readout(q["value2d"], bank.values, s)
    decode(ctx, model, ro, q["f8"], q["f4"], h, w)
    counter.end_frame()

    for i in range(1, len(seq.frames)):
        frame_no = i + 1
        role = "memory" if (frame_no - 1) % cfg.memory_interval == 0 else "query"
        processing = frame_processing(cfg.strategy, cfg.variant, role, frame_no)
        _assert_frame_policy(cfg.strategy, cfg.variant, role, frame_no, processing)
        counter.begin_frame(role, processing)
        ctx.processing = processing
        ctx.frame_index = i
        x = seq.frames[i].data.astype(dtype)
        logits, q = predict_frame(ctx, model, x, bank.keys, bank.values, h, w)
        pred = np.argmax(logits, axis=0).astype(np.uint8)
        masks.append(pred)
        if role == "memory":
            prob = softmax_raw(logits, axis=0)[1].astype(dtype)
            if cfg.corrupt_memory_at == frame_no:
                prob = np.roll(prob, (h // 4, w // 4), axis=(0, 1))
            ctx.processing = _memory_encoder_processing(cfg, first_memory=False)
            x4 = np.concatenate([x, prob[None]], axis=0)
            v = encode_memory(ctx, model, x4, q["f16"])
            bank.append(q["key2d"], v)
        counter.end_frame()

    report = counter.report()
    if cfg.strategy == "mixed" and cfg.variant != "dense":
        assert report.sparse_invocations_by_role.get("memory", 0) == 0
    return masks, report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLogRow:
    iteration: int
    l_seg: float
    l_layer: float
    l_global: float
    hard_sparsity: float
    t_upper: float
    t_lower: float

    def csv(self) -> str:
        return (
            f"{self.iteration},{self.l_seg:.9g},{self.l_layer:.9g},"
            f"{self.l_global:.9g},{self.hard_sparsity:.9g},"
            f"{self.t_upper:.9g},{self.t_lower:.9g}"
        )


TRAIN_LOG_HEADER = "iteration,L_seg,L_layer,L_global,hard_global_sparsity,t_upper,t_lower"


class AdamW:
    """Adam with decoupled weight decay (decay applied to kernels only)."""

    def __init__(self, params: Dict[str, ag.Node], decay: Dict[str, bool],
                 weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.decay = decay
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, grads: Dict[ag.Node, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.decay.get(name, False):
                update = update + self.weight_decay * p.value
            p.value -= lr * update


def lr_at(iteration: int, cfg: PipelineConfig) -> float:
    total = max(cfg.iterations, 1)
    warm = max(int(round(cfg.warmup_frac * total)), 1)
    start = int(round(cfg.cosine_start_frac * total))
    if iteration < warm:
        return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * iteration / warm
    if iteration < start:
        return cfg.lr_peak
    t = (iteration - start) / max(total - start, 1)
    return cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + math.cos(math.pi * t))


def sample_clip(rng: np.random.Generator, n_frames: int, max_gap: int) -> Tuple[int, int, int]:
    if n_frames < 3:
        raise ValueError("training sequences need at least 3 frames")
    cap = max(1, min(max_gap, (n_frames - 1) // 2))
    g1 = int(rng.integers(1, cap + 1))
    g2 = int(rng.integers(1, cap + 1))
    start = int(rng.integers(0, n_frames - g1 - g2))
    return start, start + g1, start + g1 + g2


def _cost_ratio_node(records) -> ag.Node:
    denom = float(sum(r.c_k * r.area for r in records))
    num = None
    for r in records:
        term = ag.mul(r.soft_compute_fraction, float(r.c_k * r.area))
        num = term if num is None else ag.add(num, term)
    return ag.mul(num, 1.0 / denom)


def training_step(
    model: Model,
    seq: VideoSequence,
    idxs: Tuple[int, int, int],
    cfg: PipelineConfig,
    loss_cfg: LossConfig,
    bounds: ScheduleState,
    top_frac: float,
    rng: np.random.Generator,
):
    """One 3-frame clip: memorize frame 1 (gt), predict+memorize frame 2,
    predict frame 3; returns the loss node and logging scalars."""
    dtype = model.dtype
    frames = [seq.frames[i].data.astype(dtype) for i in idxs]
    gts = []
    for i in idxs:
        if seq.gt_masks[i] is None:
            raise ValueError(f"training clip needs a ground-truth mask at frame {i}")
        gts.append(check_binary_mask(seq.gt_masks[i]))
    h, w = frames[0].shape[1:]

    if cfg.variant == "dense":
        proc_b = proc_c = "dense"
    elif cfg.strategy == "mixed":
        proc_b, proc_c = "dense", "sparse"
    else:
        proc_b = proc_c = "sparse"
    mem_sparse = (
        cfg.sparsify_memory_encoder
        and cfg.strategy != "mixed"
        and cfg.variant != "dense"
    )

    model.reset_states()
    ctx = TrainCtx(rng=rng)

    # frame 1: annotated memory frame, dense
    ctx.processing = "dense"
    ctx.frame_index = 0
    fa = ag.constant(frames[0])
    qa = encode_query(ctx, model, fa)
    x4a = ctx.concat(fa, ag.constant(gts[0][None].astype(dtype)), axis=0)
    va = encode_memory(ctx, model, x4a, qa["f16"])
    keys, values = qa["key2d"], va

    if proc_b == "sparse":
        # value-only throwaway decode primes decoder states for frame 2
        prime = InferCtx()
        prime.processing = "dense"
        prime.frame_index = 0
        s0 = matching.similarity(keys.value, keys.value)
        ro0 = matching.readout(values.value, values.value, s0)
        decode(prime, model, ro0, qa["f8"].value, qa["f4"].value, h, w)

    # frame 2: predicted, then memorized with its predicted probability
    ctx.processing = proc_b
    ctx.frame_index = 1
    fb = ag.constant(frames[1])
    logits_b, qb = predict_frame(ctx, model, fb, keys, values, h, w)
    seg_b = bootstrapped_ce(logits_b, gts[1], top_frac)
    prob_b = ag.slice_(ag.softmax(logits_b, axis=0), (slice(1, 2),))
    x4b = ctx.concat(fb, prob_b, axis=0)
    ctx.processing = "sparse" if mem_sparse else "dense"
    vb = encode_memory(ctx, model, x4b, qb["f16"])
    keys = ag.concat(keys, qb["key2d"], axis=1)
    values = ag.concat(values, vb, axis=1)

    # frame 3: predicted from both memories, processed per strategy
    ctx.processing = proc_c
    ctx.frame_index = 2
    fc = ag.constant(frames[2])
    logits_c, _ = predict_frame(ctx, model, fc, keys, values, h, w)
    seg_c = bootstrapped_ce(logits_c, gts[2], top_frac)
    seg = ag.add(seg_b, seg_c)

    records = ctx.gate_records
    l_layer = 0.0
    l_global = 0.0
    if records and cfg.variant in ("triple", "static"):
        layer_losses = [layer_sparse_loss(r.soft_compute_fraction, bounds) for r in records]
        glob = global_sparse_loss(
            [(r.soft_compute_fraction, r.c_k, r.area) for r in records],
            loss_cfg.sparse_target,
        )
        loss = total_loss(seg, layer_losses, glob, loss_cfg)
        l_layer = float(sum(scalar(x) for x in layer_losses))
        l_global = scalar(glob)
    elif records and cfg.variant == "residual":
        cost = _cost_ratio_node(records)
        loss = ag.add(seg, ag.mul(cost, loss_cfg.gamma))
        l_global = scalar(cost)
    else:
        loss = seg

    if records:
        denom = sum(r.c_k * r.area for r in records)
        hard = sum(r.c_k * r.hard_compute_count for r in records) / denom
    else:
        hard = 1.0 if cfg.variant == "dense" else 0.0
    return loss, scalar(seg), l_layer, l_global, hard


def train(
    sequences: Sequence[VideoSequence],
    cfg: PipelineConfig,
    loss_cfg: Optional[LossConfig] = None,
    progress: Optional[Callable[[int, TrainLogRow], None]] = None,
) -> Tuple[Model, List[TrainLogRow]]:
    """Train a model on the given sequences; deterministic per cfg.seed."""
    if not sequences:
        raise ValueError("no training sequences")
    for seq in sequences:
        check_video_sequence(seq)
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(cfg.seed)
    model = Model(cfg.arch(), rng)
    params = model.parameters()
    opt = AdamW(params, model.decay_flags(), cfg.weight_decay)

    log_rows: List[TrainLogRow] = []
    last_good = {k: p.value.copy() for k, p in params.items()}
    for it in range(cfg.iterations):
        bounds = relax_bounds(
            ScheduleState(0.0, 0.0, it, cfg.iterations),
            loss_cfg.sparse_target,
            loss_cfg.relax_frac,
        )
        frac = bootstrap_fraction(it, cfg.iterations, loss_cfg)
        seq = sequences[int(rng.integers(len(sequences)))]
        idxs = sample_clip(rng, len(seq), cfg.clip_max_gap)
        loss, l_seg, l_layer, l_global, hard = training_step(
            model, seq, idxs, cfg, loss_cfg, bounds, frac, rng
        )
        if not np.isfinite(loss.value):
            raise DivergenceError(it, last_good, log_rows)
        grads = ag.backward(loss)
        opt.step(grads, lr_at(it, cfg))
        row = TrainLogRow(
            iteration=it,
            l_seg=l_seg,
            l_layer=l_layer,
            l_global=l_global,
            hard_sparsity=hard,
            t_upper=bounds.t_upper,
            t_lower=bounds.t_lower,
        )
        log_rows.append(row)
        if progress is not None:
            progress(it, row)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            last_good = {k: p.value.copy() for k, p in params.items()}
    return model, log_rows


# ---------------------------------------------------------------------------
# weights persistence: a directory of tensor files plus a manifest


_ARCH_KEYS = ("stage_channels", "key_channels", "value_channels", "variant", "tau", "dtype")


def save_model(dirpath, model: Model, cfg: PipelineConfig) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    lines = []
    for i, (name, node) in enumerate(params.items()):
        fname = f"param_{i:04d}.spvt"
        write_tensor(d / fname, node.value)
        shape = "x".join(str(s) for s in node.value.shape)
        lines.append(f"{name}\t{fname}\t{shape}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    arch = cfg.arch()
    cfg_lines = [
        f"stage_channels={','.join(str(c) for c in arch['stage_channels'])}",
        f"key_channels={arch['key_channels']}",
        f"value_channels={arch['value_channels']}",
        f"variant={arch['variant']}",
        f"tau={arch['tau']}",
        f"dtype={arch['dtype']}",
        f"strategy={cfg.strategy}",
        f"memory_interval={cfg.memory_interval}",
        f"sparsify_memory_encoder={int(cfg.sparsify_memory_encoder)}",
    ]
    (d / "model.cfg").write_text("\n".join(cfg_lines) + "\n")


def load_model(dirpath) -> Tuple[Model, PipelineConfig]:
    d = Path(dirpath)
    raw: Dict[str, str] = {}
    for line in (d / "model.cfg").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    cfg = PipelineConfig(
        stage_channels=tuple(int(c) for c in raw["stage_channels"].split(",")),
        key_channels=int(raw["key_channels"]),
        value_channels=int(raw["value_channels"]),
        variant=raw["variant"],
        tau=float(raw["tau"]),
        dtype=raw["dtype"],
        strategy=raw.get("strategy", "mixed"),
        memory_interval=int(raw.get("memory_interval", 5)),
        sparsify_memory_encoder=bool(int(raw.get("sparsify_memory_encoder", "0"))),
    )
    model = Model(cfg.arch(), np.random.default_rng(0))
    params = model.parameters()
    for line in (d / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape = line.split("\t")
        if name not in params:
            raise ValueError(f"manifest names unknown parameter {name!r}")
        arr = read_tensor(d / fname).data.astype(model.dtype)
        want = tuple(int(s) for s in shape.split("x"))
        if arr.shape != want or params[name].value.shape != want:
            raise ValueError(
                f"shape mismatch for {name}: file {arr.shape}, manifest {want}, "
                f"model {params[name].value.shape}"
            )
        params[name].value[...] = arr
    return model, cfg


def restore_weights(model: Model, weights: Dict[str, np.ndarray]) -> None:
    params = model.parameters()
    for name, arr in weights.items():
        params[name].value[...] = arr
