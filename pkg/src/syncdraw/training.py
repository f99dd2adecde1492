"""Adam with global-norm clipping, the epoch loop, gradient checks and checkpoints."""
from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rvae import Conditioning, ModelConfig, SyncDraw, init_weights

CKPT_MAGIC = b"SDCK"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    clip_threshold: float = 10.0
    clip_mode: str = "global"  # or "element"
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.clip_threshold <= 0:
            raise ValueError("clip threshold must be positive")
        if self.clip_mode not in ("global", "element"):
            raise ValueError(f"unknown clip mode {self.clip_mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, weights: dict) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in weights.items()},
                   {k: np.zeros_like(w) for k, w in weights.items()}, 0)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict, threshold: float, mode: str = "global") -> dict:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    if mode == "element":
        return {k: np.clip(g, -threshold, threshold) for k, g in grads.items()}
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


def adam_step(weights: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """In-place bias-corrected Adam update; returns (weights, state)."""
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    for k, w in weights.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {w.shape} for {k}")
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        w -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return weights, state


def conditioning_for(model: SyncDraw, dataset, idx):
    if not model.cfg.conditional:
        return None
    if not dataset.captions:
        raise TrainingError("conditional model needs a captioned dataset")
    return Conditioning.from_texts(model.cfg, [dataset.captions[i] for i in idx])


@dataclass
class EpochReport:
    epoch: int
    lx: float
    lz: float
    wall_time: float

    @property
    def total(self) -> float:
        return self.lx + self.lz

    def record(self) -> dict:
        return {"epoch": self.epoch, "lx": self.lx, "lz": self.lz, "total": self.total,
                "wall_time": self.wall_time}


def train_epoch(model: SyncDraw, dataset, cfg: TrainConfig, rng, state: AdamState) -> tuple:
    """One pass in seeded-shuffle order. Returns mean (lx, lz) per video."""
    n = len(dataset)
    if n == 0:
        raise TrainingError("empty dataset")
    order = rng.permutation(n)
    mc = model.cfg
    lx_sum = lz_sum = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        x = dataset.videos[idx]
        eps = rng.standard_normal((mc.T, len(idx), mc.z_dim))
        res, grads = model.loss_and_grads(x, eps, conditioning_for(model, dataset, idx))
        lx_sum += float(res.lx.sum())
        lz_sum += float(res.lz.sum())
        grads = clip_gradients(grads, cfg.clip_threshold, cfg.clip_mode)
        adam_step(model.weights, grads, state, cfg)
    return lx_sum / n, lz_sum / n


@dataclass
class Trainer:
    model: SyncDraw
    cfg: TrainConfig
    state: AdamState = None
    rng: np.random.Generator = None
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like(self.model.weights)
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.seed)

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, cfg: TrainConfig) -> "Trainer":
        init_rng = np.random.default_rng([cfg.seed, 1])
        model = SyncDraw(model_cfg, init_weights(model_cfg, init_rng))
        return cls(model, cfg)

    def run(self, dataset, epochs: int | None = None, log=None) -> list:
        epochs = self.cfg.epochs if epochs is None else epochs
        for _ in range(epochs):
            t0 = time.perf_counter()
            lx, lz = train_epoch(self.model, dataset, self.cfg, self.rng, self.state)
            self.epoch += 1
            rep = EpochReport(self.epoch, lx, lz, time.perf_counter() - t0)
            self.history.append(rep)
            if log is not None:
                log(rep)
        return self.history

    def save(self, path):
        save_checkpoint(path, self.model.cfg, self.model.weights, self.state,
                        self.rng.bit_generator.state, self.epoch, self.cfg)

    @classmethod
    def load(cls, path, cfg: TrainConfig | None = None) -> "Trainer":
        ck = load_checkpoint(path)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        cfg = ck.train_config if cfg is None else cfg
        model = SyncDraw(ck.model_config, ck.weights)
        return cls(model, cfg, ck.adam, rng, ck.epoch)


# --------------------------------------------------------------------------
# evaluation helpers
# --------------------------------------------------------------------------

def evaluate(model: SyncDraw, dataset, batch_size: int = 64) -> tuple:
    """Per-video (lx, lz) of the teacher-forced pass with eps = 0."""
    mc = model.cfg
    lx, lz = [], []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        eps = np.zeros((mc.T, len(idx), mc.z_dim))
        res = model.forward(dataset.videos[idx], eps, conditioning_for(model, dataset, idx))
        lx.append(res.lx)
        lz.append(res.lz)
    return np.concatenate(lx), np.concatenate(lz)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

MICRO_CONFIG = dict(A=8, B=8, N=2, K=3, T=2, z_dim=4, enc_hidden=16, dec_hidden=16)


@dataclass
class GradCheckReport:
    errors: dict  # group -> relative error
    tolerance: float

    @property
    def failures(self) -> list:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic, numeric) -> float:
    """Largest absolute discrepancy relative to the group's largest gradient entry."""
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max()) / scale


def grad_check(model_cfg: ModelConfig, tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0,
               weights: dict | None = None, batch: int = 2, captions=None,
               perturb=None, weight_scale: float | None = 0.3) -> GradCheckReport:
    """Central differences against the analytic backward pass for every weight group.

    Weights are drawn N(0, weight_scale^2) so the zero-initialized attention
    heads are exercised away from the origin; ``weight_scale=None`` keeps the
    regular initialization. ``perturb`` maps group name -> callable applied to
    that analytic gradient before comparison (fault injection).
    """
    rng = np.random.default_rng(seed)
    if weights is None:
        weights = init_weights(model_cfg, rng)
        if weight_scale is not None:
            weights = {k: rng.normal(0.0, weight_scale, v.shape) for k, v in weights.items()}
    model = SyncDraw(model_cfg, weights)
    w = model.weights
    x = rng.uniform(0.0, 1.0, (batch, model_cfg.N, model_cfg.A, model_cfg.B))
    eps = rng.standard_normal((model_cfg.T, batch, model_cfg.z_dim))
    cond = None
    if model_cfg.conditional:
        from .captions import all_captions
        pool = all_captions(1) + all_captions(2)[:5]
        texts = captions or [pool[int(rng.integers(0, len(pool)))] for _ in range(batch)]
        cond = Conditioning.from_texts(model_cfg, texts)
    _, grads = model.loss_and_grads(x, eps, cond)

    def loss():
        r = model.forward(x, eps, cond)
        return float((r.lx + r.lz).mean())

    errors = {}
    for name, W in w.items():
        numeric = np.zeros_like(W)
        for i in np.ndindex(W.shape):
            orig = W[i]
            W[i] = orig + h
            up = loss()
            W[i] = orig - h
            down = loss()
            W[i] = orig
            numeric[i] = (up - down) / (2 * h)
        analytic = grads[name]
        if perturb and name in perturb:
            analytic = perturb[name](analytic.copy())
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tolerance)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    weights: dict
    adam: AdamState
    rng_state: dict
    epoch: int
    train_config: TrainConfig


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    enc = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(model_cfg, weights, adam, rng_state, epoch, train_cfg) -> bytes:
    meta = {
        "model_config": model_cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "epoch": epoch,
        "adam_step": adam.step,
        "rng_state": rng_state,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = []
    for k in sorted(weights):
        tensors.append(("w/" + k, weights[k]))
        tensors.append(("m/" + k, adam.m[k]))
        tensors.append(("v/" + k, adam.v[k]))
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta_raw)), meta_raw,
           struct.pack("<I", len(tensors))]
    out += [_tensor_record(n, a) for n, a in tensors]
    return b"".join(out)


def save_checkpoint(path, model_cfg, weights, adam, rng_state, epoch, train_cfg):
    Path(path).write_bytes(checkpoint_bytes(model_cfg, weights, adam, rng_state, epoch, train_cfg))


class _Reader:
    def __init__(self, raw: bytes, origin: str):
        self.raw, self.pos, self.origin = raw, 0, origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.origin}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def parse_checkpoint(raw: bytes, origin: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, origin)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{origin}: bad checkpoint magic")
    version, meta_len = r.unpack("<HI")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{origin}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{origin}: corrupt metadata") from exc
    model_cfg = ModelConfig(**meta["model_config"])
    train_cfg = TrainConfig(**meta["train_config"])
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{origin}: trailing bytes after tensors")
    expected = init_weights(model_cfg, zero=True)
    weights, m, v = {}, {}, {}
    for k, ref in expected.items():
        for prefix, table in (("w/", weights), ("m/", m), ("v/", v)):
            arr = tensors.get(prefix + k)
            if arr is None:
                raise CheckpointError(f"{origin}: missing tensor {prefix + k}")
            if arr.shape != ref.shape:
                raise CheckpointError(f"{origin}: {prefix + k} has shape {arr.shape}, "
                                      f"config expects {ref.shape}")
            table[k] = arr
    return Checkpoint(model_cfg, weights, AdamState(m, v, meta["adam_step"]),
                      meta["rng_state"], meta["epoch"], train_cfg)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))
