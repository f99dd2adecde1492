"""Recurrent VAE with frame-synchronized attention, and the cuboid baseline.

The model keeps its weights in a flat ``dict[str, ndarray]``. ``forward``
returns per-video losses plus a cache that ``backward`` consumes to produce
gradients of the batch-mean total loss; every backward step is written out
by hand and checked against finite differences in the test suite.

Shapes: a batch of videos is (n, N, A, B); per-timestep latent draws are
(T, n, z_dim); conditioning vectors are (n, s_dim).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention as att
from . import captions as cap
from .nn import INIT_SCALE, linear_backward, lstm_init, lstm_step, lstm_step_backward, sigmoid

SYNC = "sync"
CUBOID = "cuboid-baseline"
PROB_CLAMP = 1e-7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    A: int = 64
    B: int = 64
    N: int = 10
    K: int = 5
    T: int = 10
    z_dim: int = 100
    enc_hidden: int = 256
    dec_hidden: int = 256
    conditional: bool = False
    caption_encoder: str = "onehot"  # or "recurrent"
    s_dim: int = 0
    word_dim: int = 16
    variant: str = SYNC
    K_t: int = 0  # temporal grid of the cuboid baseline; 0 -> min(4, N)
    literal_frame_count: bool = False  # use N instead of K in grid offsets / stride

    def __post_init__(self):
        att.FrameGeometry(self.A, self.B, self.N, self.K)
        if self.T < 1 or self.z_dim < 1 or self.enc_hidden < 1 or self.dec_hidden < 1:
            raise ConfigError(f"T, z_dim and hidden widths must be >= 1: {self}")
        if self.variant not in (SYNC, CUBOID):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.caption_encoder not in ("onehot", "recurrent"):
            raise ConfigError(f"unknown caption encoder {self.caption_encoder!r}")
        if self.conditional:
            if self.caption_encoder == "onehot":
                object.__setattr__(self, "s_dim", cap.ONEHOT_DIM)
            elif self.s_dim < 1:
                raise ConfigError("recurrent caption encoder needs s_dim >= 1")
        else:
            object.__setattr__(self, "s_dim", 0)
        if self.K_t == 0:
            object.__setattr__(self, "K_t", min(4, self.N))
        if not 1 <= self.K_t <= self.N:
            raise ConfigError(f"K_t={self.K_t} outside [1, N]")

    @property
    def geom(self) -> att.FrameGeometry:
        return att.FrameGeometry(self.A, self.B, self.N, self.K)

    @property
    def glimpse_size(self) -> int:
        frames = self.N if self.variant == SYNC else self.K_t
        return 2 * frames * self.K * self.K

    @property
    def n_attn_raw(self) -> int:
        if self.variant == SYNC:
            return att.N_RAW * self.N
        return att.N_RAW + att.N_RAW_TEMPORAL

    @property
    def window_size(self) -> int:
        frames = self.N if self.variant == SYNC else self.K_t
        return frames * self.K * self.K

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    lx: float
    lz: float

    @property
    def total(self) -> float:
        return self.lx + self.lz


@dataclass
class CanvasStack:
    canvases: np.ndarray  # (N, A, B) pre-sigmoid, or batched (n, N, A, B)
    timestep: int = 0

    @classmethod
    def zeros(cls, cfg: ModelConfig, batch: int | None = None, dtype=np.float64):
        shape = (cfg.N, cfg.A, cfg.B) if batch is None else (batch, cfg.N, cfg.A, cfg.B)
        return cls(np.zeros(shape, dtype=dtype), 0)


@dataclass
class LatentParams:
    mu: np.ndarray
    log_var: np.ndarray


# --------------------------------------------------------------------------
# stand-alone operations
# --------------------------------------------------------------------------

def error_image(video, canvas: CanvasStack):
    video = np.asarray(video)
    if video.shape != canvas.canvases.shape:
        raise att.ShapeError(f"video {video.shape} vs canvas {canvas.canvases.shape}")
    return video - sigmoid(canvas.canvases)


def accumulate_canvas(canvas: CanvasStack, patches) -> CanvasStack:
    patches = np.asarray(patches)
    if patches.shape != canvas.canvases.shape:
        raise att.ShapeError(f"patches {patches.shape} vs canvas {canvas.canvases.shape}")
    return CanvasStack(canvas.canvases + patches, canvas.timestep + 1)


def emit_video(canvas: CanvasStack) -> np.ndarray:
    return sigmoid(canvas.canvases)


def sample_latent(params: LatentParams, eps) -> np.ndarray:
    return params.mu + np.exp(0.5 * params.log_var) * eps


def reconstruction_loss(x, emitted) -> float:
    return float(bce(np.asarray(x), np.asarray(emitted)).sum())


def bce(x, p):
    """Per-pixel binary cross-entropy with the emission clamp."""
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return -(x * np.log(p) + (1 - x) * np.log1p(-p))


def kl_terms(mu, log_var):
    """Per-entry KL to the standard normal: 0.5 (mu^2 + sigma^2 - log sigma^2 - 1)."""
    return 0.5 * (mu ** 2 + np.exp(log_var) - log_var - 1.0)


def kl_loss(all_t) -> float:
    """Sum of the KL term over timesteps and latent dimensions."""
    return float(sum(kl_terms(np.asarray(p.mu), np.asarray(p.log_var)).sum() for p in all_t))


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

def init_weights(cfg: ModelConfig, rng=None, zero: bool = False, dtype=np.float64) -> dict:
    """Recurrences and latent heads uniform(+-0.08); biases and attention heads zero."""
    rng = np.random.default_rng(0) if rng is None else rng
    H_e, H_d, s = cfg.enc_hidden, cfg.dec_hidden, cfg.s_dim
    w = {}
    w.update(lstm_init(rng, cfg.glimpse_size + H_d + s, H_e, "enc", dtype))
    w.update(lstm_init(rng, cfg.z_dim + s, H_d, "dec", dtype))
    w["mu_W"] = rng.uniform(-INIT_SCALE, INIT_SCALE, (H_e, cfg.z_dim)).astype(dtype)
    w["mu_b"] = np.zeros(cfg.z_dim, dtype=dtype)
    w["lv_W"] = rng.uniform(-INIT_SCALE, INIT_SCALE, (H_e, cfg.z_dim)).astype(dtype)
    w["lv_b"] = np.zeros(cfg.z_dim, dtype=dtype)
    for head, width in (("read", cfg.n_attn_raw), ("wparam", cfg.n_attn_raw), ("win", cfg.window_size)):
        w[f"{head}_W"] = np.zeros((H_d, width), dtype=dtype)
        w[f"{head}_b"] = np.zeros(width, dtype=dtype)
    if cfg.conditional and cfg.caption_encoder == "recurrent":
        w.update({k: v.astype(dtype) for k, v in cap.recurrent_init(rng, cfg.word_dim, s).items()})
    if zero:
        w = {k: np.zeros_like(v) for k, v in w.items()}
    return w


@dataclass
class Conditioning:
    """What the model is conditioned on: fixed vectors or token ids for the recurrent encoder."""
    vectors: np.ndarray | None = None
    ids: np.ndarray | None = None
    lengths: np.ndarray | None = None

    @classmethod
    def from_texts(cls, cfg: ModelConfig, texts) -> "Conditioning":
        if cfg.caption_encoder == "onehot":
            return cls(vectors=np.stack([cap.encode_onehot(cap.parse_caption(t)) for t in texts]))
        for t in texts:
            cap.parse_caption(t)
        ids, lengths = cap.pad_tokens(texts)
        return cls(ids=ids, lengths=lengths)

    def take(self, idx) -> "Conditioning":
        return Conditioning(
            vectors=None if self.vectors is None else self.vectors[idx],
            ids=None if self.ids is None else self.ids[idx],
            lengths=None if self.lengths is None else self.lengths[idx],
        )


@dataclass
class ForwardResult:
    lx: np.ndarray  # (n,)
    lz: np.ndarray  # (n,)
    canvases: list  # T+1 arrays (n, N, A, B), starting with zeros
    latents: list  # T LatentParams with batched arrays
    cache: dict = field(repr=False, default_factory=dict)

    def report(self) -> LossReport:
        return LossReport(float(self.lx.mean()), float(self.lz.mean()))


class SyncDraw:
    def __init__(self, cfg: ModelConfig, weights: dict | None = None, rng=None):
        self.cfg = cfg
        self.weights = init_weights(cfg, rng) if weights is None else weights
        if cfg.variant == SYNC:
            self.layout = att.GridLayout.for_frame(
                cfg.A, cfg.B, cfg.K, cfg.N if cfg.literal_frame_count else None)
        else:
            self.layout = att.GridLayout.for_frame(cfg.A, cfg.B, cfg.K)
            self.tlayout = att.TemporalLayout.for_video(cfg.N, cfg.K_t)

    # -- conditioning ------------------------------------------------------

    def _condition(self, cond: Conditioning | None, n: int):
        cfg = self.cfg
        if not cfg.conditional:
            if cond is not None and (cond.vectors is not None or cond.ids is not None):
                raise ConfigError("unconditional model given a caption")
            return np.zeros((n, 0), dtype=self.weights["enc_W"].dtype), None
        if cond is None:
            raise ConfigError("conditional model needs a caption embedding")
        if cfg.caption_encoder == "onehot":
            if cond.vectors is None:
                raise ConfigError("onehot-conditioned model needs caption vectors")
            s = np.asarray(cond.vectors, dtype=self.weights["enc_W"].dtype)
            if s.shape != (n, cfg.s_dim):
                raise att.ShapeError(f"caption embeddings {s.shape}, expected {(n, cfg.s_dim)}")
            return s, None
        if cond.ids is None:
            raise ConfigError("recurrent-conditioned model needs caption tokens")
        s, scache = cap.recurrent_forward(self.weights, cond.ids, cond.lengths)
        return s, scache

    # -- attention -----------------------------------------------------------

    def _filters(self, raw):
        """raw (n, n_attn_raw) -> dict with filterbanks and caches."""
        cfg = self.cfg
        n = raw.shape[0]
        if cfg.variant == SYNC:
            r = raw.reshape(n, cfg.N, att.N_RAW)
            Fp, Fq, beta, gc = att.grid_filters(r, self.layout)
            return {"Fp": Fp, "Fq": Fq, "beta": beta, "gc": gc}
        Fp, Fq, beta, gc = att.grid_filters(raw[:, :att.N_RAW], self.layout)
        Fz, tc = att.temporal_filters(raw[:, att.N_RAW:], self.tlayout)
        return {"Fp": Fp, "Fq": Fq, "beta": beta, "gc": gc, "Fz": Fz, "tc": tc}

    def _filters_backward(self, f, dFp, dFq, dbeta, dFz=None):
        cfg = self.cfg
        n = dFp.shape[0]
        if cfg.variant == SYNC:
            return att.grid_filters_backward(dFp, dFq, dbeta, f["gc"], self.layout).reshape(n, -1)
        d1 = att.grid_filters_backward(dFp, dFq, dbeta, f["gc"], self.layout)
        d2 = att.temporal_filters_backward(dFz, f["tc"], self.tlayout)
        return np.concatenate([d1, d2], axis=-1)

    def _read(self, f, video):
        if self.cfg.variant == SYNC:
            return att.read(f["Fp"], f["Fq"], f["beta"], video)
        return att.cuboid_read(f["Fp"], f["Fq"], f["Fz"], f["beta"], video)

    def _read_backward(self, f, dpatch, video, need_dx):
        """Returns (dFp, dFq, dFz, dbeta, dvideo)."""
        if self.cfg.variant == SYNC:
            dFp, dFq, dbeta, dx = att.read_backward(dpatch, f["Fp"], f["Fq"], f["beta"], video, need_dx)
            return dFp, dFq, None, dbeta, dx
        return att.cuboid_read_backward(dpatch, f["Fp"], f["Fq"], f["Fz"], f["beta"], video, need_dx)

    def _write(self, f, window):
        if self.cfg.variant == SYNC:
            return att.write(f["Fp"], f["Fq"], f["beta"], window)
        return att.cuboid_write(f["Fp"], f["Fq"], f["Fz"], f["beta"], window)

    def _write_backward(self, f, dout, window):
        """Returns (dFp, dFq, dFz, dbeta, dwindow)."""
        if self.cfg.variant == SYNC:
            dFp, dFq, dbeta, dw = att.write_backward(dout, f["Fp"], f["Fq"], f["beta"], window)
            return dFp, dFq, None, dbeta, dw
        return att.cuboid_write_backward(dout, f["Fp"], f["Fq"], f["Fz"], f["beta"], window)

    def _window_shape(self, n):
        cfg = self.cfg
        frames = cfg.N if cfg.variant == SYNC else cfg.K_t
        return (n, frames, cfg.K, cfg.K)

    # -- forward / backward ----------------------------------------------------

    def forward(self, x, eps, cond: Conditioning | None = None) -> ForwardResult:
        """Teacher-forced pass over a batch x (n, N, A, B) with latent draws eps (T, n, z)."""
        cfg, w = self.cfg, self.weights
        x = np.asarray(x, dtype=w["enc_W"].dtype)
        n = x.shape[0]
        if x.shape[1:] != (cfg.N, cfg.A, cfg.B):
            raise att.ShapeError(f"video batch {x.shape} does not match config {(cfg.N, cfg.A, cfg.B)}")
        eps = np.asarray(eps, dtype=x.dtype)
        if eps.shape != (cfg.T, n, cfg.z_dim):
            raise att.ShapeError(f"latent draws {eps.shape}, expected {(cfg.T, n, cfg.z_dim)}")
        s, scache = self._condition(cond, n)

        C = np.zeros_like(x)
        h_enc = np.zeros((n, cfg.enc_hidden), dtype=x.dtype)
        c_enc = np.zeros_like(h_enc)
        h_dec = np.zeros((n, cfg.dec_hidden), dtype=x.dtype)
        c_dec = np.zeros_like(h_dec)
        canvases, latents, steps = [C], [], []
        for t in range(cfg.T):
            sig_prev = sigmoid(C)
            xhat = x - sig_prev
            raw_r = h_dec @ w["read_W"] + w["read_b"]
            fr = self._filters(raw_r)
            rx = self._read(fr, x)
            rxh = self._read(fr, xhat)
            # per-frame [read(x_i), read(xhat_i)] blocks
            R = np.stack([rx, rxh], axis=2).reshape(n, -1)
            enc_in = np.concatenate([R, h_dec, s], axis=1)
            h_dec_prev = h_dec
            h_enc, c_enc, enc_cache = lstm_step(enc_in, h_enc, c_enc, w["enc_W"], w["enc_b"])
            mu = h_enc @ w["mu_W"] + w["mu_b"]
            lv = h_enc @ w["lv_W"] + w["lv_b"]
            std = np.exp(0.5 * lv)
            z = mu + std * eps[t]
            h_dec, c_dec, dec_cache = lstm_step(np.concatenate([z, s], axis=1), h_dec, c_dec,
                                                w["dec_W"], w["dec_b"])
            window = (h_dec @ w["win_W"] + w["win_b"]).reshape(self._window_shape(n))
            raw_w = h_dec @ w["wparam_W"] + w["wparam_b"]
            fw = self._filters(raw_w)
            C = C + self._write(fw, window)
            canvases.append(C)
            latents.append(LatentParams(mu, lv))
            steps.append(dict(sig_prev=sig_prev, xhat=xhat, fr=fr, h_dec_prev=h_dec_prev,
                              enc_cache=enc_cache, mu=mu, lv=lv, std=std, eps=eps[t],
                              dec_cache=dec_cache, h_dec=h_dec, window=window, fw=fw,
                              h_enc=h_enc))
        p = sigmoid(C)
        lx = bce(x, p).sum(axis=(1, 2, 3))
        lz = sum(kl_terms(l.mu, l.log_var).sum(axis=1) for l in latents)
        cache = dict(x=x, p=p, steps=steps, s=s, scache=scache, n=n)
        return ForwardResult(lx, lz, canvases, latents, cache)

    def backward(self, res: ForwardResult) -> dict:
        """Gradients of mean_batch(lx + lz) with respect to every weight."""
        cfg, w = self.cfg, self.weights
        cache = res.cache
        x, p, n = cache["x"], cache["p"], cache["n"]
        grads = {k: np.zeros_like(v) for k, v in w.items()}
        inside = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
        dC = np.where(inside, p - x, 0.0) / n
        dh_enc = np.zeros((n, cfg.enc_hidden), dtype=x.dtype)
        dc_enc = np.zeros_like(dh_enc)
        dh_dec = np.zeros((n, cfg.dec_hidden), dtype=x.dtype)
        dc_dec = np.zeros_like(dh_dec)
        ds = np.zeros_like(cache["s"])
        H_d, G, zd = cfg.dec_hidden, cfg.glimpse_size, cfg.z_dim

        for st in reversed(cache["steps"]):
            # write
            dFp, dFq, dFz, dbeta, dwin = self._write_backward(st["fw"], dC, st["window"])
            draw_w = self._filters_backward(st["fw"], dFp, dFq, dbeta, dFz)
            dh_dec = dh_dec + linear_backward(draw_w, st["h_dec"], w["wparam_W"], grads, "wparam")
            dh_dec = dh_dec + linear_backward(dwin.reshape(n, -1), st["h_dec"], w["win_W"], grads, "win")
            # decoder
            ddec_in, dh_dec, dc_dec = lstm_step_backward(dh_dec, dc_dec, st["dec_cache"],
                                                         w["dec_W"], grads, "dec")
            dz = ddec_in[:, :zd]
            ds += ddec_in[:, zd:]
            # latent
            dmu = dz + st["mu"] / n
            dlv = 0.5 * dz * st["std"] * st["eps"] + 0.5 * (np.exp(st["lv"]) - 1.0) / n
            dh_enc = dh_enc + linear_backward(dmu, st["h_enc"], w["mu_W"], grads, "mu")
            dh_enc = dh_enc + linear_backward(dlv, st["h_enc"], w["lv_W"], grads, "lv")
            # encoder
            denc_in, dh_enc, dc_enc = lstm_step_backward(dh_enc, dc_enc, st["enc_cache"],
                                                         w["enc_W"], grads, "enc")
            dR = denc_in[:, :G]
            dh_dec = dh_dec + denc_in[:, G:G + H_d]
            ds += denc_in[:, G + H_d:]
            # read
            dR = dR.reshape((n, -1, 2, cfg.K, cfg.K))
            fr = st["fr"]
            a = self._read_backward(fr, dR[:, :, 0], cache["x"], need_dx=False)
            b = self._read_backward(fr, dR[:, :, 1], st["xhat"], need_dx=True)
            dFz = None if a[2] is None else a[2] + b[2]
            draw_r = self._filters_backward(fr, a[0] + b[0], a[1] + b[1], a[3] + b[3], dFz)
            dh_dec = dh_dec + linear_backward(draw_r, st["h_dec_prev"], w["read_W"], grads, "read")
            sp = st["sig_prev"]
            dC = dC - b[4] * sp * (1 - sp)

        if cache["scache"] is not None:
            cap.recurrent_backward(ds, w, cache["scache"], grads)
        return grads

    def loss_and_grads(self, x, eps, cond=None):
        res = self.forward(x, eps, cond)
        return res, self.backward(res)

    # -- generation ---------------------------------------------------------

    def generate(self, eps, cond: Conditioning | None = None, return_canvases: bool = False):
        """Decoder-only rollout from prior draws eps (T, n, z_dim); returns probabilities."""
        cfg, w = self.cfg, self.weights
        eps = np.asarray(eps, dtype=w["dec_W"].dtype)
        if eps.ndim != 3 or eps.shape[0] != cfg.T or eps.shape[2] != cfg.z_dim:
            raise att.ShapeError(f"latent draws {eps.shape}, expected (T={cfg.T}, n, {cfg.z_dim})")
        n = eps.shape[1]
        s, _ = self._condition(cond, n)
        C = np.zeros((n, cfg.N, cfg.A, cfg.B), dtype=eps.dtype)
        h = np.zeros((n, cfg.dec_hidden), dtype=eps.dtype)
        c = np.zeros_like(h)
        history = [C]
        for t in range(cfg.T):
            h, c, _ = lstm_step(np.concatenate([eps[t], s], axis=1), h, c, w["dec_W"], w["dec_b"])
            window = (h @ w["win_W"] + w["win_b"]).reshape(self._window_shape(n))
            fw = self._filters(h @ w["wparam_W"] + w["wparam_b"])
            C = C + self._write(fw, window)
            history.append(C)
        probs = sigmoid(C)
        return (probs, history) if return_canvases else probs


# --------------------------------------------------------------------------
# single-step operation surfaces
# --------------------------------------------------------------------------

def read_params_head(weights, dec_h, cfg: ModelConfig) -> np.ndarray:
    """Raw read parameters, (..., N, 5) for the sync variant."""
    raw = np.asarray(dec_h) @ weights["read_W"] + weights["read_b"]
    if cfg.variant == SYNC:
        return raw.reshape(raw.shape[:-1] + (cfg.N, att.N_RAW))
    return raw


def write_step(weights, dec_h, cfg: ModelConfig):
    """(windows, raw write parameters) from the decoder state."""
    dec_h = np.asarray(dec_h)
    frames = cfg.N if cfg.variant == SYNC else cfg.K_t
    window = (dec_h @ weights["win_W"] + weights["win_b"]).reshape(dec_h.shape[:-1] + (frames, cfg.K, cfg.K))
    raw = dec_h @ weights["wparam_W"] + weights["wparam_b"]
    if cfg.variant == SYNC:
        raw = raw.reshape(raw.shape[:-1] + (cfg.N, att.N_RAW))
    return window, raw


def latent_params(weights, enc_h) -> LatentParams:
    enc_h = np.asarray(enc_h)
    return LatentParams(enc_h @ weights["mu_W"] + weights["mu_b"], enc_h @ weights["lv_W"] + weights["lv_b"])


def encode_step(weights, h, c, glimpse, prev_dec_h, s=None):
    parts = [glimpse, prev_dec_h] + ([] if s is None else [s])
    h, c, _ = lstm_step(np.concatenate(parts, axis=-1), h, c, weights["enc_W"], weights["enc_b"])
    return h, c


def decode_step(weights, h, c, z, s=None):
    parts = [z] + ([] if s is None else [s])
    h, c, _ = lstm_step(np.concatenate(parts, axis=-1), h, c, weights["dec_W"], weights["dec_b"])
    return h, c
