"""Gaussian-grid read/write attention, per frame and as a spatio-temporal cuboid.

Every operation comes in a batched form used by the model (leading batch
axes are broadcast freely) and a forward/backward pair with explicit caches.
Pixel coordinates inside the formulas are 1-based: a frame axis of length D
has samples at 1..D, so a raw center of 0 maps to (D+1)/2.

Raw attention parameters are stored as the last axis of an array, in order
``(gp_raw, gq_raw, log_sigma, log_delta_raw, log_beta)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_FLOOR = 1e-8
N_RAW = 5
N_RAW_TEMPORAL = 3


class ParameterDomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class FrameGeometry:
    A: int
    B: int
    N: int
    K: int

    def __post_init__(self):
        if self.A < 1 or self.B < 1 or self.N < 1:
            raise ValueError(f"frame dimensions must be positive: {self}")
        if not 1 <= self.K <= min(self.A, self.B):
            raise ValueError(f"grid size K={self.K} outside [1, min(A, B)]")


@dataclass(frozen=True)
class AttentionParams:
    gp_raw: float
    gq_raw: float
    log_sigma: float
    log_delta_raw: float
    log_beta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.gp_raw, self.gq_raw, self.log_sigma,
                         self.log_delta_raw, self.log_beta], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "AttentionParams":
        return cls(*(float(v) for v in np.asarray(arr).reshape(N_RAW)))


@dataclass(frozen=True)
class GridSpec:
    gp: float
    gq: float
    delta: float
    sigma: float
    beta: float


@dataclass
class Filterbank:
    matrix: np.ndarray  # (K, D)
    centers: np.ndarray  # (K,)


# --------------------------------------------------------------------------
# scalar API
# --------------------------------------------------------------------------

def stride_scale(extent: int, K: int, divisor_grid: int | None = None) -> float:
    """Pixels per unit of exp(log_delta_raw): (extent-1)/(K-1), 0 for K=1.

    ``divisor_grid`` overrides K in the denominator (the frame-count reading).
    """
    d = K if divisor_grid is None else divisor_grid
    if d <= 1:
        return 0.0
    return (extent - 1) / (d - 1)


def map_params(raw: AttentionParams, geom: FrameGeometry) -> GridSpec:
    arr = raw.as_array()
    if not np.all(np.isfinite(arr)):
        raise ParameterDomainError(f"non-finite attention parameters: {raw}")
    scale = stride_scale(max(geom.A, geom.B), geom.K)
    return GridSpec(
        gp=(geom.A + 1) / 2 * (raw.gp_raw + 1),
        gq=(geom.B + 1) / 2 * (raw.gq_raw + 1),
        delta=scale * float(np.exp(raw.log_delta_raw)),
        sigma=float(np.exp(raw.log_sigma)),
        beta=float(np.exp(raw.log_beta)),
    )


def grid_offsets(K: int, half_width: float | None = None) -> np.ndarray:
    """(u - K/2 - 0.5) for u = 1..K."""
    half = K / 2 if half_width is None else half_width
    return np.arange(1, K + 1, dtype=np.float64) - half - 0.5


def grid_centers(spec: GridSpec, geom: FrameGeometry):
    off = grid_offsets(geom.K)
    return spec.gp + off * spec.delta, spec.gq + off * spec.delta


def build_filterbank(centers, sigma: float, D: int) -> Filterbank:
    if sigma <= 0:
        raise ParameterDomainError(f"sigma must be positive, got {sigma}")
    if D < 1:
        raise ValueError(f"axis length must be >= 1, got {D}")
    centers = np.asarray(centers, dtype=np.float64)
    F, _ = filterbank_forward(centers, np.float64(sigma), D)
    return Filterbank(matrix=F, centers=centers)


def build_temporal_filterbank(center: float, sigma: float, delta: float,
                              K_t: int, N: int) -> Filterbank:
    if not 1 <= K_t <= N:
        raise ValueError(f"temporal grid size {K_t} outside [1, {N}]")
    centers = center + grid_offsets(K_t) * delta
    return build_filterbank(centers, sigma, N)


def _check_read_shapes(fp, fq, frame):
    if fp.ndim != 2 or fq.ndim != 2 or fp.shape[0] != fq.shape[0]:
        raise ShapeError(f"filterbanks must be K x A and K x B, got {fp.shape}, {fq.shape}")
    if frame.shape != (fp.shape[1], fq.shape[1]):
        raise ShapeError(f"frame shape {frame.shape} does not match filterbanks "
                         f"{fp.shape}, {fq.shape}")


def read_patch(fp: Filterbank, fq: Filterbank, beta: float, frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    _check_read_shapes(fp.matrix, fq.matrix, frame)
    return read(fp.matrix, fq.matrix, np.float64(beta), frame)


def write_patch(fp_hat: Filterbank, fq_hat: Filterbank, beta_hat: float, window) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    K = fp_hat.matrix.shape[0]
    if fq_hat.matrix.shape[0] != K or window.shape != (K, K):
        raise ShapeError(f"window {window.shape} incompatible with filterbanks "
                         f"{fp_hat.matrix.shape}, {fq_hat.matrix.shape}")
    return write(fp_hat.matrix, fq_hat.matrix, np.float64(beta_hat), window)


def read_cuboid(fp: Filterbank, fq: Filterbank, fz: Filterbank, beta: float, video) -> np.ndarray:
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 3 or video.shape[0] != fz.matrix.shape[1]:
        raise ShapeError(f"video {video.shape} incompatible with temporal filterbank "
                         f"{fz.matrix.shape}")
    _check_read_shapes(fp.matrix, fq.matrix, video[0])
    return cuboid_read(fp.matrix, fq.matrix, fz.matrix, np.float64(beta), video)


def write_cuboid(fp_hat: Filterbank, fq_hat: Filterbank, fz_hat: Filterbank,
                 beta_hat: float, window) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    K = fp_hat.matrix.shape[0]
    if window.shape != (fz_hat.matrix.shape[0], K, K):
        raise ShapeError(f"cuboid window {window.shape} incompatible with filterbanks")
    return cuboid_write(fp_hat.matrix, fq_hat.matrix, fz_hat.matrix, np.float64(beta_hat), window)


# --------------------------------------------------------------------------
# batched core: filterbanks
# --------------------------------------------------------------------------

def filterbank_forward(centers, sigma, D: int):
    """Row-normalized Gaussian filterbank.

    centers: (..., K) in 1-based pixel units, sigma: (...). Returns F (..., K, D)
    and a cache for :func:`filterbank_backward`.
    """
    coords = np.arange(1, D + 1, dtype=centers.dtype)
    diff = coords - centers[..., None]  # (..., K, D)
    sig = np.asarray(sigma)[..., None, None]
    g = np.exp(-diff ** 2 / (2 * sig ** 2))
    rowsum = g.sum(axis=-1, keepdims=True)
    dead = rowsum < ROW_SUM_FLOOR
    F = np.where(dead, 1.0 / D, g / np.where(dead, 1.0, rowsum))
    return F, (diff, sig, F, rowsum, dead)


def filterbank_backward(dF, cache):
    """Gradients of F with respect to centers (..., K) and sigma (...)."""
    diff, sig, F, rowsum, dead = cache
    # d(g/S): (dF - <dF, F>) / S, then through the Gaussian
    dg = (dF - (dF * F).sum(axis=-1, keepdims=True)) / np.where(dead, 1.0, rowsum)
    dg = np.where(dead, 0.0, dg)
    gF = dg * F * np.where(dead, 0.0, rowsum)  # dg * g
    dcenters = (gF * diff).sum(axis=-1) / sig[..., 0] ** 2
    dsigma = (gF * diff ** 2).sum(axis=(-1, -2)) / sig[..., 0, 0] ** 3
    return dcenters, dsigma


# --------------------------------------------------------------------------
# batched core: per-frame grids
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridLayout:
    """Static constants mapping raw parameters to pixel grids."""
    A: int
    B: int
    K: int
    stride: float  # pixels per unit stride factor
    offsets: np.ndarray  # (K,)

    @classmethod
    def for_frame(cls, A: int, B: int, K: int, literal_n: int | None = None) -> "GridLayout":
        """``literal_n`` replaces K by the frame count in the center offsets and stride."""
        if literal_n is None:
            return cls(A, B, K, stride_scale(max(A, B), K), grid_offsets(K))
        return cls(A, B, K, stride_scale(max(A, B), K, literal_n),
                   grid_offsets(K, literal_n / 2))


def grid_filters(raw, layout: GridLayout):
    """Raw parameters (..., 5) -> Fp (..., K, A), Fq (..., K, B), beta (...)."""
    gp = (layout.A + 1) / 2 * (raw[..., 0] + 1)
    gq = (layout.B + 1) / 2 * (raw[..., 1] + 1)
    sigma = np.exp(raw[..., 2])
    delta = layout.stride * np.exp(raw[..., 3])
    beta = np.exp(raw[..., 4])
    mu_p = gp[..., None] + layout.offsets * delta[..., None]
    mu_q = gq[..., None] + layout.offsets * delta[..., None]
    Fp, cp = filterbank_forward(mu_p, sigma, layout.A)
    Fq, cq = filterbank_forward(mu_q, sigma, layout.B)
    return Fp, Fq, beta, (cp, cq, sigma, delta, beta)


def grid_filters_backward(dFp, dFq, dbeta, cache, layout: GridLayout):
    cp, cq, sigma, delta, beta = cache
    dmu_p, dsig_p = filterbank_backward(dFp, cp)
    dmu_q, dsig_q = filterbank_backward(dFq, cq)
    draw = np.empty(dmu_p.shape[:-1] + (N_RAW,), dtype=dmu_p.dtype)
    draw[..., 0] = (layout.A + 1) / 2 * dmu_p.sum(axis=-1)
    draw[..., 1] = (layout.B + 1) / 2 * dmu_q.sum(axis=-1)
    draw[..., 2] = (dsig_p + dsig_q) * sigma
    ddelta = (dmu_p * layout.offsets).sum(axis=-1) + (dmu_q * layout.offsets).sum(axis=-1)
    draw[..., 3] = ddelta * delta
    draw[..., 4] = dbeta * beta
    return draw


@dataclass(frozen=True)
class TemporalLayout:
    N: int
    K_t: int
    stride: float
    offsets: np.ndarray

    @classmethod
    def for_video(cls, N: int, K_t: int) -> "TemporalLayout":
        return cls(N, K_t, stride_scale(N, K_t), grid_offsets(K_t))


def temporal_filters(raw_t, layout: TemporalLayout):
    """Raw temporal parameters (..., 3) = (gz_raw, log_sigma_z, log_delta_z) -> Fz (..., K_t, N)."""
    gz = (layout.N + 1) / 2 * (raw_t[..., 0] + 1)
    sigma = np.exp(raw_t[..., 1])
    delta = layout.stride * np.exp(raw_t[..., 2])
    mu = gz[..., None] + layout.offsets * delta[..., None]
    Fz, c = filterbank_forward(mu, sigma, layout.N)
    return Fz, (c, sigma, delta)


def temporal_filters_backward(dFz, cache, layout: TemporalLayout):
    c, sigma, delta = cache
    dmu, dsig = filterbank_backward(dFz, c)
    draw = np.empty(dmu.shape[:-1] + (N_RAW_TEMPORAL,), dtype=dmu.dtype)
    draw[..., 0] = (layout.N + 1) / 2 * dmu.sum(axis=-1)
    draw[..., 1] = dsig * sigma
    draw[..., 2] = (dmu * layout.offsets).sum(axis=-1) * delta
    return draw


# --------------------------------------------------------------------------
# batched core: read / write
# --------------------------------------------------------------------------

def _T(m):
    return np.swapaxes(m, -1, -2)


def read(Fp, Fq, beta, x):
    """beta * Fp x Fq^T over trailing axes."""
    return np.asarray(beta)[..., None, None] * (Fp @ x @ _T(Fq))


def read_backward(dpatch, Fp, Fq, beta, x, need_dx: bool = True):
    """Returns (dFp, dFq, dbeta, dx); dx is None unless requested."""
    b = np.asarray(beta)[..., None, None]
    xFqT = x @ _T(Fq)  # (..., A, K)
    unscaled = Fp @ xFqT
    dbeta = (dpatch * unscaled).sum(axis=(-1, -2))
    bd = b * dpatch
    dFp = bd @ _T(xFqT)
    dFq = _T(bd) @ (Fp @ x)
    dx = _T(Fp) @ (bd @ Fq) if need_dx else None
    return dFp, dFq, dbeta, dx


def write(Fp, Fq, beta, window):
    """(1/beta) Fp^T w Fq over trailing axes."""
    return (_T(Fp) @ (window @ Fq)) / np.asarray(beta)[..., None, None]


def write_backward(dout, Fp, Fq, beta, window):
    """Returns (dFp, dFq, dbeta, dwindow)."""
    inv = 1.0 / np.asarray(beta)[..., None, None]
    dscaled = dout * inv
    dFp = (window @ Fq) @ _T(dscaled)
    Fp_d = Fp @ dscaled  # (..., K, B)
    dFq = _T(window) @ Fp_d
    dwindow = Fp_d @ _T(Fq)
    # <dout, out> = <dwindow, window>, so the output need not be rebuilt
    dbeta = -(dwindow * window).sum(axis=(-1, -2)) / np.asarray(beta)
    return dFp, dFq, dbeta, dwindow


def cuboid_read(Fp, Fq, Fz, beta, video):
    """video (..., N, A, B) with Fp (..., K, A), Fq (..., K, B), Fz (..., K_t, N)."""
    per_frame = Fp[..., None, :, :] @ video @ _T(Fq)[..., None, :, :]  # (..., N, K, K)
    mixed = np.einsum("...zn,...nuv->...zuv", Fz, per_frame)
    return np.asarray(beta)[..., None, None, None] * mixed


def cuboid_read_backward(dpatch, Fp, Fq, Fz, beta, video, need_dx: bool = True):
    b = np.asarray(beta)[..., None, None, None]
    FpE = Fp[..., None, :, :]
    FqE = Fq[..., None, :, :]
    xFqT = video @ _T(FqE)  # (..., N, A, K)
    per_frame = FpE @ xFqT  # (..., N, K, K)
    mixed = np.einsum("...zn,...nuv->...zuv", Fz, per_frame)
    dbeta = (dpatch * mixed).sum(axis=(-1, -2, -3))
    dmixed = b * dpatch
    dFz = np.einsum("...zuv,...nuv->...zn", dmixed, per_frame)
    dper = np.einsum("...zn,...zuv->...nuv", Fz, dmixed)  # (..., N, K, K)
    dFp = (dper @ _T(xFqT)).sum(axis=-3)
    dFq = (_T(dper) @ (FpE @ video)).sum(axis=-3)
    dx = _T(FpE) @ (dper @ FqE) if need_dx else None
    return dFp, dFq, dFz, dbeta, dx


def cuboid_write(Fp, Fq, Fz, beta, window):
    """window (..., K_t, K, K) -> video (..., N, A, B)."""
    per_frame = np.einsum("...zn,...zuv->...nuv", Fz, window)
    out = _T(Fp)[..., None, :, :] @ (per_frame @ Fq[..., None, :, :])
    return out / np.asarray(beta)[..., None, None, None]


def cuboid_write_backward(dout, Fp, Fq, Fz, beta, window):
    inv = 1.0 / np.asarray(beta)[..., None, None, None]
    FpE = Fp[..., None, :, :]
    FqE = Fq[..., None, :, :]
    per_frame = np.einsum("...zn,...zuv->...nuv", Fz, window)
    dscaled = dout * inv
    dFp = ((per_frame @ FqE) @ _T(dscaled)).sum(axis=-3)
    Fp_d = FpE @ dscaled  # (..., N, K, B)
    dFq = (_T(per_frame) @ Fp_d).sum(axis=-3)
    dper = Fp_d @ _T(FqE)  # (..., N, K, K)
    dFz = np.einsum("...nuv,...zuv->...zn", dper, window)
    dwindow = np.einsum("...zn,...nuv->...zuv", Fz, dper)
    dbeta = -(dwindow * window).sum(axis=(-1, -2, -3)) / np.asarray(beta)
    return dFp, dFq, dFz, dbeta, dwindow


def attention_gradients(raw, inp, upstream, geom: FrameGeometry, mode: str = "read"):
    """Gradients of <upstream, read/write output> for one frame.

    ``raw`` is the 5-vector of raw parameters, ``inp`` the A x B frame (read)
    or K x K window (write). Returns (d_raw, d_inp).
    """
    raw = np.asarray(raw, dtype=np.float64)
    inp = np.asarray(inp, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    layout = GridLayout.for_frame(geom.A, geom.B, geom.K)
    Fp, Fq, beta, cache = grid_filters(raw, layout)
    if mode == "read":
        dFp, dFq, dbeta, dinp = read_backward(upstream, Fp, Fq, beta, inp)
    elif mode == "write":
        dFp, dFq, dbeta, dinp = write_backward(upstream, Fp, Fq, beta, inp)
    else:
        raise ValueError(f"mode must be 'read' or 'write', got {mode!r}")
    return grid_filters_backward(dFp, dFq, dbeta, cache, layout), dinp


def attend(raw, inp, geom: FrameGeometry, mode: str = "read"):
    """Forward counterpart of :func:`attention_gradients`."""
    layout = GridLayout.for_frame(geom.A, geom.B, geom.K)
    Fp, Fq, beta, _ = grid_filters(np.asarray(raw, dtype=np.float64), layout)
    op = read if mode == "read" else write
    return op(Fp, Fq, beta, np.asarray(inp, dtype=np.float64))
