"""Image exports: animated grayscale GIFs, PNG frame grids and canvas-evolution sheets."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .nn import sigmoid

EXPORT_FORMATS = ("gif", "png-grid", "canvas-sheet")


def to_uint8(frames) -> np.ndarray:
    return np.round(np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def _lzw(data: bytes, min_size: int = 8) -> bytes:
    clear, eoi = 1 << min_size, (1 << min_size) + 1
    out = bytearray()
    acc = nbits = 0

    def emit(code, width):
        nonlocal acc, nbits
        acc |= code << nbits
        nbits += width
        while nbits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nbits -= 8

    def reset():
        return {bytes([i]): i for i in range(clear)}, eoi + 1, min_size + 1

    table, next_code, width = reset()
    emit(clear, width)
    w = b""
    for byte in data:
        wc = w + bytes([byte])
        if wc in table:
            w = wc
            continue
        emit(table[w], width)
        if next_code < 4096:
            table[wc] = next_code
            next_code += 1
            if next_code > (1 << width) and width < 12:
                width += 1
        else:
            emit(clear, width)
            table, next_code, width = reset()
        w = bytes([byte])
    if w:
        emit(table[w], width)
    emit(eoi, width)
    if nbits:
        out.append(acc & 0xFF)
    return bytes(out)


def _sub_blocks(payload: bytes) -> bytes:
    chunks = [payload[i:i + 255] for i in range(0, len(payload), 255)]
    return b"".join(bytes([len(c)]) + c for c in chunks) + b"\x00"


def gif_bytes(frames, delay_ms: int = 100) -> bytes:
    """GIF89a animation, one image per frame, fixed gray palette i -> (i, i, i)."""
    px = to_uint8(frames)
    if px.ndim != 3:
        raise ValueError(f"expected frames (n, height, width), got {px.shape}")
    n, h, w = px.shape
    palette = bytes(np.repeat(np.arange(256, dtype=np.uint8), 3))
    out = [b"GIF89a", struct.pack("<HHBBB", w, h, 0xF7, 0, 0), palette,
           b"\x21\xFF\x0BNETSCAPE2.0\x03\x01" + struct.pack("<H", 0) + b"\x00"]
    delay = max(0, round(delay_ms / 10))
    for k in range(n):
        out.append(b"\x21\xF9\x04" + struct.pack("<BHB", 0x04, delay, 0) + b"\x00")
        out.append(b"\x2C" + struct.pack("<HHHHB", 0, 0, w, h, 0))
        out.append(b"\x08" + _sub_blocks(_lzw(px[k].tobytes())))
    out.append(b"\x3B")
    return b"".join(out)


def export_gif(video, path, delay_ms: int = 100):
    Path(path).write_bytes(gif_bytes(video, delay_ms))


def frame_grid(rows, pad: int = 1) -> np.ndarray:
    """Tile (n_rows, n_cols, h, w) images in [0, 1] into one uint8 array with ``pad`` black gaps."""
    rows = to_uint8(rows)
    nr, nc, h, w = rows.shape
    grid = np.zeros((nr * h + (nr - 1) * pad, nc * w + (nc - 1) * pad), dtype=np.uint8)
    for i in range(nr):
        for j in range(nc):
            grid[i * (h + pad):i * (h + pad) + h, j * (w + pad):j * (w + pad) + w] = rows[i, j]
    return grid


def export_png_grid(videos, path, pad: int = 1):
    """Rows are videos, columns are frames."""
    Image.fromarray(frame_grid(np.asarray(videos), pad), mode="L").save(path, format="PNG")


def export_canvas_sheet(canvas_history, path, sample: int = 0, pad: int = 1):
    """Rows are timesteps 1..T, columns are frames.

    ``canvas_history`` holds the pre-sigmoid canvases after each timestep,
    either (N, A, B) each or batched (n, N, A, B) with ``sample`` selecting one.
    """
    stack = np.stack([c[sample] if c.ndim == 4 else c for c in map(np.asarray, canvas_history)])
    Image.fromarray(frame_grid(sigmoid(stack), pad), mode="L").save(path, format="PNG")
