"""Closed-grammar captions and the conditioning vectors built from them.

Grammar (whitespace-normalized, case-insensitive)::

    caption := clause ["and" clause]
    clause  := "digit" DIGIT "is" "moving" ("left and right" | "up and down")
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import INIT_SCALE, lstm_step, lstm_step_backward

HORIZONTAL = "left-right"
VERTICAL = "up-down"
MOTIONS = (HORIZONTAL, VERTICAL)
MOTION_WORDS = {HORIZONTAL: ("left", "and", "right"), VERTICAL: ("up", "and", "down")}

VOCAB = ("digit", "is", "moving", "left", "right", "up", "down", "and") + tuple(str(d) for d in range(10))
WORD_INDEX = {w: i for i, w in enumerate(VOCAB)}

ONEHOT_DIM = 24
_SLOT_DIM = 12


class CaptionParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (token {position})")
        self.position = position


@dataclass(frozen=True)
class CaptionTemplate:
    slots: tuple  # ((digit, motion), ...)

    def __post_init__(self):
        if len(self.slots) not in (1, 2):
            raise ValueError(f"caption arity must be 1 or 2, got {len(self.slots)}")
        for digit, motion in self.slots:
            if not (isinstance(digit, (int, np.integer)) and 0 <= digit <= 9):
                raise ValueError(f"digit must be 0-9, got {digit!r}")
            if motion not in MOTIONS:
                raise ValueError(f"unknown motion {motion!r}")

    @property
    def arity(self) -> int:
        return len(self.slots)


@dataclass(frozen=True)
class Caption:
    text: str
    parsed: CaptionTemplate


def render(template: CaptionTemplate) -> str:
    clauses = [f"digit {d} is moving " + " ".join(MOTION_WORDS[m]) for d, m in template.slots]
    return " and ".join(clauses)


def caption_for(slots) -> Caption:
    """Build a caption from ``(digit, motion)`` pairs (motion may also be an axis name)."""
    norm = []
    for digit, motion in slots:
        norm.append((int(digit), {"horizontal": HORIZONTAL, "vertical": VERTICAL}.get(motion, motion)))
    template = CaptionTemplate(tuple(norm))
    return Caption(render(template), template)


def tokenize(text: str) -> list:
    return text.lower().split()


def parse_caption(text: str) -> CaptionTemplate:
    """Parse a caption string; errors report the 1-based offending token."""
    toks = tokenize(text)
    for pos, tok in enumerate(toks, start=1):
        if tok not in WORD_INDEX:
            raise CaptionParseError(f"unknown word {tok!r}", pos)

    pos = 0

    def expect(word=None):
        nonlocal pos
        if pos >= len(toks):
            raise CaptionParseError("unexpected end of caption", pos + 1)
        tok = toks[pos]
        if word is not None and tok != word:
            raise CaptionParseError(f"expected {word!r}, got {tok!r}", pos + 1)
        pos += 1
        return tok

    def clause():
        expect("digit")
        tok = expect()
        if not tok.isdigit():
            raise CaptionParseError(f"expected a digit, got {tok!r}", pos)
        digit = int(tok)
        expect("is")
        expect("moving")
        first = expect()
        for motion, words in MOTION_WORDS.items():
            if first == words[0]:
                expect(words[1])
                expect(words[2])
                return digit, motion
        raise CaptionParseError(f"expected a motion, got {first!r}", pos)

    slots = [clause()]
    if pos < len(toks):
        expect("and")
        slots.append(clause())
    if pos < len(toks):
        raise CaptionParseError(f"trailing tokens after caption: {toks[pos]!r}", pos + 1)
    return CaptionTemplate(tuple(slots))


def encode_onehot(template: CaptionTemplate) -> np.ndarray:
    """[digit1(10) | motion1(2) | digit2(10) | motion2(2)]; absent slot is zeros."""
    s = np.zeros(ONEHOT_DIM)
    for k, (digit, motion) in enumerate(template.slots):
        s[k * _SLOT_DIM + digit] = 1.0
        s[k * _SLOT_DIM + 10 + MOTIONS.index(motion)] = 1.0
    return s


def token_ids(text: str) -> np.ndarray:
    ids = []
    for pos, tok in enumerate(tokenize(text), start=1):
        if tok not in WORD_INDEX:
            raise CaptionParseError(f"out-of-vocabulary token {tok!r}", pos)
        ids.append(WORD_INDEX[tok])
    return np.array(ids, dtype=np.int64)


def recurrent_init(rng, word_dim: int, s_dim: int) -> dict:
    return {
        "cap_E": rng.uniform(-INIT_SCALE, INIT_SCALE, (len(VOCAB), word_dim)),
        "cap_W": rng.uniform(-INIT_SCALE, INIT_SCALE, (word_dim + s_dim, 4 * s_dim)),
        "cap_b": np.zeros(4 * s_dim),
    }


def pad_tokens(texts) -> tuple:
    seqs = [token_ids(t) for t in texts]
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    lengths = np.array([len(s) for s in seqs])
    for k, s in enumerate(seqs):
        ids[k, :len(s)] = s
    return ids, lengths


def recurrent_forward(weights, ids, lengths):
    """Final hidden state of the token LSTM for padded ids (batch, L)."""
    E, W, b = weights["cap_E"], weights["cap_W"], weights["cap_b"]
    n, L = ids.shape
    H = b.shape[0] // 4
    h = np.zeros((n, H), dtype=W.dtype)
    c = np.zeros_like(h)
    caches = []
    for j in range(L):
        m = (j < lengths)[:, None].astype(W.dtype)
        h_new, c_new, cache = lstm_step(E[ids[:, j]], h, c, W, b)
        caches.append((cache, m))
        h = m * h_new + (1 - m) * h
        c = m * c_new + (1 - m) * c
    return h, (ids, caches)


def recurrent_backward(ds, weights, cache, grads):
    ids, caches = cache
    W = weights["cap_W"]
    dh = ds
    dc = np.zeros_like(ds)
    for j in reversed(range(len(caches))):
        step_cache, m = caches[j]
        dx, dh_prev, dc_prev = lstm_step_backward(m * dh, m * dc, step_cache, W, grads, "cap")
        np.add.at(grads["cap_E"], ids[:, j], dx)
        dh = (1 - m) * dh + dh_prev
        dc = (1 - m) * dc + dc_prev


def encode_recurrent(weights, text: str) -> np.ndarray:
    ids, lengths = pad_tokens([text])
    s, _ = recurrent_forward(weights, ids, lengths)
    return s[0]


def all_captions(arity: int = 1) -> list:
    """Every caption string the grammar admits for the given arity."""
    singles = [(d, m) for d in range(10) for m in MOTIONS]
    if arity == 1:
        return [render(CaptionTemplate((s,))) for s in singles]
    return [render(CaptionTemplate((s1, s2))) for s1 in singles for s2 in singles]
