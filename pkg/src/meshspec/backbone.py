"""Incremental decoder forward pass with per-level caches.

Tokens are processed strictly one position at a time. Combined with the
row-independent kernels this makes every hidden state a pure function of
the token prefix, so feeding a prefix in one call or token-by-token gives
bit-identical results, and so does re-feeding draft tokens during
verification.

Stream bookkeeping (stream index = payload index + 1, BOS at stream 0):

  * point element e aggregates payload positions 3e..3e+2 and is formed
    eagerly while the last of those (stream 3e+3) is processed,
  * face element r aggregates point elements 3r..3r+2 and is formed while
    point element 3r+2 is formed,
  * the upsampled triple of point element e feeds streams 3e+3..3e+5
    (slots 0..2); face element r's triple feeds point elements 3r+3..3r+5;
    learned start vectors stand in below element 0.

Cache lengths after n committed payload tokens are therefore n+1 at the
coordinate level (BOS included), n//3 points, and n//9 faces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import layer_norm, relu, softmax
from .model import (
    LEVEL_COORD,
    LEVEL_POINT,
    BlockWeights,
    HourglassModel,
)

_ROPE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _rope_table(n: int, half: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables for positions [0, n); recomputed wholesale when grown
    so every row is a pure function of its position."""
    cap = 64
    while cap < n:
        cap *= 2
    key = (cap, half)
    if key not in _ROPE_CACHE:
        inv = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
        ang = np.outer(np.arange(cap, dtype=np.float64), inv)
        _ROPE_CACHE[key] = (np.cos(ang), np.sin(ang))
    return _ROPE_CACHE[key]


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate (heads, head_dim) by per-position angles, split-half layout."""
    half = x.shape[1] // 2
    x1, x2 = x[:, :half], x[:, half:]
    out = np.empty_like(x)
    out[:, :half] = x1 * cos - x2 * sin
    out[:, half:] = x1 * sin + x2 * cos
    return out


class _Buf:
    """Growing (n, width) float64 buffer with O(1) truncation."""

    def __init__(self, width: int, cap: int = 64):
        self.data = np.empty((cap, width), dtype=np.float64)
        self.n = 0

    def _grow(self):
        bigger = np.empty((self.data.shape[0] * 2, self.data.shape[1]), dtype=np.float64)
        bigger[: self.n] = self.data[: self.n]
        self.data = bigger

    def append(self, row: np.ndarray):
        if self.n == self.data.shape[0]:
            self._grow()
        self.data[self.n] = row
        self.n += 1

    def row(self, i: int) -> np.ndarray:
        return self.data[i]

    def view(self) -> np.ndarray:
        return self.data[: self.n]

    def truncate(self, n: int):
        assert 0 <= n <= self.n
        self.n = n


class _KVBuf:
    """Per-head key/value cache, shape (heads, n, head_dim)."""

    def __init__(self, heads: int, head_dim: int, cap: int = 64):
        self.k = np.empty((heads, cap, head_dim), dtype=np.float64)
        self.v = np.empty((heads, cap, head_dim), dtype=np.float64)
        self.n = 0

    def _grow(self):
        h, cap, hd = self.k.shape
        nk = np.empty((h, cap * 2, hd), dtype=np.float64)
        nv = np.empty((h, cap * 2, hd), dtype=np.float64)
        nk[:, : self.n] = self.k[:, : self.n]
        nv[:, : self.n] = self.v[:, : self.n]
        self.k, self.v = nk, nv

    def append(self, k: np.ndarray, v: np.ndarray):
        if self.n == self.k.shape[1]:
            self._grow()
        self.k[:, self.n] = k
        self.v[:, self.n] = v
        self.n += 1

    def truncate(self, n: int):
        assert 0 <= n <= self.n
        self.n = n


def _project_heads(x: np.ndarray, w: np.ndarray, heads: int) -> np.ndarray:
    return np.dot(x, w).reshape(heads, -1)


def _mha_over(q: np.ndarray, k: np.ndarray, v: np.ndarray, n: int) -> np.ndarray:
    """Multi-head attention of a single query over n cached positions."""
    heads, hd = q.shape
    scale = 1.0 / np.sqrt(np.float64(hd))
    out = np.empty(heads * hd, dtype=np.float64)
    for h in range(heads):
        scores = np.dot(k[h, :n], q[h]) * scale
        probs = softmax(scores)
        out[h * hd : (h + 1) * hd] = np.dot(probs, v[h, :n])
    return out


def _block_step(
    blk: BlockWeights,
    x: np.ndarray,
    kv: _KVBuf,
    pos: int,
    cos: np.ndarray,
    sin: np.ndarray,
    cond_k: np.ndarray,
    cond_v: np.ndarray,
    heads: int,
) -> np.ndarray:
    """One pre-norm transformer block on a single position: causal
    self-attention over the level cache, cross-attention to the condition,
    feed-forward. Appends this position's k/v to the cache."""
    h = layer_norm(x)
    q = _project_heads(h, blk.sa_wq, heads)
    k = _project_heads(h, blk.sa_wk, heads)
    v = _project_heads(h, blk.sa_wv, heads)
    q = _rope_apply(q, cos[pos], sin[pos])
    k = _rope_apply(k, cos[pos], sin[pos])
    kv.append(k, v)
    x = x + np.dot(_mha_over(q, kv.k, kv.v, kv.n), blk.sa_wo)

    h = layer_norm(x)
    q = _project_heads(h, blk.ca_wq, heads)
    x = x + np.dot(_mha_over(q, cond_k, cond_v, cond_k.shape[1]), blk.ca_wo)

    h = layer_norm(x)
    x = x + np.dot(relu(np.dot(h, blk.ffn_w1) + blk.ffn_b1), blk.ffn_w2) + blk.ffn_b2
    return x


@dataclass
class StepResult:
    stream_index: int
    probs: np.ndarray                       # next-token distribution
    hidden: np.ndarray                      # final residual state (pre head norm)
    point_label_logits: np.ndarray | None   # set when a point element formed
    point_element: int | None


class DecodeSession:
    """All mutable state of one decode: caches, level buffers, counters.

    One decode session per sequence; the model itself is read-only and may
    be shared across sessions.
    """

    def __init__(self, model: HourglassModel, condition: np.ndarray):
        cfg = model.config
        condition = np.asarray(condition, dtype=np.float64)
        if condition.shape != (cfg.condition_len, cfg.model_dim):
            raise ValueError(
                f"condition must be {(cfg.condition_len, cfg.model_dim)}, got {condition.shape}"
            )
        self.model = model
        self.condition = condition
        d, heads, hd = cfg.model_dim, cfg.heads, cfg.head_dim

        # per-block KV caches
        self.kv = {
            group: [_KVBuf(heads, hd) for _ in blocks]
            for group, blocks in model.blocks.items()
        }
        # level feature buffers
        self.coord_pre = _Buf(d)
        self.coord_tap = _Buf(d)
        self.point_pre = _Buf(d)
        self.point_tap = _Buf(d)
        self.point_post = _Buf(d)
        self.point_up = _Buf(3 * d)
        self.face_tap = _Buf(d)
        self.face_out = _Buf(d)
        self.face_up = _Buf(3 * d)
        # projected feature caches for the hierarchical fusion blocks
        self.hf_cache = {
            LEVEL_POINT: _KVBuf(heads, hd),
            LEVEL_COORD: _KVBuf(heads, hd),
        }
        self.n_coord = 0   # stream positions processed (BOS included)
        self.tokens: list[int] = []

        # per-block condition projections, computed once per session
        def cond_kv(wk, wv):
            k = np.dot(condition, wk).reshape(-1, heads, hd).transpose(1, 0, 2)
            v = np.dot(condition, wv).reshape(-1, heads, hd).transpose(1, 0, 2)
            return np.ascontiguousarray(k), np.ascontiguousarray(v)

        self.block_cond = {
            group: [cond_kv(b.ca_wk, b.ca_wv) for b in blocks]
            for group, blocks in model.blocks.items()
        }
        self.sp_cond = {
            level: [cond_kv(h.ca_wk, h.ca_wv) for h in heads_list]
            for level, heads_list in model.sp_heads.items()
        }
        # start-vector upsample triples (stand-ins below element 0)
        self.point_up_start = np.dot(model.start_point, model.up_point).reshape(3, d)
        self.face_up_start = np.dot(model.start_face, model.up_face).reshape(3, d)

    # -- level element formation -------------------------------------------

    @property
    def n_point(self) -> int:
        return self.point_post.n

    @property
    def n_face(self) -> int:
        return self.face_out.n

    def _form_face(self, r: int):
        model, cfg = self.model, self.model.config
        assert r == self.n_face
        stacked = self.point_pre.data[3 * r : 3 * r + 3].reshape(-1)
        x = np.dot(stacked, model.shorten_face)
        cos, sin = _rope_table(r + 1, cfg.head_dim // 2)
        blocks = model.blocks["face"]
        for i, blk in enumerate(blocks[:-1]):
            x = _block_step(blk, x, self.kv["face"][i], r, cos, sin,
                            *self.block_cond["face"][i], cfg.heads)
        self.face_tap.append(x)
        x = _block_step(blocks[-1], x, self.kv["face"][-1], r, cos, sin,
                        *self.block_cond["face"][-1], cfg.heads)
        self.face_out.append(x)
        self.face_up.append(np.dot(x, model.up_face))

    def _form_point(self, e: int) -> np.ndarray:
        """Shorten a completed coordinate triple into point element e, run
        the point-level blocks (forming a face element when due), and
        return this point's label logits."""
        model, cfg = self.model, self.model.config
        assert e == self.n_point
        stacked = self.coord_pre.data[3 * e + 1 : 3 * e + 4].reshape(-1)
        x = np.dot(stacked, model.shorten_point)
        cos, sin = _rope_table(e + 1, cfg.head_dim // 2)
        for i, blk in enumerate(model.blocks["point_pre"]):
            x = _block_step(blk, x, self.kv["point_pre"][i], e, cos, sin,
                            *self.block_cond["point_pre"][i], cfg.heads)
        self.point_pre.append(x)

        if e >= 2 and (e + 1) % 3 == 0:
            self._form_face((e - 2) // 3)

        fgrp = e // 3
        triple = self.face_up_start if fgrp == 0 else self.face_up.row(fgrp - 1).reshape(3, -1)
        x = x + triple[e % 3]

        blocks = model.blocks["point_post"]
        for i, blk in enumerate(blocks[:-1]):
            x = _block_step(blk, x, self.kv["point_post"][i], e, cos, sin,
                            *self.block_cond["point_post"][i], cfg.heads)
        self.point_tap.append(x)
        x = _block_step(blocks[-1], x, self.kv["point_post"][len(blocks) - 1], e, cos, sin,
                        *self.block_cond["point_post"][len(blocks) - 1], cfg.heads)
        self.point_post.append(x)
        self.point_up.append(np.dot(x, model.up_point))
        hf = model.hf[LEVEL_POINT]
        self.hf_cache[LEVEL_POINT].append(
            _project_heads(x, hf.wk, cfg.heads), _project_heads(x, hf.wv, cfg.heads)
        )
        return np.dot(x, model.label_w)

    # -- public stepping -----------------------------------------------------

    def process_token(self, token: int) -> StepResult:
        """Feed one token; returns the next-token distribution after it."""
        model, cfg = self.model, self.model.config
        i = self.n_coord  # stream index of this token
        if not 0 <= token < cfg.vocab:
            raise ValueError(f"token {token} outside vocabulary")
        x = model.embed[token].copy()
        cos, sin = _rope_table(i + 1, cfg.head_dim // 2)
        for bi, blk in enumerate(model.blocks["coord_pre"]):
            x = _block_step(blk, x, self.kv["coord_pre"][bi], i, cos, sin,
                            *self.block_cond["coord_pre"][bi], cfg.heads)
        self.coord_pre.append(x)

        label_logits = None
        point_element = None
        if i >= 3 and i % 3 == 0:
            point_element = i // 3 - 1
            label_logits = self._form_point(point_element)

        grp = i // 3
        triple = self.point_up_start if grp == 0 else self.point_up.row(grp - 1).reshape(3, -1)
        x = x + triple[i % 3]

        blocks = model.blocks["coord_post"]
        for bi, blk in enumerate(blocks[:-1]):
            x = _block_step(blk, x, self.kv["coord_post"][bi], i, cos, sin,
                            *self.block_cond["coord_post"][bi], cfg.heads)
        self.coord_tap.append(x)
        x = _block_step(blocks[-1], x, self.kv["coord_post"][len(blocks) - 1], i, cos, sin,
                        *self.block_cond["coord_post"][len(blocks) - 1], cfg.heads)

        hf = model.hf[LEVEL_COORD]
        self.hf_cache[LEVEL_COORD].append(
            _project_heads(x, hf.wk, cfg.heads), _project_heads(x, hf.wv, cfg.heads)
        )
        probs = softmax(np.dot(layer_norm(x), model.head_w))
        self.n_coord += 1
        self.tokens.append(int(token))
        return StepResult(i, probs, x, label_logits, point_element)

    def rollback(self, payload_len: int):
        """Truncate every cache so exactly `payload_len` payload tokens
        (plus BOS) remain committed."""
        n_stream = payload_len + 1
        if n_stream > self.n_coord:
            raise ValueError("cannot roll forward")
        n_pt, n_fc = payload_len // 3, payload_len // 9
        self.n_coord = n_stream
        del self.tokens[n_stream:]
        self.coord_pre.truncate(n_stream)
        self.coord_tap.truncate(n_stream)
        for buf in (self.point_pre, self.point_tap, self.point_post, self.point_up):
            buf.truncate(n_pt)
        for buf in (self.face_tap, self.face_out, self.face_up):
            buf.truncate(n_fc)
        for group, bufs in self.kv.items():
            n = {"coord_pre": n_stream, "coord_post": n_stream,
                 "point_pre": n_pt, "point_post": n_pt, "face": n_fc}[group]
            for kv in bufs:
                kv.truncate(n)
        self.hf_cache[LEVEL_COORD].truncate(n_stream)
        self.hf_cache[LEVEL_POINT].truncate(n_pt)


def forward_backbone(model: HourglassModel, session: DecodeSession, tokens) -> list[StepResult]:
    """Process a slice of new tokens; returns one StepResult (distribution,
    hidden state, optional point-label logits) per position."""
    if len(tokens) == 0:
        raise ValueError("empty token slice")
    return [session.process_token(int(t)) for t in tokens]
