"""Speculation heads: SP-Blocks, HF-Blocks, per-level drafting, merging.

Drafting is read-only on the session caches. Each level launches from its
split node's tap hidden (the input of that level's final backbone block):

  * coordinate level, base b (any position): head d predicts payload
    b+d+1 directly through the output head,
  * point level, base b (b % 3 == 0): head d predicts point element
    b//3-1+d, whose upsampled slots predict payload 3(e+d)+1..3(e+d)+3,
  * face level, base b (b % 9 == 0): head d predicts face element
    b//9-1+d, expanded twice (face->point->coordinate) with one
    hierarchical fusion against the cache at each expansion.

Pre-pruning coverage is therefore payload b+1..b+D for face/point levels
and b+2..b+1+D for the coordinate level. Optimization rule A drops the
point draft where a face draft shares its base; rule B removes the first
three covered positions from face/point drafts so the backbone plus the
coordinate heads own the first three future tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import DecodeSession, _KVBuf, _mha_over, _project_heads
from .kernels import layer_norm, relu, softmax
from .model import (
    LEVEL_COORD,
    LEVEL_FACE,
    LEVEL_POINT,
    HfWeights,
    HourglassModel,
    SpHeadWeights,
)


@dataclass
class LevelDraft:
    level: str
    base: int                          # payload position of the split node
    positions: np.ndarray              # predicted payload positions, ascending
    dists: list[np.ndarray]
    label_logits: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class DraftSet:
    """Merged drafts for one upcoming pass: positions base+2.. onward."""

    base: int
    positions: np.ndarray
    dists: list[np.ndarray]
    tokens: np.ndarray
    contributors: list[tuple[str, ...]]
    label_logits: dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.positions)

    def debug_dump(self) -> str:
        lines = []
        for i, pos in enumerate(self.positions):
            d = self.dists[i]
            top = np.argsort(-d, kind="stable")[:3]
            probs = " ".join(f"{t}:{d[t]:.3f}" for t in top)
            who = "+".join(self.contributors[i])
            lines.append(f"  +{pos - self.base:>2} pos {pos:>5} [{who}] {probs}")
        return "\n".join(lines)


def _head_probs(model: HourglassModel, x: np.ndarray) -> np.ndarray:
    return softmax(np.dot(layer_norm(x), model.head_w))


def sp_head(hw: SpHeadWeights, h: np.ndarray, cond_k: np.ndarray,
            cond_v: np.ndarray, heads: int) -> np.ndarray:
    """One speculative head: Linear(CA(SA(h), c)) + h.

    Self-attention sees only the single tap position, so its softmax is
    identically one and the q/k path cancels to the value/output chain.
    """
    sa = np.dot(np.dot(h, hw.sa_wv), hw.sa_wo)
    q = _project_heads(sa, hw.ca_wq, heads)
    ca = np.dot(_mha_over(q, cond_k, cond_v, cond_k.shape[1]), hw.ca_wo)
    return np.dot(ca, hw.lin) + h


def sp_block(model: HourglassModel, session: DecodeSession, level: str,
             h: np.ndarray) -> list[np.ndarray]:
    """Run every parameter-independent head of one level's SP-Block."""
    heads = model.config.heads
    out = []
    for hw, (ck, cv) in zip(model.sp_heads[level], session.sp_cond[level]):
        out.append(sp_head(hw, h, ck, cv, heads))
    return out


def hf_block(model: HourglassModel, level: str, h: np.ndarray, slot: int,
             cache: _KVBuf, n: int | None = None) -> np.ndarray:
    """Refine an upsampled feature against the level's cached features:
    h + FFN_slot(Attn(Wq_slot h, K, V)). An empty cache contributes a zero
    attention vector, leaving the residual path."""
    hf: HfWeights = model.hf[level]
    heads = model.config.heads
    n = cache.n if n is None else n
    if n == 0:
        attn = np.zeros(model.config.model_dim, dtype=np.float64)
    else:
        q = _project_heads(h, hf.wq[slot], heads)
        attn = _mha_over(q, cache.k, cache.v, n)
    w1, b1, w2, b2 = hf.ffn[slot]
    return h + np.dot(relu(np.dot(attn, w1) + b1), w2) + b2


# ---------------------------------------------------------------------------
# per-level drafting


def draft_coord_level(model: HourglassModel, session: DecodeSession,
                      base: int) -> LevelDraft:
    """SP-Block only; head d covers payload base+d+1."""
    tap = session.coord_tap.row(base + 1)  # stream index of payload `base`
    feats = sp_block(model, session, LEVEL_COORD, tap)
    dists = [_head_probs(model, f) for f in feats]
    positions = np.arange(base + 2, base + 2 + len(feats))
    return LevelDraft(LEVEL_COORD, base, positions, dists)


def draft_point_level(model: HourglassModel, session: DecodeSession,
                      base: int) -> LevelDraft:
    """SP-Block, one upsample, one fusion against the coordinate cache."""
    if base % 3 != 0:
        raise ValueError("point drafts launch only at point split nodes")
    e = base // 3 - 1
    tap = session.point_tap.row(e) if e >= 0 else model.start_point
    feats = sp_block(model, session, LEVEL_POINT, tap)
    dists: list[np.ndarray] = []
    labels: dict[int, np.ndarray] = {}
    for d, p_hat in enumerate(feats, start=1):
        elem = e + d
        labels[elem] = np.dot(p_hat, model.label_w)
        triple = np.dot(p_hat, model.up_point).reshape(3, -1)
        for j in range(3):
            c = hf_block(model, LEVEL_COORD, triple[j], j, session.hf_cache[LEVEL_COORD])
            dists.append(_head_probs(model, c))
    positions = np.arange(base + 1, base + 1 + len(dists))
    return LevelDraft(LEVEL_POINT, base, positions, dists, labels)


def draft_face_level(model: HourglassModel, session: DecodeSession,
                     base: int) -> LevelDraft:
    """SP-Block, then face->point and point->coordinate expansions, each
    refined against the corresponding cache."""
    if base % 9 != 0:
        raise ValueError("face drafts launch only at face split nodes")
    r = base // 9 - 1
    tap = session.face_tap.row(r) if r >= 0 else model.start_face
    feats = sp_block(model, session, LEVEL_FACE, tap)
    dists: list[np.ndarray] = []
    labels: dict[int, np.ndarray] = {}
    for d, f_hat in enumerate(feats, start=1):
        q = r + d
        point_feats = np.dot(f_hat, model.up_face).reshape(3, -1)
        for j in range(3):
            p_hat = hf_block(model, LEVEL_POINT, point_feats[j], j,
                             session.hf_cache[LEVEL_POINT])
            labels[3 * q + j] = np.dot(p_hat, model.label_w)
            triple = np.dot(p_hat, model.up_point).reshape(3, -1)
            for j2 in range(3):
                c = hf_block(model, LEVEL_COORD, triple[j2], j2,
                             session.hf_cache[LEVEL_COORD])
                dists.append(_head_probs(model, c))
    positions = np.arange(base + 1, base + 1 + len(dists))
    return LevelDraft(LEVEL_FACE, base, positions, dists, labels)


# ---------------------------------------------------------------------------
# pruning and merging


def apply_optimization_rules(active: list[LevelDraft]) -> list[LevelDraft]:
    """Rule A: a point draft sharing a base with an active face draft is
    discarded. Rule B: face and point drafts lose their first three covered
    positions, leaving the first three future tokens to the coordinate
    level. Coordinate drafts pass through untouched."""
    face_bases = {d.base for d in active if d.level == LEVEL_FACE}
    pruned = []
    for d in active:
        if d.level == LEVEL_POINT and d.base in face_bases:
            continue
        if d.level in (LEVEL_POINT, LEVEL_FACE):
            d = LevelDraft(d.level, d.base, d.positions[3:], d.dists[3:], d.label_logits)
            if len(d.positions) == 0:
                continue
        pruned.append(d)
    return pruned


def merge_drafts(contributing: list[LevelDraft], frontier: int,
                 max_window: int | None = None) -> DraftSet:
    """Average the distributions of every draft covering each position
    after frontier+1, renormalize, and take the greedy token. Coverage is
    truncated at the first gap so offsets stay contiguous from 2."""
    by_pos: dict[int, list[tuple[str, int]]] = {}
    for di, d in enumerate(contributing):
        for k, pos in enumerate(d.positions):
            if pos > frontier + 1:
                by_pos.setdefault(int(pos), []).append((di, k))
    positions: list[int] = []
    dists: list[np.ndarray] = []
    tokens: list[int] = []
    contributors: list[tuple[str, ...]] = []
    pos = frontier + 2
    while pos in by_pos and (max_window is None or len(positions) < max_window):
        entries = by_pos[pos]
        acc = np.zeros_like(contributing[entries[0][0]].dists[entries[0][1]])
        for di, k in entries:
            acc = acc + contributing[di].dists[k]
        acc /= len(entries)
        acc /= acc.sum()
        positions.append(pos)
        dists.append(acc)
        tokens.append(int(np.argmax(acc)))
        contributors.append(tuple(contributing[di].level for di, _ in entries))
        pos += 1

    label_logits: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for d in contributing:
        for elem, ll in d.label_logits.items():
            if elem in label_logits:
                label_logits[elem] = label_logits[elem] + ll
                counts[elem] += 1
            else:
                label_logits[elem] = ll.copy()
                counts[elem] = 1
    for elem, c in counts.items():
        if c > 1:
            label_logits[elem] /= c

    return DraftSet(
        base=frontier,
        positions=np.array(positions, dtype=np.int64),
        dists=dists,
        tokens=np.array(tokens, dtype=np.int64),
        contributors=contributors,
        label_logits=label_logits,
    )
