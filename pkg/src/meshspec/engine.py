"""Greedy decoding: plain autoregressive baseline and the speculative
predict-correct-verify loop.

The speculative loop feeds, per pass, the pending main token plus the
corrected draft tokens. Tokens are pushed through the backbone one at a
time and a draft is only processed after it matched the backbone's own
argmax, so the caches never hold a rejected position and the pass can
stop at the first mismatch. The backbone's argmax after the last accepted
input becomes the next main token and is emitted immediately (it is the
backbone's own output). Since every emitted token is a backbone argmax
over the identical committed prefix, the output is bit-identical to the
baseline's, whatever the drafts contained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .backbone import DecodeSession
from .codec import bos_id, eos_id
from .correction import build_draft_batch, correction_pipeline
from .heads import (
    DraftSet,
    LevelDraft,
    apply_optimization_rules,
    draft_coord_level,
    draft_face_level,
    draft_point_level,
    merge_drafts,
)
from .model import LEVEL_COORD, LEVEL_FACE, LEVEL_POINT, HourglassModel

STATS_KEYS = ("forward_passes", "tokens", "m_bar", "face_acc", "point_acc",
              "coord_acc", "tps", "speedup")


@dataclass
class AcceptStats:
    forward_passes: int = 0
    tokens_emitted: int = 0
    drafted: dict = field(default_factory=dict)       # level -> tokens fed
    accepted: dict = field(default_factory=dict)      # level -> tokens verified
    events: dict = field(default_factory=dict)        # level -> passes with drafts
    max_window: int = 0                               # most drafts fed in one pass
    truncated: bool = False                           # budget hit mid-face

    @property
    def m_bar(self) -> float:
        return self.tokens_emitted / max(1, self.forward_passes)

    def level_acc(self, level: str) -> float | None:
        if self.events.get(level, 0) == 0:
            return None
        return self.accepted.get(level, 0) / self.events[level]

    def to_json(self, tps: float | None = None, speedup: float | None = None) -> dict:
        return {
            "forward_passes": self.forward_passes,
            "tokens": self.tokens_emitted,
            "m_bar": self.m_bar,
            "face_acc": self.level_acc(LEVEL_FACE),
            "point_acc": self.level_acc(LEVEL_POINT),
            "coord_acc": self.level_acc(LEVEL_COORD),
            "tps": tps,
            "speedup": speedup,
        }


def stats_json_text(stats_dict: dict) -> str:
    return json.dumps({k: stats_dict[k] for k in STATS_KEYS}, indent=2, sort_keys=False) + "\n"


def decode_baseline(model: HourglassModel, condition: np.ndarray, budget: int,
                    seed: int = 0) -> np.ndarray:
    """Strict greedy reference: one token per forward pass until EOS or
    `budget` payload tokens. Greedy decoding is deterministic; `seed` is
    accepted for interface symmetry."""
    del seed
    bins = model.config.bins
    tokens = [bos_id(bins)]
    if budget <= 0:
        return np.array(tokens, dtype=np.int64)
    session = DecodeSession(model, condition)
    res = session.process_token(tokens[0])
    while True:
        nxt = int(np.argmax(res.probs))
        tokens.append(nxt)
        payload = len(tokens) - 1
        if nxt == eos_id(bins) or payload >= budget:
            break
        res = session.process_token(nxt)
    return np.array(tokens, dtype=np.int64)


def _fresh_drafts(model, session, frontier: int, last_base: dict) -> list[LevelDraft]:
    """Produce the fresh level drafts after a pass committed `frontier`:
    the latest un-drafted face and point split nodes (rule A skips point
    splits that coincide with face splits)."""
    fresh: list[LevelDraft] = []
    face_base = (frontier // 9) * 9
    if face_base >= 0 and face_base > last_base[LEVEL_FACE]:
        fresh.append(draft_face_level(model, session, face_base))
        last_base[LEVEL_FACE] = face_base
    point_base = (frontier // 3) * 3
    if point_base >= 0 and point_base > last_base[LEVEL_POINT]:
        last_base[LEVEL_POINT] = point_base
        if point_base % 9 != 0:
            fresh.append(draft_point_level(model, session, point_base))
    return apply_optimization_rules(fresh)


def decode_speculative(
    model: HourglassModel,
    condition: np.ndarray,
    budget: int,
    seed: int = 0,
    teacher: np.ndarray | None = None,
    teacher_window: int = 9,
    trace: list | None = None,
) -> tuple[np.ndarray, AcceptStats]:
    """Predict-correct-verify decoding.

    With `teacher` (a full token sequence from a baseline pre-run), drafts
    are copied from it in fixed windows instead of being predicted, which
    makes every draft verify; correction is bypassed in that mode.
    """
    del seed
    bins = model.config.bins
    bos, eos = bos_id(bins), eos_id(bins)
    stats = AcceptStats()
    if budget <= 0:
        return np.array([bos], dtype=np.int64), stats

    session = DecodeSession(model, condition)
    emitted: list[int] = []
    ended = False
    retained: dict[str, LevelDraft] = {}
    last_base = {LEVEL_FACE: -1, LEVEL_POINT: -1}
    pending_tokens: np.ndarray = np.zeros(0, dtype=np.int64)
    pending_contrib: list[tuple[str, ...]] = []
    teacher_payload = None if teacher is None else np.asarray(teacher, dtype=np.int64)[1:]

    while not ended:
        n = len(emitted)
        lead = bos if n == 0 else emitted[-1]
        max_drafts = budget - n - 1
        if teacher_payload is not None:
            window = teacher_payload[n : n + min(teacher_window, max(0, max_drafts))]
            drafts = [int(t) for t in window]
            contribs = [("teacher",)] * len(drafts)
        else:
            drafts = [int(t) for t in pending_tokens[: max(0, max_drafts)]]
            contribs = pending_contrib[: len(drafts)]

        stats.forward_passes += 1
        stats.max_window = max(stats.max_window, len(drafts))
        seen = set()
        for levels in contribs:
            for lv in levels:
                stats.drafted[lv] = stats.drafted.get(lv, 0) + 1
                seen.add(lv)
        for lv in seen:
            stats.events[lv] = stats.events.get(lv, 0) + 1

        res = session.process_token(lead)
        new_tokens: list[int] = []
        for idx, d in enumerate(drafts):
            backbone_next = int(np.argmax(res.probs))
            if d != backbone_next:
                break
            new_tokens.append(d)
            for lv in contribs[idx]:
                stats.accepted[lv] = stats.accepted.get(lv, 0) + 1
            if d == eos:
                ended = True
                break
            res = session.process_token(d)
        if not ended:
            nxt = int(np.argmax(res.probs))
            new_tokens.append(nxt)
            if nxt == eos:
                ended = True
        emitted.extend(new_tokens)
        stats.tokens_emitted += len(new_tokens)
        if len(emitted) >= budget:
            ended = True
        if trace is not None:
            trace.append(
                f"pass {stats.forward_passes}: fed {len(drafts)} drafts, "
                f"emitted {len(new_tokens)}, payload {len(emitted)}"
            )
        if ended:
            break

        # draft for the next pass from the newly committed frontier
        frontier = len(emitted) - 2  # last committed payload position
        if teacher_payload is not None:
            continue
        if frontier < 0:
            pending_tokens = np.zeros(0, dtype=np.int64)
            pending_contrib = []
            continue
        for d in _fresh_drafts(model, session, frontier, last_base):
            retained[d.level] = d
        contributing = [retained[lv] for lv in (LEVEL_FACE, LEVEL_POINT) if lv in retained]
        contributing.append(draft_coord_level(model, session, frontier))
        merged = merge_drafts(contributing, frontier)
        if len(merged):
            batch = build_draft_batch(merged.positions, merged.tokens,
                                      emitted, merged.label_logits)
            batch = correction_pipeline(batch)
            pending_tokens = batch.tokens
            pending_contrib = merged.contributors
            if trace is not None:
                trace.append(merged.debug_dump())
                if batch.corrections or batch.skipped:
                    trace.append(
                        f"  repaired {batch.corrections}, skipped {batch.skipped}"
                    )
        else:
            pending_tokens = np.zeros(0, dtype=np.int64)
            pending_contrib = []

    tokens = np.array([bos] + emitted, dtype=np.int64)
    payload = len(tokens) - 1
    stats.truncated = tokens[-1] != eos and payload % 9 != 0
    return tokens, stats


def speedup_report(stats: AcceptStats, t_ori: float, t_ours: float) -> float:
    """S = t_ori * m_bar / t_ours, with t_ori in seconds per baseline token
    and t_ours in seconds per speculative pass."""
    if t_ours <= 0:
        raise ValueError("t_ours must be positive")
    return t_ori * stats.m_bar / t_ours
