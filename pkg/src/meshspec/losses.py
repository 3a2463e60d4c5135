"""Evaluable training objectives and the micro-scale gradient check.

The coordinate loss is the mean negative log-probability of the target
token over every prediction the decoder makes under teacher forcing: the
backbone's next-token outputs plus all post-pruning draft predictions.
The label loss supervises the 3-way point labels of the face/point draft
paths against the geometric ground-truth oracle. The gradient check
differentiates the combined objective with reverse-mode autodiff on a
mirrored forward (see _difftwin) and compares against central finite
differences of this module's forward, for a sampled subset of weights.
"""

from __future__ import annotations

import numpy as np

from .backbone import DecodeSession
from .correction import derive_labels
from .heads import (
    LevelDraft,
    apply_optimization_rules,
    draft_coord_level,
    draft_face_level,
    draft_point_level,
)
from .model import LEVEL_COORD, LEVEL_FACE, LEVEL_POINT, HourglassModel


def coord_loss(dists, targets) -> float:
    """-(1/N) sum log p_t(x_t) over one distribution per target."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(dists) != len(targets):
        raise ValueError("one distribution per target required")
    if len(targets) == 0:
        return 0.0
    total = 0.0
    for d, t in zip(dists, targets):
        total -= np.log(np.asarray(d, dtype=np.float64)[t])
    return float(total / len(targets))


def total_loss(coord: float, label: float, gamma: float = 0.3) -> float:
    return float(coord + gamma * label)


def draft_schedule(payload_len: int) -> list[tuple[str, int]]:
    """Which (level, base) drafts fire while sweeping a training sequence:
    coordinate at every payload position, point at multiples of three that
    are not face split nodes, face at multiples of nine."""
    sched = []
    for p in range(payload_len):
        if p % 9 == 0:
            sched.append((LEVEL_FACE, p))
        elif p % 3 == 0:
            sched.append((LEVEL_POINT, p))
        sched.append((LEVEL_COORD, p))
    return sched


def label_targets_for(tokens: np.ndarray, elements, base: int) -> list[tuple[int, int]]:
    """(element, ground-truth label) for the labeled elements of a draft at
    `base`, skipping elements whose point lies beyond the sequence. The
    oracle history is the complete-point prefix through `base`."""
    payload = np.asarray(tokens[1:], dtype=np.int64)
    n_hist = (base + 1) // 3
    history = [payload[3 * i : 3 * i + 3] for i in range(n_hist)]
    usable = [e for e in sorted(elements) if 3 * e + 3 <= len(payload)]
    pts = np.array([payload[3 * e : 3 * e + 3] for e in usable], dtype=np.int64).reshape(-1, 3)
    labels = derive_labels(pts, history)
    return list(zip(usable, (int(v) for v in labels)))


def training_forward(model: HourglassModel, tokens, condition):
    """Teacher-forced sweep producing every supervised prediction.

    Returns (coord_dists, coord_targets, label_logits, label_targets).
    Draft predictions are collected with the same split schedule and
    pruning rules the decoder uses, with caches holding exactly the prefix
    up to each split's base.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("need at least BOS plus one payload token")
    session = DecodeSession(model, condition)
    coord_dists, coord_targets = [], []
    label_logits, label_labels = [], []

    def harvest_coords(draft: LevelDraft):
        for pos, dist in zip(draft.positions, draft.dists):
            if pos + 1 < len(tokens):
                coord_dists.append(dist)
                coord_targets.append(int(tokens[pos + 1]))

    def harvest_labels(draft: LevelDraft):
        # label supervision covers every computed point feature, even when
        # rule B prunes all of a draft's coordinate predictions
        for elem, lab in label_targets_for(tokens, draft.label_logits.keys(), draft.base):
            label_logits.append(draft.label_logits[elem])
            label_labels.append(lab)

    for i in range(len(tokens) - 1):
        res = session.process_token(int(tokens[i]))
        coord_dists.append(res.probs)
        coord_targets.append(int(tokens[i + 1]))
        p = i - 1  # payload position just consumed
        if p < 0:
            continue
        fresh = []
        if p % 9 == 0:
            fresh.append(draft_face_level(model, session, p))
        elif p % 3 == 0:
            fresh.append(draft_point_level(model, session, p))
        for d in fresh:
            harvest_labels(d)
        for d in apply_optimization_rules(fresh):
            harvest_coords(d)
        harvest_coords(draft_coord_level(model, session, p))
    return coord_dists, coord_targets, label_logits, label_labels


def evaluate_total_loss(model: HourglassModel, tokens, condition,
                        gamma: float | None = None) -> dict:
    """L_total = L_coord + gamma * L_label on one teacher-forced sequence."""
    from .correction import label_loss as _label_loss

    gamma = model.config.gamma if gamma is None else gamma
    cd, ct, ll, lt = training_forward(model, tokens, condition)
    lc = coord_loss(cd, ct)
    lb = _label_loss(np.array(ll), np.array(lt)) if ll else 0.0
    lt_total = total_loss(lc, lb, gamma)
    if not np.isfinite(lt_total):
        raise FloatingPointError("non-finite training loss")
    return {
        "total": lt_total, "coord": lc, "label": lb,
        "n_coord_terms": len(ct), "n_label_terms": len(lt),
    }


def grad_check(model: HourglassModel, tokens, condition, eps: float = 1e-5,
               samples: int = 24, seed: int = 0,
               tensors: tuple[str, ...] | None = None) -> dict:
    """Central finite differences of the total loss against reverse-mode
    gradients of the mirrored forward, on `samples` randomly chosen weight
    entries (restricted to `tensors` when given). Returns the worst
    relative error and per-entry details."""
    from ._difftwin import twin_loss_and_grads

    tokens = np.asarray(tokens, dtype=np.int64)
    condition = np.asarray(condition, dtype=np.float64)
    twin_total, grads = twin_loss_and_grads(model, tokens, condition)

    base = evaluate_total_loss(model, tokens, condition)
    if abs(twin_total - base["total"]) > 1e-8 * max(1.0, abs(base["total"])):
        raise AssertionError(
            f"mirrored forward disagrees with primary forward: "
            f"{twin_total!r} vs {base['total']!r}"
        )

    rng = np.random.Generator(np.random.PCG64(seed))
    names = sorted(model.params) if tensors is None else list(tensors)
    entries = []
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        idx = int(rng.integers(model.params[name].size))
        entries.append((name, idx))

    details = []
    max_rel = 0.0
    for name, idx in entries:
        flat = model.params[name].reshape(-1)
        old = flat[idx]
        flat[idx] = old + eps
        up = evaluate_total_loss(model, tokens, condition)["total"]
        flat[idx] = old - eps
        down = evaluate_total_loss(model, tokens, condition)["total"]
        flat[idx] = old
        fd = (up - down) / (2.0 * eps)
        an = float(np.asarray(grads[name]).reshape(-1)[idx])
        # below ~1e-6 the central difference is pure f64 roundoff
        # (eps_mach * |L| / eps), so floor the denominator there
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        max_rel = max(max_rel, rel)
        details.append({"tensor": name, "index": idx, "fd": fd, "grad": an, "rel": rel})
    return {"max_rel_err": max_rel, "entries": details, "loss": base["total"]}
