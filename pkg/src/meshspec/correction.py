"""Structure-aware repair of drafted points.

Every complete drafted point (all three coordinates inside the draft
window) gets a 3-way label: historical (seen in the accepted prefix), new,
or intra-batch (duplicating an earlier point of the same batch). An
intra-batch point that does not already coincide with another batch point
is repaired by copying the nearest new point outside its own triangle;
afterwards fully-drafted faces are re-sorted into the canonical z-y-x
order. Main tokens, incomplete leading/trailing points, and
historical/new points are never modified, and the token count is
preserved, so exact-match verification still decides what survives.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

HISTORICAL, NEW, INTRA_BATCH = 0, 1, 2
LABEL_NAMES = ("historical", "new", "intra_batch")


@dataclass
class DraftBatch:
    positions: np.ndarray            # payload positions of the draft tokens
    tokens: np.ndarray               # draft token values (same length)
    history: frozenset               # accepted-prefix vertex triples
    first_element: int               # lowest complete drafted point element
    points: np.ndarray               # (k, 3) coords of complete drafted points
    labels: np.ndarray               # (k,) label per complete drafted point
    corrections: list = field(default_factory=list)   # (element, source element)
    skipped: list = field(default_factory=list)       # elements left unrepaired

    @property
    def elements(self) -> np.ndarray:
        return self.first_element + np.arange(len(self.points))

    def face_of(self, idx: int) -> int:
        return (self.first_element + idx) // 3

    def _token_index(self, payload_pos: int) -> int:
        return int(payload_pos - self.positions[0])


def classify_points(label_logits) -> np.ndarray:
    """Argmax label per point; ties resolve to the lowest label index."""
    out = np.empty(len(label_logits), dtype=np.int64)
    for i, logits in enumerate(label_logits):
        out[i] = int(np.argmax(np.asarray(logits, dtype=np.float64)))
    return out


def derive_labels(points: np.ndarray, history) -> np.ndarray:
    """Ground-truth labeling oracle: historical if the triple appears in
    the accepted-prefix vertex set, intra-batch if it equals an earlier
    batch point that is not historical, else new."""
    history = frozenset(tuple(int(c) for c in v) for v in history)
    labels = np.empty(len(points), dtype=np.int64)
    seen_new: set = set()
    for i, p in enumerate(points):
        t = tuple(int(c) for c in p)
        if t in history:
            labels[i] = HISTORICAL
        elif t in seen_new:
            labels[i] = INTRA_BATCH
        else:
            labels[i] = NEW
            seen_new.add(t)
    return labels


def build_draft_batch(positions, tokens, accepted_payload,
                      label_logits: dict | None = None) -> DraftBatch:
    """Assemble a batch from draft tokens plus the accepted payload.

    Points whose label logits are missing (coordinate-level-only coverage)
    default to `new`, which never triggers a repair of that point.
    """
    positions = np.asarray(positions, dtype=np.int64)
    tokens = np.array(tokens, dtype=np.int64)
    if len(positions) != len(tokens):
        raise ValueError("positions/tokens length mismatch")
    if len(positions) and not np.array_equal(
        positions, np.arange(positions[0], positions[0] + len(positions))
    ):
        raise ValueError("draft positions must be contiguous")

    accepted = np.asarray(accepted_payload, dtype=np.int64)
    history = frozenset(
        tuple(int(c) for c in accepted[3 * i : 3 * i + 3])
        for i in range(len(accepted) // 3)
    )

    if len(positions) == 0:
        return DraftBatch(positions, tokens, history, 0,
                          np.zeros((0, 3), dtype=np.int64),
                          np.zeros(0, dtype=np.int64))
    first_elem = -(-int(positions[0]) // 3)  # ceil
    last_elem = (int(positions[-1]) + 1) // 3 - 1
    pts = []
    labels = []
    for e in range(first_elem, last_elem + 1):
        i0 = int(3 * e - positions[0])
        pts.append(tokens[i0 : i0 + 3])
        if label_logits is not None and e in label_logits:
            labels.append(int(np.argmax(np.asarray(label_logits[e]))))
        else:
            labels.append(NEW)
    k = max(0, last_elem - first_elem + 1)
    return DraftBatch(
        positions, tokens, history, first_elem,
        np.array(pts, dtype=np.int64).reshape(k, 3),
        np.array(labels, dtype=np.int64),
    )


def correct_batch(batch: DraftBatch) -> DraftBatch:
    """Repair intra-batch points by duplicating the nearest new point
    outside their own triangle (squared Euclidean on bins, lowest-index
    tie-break). Points already overlapping another batch point are left;
    points with no eligible source are left and flagged."""
    tokens = batch.tokens.copy()
    points = batch.points.copy()
    corrections = list(batch.corrections)
    skipped = list(batch.skipped)
    k = len(points)
    for i in range(k):
        if batch.labels[i] != INTRA_BATCH:
            continue
        overlaps = any(j != i and np.array_equal(points[j], points[i]) for j in range(k))
        if overlaps:
            continue
        best = None
        best_d = None
        for j in range(k):
            if batch.labels[j] != NEW or batch.face_of(j) == batch.face_of(i):
                continue
            d = int(np.sum((points[j] - points[i]) ** 2))
            if best_d is None or d < best_d:
                best, best_d = j, d
        if best is None:
            skipped.append(int(batch.elements[i]))
            continue
        points[i] = points[best]
        i0 = batch._token_index(3 * (batch.first_element + i))
        tokens[i0 : i0 + 3] = points[best]
        corrections.append((int(batch.elements[i]), int(batch.elements[best])))
    return replace(batch, tokens=tokens, points=points,
                   corrections=corrections, skipped=skipped)


def resort_batch(batch: DraftBatch) -> DraftBatch:
    """Canonically reorder the fully-drafted faces: vertices sorted z-y-x
    inside each face, faces sorted by lowest vertex (both stable).
    Partial leading/trailing faces stay in place."""
    if len(batch.positions) == 0 or len(batch.points) == 0:
        return batch
    pos0, pos1 = int(batch.positions[0]), int(batch.positions[-1])
    f_lo = -(-pos0 // 9)
    f_hi = (pos1 + 1) // 9 - 1
    if f_hi < f_lo:
        return batch
    tokens = batch.tokens.copy()
    points = batch.points.copy()
    labels = batch.labels.copy()

    faces = []
    for f in range(f_lo, f_hi + 1):
        idx = [3 * f + j - batch.first_element for j in range(3)]
        tri = sorted(
            ((tuple(int(c) for c in points[i]), int(labels[i])) for i in idx),
            key=lambda t: t[0],
        )
        faces.append(tri)
    faces.sort(key=lambda tri: tri[0][0])

    slot = 3 * f_lo - batch.first_element
    for tri in faces:
        for coords, lab in tri:
            points[slot] = coords
            labels[slot] = lab
            payload_pos = 3 * (batch.first_element + slot)
            i0 = batch._token_index(payload_pos)
            tokens[i0 : i0 + 3] = coords
            slot += 1
    return replace(batch, tokens=tokens, points=points, labels=labels)


def correction_pipeline(batch: DraftBatch) -> DraftBatch:
    """Classify-aside, the full repair: correct then canonically resort.
    Applying the pipeline twice equals applying it once."""
    return resort_batch(correct_batch(batch))


def label_loss(label_logits, true_labels) -> float:
    """Mean negative log-probability of the true label under softmax."""
    logits = np.asarray(label_logits, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if len(logits) != len(labels):
        raise ValueError("logits/labels length mismatch")
    if len(labels) == 0:
        return 0.0
    total = 0.0
    for row, y in zip(logits, labels):
        m = np.max(row)
        total += np.log(np.sum(np.exp(row - m))) + m - row[y]
    return float(total / len(labels))
