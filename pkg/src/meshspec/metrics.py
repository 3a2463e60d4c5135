"""Geometry metrics over sampled surface points, plus entropy
decompositions of empirical token-pair distributions.

Chamfer and Hausdorff distances are Euclidean (not squared) and come in
two routes: an O(n*m) brute-force reference and a k-d tree path that must
agree with it; tests and the acceptance suite compare the two.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .codec import Mesh


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface sampling, deterministic per seed."""
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces to sample")
    areas = triangle_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh surface area is zero")
    rng = np.random.Generator(np.random.PCG64(seed))
    which = rng.choice(len(mesh.faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[which]]  # (n, 3 corners, 3)
    return (
        tri[:, 0]
        + u[:, None] * (tri[:, 1] - tri[:, 0])
        + v[:, None] * (tri[:, 2] - tri[:, 0])
    )


def nn_distances_brute(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of a, the Euclidean distance to its nearest point
    of b; quadratic reference implementation."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(a))
    for i, p in enumerate(a):
        d2 = np.sum((b - p) ** 2, axis=1)
        out[i] = np.sqrt(d2.min())
    return out


def nn_distances_tree(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(np.asarray(b, dtype=np.float64)).query(
        np.asarray(a, dtype=np.float64)
    )
    return np.asarray(d, dtype=np.float64)


_NN = {"brute": nn_distances_brute, "tree": nn_distances_tree}


def chamfer(a: np.ndarray, b: np.ndarray, method: str = "tree") -> float:
    """Mean of the two directed mean-nearest-neighbor distances."""
    nn = _NN[method]
    return float(0.5 * (nn(a, b).mean() + nn(b, a).mean()))


def hausdorff(a: np.ndarray, b: np.ndarray, method: str = "tree") -> float:
    """Max of the two directed max-nearest-neighbor distances."""
    nn = _NN[method]
    return float(max(nn(a, b).max(), nn(b, a).max()))


def bbox_iou(a: Mesh, b: Mesh) -> float:
    """Axis-aligned bounding-box intersection volume over union volume."""
    lo_a, hi_a = a.vertices.min(axis=0), a.vertices.max(axis=0)
    lo_b, hi_b = b.vertices.min(axis=0), b.vertices.max(axis=0)
    inter = np.prod(np.maximum(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0))
    vol_a = np.prod(hi_a - lo_a)
    vol_b = np.prod(hi_b - lo_b)
    union = vol_a + vol_b - inter
    if union <= 0.0:
        # two degenerate (zero-volume) boxes: identical -> 1, else 0
        return 1.0 if np.allclose(lo_a, lo_b) and np.allclose(hi_a, hi_b) else 0.0
    return float(inter / union)


# ---------------------------------------------------------------------------
# entropy decompositions


def _h(p: np.ndarray) -> float:
    p = p[p > 0.0]
    return float(-np.sum(p * np.log(p)))


def entropy_decomposition(joint: np.ndarray) -> dict:
    """All entropy quantities (nats) of a joint table over (X, Y), with
    the 0*log 0 = 0 convention, plus a self-check of the identities
    H(X) = H(X|Y) + I(X;Y) and
    H(X)+H(Y) = H(X|Y) + 2 I(X;Y) + H(Y|X)."""
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 2 or np.any(joint < 0) or joint.sum() <= 0:
        raise ValueError("joint must be a nonnegative 2-D table with positive mass")
    joint = joint / joint.sum()
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    h_x, h_y, h_xy = _h(px), _h(py), _h(joint.reshape(-1))
    h_x_given_y = h_xy - h_y
    h_y_given_x = h_xy - h_x
    i_xy = h_x + h_y - h_xy
    out = {
        "H_X": h_x, "H_Y": h_y, "H_XY": h_xy,
        "H_X_given_Y": h_x_given_y, "H_Y_given_X": h_y_given_x, "I_XY": i_xy,
    }
    if abs(h_x - (h_x_given_y + i_xy)) > 1e-9:
        raise AssertionError("entropy identity H(X) = H(X|Y) + I(X;Y) violated")
    if abs((h_x + h_y) - (h_x_given_y + 2 * i_xy + h_y_given_x)) > 1e-9:
        raise AssertionError("entropy identity for H(X)+H(Y) violated")
    return out


def joint_from_sequences(sequences, vocab: int) -> np.ndarray:
    """Empirical joint over adjacent token pairs (X = token t, Y = token
    t+1) pooled across sequences."""
    joint = np.zeros((vocab, vocab), dtype=np.float64)
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        for x, y in zip(seq[:-1], seq[1:]):
            joint[x, y] += 1.0
    if joint.sum() == 0:
        raise ValueError("no token pairs found")
    return joint
