"""Differentiable mirror of the teacher-forced training forward.

The primary decoder is plain NumPy, so the gradient check needs a second
route to analytic gradients: this module re-traces the exact same
computation with jax.numpy (same rotary tables, same norms, same split
schedule and pruning) as a pure function of the parameter dict, and
differentiates it with reverse-mode autodiff. Any structural drift
between the two forwards shows up as a loss mismatch or as an
FD-vs-analytic gap, so the mirror is pinned by the check it serves.

Only used by losses.grad_check, on micro configurations; imports jax
lazily so the rest of the package never pays for it.
"""

from __future__ import annotations

import numpy as np

from .backbone import _rope_table
from .model import LEVEL_COORD, LEVEL_FACE, LEVEL_POINT, HourglassModel


def _static_draft_plan(tokens: np.ndarray) -> list[tuple[str, int]]:
    plan: list[tuple[str, int]] = []
    for i in range(len(tokens) - 1):
        p = i - 1
        if p < 0:
            continue
        if p % 9 == 0:
            plan.append((LEVEL_FACE, p))
        elif p % 3 == 0:
            plan.append((LEVEL_POINT, p))
        plan.append((LEVEL_COORD, p))
    return plan


def _labeled_elements(cfg, level: str, base: int) -> list[int]:
    if level == LEVEL_POINT:
        e = base // 3 - 1
        return [e + d for d in range(1, cfg.draft_point // 3 + 1)]
    r = base // 9 - 1
    return [3 * (r + d) + j for d in range(1, cfg.draft_face // 9 + 1) for j in range(3)]


def twin_loss_and_grads(model: HourglassModel, tokens: np.ndarray,
                        condition: np.ndarray, return_terms: bool = False):
    import jax

    jax.config.update("jax_enable_x64", True)
    import jax.numpy as jnp

    from .losses import label_targets_for

    cfg = model.config
    heads, hd, dim = cfg.heads, cfg.head_dim, cfg.model_dim
    scale = 1.0 / np.sqrt(float(hd))
    n = len(tokens)
    plan = _static_draft_plan(tokens)

    # ground-truth labels are data, not parameters: resolve them up front
    label_plan: dict[tuple[str, int], list[tuple[int, int]]] = {}
    for level, base in plan:
        if level in (LEVEL_POINT, LEVEL_FACE):
            elems = _labeled_elements(cfg, level, base)
            label_plan[(level, base)] = label_targets_for(tokens, elems, base)

    cos_c, sin_c = (jnp.asarray(t) for t in _rope_table(n + 1, hd // 2))

    params0 = {k: jnp.asarray(v) for k, v in model.params.items()}
    token_list = [int(t) for t in tokens]

    def term_fn(p):
        def ln(x):
            mean = jnp.mean(x)
            c = x - mean
            return c / jnp.sqrt(jnp.mean(c * c) + 1e-5)

        def rope(x, pos):
            half = hd // 2
            x1, x2 = x[:, :half], x[:, half:]
            return jnp.concatenate(
                [x1 * cos_c[pos] - x2 * sin_c[pos], x1 * sin_c[pos] + x2 * cos_c[pos]],
                axis=1,
            )

        def mha(q, ks, vs):
            outs = []
            for h in range(heads):
                k = jnp.stack([kk[h] for kk in ks])
                v = jnp.stack([vv[h] for vv in vs])
                probs = jax.nn.softmax(jnp.dot(k, q[h]) * scale)
                outs.append(jnp.dot(probs, v))
            return jnp.concatenate(outs)

        def cond_proj(wk, wv):
            L = cfg.condition_len
            ck = jnp.dot(jnp.asarray(condition), p[wk]).reshape(L, heads, hd).transpose(1, 0, 2)
            cv = jnp.dot(jnp.asarray(condition), p[wv]).reshape(L, heads, hd).transpose(1, 0, 2)
            return ck, cv

        def mha_cond(q, ck, cv):
            outs = []
            for h in range(heads):
                probs = jax.nn.softmax(jnp.dot(ck[h], q[h]) * scale)
                outs.append(jnp.dot(probs, cv[h]))
            return jnp.concatenate(outs)

        kv: dict[str, list] = {}
        cond_kv: dict[str, tuple] = {}

        def block_step(name, x, pos, use_rope=True):
            ks, vs = kv.setdefault(name + ".k", []), kv.setdefault(name + ".v", [])
            h = ln(x)
            q = jnp.dot(h, p[f"{name}.sa.wq"]).reshape(heads, hd)
            k = jnp.dot(h, p[f"{name}.sa.wk"]).reshape(heads, hd)
            v = jnp.dot(h, p[f"{name}.sa.wv"]).reshape(heads, hd)
            if use_rope:
                q, k = rope(q, pos), rope(k, pos)
            ks.append(k)
            vs.append(v)
            x = x + jnp.dot(mha(q, ks, vs), p[f"{name}.sa.wo"])
            if name not in cond_kv:
                cond_kv[name] = cond_proj(f"{name}.ca.wk", f"{name}.ca.wv")
            h = ln(x)
            q = jnp.dot(h, p[f"{name}.ca.wq"]).reshape(heads, hd)
            x = x + jnp.dot(mha_cond(q, *cond_kv[name]), p[f"{name}.ca.wo"])
            h = ln(x)
            x = x + jnp.dot(
                jnp.maximum(jnp.dot(h, p[f"{name}.ffn.w1"]) + p[f"{name}.ffn.b1"], 0.0),
                p[f"{name}.ffn.w2"],
            ) + p[f"{name}.ffn.b2"]
            return x

        def group_names(group):
            counts = {
                "coord_pre": cfg.layers_coord // 2,
                "coord_post": cfg.layers_coord - cfg.layers_coord // 2,
                "point_pre": cfg.layers_point // 2,
                "point_post": cfg.layers_point - cfg.layers_point // 2,
                "face": cfg.layers_face,
            }
            return [f"{group}.{i}" for i in range(counts[group])]

        coord_pre, coord_tap = [], []
        point_pre, point_tap, point_post, point_up = [], [], [], []
        face_tap, face_out, face_up = [], [], []
        khf = {LEVEL_POINT: ([], []), LEVEL_COORD: ([], [])}
        point_up_start = jnp.dot(p["start.point"], p["up.point"]).reshape(3, dim)
        face_up_start = jnp.dot(p["start.face"], p["up.face"]).reshape(3, dim)

        def hf_append(level, x):
            ks, vs = khf[level]
            ks.append(jnp.dot(x, p[f"hf.{level}.k"]).reshape(heads, hd))
            vs.append(jnp.dot(x, p[f"hf.{level}.v"]).reshape(heads, hd))

        def form_face(r):
            x = jnp.dot(jnp.concatenate(point_pre[3 * r : 3 * r + 3]), p["shorten.face"])
            names = group_names("face")
            for name in names[:-1]:
                x = block_step(name, x, r)
            face_tap.append(x)
            x = block_step(names[-1], x, r)
            face_out.append(x)
            face_up.append(jnp.dot(x, p["up.face"]).reshape(3, dim))

        def form_point(e):
            x = jnp.dot(jnp.concatenate(coord_pre[3 * e + 1 : 3 * e + 4]), p["shorten.point"])
            for name in group_names("point_pre"):
                x = block_step(name, x, e)
            point_pre.append(x)
            if e >= 2 and (e + 1) % 3 == 0:
                form_face((e - 2) // 3)
            fgrp = e // 3
            triple = face_up_start if fgrp == 0 else face_up[fgrp - 1]
            x = x + triple[e % 3]
            names = group_names("point_post")
            for name in names[:-1]:
                x = block_step(name, x, e)
            point_tap.append(x)
            x = block_step(names[-1], x, e)
            point_post.append(x)
            point_up.append(jnp.dot(x, p["up.point"]).reshape(3, dim))
            hf_append(LEVEL_POINT, x)

        def process_token(tok, i):
            x = p["embed"][tok]
            for name in group_names("coord_pre"):
                x = block_step(name, x, i)
            coord_pre.append(x)
            if i >= 3 and i % 3 == 0:
                form_point(i // 3 - 1)
            grp = i // 3
            triple = point_up_start if grp == 0 else point_up[grp - 1]
            x = x + triple[i % 3]
            names = group_names("coord_post")
            for name in names[:-1]:
                x = block_step(name, x, i)
            coord_tap.append(x)
            x = block_step(names[-1], x, i)
            hf_append(LEVEL_COORD, x)
            return x

        def head_logprob(x, target):
            logits = jnp.dot(ln(x), p["head.w"])
            return jax.nn.log_softmax(logits)[target]

        def sp_heads_for(level, h):
            outs = []
            counts = {LEVEL_FACE: cfg.draft_face // 9,
                      LEVEL_POINT: cfg.draft_point // 3,
                      LEVEL_COORD: cfg.draft_coord}[level]
            for d in range(counts):
                pre = f"sp.{level}.{d}"
                sa = jnp.dot(jnp.dot(h, p[f"{pre}.sa.wv"]), p[f"{pre}.sa.wo"])
                if pre not in cond_kv:
                    cond_kv[pre] = cond_proj(f"{pre}.ca.wk", f"{pre}.ca.wv")
                q = jnp.dot(sa, p[f"{pre}.ca.wq"]).reshape(heads, hd)
                ca = jnp.dot(mha_cond(q, *cond_kv[pre]), p[f"{pre}.ca.wo"])
                outs.append(jnp.dot(ca, p[f"{pre}.lin"]) + h)
            return outs

        def hf_apply(level, h, slot):
            ks, vs = khf[level]
            if len(ks) == 0:
                attn = jnp.zeros(dim)
            else:
                q = jnp.dot(h, p[f"hf.{level}.q{slot}"]).reshape(heads, hd)
                attn = mha(q, ks, vs)
            w1, b1 = p[f"hf.{level}.ffn{slot}.w1"], p[f"hf.{level}.ffn{slot}.b1"]
            w2, b2 = p[f"hf.{level}.ffn{slot}.w2"], p[f"hf.{level}.ffn{slot}.b2"]
            return h + jnp.dot(jnp.maximum(jnp.dot(attn, w1) + b1, 0.0), w2) + b2

        coord_terms = []
        label_terms = []

        def label_nll(logits, y):
            return jax.nn.logsumexp(logits) - logits[y]

        plan_idx = 0
        for i in range(n - 1):
            x = process_token(token_list[i], i)
            coord_terms.append(-head_logprob(x, token_list[i + 1]))
            p_pos = i - 1
            if p_pos < 0:
                continue
            while plan_idx < len(plan) and plan[plan_idx][1] == p_pos:
                level, base = plan[plan_idx]
                plan_idx += 1
                if level == LEVEL_COORD:
                    feats = sp_heads_for(LEVEL_COORD, coord_tap[base + 1])
                    for d, f in enumerate(feats, start=1):
                        pos = base + d + 1
                        if pos + 1 < n:
                            coord_terms.append(-head_logprob(f, token_list[pos + 1]))
                    continue
                if level == LEVEL_POINT:
                    e = base // 3 - 1
                    tap = point_tap[e] if e >= 0 else p["start.point"]
                    feats = sp_heads_for(LEVEL_POINT, tap)
                    entries = []  # (position, coordinate feature)
                    lab_by_elem = {}
                    for d, p_hat in enumerate(feats, start=1):
                        lab_by_elem[e + d] = jnp.dot(p_hat, p["label.w"])
                        triple = jnp.dot(p_hat, p["up.point"]).reshape(3, dim)
                        for j in range(3):
                            pos = 3 * (e + d) + j + 1
                            entries.append((pos, hf_apply(LEVEL_COORD, triple[j], j)))
                else:
                    r = base // 9 - 1
                    tap = face_tap[r] if r >= 0 else p["start.face"]
                    feats = sp_heads_for(LEVEL_FACE, tap)
                    entries = []
                    lab_by_elem = {}
                    for d, f_hat in enumerate(feats, start=1):
                        qe = r + d
                        pts = jnp.dot(f_hat, p["up.face"]).reshape(3, dim)
                        for j in range(3):
                            p_hat = hf_apply(LEVEL_POINT, pts[j], j)
                            lab_by_elem[3 * qe + j] = jnp.dot(p_hat, p["label.w"])
                            triple = jnp.dot(p_hat, p["up.point"]).reshape(3, dim)
                            for j2 in range(3):
                                pos = 3 * (3 * qe + j) + j2 + 1
                                entries.append((pos, hf_apply(LEVEL_COORD, triple[j2], j2)))
                for pos, feat in entries[3:]:  # rule B: first point-worth dropped
                    if pos + 1 < n:
                        coord_terms.append(-head_logprob(feat, token_list[pos + 1]))
                for elem, gt in label_plan[(level, base)]:
                    label_terms.append(label_nll(lab_by_elem[elem], gt))

        return coord_terms, label_terms

    def loss_fn(p):
        coord_terms, label_terms = term_fn(p)
        lc = sum(coord_terms) / len(coord_terms)
        lb = sum(label_terms) / len(label_terms) if label_terms else jnp.zeros(())
        return lc + cfg.gamma * lb

    if return_terms:
        ct, lt = term_fn(params0)
        return [float(x) for x in ct], [float(x) for x in lt]
    val, grads = jax.value_and_grad(loss_fn)(params0)
    return float(val), {k: np.asarray(v) for k, v in grads.items()}
