"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 verification mismatch, 3 I/O or
malformed-file error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import codec
from .codec import Mesh, bos_id, from_tokens, load_obj, load_tokens, save_obj, save_tokens
from .engine import (
    AcceptStats,
    decode_baseline,
    decode_speculative,
    speedup_report,
    stats_json_text,
)
from .metrics import bbox_iou, chamfer, entropy_decomposition, hausdorff, joint_from_sequences, sample_surface
from .model import (
    HourglassModel,
    ModelConfig,
    deserialize,
    init_random,
    point_cloud_condition,
    random_condition,
    serialize,
)

USAGE_ERROR, MISMATCH_ERROR, IO_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _load_config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    return ModelConfig.from_text(Path(path).read_text(encoding="utf-8"))


def _load_model(path: str) -> HourglassModel:
    return deserialize(path)


def _condition_for(model: HourglassModel, condition_path: str | None, seed: int) -> np.ndarray:
    if condition_path is None:
        return np.zeros((model.config.condition_len, model.config.model_dim))
    pc = load_obj(condition_path)
    return point_cloud_condition(model, pc.vertices)


def _sequence_to_mesh(tokens: np.ndarray, bins: int) -> codec.QuantizedMesh:
    """Lenient conversion for generated sequences: the payload is cut at
    the first control token, partial trailing faces drop."""
    payload = []
    for t in tokens[1:]:
        if t >= bins or t < 0:
            break
        payload.append(int(t))
    return from_tokens(np.array([bos_id(bins)] + payload, dtype=np.int64), bins)


def _quantized_to_float(qm: codec.QuantizedMesh) -> Mesh:
    return Mesh(qm.vertices[:, ::-1].astype(np.float64), qm.faces.copy())


def _cmd_init(args) -> int:
    cfg = _load_config(args.config)
    model = init_random(cfg, args.seed)
    serialize(model, args.out)
    print(f"wrote {args.out} ({len(model.params)} tensors, vocab {cfg.vocab})")
    return 0


def _cmd_tokenize(args) -> int:
    mesh = load_obj(args.input)
    qm = codec.canonicalize(codec.quantize(mesh, args.bins))
    toks = codec.to_tokens(qm)
    save_tokens(args.out, toks, args.bins)
    print(f"wrote {args.out}: {len(toks)} tokens, {len(qm.faces)} faces")
    return 0


def _cmd_detokenize(args) -> int:
    toks, bins = load_tokens(args.input)
    qm = from_tokens(toks, bins)
    save_obj(_quantized_to_float(qm), args.out)
    print(f"wrote {args.out}: {len(qm.vertices)} vertices, {len(qm.faces)} faces")
    return 0


def _cmd_generate(args) -> int:
    model = _load_model(args.model)
    condition = _condition_for(model, args.condition, args.seed)
    trace: list | None = [] if args.trace else None
    if args.mode == "baseline":
        tokens = decode_baseline(model, condition, args.budget, args.seed)
        payload = len(tokens) - 1
        stats_dict = AcceptStats(forward_passes=payload, tokens_emitted=payload).to_json()
    else:
        tokens, stats = decode_speculative(model, condition, args.budget, args.seed, trace=trace)
        stats_dict = stats.to_json()
    if trace:
        sys.stdout.write("\n".join(trace) + "\n")
    if args.tokens_out:
        save_tokens(args.tokens_out, tokens, model.config.bins)
    if args.out:
        qm = _sequence_to_mesh(tokens, model.config.bins)
        save_obj(_quantized_to_float(qm), args.out)
    if args.stats:
        Path(args.stats).write_text(stats_json_text(stats_dict), encoding="utf-8")
    print(f"generated {len(tokens) - 1} payload tokens in mode {args.mode}")
    return 0


def _cmd_verify_equivalence(args) -> int:
    shared_model = _load_model(args.model) if args.model else None
    cfg = shared_model.config if shared_model else _load_config(args.config)
    for seed in range(args.seeds):
        model = shared_model or init_random(cfg, seed)
        condition = random_condition(cfg, seed)
        base = decode_baseline(model, condition, args.budget, seed)
        spec, stats = decode_speculative(model, condition, args.budget, seed)
        if not np.array_equal(base, spec):
            k = int(np.argmax(base[: len(spec)] != spec[: len(base)])) if min(len(base), len(spec)) else 0
            print(f"seed {seed}: DIVERGED at position {k}: "
                  f"baseline={base[k] if k < len(base) else '<end>'} "
                  f"speculative={spec[k] if k < len(spec) else '<end>'}")
            print(f"  baseline len {len(base)}, speculative len {len(spec)}")
            print(f"  context: {base[max(0, k - 8) : k + 4].tolist()}")
            return MISMATCH_ERROR
        print(f"seed {seed}: ok, {len(base) - 1} tokens, "
              f"m_bar {stats.m_bar:.3f}, passes {stats.forward_passes}")
    print(f"equivalence verified on {args.seeds} seeds")
    return 0


def _cmd_bench(args) -> int:
    model = _load_model(args.model)
    cfg = model.config
    condition = random_condition(cfg, args.seed)
    teacher = None
    if args.teacher:
        teacher = decode_baseline(model, condition, args.budget, args.seed)

    t0 = time.perf_counter()
    base_tokens = None
    for _ in range(args.repeats):
        base_tokens = decode_baseline(model, condition, args.budget, args.seed)
    t_base = (time.perf_counter() - t0) / args.repeats
    n_base = len(base_tokens) - 1

    t0 = time.perf_counter()
    stats = None
    for _ in range(args.repeats):
        _, stats = decode_speculative(
            model, condition, args.budget, args.seed,
            teacher=teacher, teacher_window=args.window,
        )
    t_spec = (time.perf_counter() - t0) / args.repeats

    t_ori = t_base / max(1, n_base)
    t_ours = t_spec / max(1, stats.forward_passes)
    s = speedup_report(stats, t_ori, t_ours)
    tps = stats.tokens_emitted / t_spec
    report = stats.to_json(tps=tps, speedup=s)
    print(stats_json_text(report), end="")
    for level, d in ((("face"), cfg.draft_face), (("point"), cfg.draft_point)):
        acc = stats.level_acc(level)
        if acc is not None:
            print(f"{level}-acc {acc:.2f}/{d}")
    print(f"baseline {n_base / t_base:.1f} tok/s, speculative {tps:.1f} tok/s, "
          f"m_bar {stats.m_bar:.3f}, speedup {s:.3f}")
    return 0


def _cmd_analyze(args) -> int:
    paths = sorted(Path(args.sequences).glob("*.txt"))
    if not paths:
        raise FileNotFoundError(f"no .txt token files under {args.sequences}")
    seqs = []
    bins = None
    for p in paths:
        toks, b = load_tokens(p)
        bins = b if bins is None else bins
        if b != bins:
            raise ValueError(f"{p}: mixed bins ({b} vs {bins})")
        seqs.append(toks)
    joint = joint_from_sequences(seqs, bins + 3)
    report = entropy_decomposition(joint)
    report["sequences"] = len(seqs)
    report["pairs"] = int(joint.sum())
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _cmd_metrics(args) -> int:
    gen = load_obj(args.gen)
    ref = load_obj(args.ref)
    # same seed for both meshes: identical files then compare identical
    # samplings and score exactly zero
    pts_gen = sample_surface(gen, args.samples, args.seed)
    pts_ref = sample_surface(ref, args.samples, args.seed)
    report = {
        "chamfer": chamfer(pts_gen, pts_ref),
        "hausdorff": hausdorff(pts_gen, pts_ref),
        "bbox_iou": bbox_iou(gen, ref),
        "samples": args.samples,
    }
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="meshspec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("init", help="create a random model")
    sp.add_argument("--config", default=None, help="key=value config file")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_init)

    sp = sub.add_parser("tokenize", help="OBJ -> token sequence")
    sp.add_argument("input")
    sp.add_argument("--bins", type=int, default=128)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_tokenize)

    sp = sub.add_parser("detokenize", help="token sequence -> OBJ")
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_detokenize)

    sp = sub.add_parser("generate", help="decode a mesh from a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mode", choices=("baseline", "speculative"), default="speculative")
    sp.add_argument("--budget", type=int, default=450)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--condition", default=None, help="point-cloud OBJ")
    sp.add_argument("--out", default=None, help="output OBJ")
    sp.add_argument("--tokens-out", default=None, help="output token sequence")
    sp.add_argument("--stats", default=None, help="output stats JSON")
    sp.add_argument("--trace", action="store_true")
    sp.set_defaults(fn=_cmd_generate)

    sp = sub.add_parser("verify-equivalence",
                        help="baseline vs speculative greedy equality")
    sp.add_argument("--model", default=None)
    sp.add_argument("--config", default=None)
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--budget", type=int, default=300)
    sp.set_defaults(fn=_cmd_verify_equivalence)

    sp = sub.add_parser("bench", help="throughput and acceptance statistics")
    sp.add_argument("--model", required=True)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--budget", type=int, default=300)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--teacher", action="store_true",
                    help="draft from a baseline pre-run (perfect drafts)")
    sp.add_argument("--window", type=int, default=9, help="teacher draft window")
    sp.set_defaults(fn=_cmd_bench)

    sp = sub.add_parser("analyze", help="entropy decomposition of sequences")
    sp.add_argument("--sequences", required=True, help="directory of token files")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_analyze)

    sp = sub.add_parser("metrics", help="CD/HD/bbox-IoU between two OBJ meshes")
    sp.add_argument("--gen", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--samples", type=int, default=5000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
