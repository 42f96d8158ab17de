"""Command-line surface: train, sample, eval, inspect, ablate.

Exit codes: 0 success, 2 invalid configuration or input file, 3 non-finite
loss during training. All commands are deterministic under --seed with
MMOT_THREADS=1 (the default). Output formats are documented in FORMATS.md.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, with_overrides
from .data import (
    ConditionSet,
    Corpus,
    ModalityKind,
    TokenSequence,
    _mask_from_json,
    decode_image_tokens,
    load_dataset,
)
from .metrics import evaluate
from .model import MODALITY_ORDER, Model, extract_attention_maps
from .sampling import GuidanceConfig, sample_batch
from .training import (
    SubsetScheduler,
    TrainState,
    convergence_report,
    metrics_header,
    metrics_row,
    train_step,
)

PALETTE_RGB = [
    (24, 24, 24),
    (214, 69, 65),
    (63, 127, 191),
    (77, 175, 74),
    (255, 195, 0),
    (152, 78, 163),
    (255, 127, 0),
    (166, 86, 40),
]


def render_ppm(grid):
    """Plain-text P3 render of a palette grid."""
    h, w = grid.shape
    lines = ["P3", f"{w} {h}", "255"]
    for r in range(h):
        row = []
        for c in range(w):
            row.extend(str(v) for v in PALETTE_RGB[int(grid[r, c]) % len(PALETTE_RGB)])
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def conditions_from_json(line, knobs):
    """Parse one conditions-file entry; unknown modality names are errors."""
    rec = json.loads(line)
    entries = rec.get("conditions", rec if isinstance(rec, dict) else {})
    present, coverage = {}, {}
    for name, c in entries.items():
        kind = ModalityKind(name)  # raises ValueError on unknown names
        present[kind] = TokenSequence(kind, np.array(c["tokens"], dtype=np.int64), tuple(c["layout"]))
        if "coverage" in c:
            coverage[kind] = _mask_from_json(c["coverage"])
    return ConditionSet(present=present, coverage=coverage)


def build_state(cfg):
    model = Model(cfg.model, seed=cfg.seed)
    scheduler = SubsetScheduler(
        image_vocab=cfg.model.image_vocab,
        mode=cfg.scheduler_mode,
        min_prob=cfg.scheduler_min_prob,
        decay=cfg.scheduler_decay,
    )
    return TrainState(model, cfg.optimizer, scheduler, seed=cfg.seed)


def run_training(cfg, out_dir=None, log=None):
    """Train per config; writes metrics/checkpoints when out_dir is given."""
    corpus = Corpus(seed=cfg.seed, size=cfg.corpus_size, knobs=cfg.model.data)
    state = build_state(cfg)
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.csv", "w")
        metrics_fh.write(metrics_header(state.scheduler.n) + "\n")
    try:
        while state.step < cfg.steps:
            report = train_step(state, corpus)
            if metrics_fh is not None:
                metrics_fh.write(metrics_row(state, report) + "\n")
            if log is not None and (report.step % max(1, cfg.steps // 10) == 0):
                log(f"step {report.step} subset {report.subset} loss {report.loss:.4f}")
            if out_dir is not None and cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"step_{state.step}.ckpt", state, cfg)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", state, cfg)
        (out_dir / "convergence.csv").write_text(convergence_report(state).to_csv())
    return state, corpus


def cmd_train(args):
    try:
        cfg = load_config(args.config)
        cfg = with_overrides(cfg, mode=args.mode, mixer=(False if args.no_mixer else None), seed=args.seed)
    except (OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    t0 = time.time()
    try:
        run_training(cfg, out_dir=cfg.out_dir, log=lambda msg: print(msg))
    except RuntimeError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3
    print(f"trained {cfg.steps} steps in {time.time() - t0:.1f}s -> {cfg.out_dir}/final.ckpt")
    return 0


def parse_lambda_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--lambda expects name=value, got {pair!r}")
        name, value = pair.split("=", 1)
        out[ModalityKind(name.strip())] = float(value)
    return out


def guidance_from_args(base, args):
    g = base
    lambdas = dict(g.lambda_fixed)
    lambdas.update(parse_lambda_overrides(args.lam))
    return GuidanceConfig(
        mode=args.guidance or g.mode,
        lambda_fixed=lambdas,
        kappa=args.kappa if args.kappa is not None else g.kappa,
        temperature=args.temp if args.temp is not None else g.temperature,
        top_k=args.topk if args.topk is not None else g.top_k,
        greedy=g.greedy,
    )


def cmd_sample(args):
    try:
        state, cfg = load_checkpoint(args.ckpt)
        lines = [ln for ln in Path(args.conditions).read_text().splitlines() if ln.strip()]
        condition_sets = [conditions_from_json(ln, cfg.model.data) for ln in lines]
        gcfg = guidance_from_args(cfg.guidance, args)
    except (OSError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    knobs = cfg.model.data
    header = {
        "type": "header",
        "ckpt": str(args.ckpt),
        "seed": args.seed,
        "n": args.n,
        "guidance": {
            "mode": gcfg.mode,
            "kappa": gcfg.kappa,
            "temperature": gcfg.temperature,
            "top_k": gcfg.top_k,
            "lambda": {k.value: v for k, v in sorted(gcfg.lambda_fixed.items(), key=lambda kv: kv[0].value)},
        },
    }
    transcript_path = out_dir / "transcripts.jsonl"
    with open(transcript_path, "w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for e, conds in enumerate(condition_sets):
            results = sample_batch(state.model, conds, gcfg, seed=args.seed, n=args.n, sample_offset=e * args.n)
            for j, res in enumerate(results):
                rec = {
                    "entry": e,
                    "sample": j,
                    "kinds": [k.value for k in res.kinds],
                    "tokens": res.tokens.tolist(),
                    "lambda": np.round(res.lambdas, 6).tolist(),
                    "jsd": np.round(res.divergence.values, 6).tolist(),
                }
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
                grid = decode_image_tokens(res.tokens, knobs.grid_h, knobs.grid_w)
                (out_dir / f"sample_e{e}_s{j}.ppm").write_text(render_ppm(grid))
                (out_dir / f"divergence_e{e}_s{j}.csv").write_text(res.divergence.to_csv())
    print(f"wrote {len(condition_sets) * args.n} samples to {out_dir}")
    return 0


def cmd_eval(args):
    try:
        state, cfg = load_checkpoint(args.ckpt)
        records = load_dataset(args.testset)
        if not records:
            print("empty test set", file=sys.stderr)
            return 2
        testset = Corpus.from_records(records, cfg.model.data)
    except (OSError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    report = evaluate(state.model, testset, seed=args.seed, n_samples=args.n, gcfg=cfg.guidance)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.csv").write_text(report.to_csv())
    (out_dir / "eval.txt").write_text(report.summary())
    print(report.summary())
    return 0


def cmd_inspect(args):
    try:
        state, cfg = load_checkpoint(args.ckpt)
        lines = [ln for ln in Path(args.example).read_text().splitlines() if ln.strip()]
        if not lines:
            print("empty example file", file=sys.stderr)
            return 2
        rec = json.loads(lines[0])
        conds = conditions_from_json(lines[0], cfg.model.data)
        tokens = np.array(rec["image_tokens"], dtype=np.int64) if "image_tokens" in rec else None
    except (OSError, ValueError, KeyError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    model = state.model
    knobs = cfg.model.data
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if tokens is None:
        tokens = sample_batch(model, conds, cfg.guidance, seed=args.seed, n=1)[0].tokens
    _, trace = model.forward_logits(tokens, conds, trace=True)
    names = ["self"] + [m.value for m in MODALITY_ORDER]

    summary = ["layer," + ",".join(names)]
    for rec_w in trace.combination:
        w = rec_w.weights[0]  # (L, M+1)
        path = out_dir / f"combination_layer{rec_w.layer}.csv"
        rows = ["position," + ",".join(names)]
        rows += [f"{i}," + ",".join(f"{v:.6f}" for v in w[i]) for i in range(w.shape[0])]
        path.write_text("\n".join(rows) + "\n")
        summary.append(f"{rec_w.layer}," + ",".join(f"{v:.6f}" for v in w.mean(axis=0)))
    (out_dir / "combination_summary.csv").write_text("\n".join(summary) + "\n")

    per_layer, averaged = extract_attention_maps(trace)
    for kind, mat in averaged.items():
        rows = [",".join(f"{v:.6f}" for v in row) for row in mat[0]]
        (out_dir / f"attention_{kind.value}_avg.csv").write_text("\n".join(rows) + "\n")

    res = sample_batch(model, conds, cfg.guidance, seed=args.seed, n=1)[0]
    (out_dir / "divergence.csv").write_text(res.divergence.to_csv())
    print(f"inspection written to {out_dir}")
    return 0


ABLATION_MODES = ("base", "mixer", "balanced", "guidance")


def cmd_ablate(args):
    try:
        base_cfg = load_config(args.config)
        base_cfg = with_overrides(base_cfg, seed=args.seed)
    except (OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out_dir = Path(args.out or base_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plain = GuidanceConfig(mode="fixed", lambda_fixed={m: 1.0 for m in MODALITY_ORDER})
    guided = GuidanceConfig(mode="jsd", kappa=max(base_cfg.guidance.kappa, 1.0))
    runs = {
        "base": (with_overrides(base_cfg, mode="uniform", mixer=False), plain),
        "mixer": (with_overrides(base_cfg, mode="uniform", mixer=True), plain),
        "balanced": (with_overrides(base_cfg, mode="balanced", mixer=True), plain),
    }
    rows = ["mode,subset_mask,nll_nats_per_token,accuracy_modality,accuracy,seed"]
    reports = {}
    shared = None
    for mode in ABLATION_MODES:
        if mode == "guidance":
            cfg, state, corpus = shared  # same checkpoint as balanced
            gcfg = guided
        else:
            cfg, gcfg = runs[mode]
            state, corpus = run_training(cfg, out_dir=out_dir / mode)
            if mode == "balanced":
                shared = (cfg, state, corpus)
        held = Corpus(seed=cfg.seed + 1_000_003, size=base_cfg.eval_size, knobs=cfg.model.data)
        report = evaluate(state.model, held, seed=cfg.seed, n_samples=args.n, gcfg=gcfg)
        reports[mode] = report
        for subset, (nll, _) in sorted(report.per_subset_nll.items()):
            rows.append(f"{mode},{subset},{nll:.6f},,,{cfg.seed}")
        for name, (acc, n) in sorted(report.constraint_acc.items()):
            rows.append(f"{mode},,,{name},{acc:.6f},{cfg.seed}")
        (out_dir / f"eval_{mode}.csv").write_text(report.to_csv())
    (out_dir / "comparison.csv").write_text("\n".join(rows) + "\n")
    print(f"ablation table -> {out_dir / 'comparison.csv'}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="tokenmixer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["balanced", "uniform"])
    p.add_argument("--no-mixer", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample scenes from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--conditions", required=True)
    p.add_argument("--guidance", choices=["fixed", "jsd"])
    p.add_argument("--lambda", dest="lam", action="append", metavar="MODALITY=SCALE")
    p.add_argument("--kappa", type=float)
    p.add_argument("--temp", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="dump attention/combination/divergence maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--example", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("ablate", help="run the four canonical modes and compare")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_ablate)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
