"""Evaluation: faithfulness checks, Frechet distance on toy features, NLL.

Constraint accuracy decodes sampled image tokens back to a palette grid
(exact tokenization only) and scores each present condition on its covered
region. The Frechet distance runs on a small hand-built feature vector
(per-palette cell counts plus edge count), so its numbers are internally
comparable across runs but not to anything external.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import ConditionSet, DatasetConfig, ModalityKind, SKETCH_UNKNOWN, decode_image_tokens, dominant_attribute, sketch_map
from .model import MODALITY_ORDER
from .numerics import RNG_EVAL, RngState
from .sampling import GuidanceConfig, sample_batch
from .training import active_mask, mmb_loss, subset_mask_string


def worker_count():
    """MMOT_THREADS caps eval fan-out; 1 (the default) keeps runs single-threaded."""
    try:
        return max(1, int(os.environ.get("MMOT_THREADS", "1")))
    except ValueError:
        return 1


def _maybe_parallel(fn, items):
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# constraint accuracy
# ---------------------------------------------------------------------------


def _components(mask):
    """4-connected components of a boolean grid as lists of (r, c)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            stack, cells = [(r, c)], []
            seen[r, c] = True
            while stack:
                y, x = stack.pop()
                cells.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx_ = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx_ < w and mask[ny, nx_] and not seen[ny, nx_]:
                        seen[ny, nx_] = True
                        stack.append((ny, nx_))
            comps.append(cells)
    return comps


def _rect_iou(a, b):
    (ar0, ac0, ar1, ac1), (br0, bc0, br1, bc1) = a, b
    ir0, ic0 = max(ar0, br0), max(ac0, bc0)
    ir1, ic1 = min(ar1, br1), min(ac1, bc1)
    inter = max(0, ir1 - ir0 + 1) * max(0, ic1 - ic0 + 1)
    area_a = (ar1 - ar0 + 1) * (ac1 - ac0 + 1)
    area_b = (br1 - br0 + 1) * (bc1 - bc0 + 1)
    return inter / (area_a + area_b - inter)


def _bbox_satisfied(grid, cat, box, iou_threshold=0.5):
    """A maximal same-category rectangle (bounding box of the best-overlapping
    connected component of that category) must reach IoU >= threshold."""
    comps = _components(grid == cat)
    best = 0.0
    for cells in comps:
        rs = [r for r, _ in cells]
        cs = [c for _, c in cells]
        rect = (min(rs), min(cs), max(rs), max(cs))
        if _rect_iou(rect, box) > best:
            best = _rect_iou(rect, box)
    return best >= iou_threshold


def constraint_accuracy(image_tokens, conditions, knobs=DatasetConfig()):
    """Per-modality fraction of the condition satisfied by the decoded scene.

    ``image_tokens`` must come from the exact palette tokenizer (bijective
    decode); VQ-mode tokens are a contract error.
    """
    if hasattr(image_tokens, "exact"):
        if not image_tokens.exact:
            raise ValueError("constraint accuracy is defined for exact-mode tokens only")
        image_tokens = image_tokens.tokens
    grid = decode_image_tokens(image_tokens, knobs.grid_h, knobs.grid_w)
    out = {}
    for kind in conditions.kinds():
        seq = conditions.present[kind]
        cov = conditions.coverage.get(kind)
        if kind is ModalityKind.TEXT:
            out[kind] = 1.0 if dominant_attribute(grid) == int(seq.tokens[0]) else 0.0
        elif kind is ModalityKind.SEGMENTATION:
            toks = seq.tokens.reshape(knobs.grid_h, knobs.grid_w)
            cells = toks != knobs.seg_unknown() if cov is None else cov
            out[kind] = float((grid[cells] == toks[cells]).mean()) if cells.any() else 1.0
        elif kind is ModalityKind.SKETCH:
            toks = seq.tokens.reshape(knobs.grid_h, knobs.grid_w)
            cells = toks != SKETCH_UNKNOWN if cov is None else cov
            edges = sketch_map(grid)
            out[kind] = float((edges[cells] == toks[cells]).mean()) if cells.any() else 1.0
        else:
            triples = seq.tokens.reshape(-1, 3)
            if len(triples) == 0:
                continue
            hits = 0
            for o, tl, br in triples:
                cat = int(o) - knobs.cells + 1
                box = (int(tl) // knobs.grid_w, int(tl) % knobs.grid_w, int(br) // knobs.grid_w, int(br) % knobs.grid_w)
                hits += _bbox_satisfied(grid, cat, box)
            out[kind] = hits / len(triples)
    return out


# ---------------------------------------------------------------------------
# Frechet distance on toy features
# ---------------------------------------------------------------------------


def toy_features(grid, palette):
    """Per-palette cell counts plus total edge count (palette+1 dims)."""
    counts = np.bincount(grid.reshape(-1), minlength=palette).astype(np.float64)
    return np.concatenate([counts, [float(sketch_map(grid).sum())]])


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_a, features_b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross sqrt uses the symmetric form sqrt(A) B sqrt(A) with
    negative-eigenvalue clipping, so the result is real and nonnegative
    up to roundoff.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be 2-D with equal dims, got {a.shape} and {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False)
    cb = np.cov(b, rowvar=False)
    ca, cb = np.atleast_2d(ca), np.atleast_2d(cb)
    root_a = _psd_sqrt(ca)
    cross = _psd_sqrt(root_a @ cb @ root_a)
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))
    return max(0.0, d)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    seed: int
    per_subset_nll: dict = field(default_factory=dict)  # mask string -> (nll, n)
    constraint_acc: dict = field(default_factory=dict)  # modality value -> (acc, n)
    frechet: float = float("nan")
    frechet_n: int = 0
    spread: float = float("nan")

    def to_csv(self):
        lines = ["metric,key,value,n,seed"]
        for k, (v, n) in sorted(self.per_subset_nll.items()):
            lines.append(f"nll,{k},{v:.6f},{n},{self.seed}")
        for k, (v, n) in sorted(self.constraint_acc.items()):
            lines.append(f"constraint_accuracy,{k},{v:.6f},{n},{self.seed}")
        lines.append(f"frechet,toy,{self.frechet:.6f},{self.frechet_n},{self.seed}")
        lines.append(f"spread,single_modality_nll,{self.spread:.6f},{len(self.per_subset_nll)},{self.seed}")
        return "\n".join(lines) + "\n"

    def summary(self):
        lines = [f"evaluation (seed {self.seed})"]
        lines.append("  per-subset NLL (nats/token):")
        for k, (v, n) in sorted(self.per_subset_nll.items()):
            lines.append(f"    {k}: {v:.4f}  (n={n})")
        lines.append("  constraint accuracy:")
        for k, (v, n) in sorted(self.constraint_acc.items()):
            lines.append(f"    {k}: {v:.4f}  (n={n})")
        lines.append(f"  frechet(toy): {self.frechet:.4f}  (n={self.frechet_n})")
        lines.append(f"  single-modality NLL spread: {self.spread:.4f}")
        return "\n".join(lines) + "\n"


def subset_nll(model, corpus, subset_mask, indices, batch_size=32):
    """Mean teacher-forced NLL over the given corpus rows for one subset."""
    losses = []
    for lo in range(0, len(indices), batch_size):
        batch = corpus.batch(indices[lo : lo + batch_size])
        with nx.no_grad():
            losses.append((mmb_loss(model, batch, subset_mask).item(), len(batch["image"])))
    total = sum(n for _, n in losses)
    return sum(v * n for v, n in losses) / total, total


def evaluate(model, corpus, seed, n_samples=64, gcfg=None, indices=None):
    """EvalReport over held-out rows: all 16 subset NLLs, per-modality
    constraint accuracy from guided samples, and the toy Frechet distance."""
    if len(corpus) == 0:
        raise ValueError("empty evaluation set")
    gcfg = gcfg or GuidanceConfig(mode="jsd", kappa=2.0)
    knobs = model.config.data
    if indices is None:
        indices = np.arange(len(corpus))
    report = EvalReport(seed=seed)

    n_subsets = 1 << len(MODALITY_ORDER)
    masks = [np.array([(i >> j) & 1 == 1 for j in range(len(MODALITY_ORDER))]) for i in range(n_subsets)]
    nlls = _maybe_parallel(lambda m: subset_nll(model, corpus, m, indices), masks)
    for mask, (nll, n) in zip(masks, nlls):
        report.per_subset_nll[subset_mask_string(mask)] = (nll, n)
    singles = [subset_mask_string(masks[1 << j]) for j in range(len(MODALITY_ORDER))]
    report.spread = float(np.std([report.per_subset_nll[s][0] for s in singles]))

    def accuracy_for(job):
        j, kind = job
        scores = []
        for i in range(n_samples):
            ex = corpus.examples[indices[i % len(indices)]]
            conds = ex.conditions.restricted([kind])
            if not conds.kinds():
                continue
            res = sample_batch(
                model, conds, gcfg, seed=seed * 1000 + j, n=1, sample_offset=i, record_divergence=False
            )[0]
            acc = constraint_accuracy(res.tokens, conds, knobs)
            if kind in acc:
                scores.append(acc[kind])
        return kind, (float(np.mean(scores)) if scores else float("nan"), len(scores))

    for kind, stat in _maybe_parallel(accuracy_for, list(enumerate(MODALITY_ORDER))):
        report.constraint_acc[kind.value] = stat

    real = np.stack([toy_features(corpus.examples[i].scene.grid, knobs.palette) for i in indices])
    free = sample_batch(model, ConditionSet(), gcfg, seed=seed + 7, n=min(n_samples, 64), record_divergence=False)
    fake = np.stack([toy_features(decode_image_tokens(r.tokens, knobs.grid_h, knobs.grid_w), knobs.palette) for r in free])
    report.frechet = frechet_distance(real, fake)
    report.frechet_n = len(fake)
    return report
