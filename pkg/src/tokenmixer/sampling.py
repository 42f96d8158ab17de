"""Autoregressive decoding with multimodal guidance over parallel streams.

One stream decodes unconditionally and one per present modality; all streams
share the committed prefix. At each step the conditional streams' logits are
extrapolated away from the unconditional ones, per-modality scales either
fixed or set from the Jensen-Shannon divergence between each conditional
next-token distribution and the unconditional one. The per-step divergences
double as the divergence map over the image grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import ConditionSet, ModalityKind
from .model import MODALITY_ORDER
from .numerics import MASK_VALUE, RNG_SAMPLE, RngState

LN2 = float(np.log(2.0))


@dataclass
class GuidanceConfig:
    mode: str = "fixed"  # "fixed" or "jsd"
    lambda_fixed: dict = field(default_factory=dict)  # ModalityKind -> scale
    kappa: float = 1.0
    temperature: float = 1.0
    top_k: int = 0  # 0 disables
    greedy: bool = False
    max_len: int = None  # defaults to the model's image length

    def __post_init__(self):
        if self.mode not in ("fixed", "jsd"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if any(v < 0 for v in self.lambda_fixed.values()):
            raise ValueError("guidance scales must be nonnegative")

    def lam(self, kind):
        return float(self.lambda_fixed.get(kind, 1.0))


def _check_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"{name} is not normalized (sum {p.sum():.6f})")
    return p


def jsd(p, q):
    """Jensen-Shannon divergence in nats; 0 log 0 terms are 0."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float((a[mask] * np.log(a[mask] / m[mask])).sum())

    return 0.5 * kl(p) + 0.5 * kl(q)


def _softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _jsd_rows(p, q):
    """Row-wise JSD for (..., V) probability arrays."""
    m = 0.5 * (p + q)

    def kl(a):
        r = np.where(a > 0, a * np.log(np.where(a > 0, a / m, 1.0)), 0.0)
        return r.sum(axis=-1)

    return 0.5 * kl(p) + 0.5 * kl(q)


def guided_logits(p_uncon, p_con, lambdas):
    """p_uncon + sum_m lambda_m (p_con_m - p_uncon) on raw logit vectors.

    The lambda=0 and single-modality lambda=1 identities hold to exact
    floating-point equality (those terms short-circuit).
    """
    p_uncon = np.asarray(p_uncon)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if len(p_con) != len(lambdas):
        raise ValueError(f"{len(p_con)} conditional streams vs {len(lambdas)} scales")
    for c in p_con:
        if np.asarray(c).shape != p_uncon.shape:
            raise ValueError(f"logit shapes differ: {np.asarray(c).shape} vs {p_uncon.shape}")
    if len(p_con) == 1 and lambdas[0] == 1.0:
        return np.asarray(p_con[0]).copy()
    out = p_uncon.astype(np.float64).copy()
    for c, lam in zip(p_con, lambdas):
        if lam == 0.0:
            continue
        out += lam * (np.asarray(c, dtype=np.float64) - p_uncon)
    return out


def jsd_lambdas(p_uncon, p_con, kappa, eps=1e-8):
    """Scales proportional to each modality's JSD, normalized to mean kappa."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    pu = _softmax(np.asarray(p_uncon, dtype=np.float64))
    d = np.array([jsd(_softmax(np.asarray(c, dtype=np.float64)), pu) for c in p_con])
    if len(d) == 0:
        return d
    return kappa * d / max(eps, d.mean())


@dataclass
class DivergenceMap:
    """Per committed position, per modality: JSD (nats) between conditional
    and unconditional next-token distributions, laid out on the image grid."""

    values: np.ndarray  # (L, M')
    kinds: list
    grid: tuple

    def __post_init__(self):
        self.values = np.clip(self.values, 0.0, LN2)

    def grid_for(self, kind):
        j = self.kinds.index(kind)
        h, w = self.grid
        return self.values[:, j].reshape(h, w)

    def to_csv(self):
        h, w = self.grid
        lines = [",".join(["position", "row", "col"] + [k.value for k in self.kinds])]
        for i in range(self.values.shape[0]):
            cells = [str(i), str(i // w), str(i % w)] + [f"{v:.6f}" for v in self.values[i]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def divergence_map(result):
    if result.divergence is None:
        raise ValueError("sampling ran without divergence tracing")
    return result.divergence


@dataclass
class SampleResult:
    tokens: np.ndarray  # (L,)
    kinds: list  # present modalities, stream order
    divergence: DivergenceMap | None
    lambdas: np.ndarray  # (L, M') per-step scales
    seed: int
    sample_index: int


def _stream_conditions(conditions):
    """Present kinds (nonempty sequences only) in stable modality order."""
    kinds = []
    for kind in MODALITY_ORDER:
        seq = conditions.present.get(kind)
        if seq is not None and len(seq.tokens) > 0:
            kinds.append(kind)
    return kinds


def _fixed_lambdas(gcfg, kinds):
    return np.array([gcfg.lam(k) for k in kinds], dtype=np.float64)


def _filter_top_k(logits, k):
    """Keep the k largest entries per row (ties to the lowest token id)."""
    if k <= 0 or k >= logits.shape[-1]:
        return logits
    out = np.full_like(logits, MASK_VALUE)
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(out, order, np.take_along_axis(logits, order, axis=-1), axis=-1)
    return out


def _draw(probs, u):
    cum = probs.cumsum(axis=-1)
    idx = (cum < u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_batch(model, conditions, gcfg, seed, n, sample_offset=0, record_divergence=True):
    """Draw ``n`` sequences; streams and samples evaluate as one batch.

    Sample ``j`` consumes its own generator (seed, SAMPLE, sample_offset+j),
    so results are independent of batch splitting and match
    :func:`sample_sequence` transcript-for-transcript.
    """
    cfg = model.config
    max_len = gcfg.max_len or cfg.seq_len
    kinds = _stream_conditions(conditions)
    mprime = len(kinds)
    s = mprime + 1
    batch, present = model.batch_from_conditions(conditions)
    encodings = model.encode_conditions(batch, kinds)
    active = np.zeros((n * s, len(cfg.modalities)), dtype=bool)
    for j, kind in enumerate(kinds):
        col = cfg.modalities.index(kind)
        active[j + 1 :: s, col] = True

    u = np.stack(
        [RngState(seed).stream(RNG_SAMPLE, sample_offset + j).random(max_len) for j in range(n)]
    )
    committed = np.zeros((n, s, 0), dtype=np.int64)
    div = np.zeros((n, max_len, mprime))
    lams = np.zeros((n, max_len, mprime))
    with nx.no_grad():
        for t in range(max_len):
            assert (committed == committed[:, :1]).all(), "stream prefixes diverged"
            prefix = np.concatenate(
                [committed.reshape(n * s, t), np.zeros((n * s, 1), dtype=np.int64)], axis=1
            )
            logits = model.decoder_forward(prefix, encodings, active).data[:, t, :]
            logits = logits.reshape(n, s, -1).astype(np.float64)
            uncon = logits[:, 0]
            cons = [logits[:, j + 1] for j in range(mprime)]
            if mprime:
                pu = _softmax(uncon)
                d = np.stack([_jsd_rows(_softmax(c), pu) for c in cons], axis=1)
                div[:, t, :] = d
                if gcfg.mode == "jsd":
                    lam = gcfg.kappa * d / np.maximum(1e-8, d.mean(axis=1, keepdims=True))
                else:
                    lam = np.tile(_fixed_lambdas(gcfg, kinds), (n, 1))
                lams[:, t, :] = lam
                if mprime == 1 and (lam[:, 0] == 1.0).all():
                    combined = cons[0].copy()
                else:
                    combined = uncon.copy()
                    for j in range(mprime):
                        if (lam[:, j] == 0.0).all():
                            continue
                        combined += lam[:, j : j + 1] * (cons[j] - uncon)
            else:
                combined = uncon
            if not np.isfinite(combined).all():
                raise RuntimeError(f"non-finite guided logits at step {t} (seed {seed})")
            scaled = _filter_top_k(combined / gcfg.temperature, gcfg.top_k)
            if gcfg.greedy:
                tok = scaled.argmax(axis=-1)
            else:
                tok = _draw(_softmax(scaled), u[:, t])
            committed = np.concatenate(
                [committed, np.repeat(tok[:, None, None], s, axis=1)], axis=2
            )
    results = []
    for j in range(n):
        dm = None
        if record_divergence:
            dm = DivergenceMap(values=div[j], kinds=kinds, grid=(cfg.data.grid_h, cfg.data.grid_w))
        results.append(
            SampleResult(
                tokens=committed[j, 0].copy(),
                kinds=list(kinds),
                divergence=dm,
                lambdas=lams[j],
                seed=seed,
                sample_index=sample_offset + j,
            )
        )
    return results


def sample_sequence(model, conditions, gcfg, seed, sample_index=0, record_divergence=True):
    """Reference sampler: one independent forward per stream per step."""
    cfg = model.config
    max_len = gcfg.max_len or cfg.seq_len
    kinds = _stream_conditions(conditions)
    mprime = len(kinds)
    streams = [ConditionSet()] + [conditions.restricted([k]) for k in kinds]
    u = RngState(seed).stream(RNG_SAMPLE, sample_index).random(max_len)
    prefixes = [[] for _ in range(mprime + 1)]
    div = np.zeros((max_len, mprime))
    lams = np.zeros((max_len, mprime))
    tokens = []
    for t in range(max_len):
        assert all(p == prefixes[0] for p in prefixes), "stream prefixes diverged"
        step_logits = []
        for sc in streams:
            out = model.forward_logits(np.array(prefixes[0] + [0], dtype=np.int64), sc)
            step_logits.append(out[t].astype(np.float64))
        uncon, cons = step_logits[0], step_logits[1:]
        if mprime:
            d = np.array([jsd(_softmax(c), _softmax(uncon)) for c in cons])
            div[t] = d
            lam = (
                jsd_lambdas(uncon, cons, gcfg.kappa)
                if gcfg.mode == "jsd"
                else _fixed_lambdas(gcfg, kinds)
            )
            lams[t] = lam
            combined = guided_logits(uncon, cons, lam)
        else:
            combined = uncon
        if not np.isfinite(combined).all():
            raise RuntimeError(f"non-finite guided logits at step {t} (seed {seed})")
        scaled = _filter_top_k(combined / gcfg.temperature, gcfg.top_k)
        if gcfg.greedy:
            tok = int(scaled.argmax())
        else:
            tok = int(_draw(_softmax(scaled)[None, :], np.array([u[t]]))[0])
        tokens.append(tok)
        for p in prefixes:
            p.append(tok)
    dm = DivergenceMap(values=div, kinds=kinds, grid=(cfg.data.grid_h, cfg.data.grid_w)) if record_divergence else None
    return SampleResult(
        tokens=np.array(tokens, dtype=np.int64),
        kinds=list(kinds),
        divergence=dm,
        lambdas=lams,
        seed=seed,
        sample_index=sample_index,
    )
