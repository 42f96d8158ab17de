"""Subset-balanced training: difficulty-weighted condition dropout plus AdamW.

Every step samples one modality subset for the whole batch, trains the
teacher-forced image NLL under that subset, and feeds the measured loss back
into the scheduler's per-subset EMA. In balanced mode the sampling
probability of a subset is proportional to its EMA (harder subsets are seen
more often); uniform mode is the ablation baseline where all 2^M subsets are
equally likely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ModalityKind
from .model import MODALITY_ORDER
from .numerics import RNG_STEP, RngState, backward


def subset_mask_string(mask):
    return "".join("1" if b else "0" for b in mask)


class SubsetScheduler:
    """Difficulty tracker and sampler over all 2^M condition subsets.

    Subset index bit j corresponds to MODALITY_ORDER[j]; index 0 is the empty
    (unconditional) subset. EMAs hold running NLL in nats/token, initialized
    to ln(vocab) so untrained subsets look maximally hard.
    """

    def __init__(self, image_vocab, n_modalities=4, mode="balanced", min_prob=0.01, decay=0.99):
        if mode not in ("balanced", "uniform"):
            raise ValueError(f"unknown scheduler mode {mode!r}")
        self.n = 1 << n_modalities
        self.n_modalities = n_modalities
        self.mode = mode
        self.min_prob = min_prob
        self.decay = decay
        self.init_nll = float(np.log(image_vocab))
        self.loss_ema = np.full(self.n, self.init_nll, dtype=np.float64)

    def mask(self, idx):
        return np.array([(idx >> j) & 1 == 1 for j in range(self.n_modalities)])

    def subset_kinds(self, idx):
        return [m for j, m in enumerate(MODALITY_ORDER[: self.n_modalities]) if (idx >> j) & 1]

    def probabilities(self):
        """p(s) proportional to the subset's NLL EMA, floored at min_prob.

        Flooring waterfills: entries pinned to the floor keep exactly
        min_prob and the rest renormalizes, so the result sums to 1 and no
        entry dips under the floor.
        """
        if self.mode == "uniform":
            return np.full(self.n, 1.0 / self.n)
        if (self.loss_ema <= 0).any():
            raise ValueError("loss EMA must stay positive (NLL in nats)")
        floored = np.zeros(self.n, dtype=bool)
        while True:
            p = np.where(floored, self.min_prob, 0.0)
            rest = self.loss_ema * ~floored
            p = p + rest / rest.sum() * (1.0 - self.min_prob * floored.sum())
            grown = floored | (p < self.min_prob)
            if (grown == floored).all():
                return p
            floored = grown

    def sample(self, rng):
        return int(rng.choice(self.n, p=self.probabilities()))

    def update(self, idx, loss):
        self.loss_ema[idx] = self.decay * self.loss_ema[idx] + (1.0 - self.decay) * loss

    def state(self):
        return {"mode": self.mode, "min_prob": self.min_prob, "decay": self.decay, "loss_ema": self.loss_ema.copy()}

    def load_state(self, state):
        self.mode = state["mode"]
        self.min_prob = state["min_prob"]
        self.decay = state["decay"]
        self.loss_ema = np.asarray(state["loss_ema"], dtype=np.float64).copy()


def subset_probabilities(scheduler):
    return scheduler.probabilities()


def sample_subset(scheduler, rng):
    return scheduler.sample(rng)


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW (decoupled weight decay). Reference-scale lr is 4.5e-6 at batch
    64 on the full-size model; the desk default is 3e-4 at batch 16."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    grad_clip: float = 1.0
    warmup_steps: int = 100
    batch_size: int = 16

    def __post_init__(self):
        if not (self.lr >= 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("optimizer rates out of range")


@dataclass
class LossReport:
    step: int
    subset_idx: int
    subset: str
    loss: float
    lr: float
    grad_norm: float


class TrainState:
    """Everything a resumable run needs: parameters, moments, scheduler, history."""

    def __init__(self, model, opt, scheduler, seed):
        self.model = model
        self.opt = opt
        self.scheduler = scheduler
        self.seed = seed
        self.step = 0
        self.adam_m = {p.name: np.zeros_like(p.value.data) for p in model.parameters()}
        self.adam_v = {p.name: np.zeros_like(p.value.data) for p in model.parameters()}
        self.history = []  # (step, subset_idx, loss) rows

    def rng_for_step(self, step):
        return RngState(self.seed).stream(RNG_STEP, step)


def active_mask(batch, subset_mask, modalities=MODALITY_ORDER):
    """Per-example activity: the step's subset minus empty-sequence modalities."""
    bsz = batch["image"].shape[0]
    active = np.tile(np.asarray(subset_mask, dtype=bool), (bsz, 1))
    for j, kind in enumerate(modalities):
        if kind is ModalityKind.BBOX and subset_mask[j]:
            active[:, j] &= batch["bbox_len"] > 0
    return active


def mmb_loss(model, batch, subset_mask):
    """Teacher-forced image NLL (nats/token) under the subset's conditions."""
    kinds = [m for j, m in enumerate(MODALITY_ORDER) if subset_mask[j]]
    encodings = model.encode_conditions(batch, kinds)
    active = active_mask(batch, subset_mask)
    return model.sequence_loss(batch["image"], batch["image"], encodings, active)


def batch_indices(step, batch_size, corpus_size):
    return (step * batch_size + np.arange(batch_size)) % corpus_size


def clip_gradients(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.value.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def adamw_step(state, lr_t):
    opt = state.opt
    t = state.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for p in state.model.parameters():
        g = p.grad
        if g is None:
            continue
        m = state.adam_m[p.name]
        v = state.adam_v[p.name]
        m[:] = opt.beta1 * m + (1.0 - opt.beta1) * g
        v[:] = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps) + opt.weight_decay * p.value.data
        p.value.data = (p.value.data - lr_t * update).astype(p.value.data.dtype)


def train_step(state, corpus):
    """One step: sample subset, batch loss, backward, clip, AdamW, EMA update."""
    rng = state.rng_for_step(state.step)
    idx = state.scheduler.sample(rng)
    batch = corpus.batch(batch_indices(state.step, state.opt.batch_size, len(corpus)))
    loss = mmb_loss(state.model, batch, state.scheduler.mask(idx))
    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise RuntimeError(
            f"non-finite loss at step {state.step} subset {subset_mask_string(state.scheduler.mask(idx))} seed {state.seed}"
        )
    state.model.zero_grad()
    backward(loss)
    norm = clip_gradients(state.model.parameters(), state.opt.grad_clip)
    lr_t = state.opt.lr * min(1.0, (state.step + 1) / max(1, state.opt.warmup_steps))
    adamw_step(state, lr_t)
    state.scheduler.update(idx, loss_val)
    state.history.append((state.step, idx, loss_val))
    state.step += 1
    return LossReport(
        step=state.step - 1,
        subset_idx=idx,
        subset=subset_mask_string(state.scheduler.mask(idx)),
        loss=loss_val,
        lr=lr_t,
        grad_norm=norm,
    )


@dataclass
class ConvergenceReport:
    final_ema: np.ndarray  # (2^M,) replayed from history
    spread_single_modality: float
    rows: list = field(default_factory=list)  # (step, subset_idx, loss, ema)

    def to_csv(self):
        lines = ["step,subset_mask,loss_nats_per_token,ema"]
        for step, mask, loss, ema in self.rows:
            lines.append(f"{step},{mask},{loss:.6f},{ema:.6f}")
        return "\n".join(lines) + "\n"


def convergence_report(state):
    """Replay history into per-subset EMA curves; spread is the std of the
    single-modality subsets' terminal EMAs (over subsets that appeared)."""
    if not state.history:
        raise ValueError("no training history recorded")
    sched = state.scheduler
    ema = np.full(sched.n, sched.init_nll)
    sampled = np.zeros(sched.n, dtype=bool)
    rows = []
    for step, idx, loss in state.history:
        ema[idx] = sched.decay * ema[idx] + (1 - sched.decay) * loss
        sampled[idx] = True
        rows.append((step, subset_mask_string(sched.mask(idx)), loss, ema[idx]))
    singles = [1 << j for j in range(sched.n_modalities)]
    seen = [s for s in singles if sampled[s]]
    spread = float(np.std([ema[s] for s in seen])) if seen else 0.0
    return ConvergenceReport(final_ema=ema, spread_single_modality=spread, rows=rows)


def metrics_header(n_subsets):
    def name(i):
        return subset_mask_string([(i >> j) & 1 for j in range(n_subsets.bit_length() - 1)])

    cols = ["step", "subset_mask", "loss_nats_per_token"]
    cols += [f"ema_{name(i)}" for i in range(n_subsets)]
    cols += [f"prob_{name(i)}" for i in range(n_subsets)]
    return ",".join(cols)


def metrics_row(state, report):
    probs = state.scheduler.probabilities()
    vals = [str(report.step), report.subset, f"{report.loss:.6f}"]
    vals += [f"{e:.6f}" for e in state.scheduler.loss_ema]
    vals += [f"{p:.6f}" for p in probs]
    return ",".join(vals)
