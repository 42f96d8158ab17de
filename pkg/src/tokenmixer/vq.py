"""Stage-1 vector-quantized autoencoder over scene patches.

The desk-scale encoder/decoder are patch-linear maps: each scene renders to
one-hot palette planes, splits into non-overlapping patches, and a single
linear layer maps a patch vector to an n_z-dim latent (and back). Quantization
snaps latents to the nearest codebook row; gradients cross the snap via the
straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor, backward, detach, matmul, tsum


@dataclass
class Codebook:
    entries: np.ndarray  # (K, n_z)
    usage: np.ndarray = None  # selection counts

    def __post_init__(self):
        if self.usage is None:
            self.usage = np.zeros(len(self.entries), dtype=np.int64)

    @property
    def size(self):
        return len(self.entries)


def quantize(z_hat, codebook):
    """Nearest codeword per row (Euclidean, ties to the lowest index).

    Returns (ids, z_q) where z_q rows are the selected codewords.
    Updates codebook usage counts.
    """
    z = z_hat.data if isinstance(z_hat, Tensor) else np.asarray(z_hat)
    d2 = ((z[:, None, :] - codebook.entries[None, :, :]) ** 2).sum(axis=-1)
    ids = d2.argmin(axis=1)  # argmin takes the first (lowest) index on ties
    np.add.at(codebook.usage, ids, 1)
    z_q = codebook.entries[ids].astype(z.dtype)
    return ids, Tensor(z_q)


def vq_loss(x, x_hat, z_hat, z_q, beta_commit=0.25):
    """||x - x_hat||^2 + ||sg[z_hat] - z_q||^2 + beta ||sg[z_q] - z_hat||^2.

    Squared Frobenius norms (sums). The caller routes decoder gradients to
    z_hat via the straight-through composition z_hat + sg(z_q - z_hat).
    """

    def sq_norm(t):
        return tsum(nx.mul(t, t))

    rec = sq_norm(nx.sub(x, x_hat))
    codebook_pull = sq_norm(nx.sub(detach(z_hat), z_q))
    commit = sq_norm(nx.sub(detach(z_q), z_hat))
    return nx.add(rec, nx.add(codebook_pull, nx.mul(commit, beta_commit)))


def straight_through(z_hat, z_q):
    """Decoder input valued exactly z_q whose gradient flows to z_hat unchanged."""
    z_q_data = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q)
    return nx.override_value(z_hat, z_q_data)


def one_hot_patches(grid, palette, patch=2):
    """(H, W) palette grid -> (n_patches, patch*patch*palette) one-hot rows."""
    h, w = grid.shape
    if h % patch or w % patch:
        raise ValueError(f"grid {h}x{w} not divisible by patch {patch}")
    planes = np.eye(palette, dtype=np.float32)[grid]  # (H, W, P)
    ph, pw = h // patch, w // patch
    x = planes.reshape(ph, patch, pw, patch, palette).transpose(0, 2, 1, 3, 4)
    return x.reshape(ph * pw, patch * patch * palette)


def patches_to_grid(rows, h, w, palette, patch=2):
    """Inverse of one_hot_patches via per-cell argmax."""
    ph, pw = h // patch, w // patch
    x = rows.reshape(ph, pw, patch, patch, palette).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, palette).argmax(axis=-1).astype(np.int16)


@dataclass
class VqConfig:
    codebook_size: int = 32
    n_z: int = 8
    patch: int = 2
    beta_commit: float = 0.25
    lr: float = 1e-2
    epochs: int = 60
    batch: int = 32
    seed: int = 0


@dataclass
class VqTrainReport:
    recon_accuracy: float
    usage_entropy: float
    final_loss: float
    reseeded: int = 0
    loss_curve: list = field(default_factory=list)


class VqPipeline:
    """Patch-linear encoder E, decoder D, and codebook; tokenizes scenes."""

    def __init__(self, cfg, palette, grid_h, grid_w, rng):
        self.cfg = cfg
        self.palette = palette
        self.grid_h, self.grid_w = grid_h, grid_w
        d_in = cfg.patch * cfg.patch * palette
        self.enc_w = Parameter(rng.normal(0, 0.1, size=(d_in, cfg.n_z)).astype(np.float32), "vq.enc.w")
        self.enc_b = Parameter(np.zeros(cfg.n_z, dtype=np.float32), "vq.enc.b")
        self.dec_w = Parameter(rng.normal(0, 0.1, size=(cfg.n_z, d_in)).astype(np.float32), "vq.dec.w")
        self.dec_b = Parameter(np.zeros(d_in, dtype=np.float32), "vq.dec.b")
        self.codebook = Codebook(entries=rng.normal(0, 0.1, size=(cfg.codebook_size, cfg.n_z)).astype(np.float32))
        self.codebook_param = Parameter(self.codebook.entries, "vq.codebook")
        self.codebook.entries = self.codebook_param.value.data  # shared storage

    def parameters(self):
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b, self.codebook_param]

    def encode(self, x):
        return nx.add(matmul(x, self.enc_w.value), self.enc_b.value)

    def decode(self, z):
        return nx.add(matmul(z, self.dec_w.value), self.dec_b.value)

    @property
    def token_grid(self):
        return self.grid_h // self.cfg.patch, self.grid_w // self.cfg.patch

    def tokenize(self, scene):
        x = Tensor(one_hot_patches(scene.grid, self.palette, self.cfg.patch))
        with nx.no_grad():
            z_hat = self.encode(x)
        ids, _ = quantize(z_hat, self.codebook)
        return ids, self.token_grid

    def reconstruct(self, scene):
        x = one_hot_patches(scene.grid, self.palette, self.cfg.patch)
        with nx.no_grad():
            z_hat = self.encode(Tensor(x))
            _, z_q = quantize(z_hat, self.codebook)
            rows = self.decode(z_q)
        return patches_to_grid(rows.data, self.grid_h, self.grid_w, self.palette, self.cfg.patch)


def _gathered_codebook(pipeline, ids):
    """Codebook rows as a graph node so the pull term trains the entries."""
    return nx.embedding(pipeline.codebook_param.value, ids)


def train_vq_autoencoder(scenes, cfg, palette, grid_h, grid_w, holdout=None):
    """Fit the patch-linear VQ autoencoder with Adam; reseed dead codes per epoch.

    Raises RuntimeError with a diagnostic if the loss goes non-finite.
    Returns (pipeline, VqTrainReport); recon accuracy is measured on
    ``holdout`` scenes (defaults to the training scenes).
    """
    rng = np.random.default_rng(cfg.seed)
    pipeline = VqPipeline(cfg, palette, grid_h, grid_w, rng)
    params = pipeline.parameters()
    m = {p.name: np.zeros_like(p.value.data) for p in params}
    v = {p.name: np.zeros_like(p.value.data) for p in params}
    xs = np.concatenate([one_hot_patches(s.grid, palette, cfg.patch) for s in scenes], axis=0)
    n = xs.shape[0]
    report = VqTrainReport(recon_accuracy=0.0, usage_entropy=0.0, final_loss=0.0)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_usage = np.zeros(cfg.codebook_size, dtype=np.int64)
        last_z = None
        for lo in range(0, n, cfg.batch):
            idx = order[lo : lo + cfg.batch]
            x = Tensor(xs[idx])
            z_hat = pipeline.encode(x)
            ids, z_q_const = quantize(z_hat, pipeline.codebook)
            epoch_usage += np.bincount(ids, minlength=cfg.codebook_size)
            last_z = z_hat.data
            z_q = _gathered_codebook(pipeline, ids)
            x_hat = pipeline.decode(straight_through(z_hat, z_q_const))
            loss = nx.mul(vq_loss(x, x_hat, z_hat, z_q, cfg.beta_commit), 1.0 / len(idx))
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"vq training diverged: non-finite loss at epoch {epoch} step {step}")
            for p in params:
                p.zero_grad()
            backward(loss)
            step += 1
            for p in params:
                if p.grad is None:
                    continue
                m[p.name] = 0.9 * m[p.name] + 0.1 * p.grad
                v[p.name] = 0.999 * v[p.name] + 0.001 * p.grad**2
                mh = m[p.name] / (1 - 0.9**step)
                vh = v[p.name] / (1 - 0.999**step)
                p.value.data -= (cfg.lr * mh / (np.sqrt(vh) + 1e-8)).astype(p.value.data.dtype)
            report.final_loss = loss.item()
        report.loss_curve.append(report.final_loss)
        dead = np.flatnonzero(epoch_usage == 0)
        if len(dead) and last_z is not None:
            picks = rng.integers(0, last_z.shape[0], size=len(dead))
            pipeline.codebook_param.value.data[dead] = last_z[picks]
            report.reseeded += len(dead)
    eval_scenes = holdout if holdout is not None else scenes
    correct = total = 0
    for s in eval_scenes:
        rec = pipeline.reconstruct(s)
        correct += (rec == s.grid).sum()
        total += rec.size
    report.recon_accuracy = correct / total
    use = pipeline.codebook.usage.astype(np.float64)
    p = use / max(1, use.sum())
    nzp = p[p > 0]
    report.usage_entropy = float(-(nzp * np.log(nzp)).sum())
    return pipeline, report
