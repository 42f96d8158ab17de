"""Encoder-decoder transformer with per-layer adaptive token mixing.

Each condition modality gets its own small self-attention encoder. The causal
image decoder injects conditions through one cross-attention block per
modality and, in every layer, fuses the resulting per-modality streams with
the image stream through a mixer: a per-position pulse vector scores the M+1
candidates (self stream first, never masked) and softmax weights combine
them. Absent modalities are masked out of the softmax, so any condition
subset, including none, runs through the same network.

With ``mixer_residual`` on, the self stream flows through the identity path
and the mixer adds only the condition candidates' weighted sum; masking every
modality then reproduces a plain unconditional decoder layer exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import MODALITY_ORDER, DatasetConfig, ModalityKind
from .numerics import (
    MASK_VALUE,
    Parameter,
    RNG_INIT,
    RngState,
    Tensor,
    attention,
    causal_mask,
    concat,
    cross_entropy_from_logits,
    embedding,
    layer_norm,
    matmul,
    narrow,
    gelu,
    reshape,
    softmax,
    stack,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. Desk defaults; reference scale is (768, 12, 12, 24)."""

    data: DatasetConfig = field(default_factory=DatasetConfig)
    d_model: int = 64
    heads: int = 4
    n_enc: int = 2
    n_dec: int = 4
    ff_mult: int = 4
    image_vocab: int = None  # defaults to the palette (exact tokenization)
    mixer_residual: bool = True
    fusion: str = "mixer"  # "mixer" or "concat" (ablation baseline)
    pulse_from_input: bool = True  # False: free learned pulse per position
    # desk-scale models need a hotter start than large-scale defaults, or the
    # cross-attention routing never picks up within a toy step budget
    init_scale: float = 0.08
    emb_init_scale: float = 0.3

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.fusion not in ("mixer", "concat"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.image_vocab is None:
            object.__setattr__(self, "image_vocab", self.data.image_vocab())

    @property
    def seq_len(self):
        return self.data.cells

    @property
    def modalities(self):
        return MODALITY_ORDER

    def expected_parameter_count(self):
        """Closed-form audit of the parameter table (formula in README)."""
        d, ff = self.d_model, self.ff_mult * self.d_model
        sa = 4 * d * d
        block = sa + 2 * (2 * d) + (d * ff + ff) + (ff * d + d)
        enc = sum(self.data.vocab(m) * d + self.data.max_tokens(m) * d + self.n_enc * block for m in self.modalities)
        if self.fusion == "mixer":
            fuse = len(self.modalities) * sa + (d * d if self.pulse_from_input else self.seq_len * d)
            fuse += 2 * d  # cross-attention input norm
        else:
            fuse = sa + 2 * d
        dec_layer = (2 * d + sa) + fuse + (2 * d + d * ff + ff + ff * d + d)
        dec = self.image_vocab * d + self.seq_len * d + d + self.n_dec * dec_layer
        head = 2 * d + d * self.image_vocab
        return enc + dec + head


@dataclass
class CombinationWeights:
    """Per-layer mixer softmax scores: rows over [self, modality 1..M]."""

    layer: int
    weights: np.ndarray  # (B, L, M+1); masked candidate entries are exactly 0
    active: np.ndarray  # (B, M+1) bool


@dataclass
class ForwardTrace:
    cross_attention: list = field(default_factory=list)  # per layer: {kind: (B, L, l_m)}
    combination: list = field(default_factory=list)  # per layer: CombinationWeights


def _linear_init(rng, shape, scale=0.02):
    return (rng.normal(0.0, scale, size=shape)).astype(np.float32)


class Model:
    """Parameter container plus forward passes; pure given (params, inputs)."""

    def __init__(self, config, seed=0, params=None):
        self.config = config
        self.params = {}
        if params is not None:
            self.params = dict(params)
            return
        rng = RngState(seed).stream(RNG_INIT)
        d = config.d_model
        ff = config.ff_mult * d
        ws = config.init_scale
        es = config.emb_init_scale
        add = self._add_param

        def attn_block(prefix):
            for w in ("wq", "wk", "wv", "wo"):
                add(f"{prefix}.{w}", _linear_init(rng, (d, d), ws))

        def norm(prefix):
            add(f"{prefix}.g", np.ones(d, dtype=np.float32))
            add(f"{prefix}.b", np.zeros(d, dtype=np.float32))

        def ffn(prefix):
            add(f"{prefix}.w1", _linear_init(rng, (d, ff), ws))
            add(f"{prefix}.b1", np.zeros(ff, dtype=np.float32))
            add(f"{prefix}.w2", _linear_init(rng, (ff, d), ws))
            add(f"{prefix}.b2", np.zeros(d, dtype=np.float32))

        for m in config.modalities:
            p = f"enc.{m.value}"
            add(f"{p}.tok_emb", _linear_init(rng, (config.data.vocab(m), d), es))
            add(f"{p}.pos_emb", _linear_init(rng, (config.data.max_tokens(m), d), es))
            for i in range(config.n_enc):
                norm(f"{p}.block{i}.ln1")
                attn_block(f"{p}.block{i}.sa")
                norm(f"{p}.block{i}.ln2")
                ffn(f"{p}.block{i}.ff")

        add("dec.tok_emb", _linear_init(rng, (config.image_vocab, d), es))
        add("dec.pos_emb", _linear_init(rng, (config.seq_len, d), es))
        add("dec.bos", _linear_init(rng, (d,), es))
        for i in range(config.n_dec):
            p = f"dec.layer{i}"
            norm(f"{p}.ln_sa")
            attn_block(f"{p}.sa")
            norm(f"{p}.ln_ca")
            if config.fusion == "mixer":
                for m in config.modalities:
                    attn_block(f"{p}.ca.{m.value}")
                if config.pulse_from_input:
                    add(f"{p}.mixer.pulse", _linear_init(rng, (d, d), ws))
                else:
                    add(f"{p}.mixer.pulse", _linear_init(rng, (config.seq_len, d), ws))
            else:
                attn_block(f"{p}.ca.shared")
            norm(f"{p}.ln_ff")
            ffn(f"{p}.ff")
        norm("dec.final_ln")
        add("head.w", _linear_init(rng, (d, config.image_vocab), ws))

    def _add_param(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(data, name)

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def to_dtype(self, dtype):
        cloned = {
            name: Parameter(p.value.data.astype(dtype), name) for name, p in self.params.items()
        }
        return Model(self.config, params=cloned)

    def _p(self, name):
        return self.params[name].value

    # ------------------------------------------------------------------
    # encoders
    # ------------------------------------------------------------------

    def encode_modality(self, tokens, kind, key_mask=None):
        """(B, l) token ids -> (B, l, d) after the modality's encoder stack.

        ``tokens`` may also be a TokenSequence whose modality must match.
        ``key_mask``: (B, l) additive mask hiding padded keys from the
        encoder's self-attention as well as from downstream cross-attention.
        """
        cfg = self.config
        if hasattr(tokens, "modality"):
            if tokens.modality is not kind:
                raise ValueError(f"sequence modality {tokens.modality} != {kind}")
            tokens = tokens.tokens.reshape(1, -1)
        p = f"enc.{kind.value}"
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.data.vocab(kind)):
            raise IndexError(f"{kind.value} token out of vocabulary {cfg.data.vocab(kind)}")
        h = embedding(self._p(f"{p}.tok_emb"), tokens)
        h = nx.add(h, narrow(self._p(f"{p}.pos_emb"), 0, 0, tokens.shape[-1]))
        sa_mask = None
        if key_mask is not None:
            sa_mask = reshape(Tensor(key_mask.data), key_mask.data.shape[:-1] + (1,) + key_mask.data.shape[-1:])
        for i in range(cfg.n_enc):
            b = f"{p}.block{i}"
            hn = layer_norm(h, self._p(f"{b}.ln1.g"), self._p(f"{b}.ln1.b"))
            sa = attention(
                matmul(hn, self._p(f"{b}.sa.wq")),
                matmul(hn, self._p(f"{b}.sa.wk")),
                matmul(hn, self._p(f"{b}.sa.wv")),
                mask=sa_mask,
                heads=cfg.heads,
            )
            h = nx.add(h, matmul(sa, self._p(f"{b}.sa.wo")))
            hn = layer_norm(h, self._p(f"{b}.ln2.g"), self._p(f"{b}.ln2.b"))
            h = nx.add(h, self._ffn(hn, f"{b}.ff"))
        return h

    def _ffn(self, h, prefix):
        u = nx.add(matmul(h, self._p(f"{prefix}.w1")), self._p(f"{prefix}.b1"))
        return nx.add(matmul(gelu(u), self._p(f"{prefix}.w2")), self._p(f"{prefix}.b2"))

    def encode_conditions(self, batch, present):
        """Encode every modality present anywhere in the batch.

        ``batch`` maps ModalityKind -> (B, l_m) ids (plus "bbox_len"); returns
        {kind: (encoded (B, l_m, d), additive key mask (B, l_m) or None)}.
        """
        out = {}
        for kind in self.config.modalities:
            if kind not in present:
                continue
            tokens = batch[kind]
            key_mask = None
            if kind is ModalityKind.BBOX:
                lens = batch["bbox_len"]
                cols = np.arange(tokens.shape[1])
                pad = cols[None, :] >= lens[:, None]
                mask = np.where(pad, MASK_VALUE, 0.0).astype(np.float32)
                # an all-pad row keeps one dummy key; the mixer masks the
                # modality out per example so the output is never used
                mask[lens == 0, 0] = 0.0
                key_mask = Tensor(mask)
            out[kind] = (self.encode_modality(tokens, kind, key_mask), key_mask)
        return out

    # ------------------------------------------------------------------
    # decoder
    # ------------------------------------------------------------------

    def _decoder_inputs(self, prefix):
        cfg = self.config
        prefix = np.asarray(prefix)
        b, t = prefix.shape
        if t > cfg.seq_len:
            raise ValueError(f"prefix length {t} exceeds image length {cfg.seq_len}")
        bos = reshape(self._p("dec.bos"), (1, 1, cfg.d_model))
        if t > 1:
            tok = embedding(self._p("dec.tok_emb"), prefix[:, : t - 1])
            bos_tile = nx.add(bos, Tensor(np.zeros((b, 1, cfg.d_model), dtype=tok.dtype)))
            h = concat([bos_tile, tok], axis=1)
        else:
            h = nx.add(bos, Tensor(np.zeros((b, 1, cfg.d_model), dtype=bos.dtype)))
        return nx.add(h, narrow(self._p("dec.pos_emb"), 0, 0, t))

    def mix(self, x, c_stack, active, layer_idx):
        """Fuse the self stream with per-modality streams by pulse scoring.

        x: (B, T, d); c_stack: list of M tensors (B, T, d) in modality order
        (zeros for absent entries); active: (B, M) bool. Returns the fused
        (B, T, d) and the CombinationWeights record.
        """
        cfg = self.config
        bsz, t, d = x.data.shape
        m = len(cfg.modalities)
        cands = stack([x] + c_stack, axis=2)  # (B, T, M+1, d)
        if cfg.pulse_from_input:
            pulse = matmul(x, self._p(f"dec.layer{layer_idx}.mixer.pulse"))
        else:
            table = narrow(self._p(f"dec.layer{layer_idx}.mixer.pulse"), 0, 0, t)
            pulse = nx.add(table, Tensor(np.zeros((bsz, t, d), dtype=x.dtype)))
        pulse = reshape(pulse, (bsz, t, 1, d))
        scores = nx.mul(matmul(pulse, transpose(cands, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
        mask = np.zeros((bsz, 1, 1, m + 1), dtype=x.dtype)
        mask[:, 0, 0, 1:] = np.where(active, 0.0, MASK_VALUE)
        weights = softmax(nx.add(scores, Tensor(mask)), axis=-1)  # (B, T, 1, M+1)
        record = CombinationWeights(
            layer=layer_idx,
            weights=weights.data.reshape(bsz, t, m + 1).copy(),
            active=np.concatenate([np.ones((bsz, 1), dtype=bool), active], axis=1),
        )
        if cfg.mixer_residual:
            zeros = Tensor(np.zeros((bsz, t, d), dtype=x.dtype))
            cond_only = stack([zeros] + c_stack, axis=2)
            fused = reshape(matmul(weights, cond_only), (bsz, t, d))
            return nx.add(x, fused), record
        return reshape(matmul(weights, cands), (bsz, t, d)), record

    def decoder_forward(self, prefix, cond_encodings, active, trace=None):
        """Causal decode of a (B, T) prefix against encoded conditions.

        ``active`` is (B, M) presence flags aligned with config.modalities;
        logits row i predicts token i given tokens < i (position 0's input is
        the learned begin embedding). Every active modality must come with an
        encoding.
        """
        cfg = self.config
        prefix = np.atleast_2d(np.asarray(prefix))
        bsz, t = prefix.shape
        active = np.atleast_2d(np.asarray(active, dtype=bool))
        if active.shape != (bsz, len(cfg.modalities)):
            raise ValueError(f"active mask shape {active.shape} != {(bsz, len(cfg.modalities))}")
        for j, kind in enumerate(cfg.modalities):
            if active[:, j].any() and kind not in cond_encodings:
                raise ValueError(f"modality {kind.value} is active but no encoding was supplied")
        h = self._decoder_inputs(prefix)
        cmask = causal_mask(t, dtype=h.dtype)
        for i in range(cfg.n_dec):
            p = f"dec.layer{i}"
            hn = layer_norm(h, self._p(f"{p}.ln_sa.g"), self._p(f"{p}.ln_sa.b"))
            sa = attention(
                matmul(hn, self._p(f"{p}.sa.wq")),
                matmul(hn, self._p(f"{p}.sa.wk")),
                matmul(hn, self._p(f"{p}.sa.wv")),
                mask=cmask,
                heads=cfg.heads,
            )
            h = nx.add(h, matmul(sa, self._p(f"{p}.sa.wo")))  # X(n)
            if cfg.fusion == "mixer":
                h = self._mixer_fusion(h, p, i, cond_encodings, active, trace)
            else:
                h = self._concat_fusion(h, p, cond_encodings, active)
            hn = layer_norm(h, self._p(f"{p}.ln_ff.g"), self._p(f"{p}.ln_ff.b"))
            h = nx.add(h, self._ffn(hn, f"{p}.ff"))
        h = layer_norm(h, self._p("dec.final_ln.g"), self._p("dec.final_ln.b"))
        return matmul(h, self._p("head.w"))

    def _mixer_fusion(self, h, p, layer_idx, cond_encodings, active, trace):
        cfg = self.config
        bsz, t, d = h.data.shape
        hn = layer_norm(h, self._p(f"{p}.ln_ca.g"), self._p(f"{p}.ln_ca.b"))
        streams = []
        layer_maps = {}
        for j, kind in enumerate(cfg.modalities):
            if kind not in cond_encodings or not active[:, j].any():
                streams.append(Tensor(np.zeros((bsz, t, d), dtype=h.dtype)))
                continue
            enc, key_mask = cond_encodings[kind]
            amask = None
            if key_mask is not None:
                amask = reshape(key_mask, key_mask.data.shape[:-1] + (1,) + key_mask.data.shape[-1:])
            ca, w = attention(
                matmul(hn, self._p(f"{p}.ca.{kind.value}.wq")),
                matmul(enc, self._p(f"{p}.ca.{kind.value}.wk")),
                matmul(enc, self._p(f"{p}.ca.{kind.value}.wv")),
                mask=amask,
                heads=cfg.heads,
                return_weights=True,
            )
            streams.append(matmul(ca, self._p(f"{p}.ca.{kind.value}.wo")))
            if trace is not None:
                layer_maps[kind] = w.data.mean(axis=1).copy()  # head average, rows stochastic
        if trace is not None:
            trace.cross_attention.append(layer_maps)
        fused, record = self.mix(h, streams, active, layer_idx)
        if trace is not None:
            trace.combination.append(record)
        return fused

    def _concat_fusion(self, h, p, cond_encodings, active):
        """Ablation baseline: one shared cross-attention over concatenated tokens."""
        cfg = self.config
        bsz, t, d = h.data.shape
        keys, masks = [], []
        for j, kind in enumerate(cfg.modalities):
            if kind not in cond_encodings:
                continue
            enc, key_mask = cond_encodings[kind]
            l_m = enc.data.shape[1]
            base = np.where(active[:, j : j + 1], 0.0, MASK_VALUE).astype(h.dtype)
            mask = np.broadcast_to(base, (bsz, l_m)).copy()
            if key_mask is not None:
                mask = np.minimum(mask, key_mask.data)
            keys.append(enc)
            masks.append(mask)
        if not keys or not active.any():
            return h
        enc_cat = concat(keys, axis=1)
        mask_cat = np.concatenate(masks, axis=1)
        mask_cat[~active.any(axis=1), 0] = 0.0  # dummy key for all-absent rows
        hn = layer_norm(h, self._p(f"{p}.ln_ca.g"), self._p(f"{p}.ln_ca.b"))
        amask = Tensor(mask_cat.reshape(bsz, 1, mask_cat.shape[1]))
        ca = attention(
            matmul(hn, self._p(f"{p}.ca.shared.wq")),
            matmul(enc_cat, self._p(f"{p}.ca.shared.wk")),
            matmul(enc_cat, self._p(f"{p}.ca.shared.wv")),
            mask=amask,
            heads=cfg.heads,
        )
        out = matmul(ca, self._p(f"{p}.ca.shared.wo"))
        gate = Tensor(active.any(axis=1).astype(h.dtype).reshape(bsz, 1, 1))
        return nx.add(h, nx.mul(out, gate))

    # ------------------------------------------------------------------
    # public composition
    # ------------------------------------------------------------------

    def batch_from_conditions(self, conditions, bsz=1):
        """Pack one ConditionSet into the batched layout (broadcast to bsz)."""
        cfg = self.config
        batch = {}
        present = []
        for kind in cfg.modalities:
            seq = conditions.present.get(kind)
            if seq is None or len(seq.tokens) == 0:
                continue
            present.append(kind)
            if kind is ModalityKind.BBOX:
                pad = cfg.data.bbox_pad()
                row = np.full(3 * cfg.data.max_objects, pad, dtype=np.int64)
                row[: len(seq.tokens)] = seq.tokens
                batch[kind] = np.tile(row, (bsz, 1))
                batch["bbox_len"] = np.full(bsz, len(seq.tokens), dtype=np.int64)
            else:
                batch[kind] = np.tile(seq.tokens, (bsz, 1))
        return batch, present

    def forward_logits(self, prefix, conditions, trace=False):
        """Logits (T, V) for one example prefix under a ConditionSet."""
        prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
        batch, present = self.batch_from_conditions(conditions)
        encodings = self.encode_conditions(batch, present)
        active = np.array([[k in present for k in self.config.modalities]])
        tr = ForwardTrace() if trace else None
        logits = self.decoder_forward(prefix, encodings, active, trace=tr)
        out = logits.data[0]
        return (out, tr) if trace else out

    def sequence_loss(self, prefixes, targets, cond_encodings, active):
        logits = self.decoder_forward(prefixes, cond_encodings, active)
        return cross_entropy_from_logits(logits, targets)


def extract_attention_maps(trace):
    """Per-layer cross-attention maps plus the layer-averaged map per modality."""
    if trace is None or not trace.cross_attention:
        raise ValueError("tracing was not enabled for this forward")
    per_layer = trace.cross_attention
    kinds = set()
    for maps in per_layer:
        kinds.update(maps)
    averaged = {}
    for kind in kinds:
        mats = [maps[kind] for maps in per_layer if kind in maps]
        averaged[kind] = np.mean(mats, axis=0)
    return per_layer, averaged
