"""Flat key=value run configuration with section prefixes.

One option per line, ``section.key=value``; blank lines and ``#`` comments
are ignored. Parsing and serialization are exact inverses (see FORMATS.md
for the full key list).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import DatasetConfig, ModalityKind
from .model import ModelConfig
from .sampling import GuidanceConfig
from .training import OptimizerConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler_mode: str = "balanced"
    scheduler_min_prob: float = 0.01
    scheduler_decay: float = 0.99
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    steps: int = 1000
    corpus_size: int = 1024
    eval_size: int = 128
    seed: int = 0
    out_dir: str = "runs/out"
    checkpoint_every: int = 500

    @property
    def data(self):
        return self.model.data


def _bool(v):
    if v in ("true", "on", "1", "yes"):
        return True
    if v in ("false", "off", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _fmt(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (getter from RunConfig, parse type). Order fixes the serialized layout.
_DATA_FIELDS = [
    ("grid_h", int), ("grid_w", int), ("palette", int),
    ("min_objects", int), ("max_objects", int), ("min_side", int), ("max_side", int),
    ("coverage_min", float), ("coverage_max", float),
]
_MODEL_FIELDS = [
    ("d_model", int), ("heads", int), ("n_enc", int), ("n_dec", int), ("ff_mult", int),
    ("image_vocab", int), ("mixer_residual", _bool), ("fusion", str), ("pulse_from_input", _bool),
]
_OPT_FIELDS = [
    ("lr", float), ("beta1", float), ("beta2", float), ("weight_decay", float), ("eps", float),
    ("grad_clip", float), ("warmup_steps", int), ("batch_size", int),
]
_GUIDANCE_FIELDS = [
    ("mode", str), ("kappa", float), ("temperature", float), ("top_k", int), ("greedy", _bool),
]
_SCHED_FIELDS = [("mode", str), ("min_prob", float), ("decay", float)]
_RUN_FIELDS = [
    ("steps", int), ("corpus_size", int), ("eval_size", int), ("seed", int),
    ("out_dir", str), ("checkpoint_every", int),
]


def serialize_config(cfg):
    lines = []
    for name, _ in _DATA_FIELDS:
        lines.append(f"data.{name}={_fmt(getattr(cfg.model.data, name))}")
    for name, _ in _MODEL_FIELDS:
        lines.append(f"model.{name}={_fmt(getattr(cfg.model, name))}")
    for name, _ in _OPT_FIELDS:
        lines.append(f"optimizer.{name}={_fmt(getattr(cfg.optimizer, name))}")
    lines.append(f"scheduler.mode={cfg.scheduler_mode}")
    lines.append(f"scheduler.min_prob={_fmt(cfg.scheduler_min_prob)}")
    lines.append(f"scheduler.decay={_fmt(cfg.scheduler_decay)}")
    for name, _ in _GUIDANCE_FIELDS:
        lines.append(f"guidance.{name}={_fmt(getattr(cfg.guidance, name))}")
    for kind, lam in sorted(cfg.guidance.lambda_fixed.items(), key=lambda kv: kv[0].value):
        lines.append(f"guidance.lambda_{kind.value}={_fmt(float(lam))}")
    for name, _ in _RUN_FIELDS:
        lines.append(f"run.{name}={_fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def parse_config(text):
    sections = {"data": {}, "model": {}, "optimizer": {}, "scheduler": {}, "guidance": {}, "run": {}}
    lambdas = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line or "." not in line.split("=", 1)[0]:
            raise ValueError(f"line {ln}: expected section.key=value, got {raw!r}")
        key, value = line.split("=", 1)
        section, name = key.strip().split(".", 1)
        if section not in sections:
            raise ValueError(f"line {ln}: unknown section {section!r}")
        sections[section][name.strip()] = value.strip()

    def take(section, fields):
        out = {}
        spec = dict(fields)
        for name, value in sections[section].items():
            if section == "guidance" and name.startswith("lambda_"):
                kind = ModalityKind(name[len("lambda_") :])
                lambdas[kind] = float(value)
                continue
            if name not in spec:
                raise ValueError(f"unknown config key {section}.{name}")
            out[name] = spec[name](value)
        return out

    data = DatasetConfig(**take("data", _DATA_FIELDS))
    model = ModelConfig(data=data, **take("model", _MODEL_FIELDS))
    opt = OptimizerConfig(**take("optimizer", _OPT_FIELDS))
    sched = take("scheduler", _SCHED_FIELDS)
    guidance = GuidanceConfig(lambda_fixed=lambdas, **take("guidance", _GUIDANCE_FIELDS))
    run = take("run", _RUN_FIELDS)
    cfg = RunConfig(
        model=model,
        optimizer=opt,
        guidance=guidance,
        scheduler_mode=sched.get("mode", "balanced"),
        scheduler_min_prob=sched.get("min_prob", 0.01),
        scheduler_decay=sched.get("decay", 0.99),
        **run,
    )
    if cfg.scheduler_mode not in ("balanced", "uniform"):
        raise ValueError(f"scheduler.mode must be balanced or uniform, got {cfg.scheduler_mode!r}")
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))


def with_overrides(cfg, mode=None, mixer=None, seed=None, out_dir=None):
    """CLI-level overrides (--mode, --no-mixer, --seed)."""
    out = cfg
    if mode is not None:
        out = replace(out, scheduler_mode=mode)
    if mixer is not None:
        out = replace(out, model=replace(out.model, fusion="mixer" if mixer else "concat"))
    if seed is not None:
        out = replace(out, seed=seed)
    if out_dir is not None:
        out = replace(out, out_dir=out_dir)
    return out
