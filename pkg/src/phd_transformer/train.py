"""Run configuration, training loop and validation for desk-scale experiments."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attnmask import MaskSpec
from .checkpoint import save_checkpoint
from .corpus import Corpus, load_corpus, split_bytes, stdlib_corpus, val_windows, next_batch
from .model import (AdamWState, ConfigError, ModelConfig, Weights, cosine_lr, forward_full,
                    init_weights, loss_final_copy, repeat_tokens, train_step)

METRICS_COLUMNS = ("step", "train_loss", "ema_loss", "lr", "tokens_seen", "val_loss")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: str | None = None       # None: built-in stdlib text
    corpus_bytes: int = 1 << 20     # size of the built-in corpus
    val_fraction: float = 0.1
    steps: int = 200
    batch_size: int = 8
    seq_len: int = 64
    lr: float = 3e-3
    warmup: int = 20
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    grad_clip: float | None = 1.0
    ema_weight: float = 0.99
    eval_every: int = 0             # 0: validate only at the end
    eval_windows: int | None = 64   # cap on validation windows (None: all)
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    @property
    def name(self) -> str:
        return self.model.mask.name

    def validate(self) -> None:
        self.model.validate()
        if self.seq_len > self.model.max_t:
            raise ConfigError(f"seq_len {self.seq_len} exceeds model.max_t {self.model.max_t}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be ≥ 2")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be ≥ 0 and batch_size ≥ 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.model.vocab_size < 256:
            raise ConfigError("byte-level corpus needs vocab_size ≥ 256")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    def replace_mask(self, spec: MaskSpec, out_dir: str | None = None) -> "RunConfig":
        return dataclasses.replace(self, model=self.model.with_mask(spec), out_dir=out_dir or self.out_dir)


def load_run_corpus(rc: RunConfig) -> Corpus:
    if rc.corpus is None:
        return split_bytes(stdlib_corpus(rc.corpus_bytes), rc.val_fraction, rc.seq_len)
    return load_corpus(rc.corpus, rc.val_fraction, rc.seq_len)


def evaluate(weights: Weights, corpus: Corpus, seq_len: int, max_windows: int | None = None,
             batch_size: int = 16, spec: MaskSpec | None = None) -> float:
    """Mean next-byte loss over consecutive validation windows (final copy only)."""
    cfg = weights.config
    spec = spec or cfg.mask
    windows = list(val_windows(corpus, seq_len))
    if max_windows is not None:
        windows = windows[:max_windows]
    if not windows:
        raise ValueError("validation split holds no complete window")
    total, count = 0.0, 0
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        inputs = np.stack([w for w, _ in chunk])
        targets = np.stack([tg for _, tg in chunk])
        rseq = repeat_tokens(inputs, spec.K, distinct_positions=cfg.distinct_positions)
        logits = forward_full(weights, rseq, spec)
        loss = loss_final_copy(logits, rseq, targets).item()
        total += loss * targets.size
        count += targets.size
    return total / count


@dataclass
class TrainResult:
    final_loss: float
    final_ema: float
    val_loss: float
    metrics_path: Path
    checkpoint_path: Path
    ema_trace: list[float]


def run_training(rc: RunConfig, log=None) -> TrainResult:
    """Train per ``rc`` and write config.json, metrics.csv, checkpoints/final.phdt."""
    rc.validate()
    corpus = load_run_corpus(rc)
    out = Path(rc.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")
    weights = init_weights(rc.model)
    opt = AdamWState(beta1=rc.beta1, beta2=rc.beta2, weight_decay=rc.weight_decay, grad_clip=rc.grad_clip)
    rng = np.random.default_rng(rc.seed)
    metrics_path = out / "metrics.csv"
    ema = math.nan
    loss = math.nan
    val = math.nan
    trace = []
    with open(metrics_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for step in range(rc.steps):
            batch = next_batch(corpus, rc.seq_len, rc.batch_size, rng)
            lr = cosine_lr(step, rc.steps, rc.lr, rc.warmup, rc.min_lr_ratio)
            _, loss = train_step(weights, batch, opt, lr)
            ema = loss if step == 0 else rc.ema_weight * ema + (1.0 - rc.ema_weight) * loss
            trace.append(ema)
            last = step + 1 == rc.steps
            val_cell = ""
            if last or (rc.eval_every and (step + 1) % rc.eval_every == 0):
                val = evaluate(weights, corpus, rc.seq_len, rc.eval_windows)
                val_cell = repr(val)
            w.writerow([step + 1, repr(loss), repr(ema), repr(lr), (step + 1) * rc.batch_size * rc.seq_len, val_cell])
            if log is not None and (last or (step + 1) % 50 == 0):
                log(f"[{rc.name}] step {step + 1}/{rc.steps} loss {loss:.4f} ema {ema:.4f}")
    ckpt = out / "checkpoints" / "final.phdt"
    save_checkpoint(ckpt, weights, {"steps": rc.steps, "run": rc.name})
    return TrainResult(loss, ema, val, metrics_path, ckpt, trace)


def train_to_weights(rc: RunConfig) -> Weights:
    """Train in memory (no files) and return the weights; used by tests."""
    rc.validate()
    corpus = load_run_corpus(rc)
    weights = init_weights(rc.model)
    opt = AdamWState(beta1=rc.beta1, beta2=rc.beta2, weight_decay=rc.weight_decay, grad_clip=rc.grad_clip)
    rng = np.random.default_rng(rc.seed)
    for step in range(rc.steps):
        batch = next_batch(corpus, rc.seq_len, rc.batch_size, rng)
        train_step(weights, batch, opt, cosine_lr(step, rc.steps, rc.lr, rc.warmup, rc.min_lr_ratio))
    return weights



# --------------------------------------------------------------------------
# length-scaling trend run


def trend_config(K: int, seed: int, steps: int = 2000, batch_size: int = 4) -> RunConfig:
    """2-layer d_model=128 byte model on ~1MB of text, PHD_SWA (W=16) at the given K."""
    spec = MaskSpec("PHD_SWA", K, 16) if K > 1 else MaskSpec()
    model = ModelConfig(n_layers=2, d_model=128, n_heads=4, n_kv_heads=2, d_ffn=256, max_t=128,
                        dtype="f32", seed=seed, mask=spec)
    return RunConfig(model=model, steps=steps, batch_size=batch_size, seq_len=128, lr=3e-3,
                     warmup=100, seed=seed, eval_windows=16)


@dataclass
class TrendResult:
    ema: dict            # (seed, K) -> final EMA train loss
    pairs_held: int
    pairs_total: int

    @property
    def passed(self) -> bool:
        return 2 * self.pairs_held > self.pairs_total


def length_scaling_trend(K_values=(1, 2, 3), seeds=(0, 1), steps: int = 2000, batch_size: int = 4,
                         log=None) -> TrendResult:
    """Final EMA loss per (seed, K); counts adjacent pairs with loss(K+1) ≤ loss(K)."""
    ema = {}
    for seed in seeds:
        for K in K_values:
            rc = trend_config(K, seed, steps, batch_size)
            rc.validate()
            corpus = load_run_corpus(rc)
            weights = init_weights(rc.model)
            opt = AdamWState(beta1=rc.beta1, beta2=rc.beta2, weight_decay=rc.weight_decay, grad_clip=rc.grad_clip)
            rng = np.random.default_rng(rc.seed)
            e = math.nan
            for step in range(rc.steps):
                lr = cosine_lr(step, rc.steps, rc.lr, rc.warmup, rc.min_lr_ratio)
                _, loss = train_step(weights, next_batch(corpus, rc.seq_len, rc.batch_size, rng), opt, lr)
                e = loss if step == 0 else rc.ema_weight * e + (1.0 - rc.ema_weight) * loss
            ema[(seed, K)] = e
            if log is not None:
                log(f"seed {seed} K {K}: final EMA loss {e:.4f}")
    held = total = 0
    for seed in seeds:
        for a, b in zip(K_values, K_values[1:]):
            total += 1
            held += ema[(seed, b)] <= ema[(seed, a)]
    return TrendResult(ema, held, total)
