"""AdamW training loop with warmup and cosine decay, plus evaluation."""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from ..checkpoint_io import save
from ..config import ModelConfig
from ..errors import ConfigurationError, TrainingError
from ..model import Checkpoint, init_weights, window_loss
from ..numeric import GradTape, Tensor
from .data import Corpus, ingest

RUN_DIR_ENV = "SKV1_RUN_DIR"


def desk_model(**changes) -> ModelConfig:
    """2-layer, width-128 byte-level model used for desk-scale runs."""
    base = dict(n_layers=2, d_model=128, n_heads=4, ffn_dim=512, vocab_size=256, n_max=256)
    base.update(changes)
    return ModelConfig(**base)


def run_dir(default: str | os.PathLike = "runs") -> str:
    path = os.environ.get(RUN_DIR_ENV) or str(default)
    os.makedirs(path, exist_ok=True)
    return path


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=desk_model)
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 64
    lr: float = 3e-3
    warmup_frac: float = 0.1
    floor_frac: float = 0.1
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    seed: int = 7
    corpus: str | None = None
    val_fraction: float = 0.1
    eval_every: int = 250
    eval_windows: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigurationError(f"warmup fraction must lie in [0, 1), got {self.warmup_frac}")
        if not 0.0 < self.floor_frac <= 1.0:
            raise ConfigurationError(f"floor fraction must lie in (0, 1], got {self.floor_frac}")
        if self.batch_size < 1 or self.seq_len < 1 or self.lr < 0 or self.grad_clip <= 0:
            raise ConfigurationError("batch_size, seq_len and grad_clip must be positive and lr >= 0")
        if self.seq_len > self.model.n_max:
            raise ConfigurationError(f"seq_len {self.seq_len} exceeds model n_max {self.model.n_max}")

    def echo(self) -> list[str]:
        out = [f"model.{line}" for line in self.model.to_lines()]
        for f in fields(self):
            if f.name == "model":
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.append(f"{f.name}={'' if value is None else value}")
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build from string ``key=value`` pairs; model keys may carry a ``model.`` prefix."""
        model_keys = {f.name for f in fields(ModelConfig)}
        own = {f.name: f for f in fields(cls) if f.name != "model"}
        model_kw = dict(line.split("=", 1) for line in desk_model().to_lines())
        kw = {}
        for key, raw in mapping.items():
            name = key[len("model."):] if key.startswith("model.") else key
            if name in model_keys:
                model_kw[name] = raw
            elif name in own:
                default = own[name].default
                raw = str(raw)
                if name == "corpus":
                    kw[name] = raw or None
                elif name == "betas":
                    kw[name] = tuple(float(b) for b in raw.split(","))
                elif isinstance(default, int):
                    kw[name] = int(raw)
                else:
                    kw[name] = float(raw)
            else:
                raise ConfigurationError(f"unknown training config key {key!r}")
        try:
            return cls(model=ModelConfig.from_mapping(model_kw), **kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad training config value: {exc}") from None


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``floor_frac * lr`` (1-based ``step``)."""
    warm = int(round(cfg.warmup_frac * cfg.steps))
    if step <= warm:
        return cfg.lr * step / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    floor = cfg.floor_frac * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay on matrices (gains and biases are not decayed)."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.b1, self.b2 = betas
        self.eps, self.wd = eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if p.ndim >= 2:
                update = update + self.wd * p
            params[k] = (p - np.float32(lr) * update.astype(np.float32)).astype(np.float32)


def clip_by_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                          for g in grads.values()))
    if total > max_norm:
        scale = np.float32(max_norm / (total + 1e-12))
        for k in grads:
            grads[k] = grads[k] * scale
    return total


@dataclass
class RunLog:
    echo: list[str]
    rows: list[dict] = field(default_factory=list)

    HEADER = ("step", "lr", "train_loss", "val_loss", "grad_norm", "wall_time")

    def add(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("run log steps must increase")
        self.rows.append(row)

    def to_csv(self, wall_time: bool = True) -> str:
        header = [h for h in self.HEADER if wall_time or h != "wall_time"]
        buf = io.StringIO()
        for line in self.echo:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.rows:
            w.writerow(["" if r.get(h) is None else (repr(r[h]) if isinstance(r[h], float) else r[h])
                        for h in header])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunLog":
        lines = text.splitlines()
        echo = [ln[2:] for ln in lines if ln.startswith("# ")]
        body = [ln for ln in lines if not ln.startswith("#")]
        log = cls(echo)
        for rec in csv.DictReader(body):
            row = {"step": int(rec["step"])}
            for h in cls.HEADER[1:]:
                if h in rec:
                    row[h] = float(rec[h]) if rec[h] != "" else None
            log.rows.append(row)
        return log

    @property
    def final_val_loss(self) -> float | None:
        vals = [r["val_loss"] for r in self.rows if r.get("val_loss") is not None]
        return vals[-1] if vals else None


def evaluate(ck: Checkpoint, corpus: Corpus, seq_len: int = 128, limit: int | None = 64,
             batch: int = 32) -> tuple[float, float]:
    """Mean next-token cross-entropy on fixed validation windows and its exponential."""
    windows = corpus.fixed_windows("val", seq_len + 1, limit)
    total, count = 0.0, 0
    for i in range(0, len(windows), batch):
        part = windows[i:i + batch]
        total += float(window_loss(ck, part).data) * part.size
        count += part.size
    loss = total / count
    return loss, math.exp(loss)


def train(cfg: TrainConfig, corpus: Corpus | None = None, init: Checkpoint | None = None,
          out_dir: str | None = None, progress=None) -> tuple[Checkpoint, RunLog]:
    """Train from ``init`` (default: fresh weights from ``cfg.seed``); deterministic per seed."""
    corpus = corpus or ingest(cfg.corpus, cfg.val_fraction)
    ck = init.copy() if init is not None else init_weights(cfg.model, cfg.seed)
    if ck.config != cfg.model:
        raise ConfigurationError("initial checkpoint does not match the training model config")
    rng = np.random.default_rng((cfg.seed, 3))
    params = {k: v.astype(np.float32) for k, v in ck.tensors.items()}
    opt = AdamW(params, cfg.betas, weight_decay=cfg.weight_decay)
    log = RunLog(cfg.echo())
    names = list(params)
    t0 = time.perf_counter()
    val0, _ = evaluate(ck, corpus, cfg.seq_len, cfg.eval_windows)
    log.add(step=0, lr=0.0, train_loss=None, val_loss=val0, grad_norm=None, wall_time=0.0)
    for step in range(1, cfg.steps + 1):
        windows = corpus.sample_windows("train", cfg.batch_size, cfg.seq_len + 1, rng)
        P = {k: Tensor(params[k], requires_grad=True) for k in names}
        with GradTape() as tape:
            loss = window_loss(ck, windows, params=P)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"training loss became non-finite at step {step}", step=step)
        grads = dict(zip(names, tape.gradient(loss, [P[k] for k in names])))
        norm = clip_by_norm(grads, cfg.grad_clip)
        lr = lr_at(cfg, step)
        opt.step(params, grads, lr)
        val = None
        if step % cfg.eval_every == 0 or step == cfg.steps:
            ck = Checkpoint(cfg.model, dict(params), ck.meta)
            val, _ = evaluate(ck, corpus, cfg.seq_len, cfg.eval_windows)
        log.add(step=step, lr=lr, train_loss=value, val_loss=val, grad_norm=norm,
                wall_time=round(time.perf_counter() - t0, 3))
        if progress is not None:
            progress(step, value, val)
    ck = Checkpoint(cfg.model, dict(params), dict(ck.meta))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save(ck, os.path.join(out_dir, "checkpoint.skv1"))
        with open(os.path.join(out_dir, "run.csv"), "w", encoding="utf-8") as fh:
            fh.write(log.to_csv())
    return ck, log
