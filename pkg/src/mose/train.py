"""Training loop: compact-representation forward, coupling solve, Adam step."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import NumericError
from .data import Dataset, SpecError
from .losses import (Schedule, all_pairs_loss, assemble_loss, group_experts,
                     pairwise_cost)
from .model import ModelConfig, MoseModel, load_checkpoint, save_checkpoint


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict, epoch: int):
        super().__init__(msg)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class TrainConfig:
    num_experts: int = 4
    samples_per_expert: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    lr_final: float | None = None  # linear decay target; None keeps lr constant
    weight_decay: float = 1e-5
    beta: float = 1.0
    gamma0: float = 0.5
    gamma_epochs: float | None = None  # default 25% of epochs
    g0_start: float = 1.0
    g0_end: float = 0.75
    g0_epochs: float | None = None  # default 50% of epochs
    warmup_epochs: float | None = None  # v uniform -> true, default 10% of epochs
    cost: str = "iou"
    epochs: int = 200
    seed: int = 0
    soft_gradient: bool = False
    solver: str = "greedy"
    single_label: bool = False
    loss: str = "ot"  # "ot" or "all_pairs" (ablation)
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    @property
    def num_samples(self) -> int:
        return self.num_experts * self.samples_per_expert

    def horizons(self) -> tuple[float, float, float]:
        e = self.epochs
        return (0.25 * e if self.gamma_epochs is None else self.gamma_epochs,
                0.5 * e if self.g0_epochs is None else self.g0_epochs,
                0.1 * e if self.warmup_epochs is None else self.warmup_epochs)

    def validate(self) -> "TrainConfig":
        if self.num_experts < 1:
            raise SpecError("num_experts", "must be >= 1")
        if self.samples_per_expert < 1:
            raise SpecError("samples_per_expert", "must be >= 1")
        if self.batch_size < 1:
            raise SpecError("batch_size", "must be >= 1")
        if not 1.0 / self.num_samples - 1e-12 <= self.gamma0 <= 1.0:
            raise SpecError("gamma0", f"must lie in [1/(K*S), 1] = [{1 / self.num_samples:.4g}, 1]")
        if self.beta < 0:
            raise SpecError("beta", "must be >= 0")
        if not 0.0 <= self.g0_end <= self.g0_start <= 1.0:
            raise SpecError("g0_end", "need 0 <= g0_end <= g0_start <= 1")
        if self.cost not in ("iou", "ce"):
            raise SpecError("cost", f"unknown cost {self.cost!r}")
        if self.solver not in ("greedy", "exact"):
            raise SpecError("solver", f"unknown solver {self.solver!r}")
        if self.loss not in ("ot", "all_pairs"):
            raise SpecError("loss", f"unknown loss {self.loss!r}")
        if self.lr <= 0 or (self.lr_final is not None and self.lr_final < 0):
            raise SpecError("lr", "learning rates must be positive")
        if self.epochs < 0:
            raise SpecError("epochs", "must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise SpecError(sorted(extra)[0], "unknown train config field")
        return cls(**d)


def load_config_text(text: str) -> TrainConfig:
    """Parse the nested YAML config (``train:`` and optional ``model:`` sections)."""
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise SpecError("config", f"unparseable config: {e}") from None
    if not isinstance(doc, dict):
        raise SpecError("config", "top level must be a mapping")
    train = dict(doc.get("train", {}))
    if "model" in doc:
        train["model"] = dict(doc["model"])
    return TrainConfig.from_dict(train).validate()


def build_model(dataset: Dataset, config: TrainConfig) -> MoseModel:
    spec = dataset.spec
    mc = ModelConfig(in_channels=spec.channels, height=spec.height, width=spec.width,
                     num_classes=spec.num_classes, num_experts=config.num_experts)
    mc = ModelConfig.from_dict({**asdict(mc), **config.model})
    return MoseModel(mc, seed=config.seed)


class Adam:
    """Adam with L2-style weight decay applied to selected parameters."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0, decay_names=None,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.decay = set(params if decay_names is None else decay_names)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.wd and k in self.decay:
                g = g + self.wd * p.value
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.value = p.value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        out.update({f"adam.m/{k}": v for k, v in self.m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m/{k}"])
            self.v[k] = np.array(state[f"adam.v/{k}"])


def _entropy(pi: np.ndarray) -> float:
    p = np.clip(pi, 1e-300, None)
    return float(np.mean(-(pi * np.log(p)).sum(axis=-1)))


@dataclass
class TrainResult:
    model: MoseModel
    log: list[dict]
    optimizer: Adam
    rng_state: dict


class Trainer:
    """Epoch loop over a dataset; one ``run_epoch`` call per epoch."""

    def __init__(self, dataset: Dataset, config: TrainConfig, model: MoseModel | None = None):
        self.dataset = dataset
        self.config = config.validate()
        self.model = model if model is not None else build_model(dataset, config)
        if self.model.config.num_experts != config.num_experts:
            raise SpecError("num_experts", "model and config disagree on the number of experts")
        decay = [k for k in self.model.params if not k.startswith("prior")]
        self.opt = Adam(self.model.params, config.lr, config.weight_decay, decay)
        self.rng = np.random.default_rng(config.seed)
        g_h, g0_h, w_h = config.horizons()
        self.gamma = Schedule(config.gamma0, 1.0, g_h)
        self.g0 = Schedule(config.g0_start, config.g0_end, g0_h)
        self.warm = Schedule(0.0, 1.0, w_h)
        lr_final = config.lr if config.lr_final is None else config.lr_final
        self.lr = Schedule(config.lr, lr_final, config.epochs)
        split = dataset.train
        self.images = split.images.astype(np.float64)
        h, w = dataset.spec.height, dataset.spec.width
        self.labels = split.labels.reshape(len(split), split.labels.shape[1], h * w)
        self.freqs = split.freqs
        self.eval_classes = dataset.spec.eval_classes()
        threads = int(os.environ.get("MOSE_THREADS", "1"))
        self.pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def _groups(self, logits: np.ndarray, g0: float) -> list:
        c = self.config
        b, n, p, ncls = logits.shape
        h, w = self.dataset.spec.height, self.dataset.spec.width
        z = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=-1, keepdims=True)
        means = probs.reshape(b, c.num_experts, c.samples_per_expert, p, ncls).mean(axis=2)
        maps = means.argmax(axis=-1).reshape(b, c.num_experts, h, w)
        return [group_experts(maps[i], g0, c.samples_per_expert, list(range(ncls))) for i in range(b)]

    def step(self, idx: np.ndarray, gamma: float, g0: float, warm: float) -> dict:
        c = self.config
        x = self.images[idx]
        labels = self.labels[idx]
        v_true = self.freqs[idx]
        if c.single_label:
            pick = np.array([self.rng.choice(len(f), p=f) for f in v_true])
            labels = labels[np.arange(len(idx)), pick][:, None]
            v_true = np.ones((len(idx), 1))
        v = (1 - warm) * np.full_like(v_true, 1.0 / v_true.shape[1]) + warm * v_true
        with ad.Tape() as tape:
            logits, pi, _ = self.model.forward_compact(x, c.samples_per_expert, self.rng)
            cost = pairwise_cost(logits, labels, c.cost)
            u = ad.mul(ad.repeat(pi, c.samples_per_expert, axis=1), 1.0 / c.samples_per_expert)
            if c.loss == "all_pairs":
                loss = all_pairs_loss(cost, v)
                stats = {"loss": float(loss.value), "transport": float(loss.value), "kl": 0.0, "kl_sample": 0.0}
            else:
                groups = self._groups(logits.value, g0) if c.soft_gradient else None
                map_fn = self.pool.map if self.pool is not None else map
                parts = assemble_loss(cost, u, v, c.beta, gamma, solver=c.solver, groups=groups,
                                      samples_per_expert=c.samples_per_expert, map_fn=map_fn)
                loss = parts.loss
                stats = {"loss": parts.value, "transport": parts.transport,
                         "kl": parts.kl_expert, "kl_sample": parts.kl}
        if not math.isfinite(stats["loss"]):
            raise NumericError("non-finite loss")
        names = list(self.model.params)
        grads = tape.gradient(loss, [self.model.params[k] for k in names])
        self.opt.step(dict(zip(names, grads)))
        stats["pi_entropy"] = _entropy(pi.value)
        return stats

    def run_epoch(self, epoch: int) -> dict:
        c = self.config
        gamma, g0, warm = self.gamma(epoch), self.g0(epoch), self.warm(epoch)
        self.opt.lr = self.lr(epoch)
        order = self.rng.permutation(len(self.images))
        rows = []
        for start in range(0, len(order), c.batch_size):
            rows.append(self.step(order[start:start + c.batch_size], gamma, g0, warm))
        rec = {"epoch": epoch}
        for key in ("loss", "transport", "kl", "kl_sample", "pi_entropy"):
            rec[key] = float(np.mean([r[key] for r in rows]))
        rec["kl_max"] = float(np.max([r["kl"] for r in rows]))
        rec.update({"gamma": gamma, "g0": g0, "v_warmup": warm, "lr": self.opt.lr})
        return rec

    def fit(self, start_epoch: int | None = None, log_fn=None, end_epoch: int | None = None) -> list[dict]:
        log = []
        start = self.next_epoch if start_epoch is None else start_epoch
        end = self.config.epochs if end_epoch is None else min(end_epoch, self.config.epochs)
        last_good = self.model.state_dict()
        for epoch in range(start, end):
            try:
                rec = self.run_epoch(epoch)
            except NumericError as e:
                self.model.load_state_dict(last_good)
                raise TrainingDiverged(str(e), last_good, epoch) from e
            last_good = self.model.state_dict()
            self.next_epoch = epoch + 1
            log.append(rec)
            if log_fn is not None:
                log_fn(rec)
        return log

    # ------------------------------------------------------------ checkpoints

    next_epoch: int = 0

    def save(self, path, config_echo: str = "", meta: dict | None = None):
        tensors = {**self.model.state_dict(), **self.opt.state()}
        info = {"next_epoch": self.next_epoch, "rng_state": self.rng.bit_generator.state,
                "train_config": self.config.to_dict(), **(meta or {})}
        return save_checkpoint(path, tensors, self.model.config, config_echo, info)

    def restore(self, path) -> dict:
        """Load parameters, optimizer moments, RNG state and epoch counter."""
        tensors, mc, _, meta = load_checkpoint(path)
        if mc != self.model.config:
            raise SpecError("model", "checkpoint model config differs from the run config")
        self.model.load_state_dict({k: v for k, v in tensors.items() if k in self.model.params})
        if "adam.t" in tensors:
            self.opt.load_state(tensors)
        if "rng_state" in meta:
            self.rng.bit_generator.state = meta["rng_state"]
        self.next_epoch = int(meta.get("next_epoch", 0))
        return meta


def train(dataset: Dataset, config: TrainConfig, model: MoseModel | None = None,
          log_fn=None) -> TrainResult:
    trainer = Trainer(dataset, config, model)
    log = trainer.fit(log_fn=log_fn)
    return TrainResult(trainer.model, log, trainer.opt, trainer.rng.bit_generator.state)
