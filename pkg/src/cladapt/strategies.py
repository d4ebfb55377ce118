"""Naive finetuning, less-forgetful (LFL) adaptation and joint retraining.

LFL adapts a trained network to a new experience by

1. taking a frozen copy of the current weights as the reference network,
2. freezing the linear head, and
3. minimizing cross-entropy plus ``lambda_e`` times the embedding drift
   ``0.5 * mean_n ||embed_ref(x_n) - embed(x_n)||^2`` on the new data only,
   with L2 weight decay applied by the optimizer.

The first experience is always trained with plain cross-entropy.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .data import SEED_INIT, SEED_SHUFFLE, PastDataError, StreamView, sub_rng
from .metrics import EvalRow, TrendPoint, TrendRecorder, evaluate_checkpoint
from .model import (LayeredNet, FrozenSnapshot, ConfigError, build_model, embed,
                    freeze_head, snapshot, unfreeze_all)

log = logging.getLogger(__name__)

STRATEGIES = ("naive", "lfl", "joint")
EMBEDDING_NORMS = ("squared", "unsquared")
JOINT_SHUFFLE_KEY = 0


@dataclass
class Hyperparams:
    lr: float = 0.002
    lambda_e: float = 1.0
    weight_decay: float = 1e-4
    epochs_per_experience: int = 30
    batch_size: int = 8
    seed: int = 0
    embedding_norm: str = "squared"
    freeze_head: bool = True

    def validate(self) -> None:
        # lr == 0 is accepted as an exact no-op run
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.lambda_e < 0:
            raise ConfigError(f"lambda_e must be >= 0, got {self.lambda_e}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs_per_experience < 1:
            raise ConfigError("epochs_per_experience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.embedding_norm not in EMBEDDING_NORMS:
            raise ConfigError(f"embedding_norm must be one of {EMBEDDING_NORMS}")


@dataclass
class EpochLog:
    experience: int
    epoch: int
    loss_ce: float
    loss_emb: float
    reg: float
    samples: int
    wall_time: float


@dataclass
class TrainLog:
    strategy: str
    experience: int
    epochs: list[EpochLog] = field(default_factory=list)

    @property
    def samples(self) -> int:
        return sum(e.samples for e in self.epochs)

    @property
    def wall_time(self) -> float:
        return sum(e.wall_time for e in self.epochs)

    def summary(self) -> dict:
        last = self.epochs[-1] if self.epochs else None
        return {"strategy": self.strategy, "experience": self.experience,
                "epochs": len(self.epochs), "samples": self.samples,
                "wall_time": self.wall_time,
                "final_loss_ce": last.loss_ce if last else None,
                "final_loss_emb": last.loss_emb if last else None}


def embedding_loss(ref: np.ndarray, cur: np.ndarray, norm: str = "squared") -> tuple[float, np.ndarray]:
    """Drift of the current embeddings from the reference ones, and its gradient wrt ``cur``."""
    diff = cur.astype(np.float64) - ref.astype(np.float64)
    n = diff.shape[0]
    if norm == "squared":
        return float(0.5 * (diff ** 2).sum(axis=1).mean()), diff / n
    dist = np.sqrt((diff ** 2).sum(axis=1))
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) * (0.5 / n)
    return float(0.5 * dist.mean()), grad


def _lfl_hook(net: LayeredNet, ref_emb: np.ndarray, lambda_e: float, norm: str, parts: dict):
    emb_index = net.head_index - 1

    def hook(acts):
        le, g = embedding_loss(ref_emb, acts[emb_index], norm)
        parts["emb"] = lambda_e * le
        return lambda_e * le, {emb_index: lambda_e * g}

    return hook


def lfl_loss(net: LayeredNet, snap: FrozenSnapshot, x: np.ndarray, y: np.ndarray,
             lambda_e: float = 1.0, norm: str = "squared") -> tuple[float, nn.ParamSet]:
    """Cross-entropy plus ``lambda_e`` times embedding drift, with gradients.

    The weight-decay term is not part of the returned value; the optimizer
    applies it.
    """
    if snap.embedding_dim != net.embedding_dim or tuple(snap.body) != tuple(net.body):
        raise ConfigError("snapshot architecture does not match the network body")
    if lambda_e == 0:
        return nn.backprop(net.layers, net.params, x, y)
    ref = embed(snap, x)
    return nn.backprop(net.layers, net.params, x, y, _lfl_hook(net, ref, lambda_e, norm, {}))


def _reg_value(params: nn.ParamSet, wd: float) -> float:
    if not wd:
        return 0.0
    return float(0.5 * wd * sum(float((e.value.astype(np.float64) ** 2).sum())
                                for e in params if e.trainable))


EpochCallback = Callable[[LayeredNet, int], None]


def _fit(net: LayeredNet, x: np.ndarray, y: np.ndarray, hp: Hyperparams, experience: int,
         shuffle_key: int, strategy: str, ref: Optional[FrozenSnapshot] = None,
         on_epoch: Optional[EpochCallback] = None) -> tuple[LayeredNet, TrainLog]:
    hp.validate()
    n = len(y)
    if n == 0:
        raise ValueError(f"experience {experience}: empty training split")
    rng = sub_rng(hp.seed, SEED_SHUFFLE, shuffle_key)
    params = net.params
    tlog = TrainLog(strategy, experience)
    use_ref = ref is not None and hp.lambda_e != 0
    for epoch in range(hp.epochs_per_experience):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        ce_sum = emb_sum = 0.0
        seen = 0
        for start in range(0, n, hp.batch_size):
            idx = perm[start:start + hp.batch_size]
            xb, yb = x[idx], y[idx]
            parts: dict = {}
            cur = net.with_params(params)
            hook = None
            if use_ref:
                hook = _lfl_hook(cur, embed(ref, xb), hp.lambda_e, hp.embedding_norm, parts)
            loss, grads = nn.backprop(cur.layers, params, xb, yb, hook)
            params = nn.sgd_step(params, grads, hp.lr, hp.weight_decay)
            emb = parts.get("emb", 0.0)
            ce_sum += (loss - emb) * len(idx)
            emb_sum += emb * len(idx)
            seen += len(idx)
        wall = time.perf_counter() - t0
        tlog.epochs.append(EpochLog(experience, epoch, ce_sum / seen, emb_sum / seen,
                                    _reg_value(params, hp.weight_decay), seen, wall))
        if on_epoch is not None:
            on_epoch(net.with_params(params), experience)
    return net.with_params(params), tlog


def train_experience_naive(net: LayeredNet, x: np.ndarray, y: np.ndarray, hp: Hyperparams,
                           experience: int = 0, on_epoch: Optional[EpochCallback] = None
                           ) -> tuple[LayeredNet, TrainLog]:
    """Plain cross-entropy finetuning on one experience, every parameter trainable."""
    return _fit(unfreeze_all(net), x, y, hp, experience, experience, "naive", on_epoch=on_epoch)


def train_experience_lfl(net: LayeredNet, x: np.ndarray, y: np.ndarray, hp: Hyperparams,
                         experience: int = 1, on_epoch: Optional[EpochCallback] = None
                         ) -> tuple[LayeredNet, TrainLog]:
    """Adapt an already trained network to one new experience with LFL."""
    ref = snapshot(net)
    start = freeze_head(net) if hp.freeze_head else unfreeze_all(net)
    return _fit(start, x, y, hp, experience, experience, "lfl", ref=ref, on_epoch=on_epoch)


def train_joint(arch_config: dict, view: StreamView, hp: Hyperparams, num_classes: int = 3,
                on_epoch: Optional[EpochCallback] = None) -> tuple[LayeredNet, TrainLog]:
    """Fresh model trained once on the union of every experience's training split."""
    parts = [view.train(i) for i in range(len(view))]
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    net = build_model(arch_config, num_classes, seed=init_seed(hp.seed))
    return _fit(net, x, y, hp, 0, JOINT_SHUFFLE_KEY, "joint", on_epoch=on_epoch)


def init_seed(seed: int) -> int:
    return int(sub_rng(seed, SEED_INIT).integers(0, 2**63 - 1))


@dataclass
class ProtocolResult:
    strategy: str
    rows: list[EvalRow]
    checkpoints: list[LayeredNet]
    logs: list[TrainLog]
    trend: list[TrendPoint]

    def train_samples(self) -> list[int]:
        return [lg.samples for lg in self.logs]


def stage_label(names: list[str], upto: int, strategy: str) -> str:
    if strategy == "joint":
        return " ∪ ".join(names)
    return " -> ".join(names[:upto + 1])


def run_protocol(strategy: str, view: StreamView, hp: Hyperparams, arch_config: dict,
                 num_classes: int = 3, eval_every: int = 1,
                 start_net: Optional[LayeredNet] = None, start_experience: int = 0,
                 record_trend: bool = True) -> ProtocolResult:
    """Train one strategy over the stream, evaluating every test set after each experience.

    With ``start_net`` the run resumes from a checkpoint taken after experience
    ``start_experience - 1``.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    hp.validate()
    test_sets = view.test_sets()
    names = view.names
    recorder = TrendRecorder(*view.union_test(), every=eval_every) if record_trend else None
    rows, ckpts, logs = [], [], []
    if strategy == "joint":
        net, tlog = train_joint(arch_config, view, hp, num_classes, on_epoch=recorder)
        for i in range(len(view)):
            view.release(i)
        rows.append(evaluate_checkpoint(net, test_sets, stage_label(names, len(names) - 1, strategy)))
        return ProtocolResult(strategy, rows, [net], [tlog], recorder.points if recorder else [])

    if start_net is None:
        if start_experience != 0:
            raise ValueError("resuming past experience 0 needs a start network")
        net = build_model(arch_config, num_classes, seed=init_seed(hp.seed))
    else:
        net = start_net
    for i in range(start_experience):
        view.release(i)
    for i in range(start_experience, len(view)):
        x, y = view.train(i)
        if i == 0 or strategy == "naive":
            net, tlog = train_experience_naive(net, x, y, hp, i, on_epoch=recorder)
        else:
            net, tlog = train_experience_lfl(net, x, y, hp, i, on_epoch=recorder)
        view.release(i)
        del x, y
        logs.append(tlog)
        ckpts.append(net)
        rows.append(evaluate_checkpoint(net, test_sets, stage_label(names, i, strategy)))
        log.info("%s after %s: %s", strategy, names[i],
                 ", ".join(f"{c}={a:.4f}" for c, a in zip(rows[-1].columns, rows[-1].auroc)))
    return ProtocolResult(strategy, rows, ckpts, logs, recorder.points if recorder else [])


__all__ = [
    "Hyperparams", "TrainLog", "EpochLog", "ProtocolResult", "STRATEGIES", "PastDataError",
    "embedding_loss", "lfl_loss", "train_experience_naive", "train_experience_lfl",
    "train_joint", "run_protocol",
]
