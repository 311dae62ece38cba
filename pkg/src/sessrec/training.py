"""LM objectives, optimizers, pre-training, item-embedding fine-tuning and OOF training."""

from __future__ import annotations

import fnmatch
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .model import (
    CAUSAL,
    MASKED,
    ModelConfig,
    SessionArrays,
    SessionTransformer,
    collate,
    session_arrays,
)
from .preprocess import EncodedSession, FoldPlan

log = logging.getLogger(__name__)

ITEM_TABLE = "item_embedding"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    mask_probability: float = 0.2
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    freeze_set: list[str] = field(default_factory=list)
    max_steps: int | None = None
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not 0.0 < self.mask_probability <= 1.0:
            raise ValueError("mask_probability must be in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule != "constant":
            raise ValueError("only the constant learning-rate schedule is implemented")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# objectives


def make_causal_targets(s: SessionArrays):
    """Inputs are events[:-1]; the target at t is the item of event t+1.

    Returns ``None`` for sessions shorter than 2.
    """
    if len(s) < 2:
        return None
    return s.slice(slice(None, -1)), s.items[1:].copy(), s.context_kinds[1:].copy()


def make_masked_targets(s: SessionArrays, mask_probability: float, rng: np.random.Generator,
                        mask_token_id: int):
    """Mask positions independently; at least the last one when none is drawn.

    Unmasked positions carry the ignore target. Returns ``None`` for
    sessions shorter than 2.
    """
    n = len(s)
    if n < 2:
        return None
    chosen = rng.random(n) < mask_probability
    if not chosen.any():
        chosen[-1] = True
    positions = np.nonzero(chosen)[0]
    targets = np.full(n, ad.IGNORE, dtype=np.int64)
    targets[positions] = s.items[positions]
    return s.masked_at(positions, mask_token_id), targets, s.context_kinds.copy()


def training_examples(rows: Sequence[SessionArrays], config: ModelConfig, train: TrainConfig,
                      rng: np.random.Generator) -> tuple[list, int]:
    out, skipped = [], 0
    for r in rows:
        if config.scheme == CAUSAL:
            ex = make_causal_targets(r.slice(slice(-(config.max_len + 1), None)))
        else:
            ex = make_masked_targets(r.slice(slice(-config.max_len, None)), train.mask_probability, rng,
                                     config.mask_token_id)
        if ex is None:
            skipped += 1
        else:
            out.append(ex)
    return out, skipped


def length_buckets(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Batches of similar-length examples, in shuffled order."""
    n = len(lengths)
    perm = rng.permutation(n)
    order = perm[np.argsort(np.asarray(lengths)[perm], kind="stable")]
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


# --------------------------------------------------------------------------
# optimizers


class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.steps = 0

    def step(self, params: Sequence[ad.Parameter]) -> None:
        self.steps += 1
        for p in params:
            if p.grad is not None:
                p.data -= p.data.dtype.type(self.lr) * p.grad

    def state(self) -> dict[str, np.ndarray]:
        return {}


class Adam:
    name = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[ad.Parameter]) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.steps
        corr2 = 1.0 - b2**self.steps
        for p in params:
            if p.grad is None:
                continue
            m = self.m.setdefault(p.name, np.zeros_like(p.data))
            v = self.v.setdefault(p.name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            step = (self.lr / corr1) * m / (np.sqrt(v / corr2) + self.eps)
            p.data -= step.astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


def frozen_names(names: Sequence[str], patterns: Sequence[str]) -> set[str]:
    return {n for n in names if any(fnmatch.fnmatchcase(n, p) for p in patterns)}


# --------------------------------------------------------------------------
# loops


def _train_loop(model: SessionTransformer, rows: Sequence[SessionArrays], cfg: TrainConfig,
                trainable: Sequence[ad.Parameter], validate: Callable | None = None,
                step_offset: int = 0):
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    history: list[dict] = []
    best = None
    steps = 0
    for epoch in range(cfg.epochs):
        examples, skipped = training_examples(rows, model.config, cfg, rng)
        if not examples:
            raise ValueError("no trainable sessions (all shorter than 2 events)")
        losses = []
        for idx in length_buckets([len(e[0]) for e in examples], cfg.batch_size, rng):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            chunk = [examples[i] for i in idx]
            batch = collate([c[0] for c in chunk], [c[1] for c in chunk], [c[2] for c in chunk])
            for p in trainable:
                p.grad = None
            loss = model.loss(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                ad.clear_tape()
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, step {steps}; "
                    f"recent losses {losses[-5:]}"
                )
            ad.backward(loss)
            opt.step(trainable)
            steps += 1
            losses.append(value)
        record = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                  "steps": steps, "skipped": skipped}
        if validate is not None:
            record["valid_mrr"] = float(validate(model))
            if best is None or record["valid_mrr"] > best[0]:
                best = (record["valid_mrr"], {k: v.copy() for k, v in model.parameter_arrays().items()}, epoch)
        log.info("epoch %d loss %.4f%s", epoch, record["loss"],
                 f" valid_mrr {record['valid_mrr']:.4f}" if "valid_mrr" in record else "")
        history.append(record)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    for p in model.params.values():
        p.grad = None
    return opt, history, best, steps


def pretrain(model: SessionTransformer, sessions: Sequence[EncodedSession], config: TrainConfig,
             validate: Callable[[SessionTransformer], float] | None = None,
             meta: dict | None = None) -> Checkpoint:
    """Train all parameters; keep the best-by-validation-MRR weights when ``validate`` is given."""
    rows = [session_arrays(s, model.config) for s in sessions]
    params = list(model.params.values())
    frozen = frozen_names(list(model.params), config.freeze_set)
    trainable = [p for p in params if p.name not in frozen]
    opt, history, best, steps = _train_loop(model, rows, config, trainable, validate)
    best_epoch = None
    if best is not None:
        model.load_arrays(best[1])
        best_epoch = best[2]
    state = {"stage": "pretrain", "step": steps, "optimizer": opt.name, "history": history,
             "best_epoch": best_epoch, "train_config": config.to_dict()}
    return Checkpoint.from_model(model, state, opt.state(), meta)


def finetune_item_embeddings(checkpoint: Checkpoint, sessions: Sequence[EncodedSession],
                             config: TrainConfig) -> Checkpoint:
    """Update only the item-embedding table (shared with the output layer).

    ``config.freeze_set`` defaults to every parameter except the item table.
    """
    model = checkpoint.build_model()
    names = list(model.params)
    patterns = config.freeze_set or [n for n in names if n != ITEM_TABLE]
    frozen = frozen_names(names, patterns)
    if not frozen:
        raise ValueError("freeze_set matches no parameters")
    if len(frozen) == len(names):
        raise ValueError("freeze_set matches every parameter")
    trainable = [model.params[n] for n in names if n not in frozen]
    for n in frozen:
        model.params[n].requires_grad = False
    rows = [session_arrays(s, model.config) for s in sessions]
    if config.epochs == 0 or config.max_steps == 0:
        return checkpoint.copy()
    opt, history, _, steps = _train_loop(model, rows, config, trainable)
    if steps == 0:
        return checkpoint.copy()
    out = Checkpoint.from_model(model, meta=checkpoint.meta)
    # frozen arrays are copied from the input so they stay byte-identical
    for n in frozen:
        out.params[n] = checkpoint.params[n].copy()
    out.state = {
        "stage": "finetune",
        "pretrain": checkpoint.state,
        "step": steps,
        "optimizer": opt.name,
        "history": history,
        "frozen": sorted(frozen),
        "train_config": config.to_dict(),
    }
    out.moments = {k: v.copy() for k, v in opt.state().items()}
    return out


def _oof_worker(args):
    fold, sessions, model_cfg, train_cfg, finetune_sessions, finetune_cfg, meta = args
    model = SessionTransformer(model_cfg, seed=train_cfg.seed)
    ckpt = pretrain(model, sessions, train_cfg, meta=dict(meta, fold=fold))
    if finetune_sessions:
        ckpt = finetune_item_embeddings(ckpt, finetune_sessions, finetune_cfg or train_cfg)
    return ckpt


def fold_training_sets(sessions: Sequence[EncodedSession], plan: FoldPlan) -> list[list[EncodedSession]]:
    """Training sessions for each fold model: everything outside that fold."""
    missing = sorted({s.session_id for s in sessions} - set(plan.folds))
    if missing:
        raise ValueError(f"sessions missing from fold plan: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return [[s for s in sessions if plan.folds[s.session_id] != i] for i in range(plan.k)]


def train_oof(sessions: Sequence[EncodedSession], plan: FoldPlan, model_config: ModelConfig,
              train_config: TrainConfig, finetune_sessions: Sequence[EncodedSession] = (),
              finetune_config: TrainConfig | None = None, jobs: int = 1,
              meta: dict | None = None) -> list[Checkpoint]:
    """One checkpoint per fold, each trained on the sessions outside its fold."""
    sets = fold_training_sets(sessions, plan)
    for i, s in enumerate(sets):
        if not s:
            raise ValueError(f"fold {i} leaves no training sessions")
    tasks = []
    for i, s in enumerate(sets):
        cfg = TrainConfig.from_dict({**train_config.to_dict(), "seed": train_config.seed + 1000 * (i + 1)})
        tasks.append((i, s, model_config, cfg, list(finetune_sessions), finetune_config, meta or {}))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_oof_worker, tasks))
    return [_oof_worker(t) for t in tasks]
