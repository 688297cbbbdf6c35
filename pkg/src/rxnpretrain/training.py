"""Pre-training and fine-tuning loops, LR schedule, early stopping and LR search."""

from __future__ import annotations

import dataclasses
import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import model as M
from . import nn
from .nn import AdamW, Params
from .reactions import FoldPlan, PropertyDataset, Reaction, augment_reaction
from .smiles import PAD, parse_smiles, tokenize, write_canonical


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, reaction_ids: Sequence[int]):
        super().__init__(f"non-finite loss at step {step}; reactions {list(reaction_ids)}")
        self.step = step
        self.reaction_ids = list(reaction_ids)


@dataclass
class TrainConfig:
    batch_size: int = 4096
    epochs: int = 150
    base_lr: float = 1e-5
    max_lr: float = 5e-4
    cycle_steps: int | None = None  # None: one cycle per epoch
    schedule: str = "cyclic"  # "cyclic" | "constant"
    lr: float | None = None  # constant-schedule rate
    patience: int = 40
    seed: int = 0
    early_stop_metric: str | None = None  # None: loss (regression/pretraining), roc_auc (classification)
    max_steps: int | None = None
    eval_every: int = 1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    rerandomize: bool = True
    search_runs: int = 20
    search_low: float = 1e-6
    search_high: float = 1e-3
    search_epochs: int = 50
    search_max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.cycle_steps is not None and self.cycle_steps < 2:
            raise ValueError("cycle_steps must be at least 2")
        if self.schedule not in ("cyclic", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive, epochs non-negative")

    @classmethod
    def pretraining(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def finetuning(cls, **kw) -> "TrainConfig":
        kw.setdefault("batch_size", 64)
        kw.setdefault("epochs", 50)
        kw.setdefault("schedule", "constant")
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict, finetune: bool = False) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls.finetuning(**d) if finetune else cls.pretraining(**d)


def cosine_cyclic_lr(step: int, base_lr: float, max_lr: float, cycle_steps: int) -> float:
    """Base at ``step % T == 0``, peak at ``T / 2``; period ``cycle_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    phase = (step % cycle_steps) / cycle_steps
    if phase == 0.0:
        return base_lr
    if phase == 0.5:
        return max_lr
    return base_lr + 0.5 * (max_lr - base_lr) * (1.0 - math.cos(2.0 * math.pi * phase))


def learning_rate(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr if cfg.lr is not None else cfg.max_lr
    return cosine_cyclic_lr(step, cfg.base_lr, cfg.max_lr, cfg.cycle_steps or max(2, steps_per_epoch))


@dataclass
class RunLog:
    events: list[dict] = field(default_factory=list)
    best_step: int | None = None
    best_value: float | None = None
    best_checkpoint: str | None = None

    def add(self, step: int, kind: str, value) -> None:
        if self.events and step < self.events[-1]["step"]:
            raise ValueError("run log steps must be non-decreasing")
        self.events.append({"step": step, "kind": kind, "value": value, "time": time.time()})

    def series(self, kind: str) -> list[tuple[int, float]]:
        return [(e["step"], e["value"]) for e in self.events if e["kind"] == kind]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "RunLog":
        log = cls()
        with open(path) as fh:
            log.events = [json.loads(line) for line in fh if line.strip()]
        return log


class EarlyStopping:
    """Tracks the best validation value; ``should_stop`` once ``patience`` steps pass without improvement."""

    def __init__(self, patience: int, higher_is_better: bool = False):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.higher = higher_is_better
        self.best_value: float | None = None
        self.best_step: int | None = None

    def update(self, step: int, value: float) -> bool:
        """Record a validation value; True when it is a new best."""
        if math.isnan(value):
            return False
        better = self.best_value is None or (value > self.best_value if self.higher else value < self.best_value)
        if better:
            self.best_value, self.best_step = value, step
        return better

    def should_stop(self, step: int) -> bool:
        return self.best_step is not None and step - self.best_step >= self.patience


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2**63))


def _grads(loss: torch.Tensor, params: Params) -> dict[str, torch.Tensor | None]:
    names = [k for k, v in params.items() if v.requires_grad]
    gs = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(params[k])) for k, g in zip(names, gs)}


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PreparedReaction:
    fragments: tuple[tuple[int, ...], ...]
    product: tuple[int, ...]


def prepare_reaction(r: Reaction, cfg: M.ModelConfig) -> PreparedReaction:
    return PreparedReaction(tuple(M.fragment_tokens(r.fragments(), r.roles(), cfg)), tuple(tokenize(r.product)))


def pretrain_loss(batch: Sequence[PreparedReaction], params: Params, cfg: M.ModelConfig, generator=None) -> torch.Tensor:
    """Teacher-forced token cross-entropy on the products, PAD ignored."""
    h_r = M.reaction_vectors([b.fragments for b in batch], params, cfg, generator, pad_to_max=False)
    tgt_in, labels = M.decoder_targets([b.product for b in batch], cfg)
    logits = M.decode_teacher_forced(h_r, tgt_in, params, cfg, generator)
    return nn.cross_entropy(logits, labels, PAD)


def token_accuracy(batch: Sequence[PreparedReaction], params: Params, cfg: M.ModelConfig) -> float:
    with torch.no_grad():
        h_r = M.reaction_vectors([b.fragments for b in batch], params, cfg, pad_to_max=False)
        tgt_in, labels = M.decoder_targets([b.product for b in batch], cfg)
        pred = M.decode_teacher_forced(h_r, tgt_in, params, cfg).argmax(dim=-1)
    keep = labels != PAD
    return float(((pred == labels) & keep).sum()) / float(keep.sum())


def evaluate_pretraining(batch: Sequence[PreparedReaction], params: Params, cfg: M.ModelConfig, chunk: int = 256) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(batch), chunk):
            part = batch[i : i + chunk]
            n_tok = sum(len(b.product) + 1 for b in part)
            total += float(pretrain_loss(part, params, cfg)) * n_tok
            count += n_tok
    return total / count


def _canonical_product(r: Reaction) -> Reaction:
    return Reaction(r.reactants, r.reagents, write_canonical(parse_smiles(r.product)))


@dataclass
class TrainResult:
    params: Params
    log: RunLog
    best_params: Params | None = None
    optimizer: AdamW | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_training_state(path, params: Params, opt: AdamW, step: int, model_cfg: M.ModelConfig, train_cfg: TrainConfig, meta=None):
    tensors = dict(params)
    adam, steps = opt.state_tensors()
    tensors.update(adam)
    header_meta = {"step": step, "adam_steps": steps, **(meta or {})}
    return nn.save_checkpoint(path, tensors, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, header_meta)


def load_model(path) -> tuple[Params, M.ModelConfig, dict]:
    """Load model parameters and config from a checkpoint (optimizer tensors dropped)."""
    tensors, header = nn.load_checkpoint(path)
    cfg = M.ModelConfig.from_dict(header["config"]["model"])
    params = {k: v.requires_grad_(True) for k, v in tensors.items() if not k.startswith("adam.")}
    return params, cfg, header


def pretrain(
    corpus: Sequence[Reaction],
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    valid: Sequence[Reaction] | None = None,
    out_dir=None,
    resume=None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train the encoder/decoder to emit canonical products from reactant sets.

    Reactant and reagent SMILES are re-randomized every epoch (once, if
    ``train_cfg.rerandomize`` is off). All randomness is derived from
    ``(seed, epoch, step)`` so a resumed run replays the same batches.
    """
    if not corpus:
        raise ValueError("empty pre-training corpus")
    seed = train_cfg.seed
    params = M.init_params(model_cfg, seed)
    opt = AdamW(params, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
    start = 0
    log = RunLog()
    if resume is not None:
        tensors, header = nn.load_checkpoint(resume)
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(tensors[k])
        opt.load_state_tensors(tensors, header["meta"]["adam_steps"])
        start = int(header["meta"]["step"])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    valid_prepared = [prepare_reaction(_canonical_product(r), model_cfg) for r in valid] if valid else None
    stopper = EarlyStopping(train_cfg.patience, higher_is_better=False)
    best_params = None
    n = len(corpus)
    bs = min(train_cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    step = 0
    total_steps = train_cfg.max_steps if train_cfg.max_steps is not None else steps_per_epoch * train_cfg.epochs
    fixed = None
    for epoch in range(train_cfg.epochs if train_cfg.max_steps is None else 10**9):
        if step >= total_steps:
            break
        epoch_end = step + steps_per_epoch
        if epoch_end <= start:
            step = epoch_end
            continue
        aug_epoch = epoch if train_cfg.rerandomize else 0
        if train_cfg.rerandomize or fixed is None:
            fixed = [
                prepare_reaction(augment_reaction(r, random.Random(f"{seed}:{aug_epoch}:{i}")), model_cfg)
                for i, r in enumerate(corpus)
            ]
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            if step < start:
                step += 1
                continue
            idx = order[b * bs : (b + 1) * bs]
            batch = [fixed[i] for i in idx]
            lr = learning_rate(step, train_cfg, steps_per_epoch)
            loss = pretrain_loss(batch, params, model_cfg, _step_generator(seed, step))
            if not torch.isfinite(loss):
                raise NonFiniteLossError(step, idx.tolist())
            grads = _grads(loss, params)
            nn.clip_grad_norm(grads, train_cfg.grad_clip)
            opt.step(grads, lr)
            log.add(step, "loss", float(loss.detach()))
            log.add(step, "lr", lr)
            if callback is not None:
                callback(step, float(loss.detach()))
            step += 1
            if valid_prepared and step % train_cfg.eval_every == 0:
                value = evaluate_pretraining(valid_prepared, params, model_cfg)
                log.add(step, "val_loss", value)
                if stopper.update(step, value):
                    best_params = nn.clone_params(params, requires_grad=False)
                    log.best_step, log.best_value = step, value
                    if out_dir is not None:
                        path = save_training_state(out_dir / f"ckpt_step{step:07d}_val{value:.4f}.rpt", params, opt, step, model_cfg, train_cfg)
                        log.best_checkpoint = str(path)
                        log.add(step, "checkpoint", str(path))
    if out_dir is not None:
        path = save_training_state(out_dir / "last.rpt", params, opt, step, model_cfg, train_cfg)
        if log.best_checkpoint is None:
            log.best_checkpoint = str(path)
        log.write_jsonl(out_dir / "runlog.jsonl")
    return TrainResult(params, log, best_params, opt, step)


# ---------------------------------------------------------------------------
# fine-tuning


def _targets(ds: PropertyDataset) -> torch.Tensor:
    return torch.as_tensor(ds.label_matrix())


def property_loss(pred: torch.Tensor, y: torch.Tensor, task_type: str) -> torch.Tensor:
    """Masked MSE (regression) or masked per-task sigmoid cross-entropy."""
    mask = ~torch.isnan(y)
    if not mask.any():
        return pred.sum() * 0.0
    y0 = torch.where(mask, y, torch.zeros_like(y)).to(pred.dtype)
    if task_type == "regression":
        err = (pred - y0) ** 2
    else:
        err = torch.nn.functional.binary_cross_entropy_with_logits(pred, y0, reduction="none")
    return (err * mask).sum() / mask.sum()


def predict_property(smiles: Sequence[str], params: Params, cfg: M.ModelConfig, chunk: int = 256) -> np.ndarray:
    """Raw head outputs (regression values or logits), ``(n, T)``."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(smiles), chunk):
            toks = [tokenize(s) for s in smiles[i : i + chunk]]
            length = max(len(t) for t in toks)
            outs.append(M.property_forward(M.pad_batch(toks, length), params, cfg).double().numpy())
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, 0))


def score_predictions(pred: np.ndarray, y: np.ndarray, task_type: str, metric: str) -> float:
    """Dataset-level metric averaged over tasks with a defined value."""
    from .evaluation import multi_task_average, prc_auc, rmse, roc_auc

    per_task = []
    for t in range(y.shape[1]):
        keep = ~np.isnan(y[:, t])
        if not keep.any():
            per_task.append(None)
            continue
        p, yt = pred[keep, t], y[keep, t]
        if metric == "rmse":
            per_task.append(rmse(p, yt))
        elif metric == "loss":
            per_task.append(float(np.mean((p - yt) ** 2)) if task_type == "regression" else _bce(p, yt))
        else:
            fn = roc_auc if metric == "roc_auc" else prc_auc
            try:
                per_task.append(fn(p, yt))
            except ValueError:
                per_task.append(None)
    try:
        return multi_task_average(per_task)
    except ValueError:
        return float("nan")


def _bce(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def metric_higher_is_better(metric: str) -> bool:
    return metric in ("roc_auc", "prc_auc")


def default_stop_metric(task_type: str) -> str:
    return "loss" if task_type == "regression" else "roc_auc"


def fit_property_model(
    train: PropertyDataset,
    valid: PropertyDataset,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    init: Params | None = None,
    lr: float | None = None,
    evaluator: Callable[[int, Params], float] | None = None,
    out_dir=None,
) -> TrainResult:
    """Fine-tune encoder + MLP head with early stopping on ``valid``.

    ``init`` holds encoder weights (e.g. from pre-training); None means a
    random encoder. Returns the parameters of the best validation step.
    ``evaluator(step, params)`` replaces the built-in validation metric.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("fine-tuning needs non-empty training and validation sets")
    seed = train_cfg.seed
    n_tasks = len(train.tasks)
    if init is not None:
        M.check_compatible(init, model_cfg)
        base = init
    else:
        base = M.init_params(model_cfg, seed, decoder=False)
    params = M.init_head(base, model_cfg, n_tasks, seed + 1)
    y_train = _targets(train)
    if train.task_type == "regression":
        with torch.no_grad():
            means = torch.nanmean(y_train, dim=0)
            params["head.out.b"].copy_(torch.nan_to_num(means).to(params["head.out.b"].dtype))
    opt = AdamW(params, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
    metric = train_cfg.early_stop_metric or default_stop_metric(train.task_type)
    stopper = EarlyStopping(train_cfg.patience, metric_higher_is_better(metric))
    log = RunLog()
    best = nn.clone_params(params, requires_grad=False)
    tokens = [tokenize(r.smiles) for r in train.records]
    for t in tokens:
        if len(t) > model_cfg.max_len:
            raise ValueError(f"molecule of {len(t)} characters exceeds max length {model_cfg.max_len}")
    y_valid = valid.label_matrix()
    valid_smiles = [r.smiles for r in valid.records]
    n = len(tokens)
    bs = min(train_cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = train_cfg.max_steps if train_cfg.max_steps is not None else steps_per_epoch * train_cfg.epochs
    step = 0
    last_val_loss = float("nan")
    epoch = 0
    while step < total:
        order = np.random.default_rng([seed, epoch]).permutation(n)
        epoch += 1
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = order[b * bs : (b + 1) * bs]
            batch = [tokens[i] for i in idx]
            x = M.pad_batch(batch, max(len(t) for t in batch))
            pred = M.property_forward(x, params, model_cfg, _step_generator(seed, step))
            loss = property_loss(pred, y_train[idx], train.task_type)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(step, idx.tolist())
            grads = _grads(loss, params)
            nn.clip_grad_norm(grads, train_cfg.grad_clip)
            rate = learning_rate(step, dataclasses.replace(train_cfg, lr=lr if lr is not None else train_cfg.lr), steps_per_epoch)
            opt.step(grads, rate)
            log.add(step, "loss", float(loss.detach()))
            step += 1
            if step % train_cfg.eval_every == 0 or step == total:
                if evaluator is not None:
                    value = float(evaluator(step, params))
                else:
                    vpred = predict_property(valid_smiles, params, model_cfg)
                    last_val_loss = score_predictions(vpred, y_valid, valid.task_type, "loss")
                    log.add(step, "val_loss", last_val_loss)
                    value = last_val_loss if metric == "loss" else score_predictions(vpred, y_valid, valid.task_type, metric)
                log.add(step, f"val_{metric}", value)
                if stopper.update(step, value):
                    best = nn.clone_params(params, requires_grad=False)
                    log.best_step, log.best_value = step, value
                if stopper.should_stop(step):
                    log.add(step, "early_stop", stopper.best_step)
                    break
        else:
            continue
        break
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        name = f"ckpt_step{log.best_step or 0:07d}_{metric}{(log.best_value or 0.0):.4f}.rpt"
        path = nn.save_checkpoint(out_dir / name, best, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                                  {"step": log.best_step, "metric": metric, "value": log.best_value, "tasks": train.tasks})
        log.best_checkpoint = str(path)
        log.write_jsonl(out_dir / "runlog.jsonl")
    return TrainResult(best, log, best, opt, step, {"final_val_loss": last_val_loss, "metric": metric})


def finetune(
    dataset: PropertyDataset,
    plan: FoldPlan,
    rotation: int,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    init: Params | None = None,
    lr: float | None = None,
    out_dir=None,
) -> TrainResult:
    """Fine-tune on the training folds of ``rotation``, early-stopping on its validation fold."""
    roles = plan.roles(rotation)
    return fit_property_model(dataset.subset(roles["training"]), dataset.subset(roles["validation"]),
                              model_cfg, train_cfg, init, lr, out_dir=out_dir)


def sample_learning_rates(n_runs: int, low: float = 1e-6, high: float = 1e-3, seed: int = 0) -> list[float]:
    if n_runs < 1:
        raise ValueError("need at least one run")
    if not 0 < low <= high:
        raise ValueError(f"empty learning-rate range [{low}, {high}]")
    rng = np.random.default_rng(seed)
    rates = 10.0 ** rng.uniform(math.log10(low), math.log10(high), size=n_runs)
    return [float(min(max(r, low), high)) for r in rates]


def lr_search(
    objective: Callable[[float], float],
    n_runs: int = 20,
    lr_range: tuple[float, float] = (1e-6, 1e-3),
    seed: int = 0,
) -> tuple[float, list[tuple[float, float]]]:
    """Geometric random search: returns the rate with the highest ``objective`` score.

    Ties go to the smaller rate. The second return value lists every
    ``(rate, score)`` tried.
    """
    rates = sample_learning_rates(n_runs, lr_range[0], lr_range[1], seed)
    trials = [(r, float(objective(r))) for r in rates]
    best = min(trials, key=lambda t: (-t[1] if not math.isnan(t[1]) else math.inf, t[0]))
    return best[0], trials


def tuning_objective(
    dataset: PropertyDataset,
    plan: FoldPlan,
    rotation: int,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    init: Params | None,
    metric: str,
) -> Callable[[float], float]:
    """Score for one candidate rate: train on the training folds, measure on the tuning fold."""
    roles = plan.roles(rotation)
    train = dataset.subset(roles["training"])
    valid = dataset.subset(roles["validation"])
    tune = dataset.subset(roles["tuning"])
    cfg = dataclasses.replace(train_cfg, epochs=train_cfg.search_epochs, max_steps=train_cfg.search_max_steps)
    sign = 1.0 if metric_higher_is_better(metric) else -1.0

    def objective(rate: float) -> float:
        res = fit_property_model(train, valid, model_cfg, cfg, init, rate)
        pred = predict_property([r.smiles for r in tune.records], res.params, model_cfg)
        return sign * score_predictions(pred, tune.label_matrix(), tune.task_type, metric)

    return objective
