"""scikit-learn compatible wrappers around pre-training and fine-tuning."""

from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import model as M
from . import nn
from .reactions import PropertyDataset, PropertyRecord, Reaction, parse_reaction_line
from .smiles import canonicalize, detokenize, randomize_smiles, tokenize
from .training import TrainConfig, fit_property_model, load_model, predict_property, pretrain


def check_smiles_array(X) -> list[str]:
    """Coerce a 1-D array-like (or single-column 2-D) of SMILES strings to a list."""
    if isinstance(X, str):
        raise ValueError("expected an array-like of SMILES strings, got a single string")
    arr = np.asarray(X, dtype=object)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D array of SMILES, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty input")
    bad = [i for i, v in enumerate(arr) if not isinstance(v, str) or not v]
    if bad:
        raise ValueError(f"entry {bad[0]} is not a non-empty SMILES string")
    return [str(v) for v in arr]


def check_reactions(X) -> list[Reaction]:
    out = []
    for i, r in enumerate(X):
        if isinstance(r, Reaction):
            out.append(r)
        elif isinstance(r, str):
            out.append(parse_reaction_line(r))
        else:
            raise ValueError(f"entry {i} is neither a Reaction nor a reaction SMILES line")
    if not out:
        raise ValueError("empty input")
    return out


def check_targets(y, n: int) -> np.ndarray:
    """Float ``(n, T)`` targets; NaN marks a missing label."""
    arr = np.asarray(y, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ValueError(f"targets must have {n} rows, got shape {arr.shape}")
    if np.isinf(arr).any():
        raise ValueError("targets contain infinite values")
    if np.isnan(arr).all(axis=1).any():
        raise ValueError("every sample needs at least one label")
    return arr


class SmilesCanonicalizer(TransformerMixin, BaseEstimator):
    """Map each SMILES to its canonical form."""

    def fit(self, X, y=None):
        check_smiles_array(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        return np.array([canonicalize(s) for s in check_smiles_array(X)], dtype=object)


class SmilesRandomizer(TransformerMixin, BaseEstimator):
    def __init__(self, random_state=None):
        self.random_state = random_state

    def fit(self, X, y=None):
        check_smiles_array(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        rng = random.Random(self.random_state)
        return np.array([randomize_smiles(s, rng) for s in check_smiles_array(X)], dtype=object)


class _ModelParamsMixin:
    def _model_config(self) -> M.ModelConfig:
        return M.ModelConfig(layers=self.layers, heads=self.heads, width=self.width, ff_width=self.ff_width,
                             max_len=self.max_len, dropout=self.dropout, dtype=self.dtype)


class ReactionPretrainer(_ModelParamsMixin, TransformerMixin, BaseEstimator):
    """Reaction-prediction pre-training.

    ``fit`` takes reactions (``Reaction`` objects or ``reactants>reagents>product``
    lines). ``predict`` decodes product SMILES; ``transform`` returns the
    mean-pooled encoder embedding of molecules.
    """

    def __init__(self, layers=4, heads=8, width=256, ff_width=1024, max_len=159, dropout=0.1, dtype="float32",
                 batch_size=4096, epochs=150, base_lr=1e-5, max_lr=5e-4, cycle_steps=None, max_steps=None,
                 weight_decay=0.01, random_state=0):
        self.layers = layers
        self.heads = heads
        self.width = width
        self.ff_width = ff_width
        self.max_len = max_len
        self.dropout = dropout
        self.dtype = dtype
        self.batch_size = batch_size
        self.epochs = epochs
        self.base_lr = base_lr
        self.max_lr = max_lr
        self.cycle_steps = cycle_steps
        self.max_steps = max_steps
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y=None, valid=None):
        reactions = check_reactions(X)
        self.config_ = self._model_config()
        tcfg = TrainConfig.pretraining(batch_size=self.batch_size, epochs=self.epochs, base_lr=self.base_lr,
                                       max_lr=self.max_lr, cycle_steps=self.cycle_steps, max_steps=self.max_steps,
                                       weight_decay=self.weight_decay, seed=self.random_state or 0)
        res = pretrain(reactions, self.config_, tcfg, check_reactions(valid) if valid is not None else None)
        self.params_ = nn.clone_params(res.best_params or res.params, requires_grad=False)
        self.log_ = res.log
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        reactions = check_reactions(X)
        frags = [M.fragment_tokens(r.fragments(), r.roles(), self.config_) for r in reactions]
        h = M.reaction_vectors(frags, self.params_, self.config_)
        return np.array([detokenize(t) for t in M.decode_greedy(h, self.params_, self.config_)], dtype=object)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        toks = [tokenize(s) for s in check_smiles_array(X)]
        with torch.no_grad():
            pooled = M.pooled_encoding(M.pad_batch(toks, max(len(t) for t in toks)), self.params_, self.config_)
        return pooled.double().numpy()

    def save(self, path) -> Path:
        check_is_fitted(self, "params_")
        return nn.save_checkpoint(path, self.params_, {"model": self.config_.to_dict()})

    @classmethod
    def load(cls, path) -> "ReactionPretrainer":
        params, cfg, _ = load_model(path)
        est = cls(layers=cfg.layers, heads=cfg.heads, width=cfg.width, ff_width=cfg.ff_width, max_len=cfg.max_len,
                  dropout=cfg.dropout, dtype=cfg.dtype)
        est.config_, est.params_ = cfg, params
        return est


class _PropertyModel(_ModelParamsMixin, BaseEstimator):
    _task_type = "regression"

    def __init__(self, pretrained=None, layers=4, heads=8, width=256, ff_width=1024, max_len=159, dropout=0.1,
                 dtype="float32", lr=1e-4, batch_size=64, epochs=50, max_steps=None, patience=40,
                 validation_fraction=0.1, random_state=0):
        self.pretrained = pretrained
        self.layers = layers
        self.heads = heads
        self.width = width
        self.ff_width = ff_width
        self.max_len = max_len
        self.dropout = dropout
        self.dtype = dtype
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _init(self):
        if self.pretrained is None:
            return None, self._model_config()
        if isinstance(self.pretrained, ReactionPretrainer):
            check_is_fitted(self.pretrained, "params_")
            return self.pretrained.params_, self.pretrained.config_
        params, cfg, _ = load_model(self.pretrained)
        return params, cfg

    def _fit(self, smiles: list[str], y: np.ndarray):
        init, cfg = self._init()
        n = len(smiles)
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(n)
        n_val = max(1, int(round(self.validation_fraction * n))) if n > 1 else 0
        val_idx, tr_idx = order[:n_val], order[n_val:] if n_val < n else order
        tasks = [f"task{i}" for i in range(y.shape[1])]

        def ds(idx):
            recs = [PropertyRecord(smiles[i], tuple(None if np.isnan(v) else float(v) for v in y[i])) for i in idx]
            return PropertyDataset("train", tasks, recs, self._task_type)

        tcfg = TrainConfig.finetuning(batch_size=self.batch_size, epochs=self.epochs, max_steps=self.max_steps,
                                      patience=self.patience, lr=self.lr, seed=self.random_state or 0)
        res = fit_property_model(ds(tr_idx), ds(val_idx if n_val else tr_idx), cfg, tcfg, init, self.lr)
        self.config_ = cfg
        self.params_ = res.params
        self.log_ = res.log
        self.n_features_in_ = 1
        self.n_tasks_ = y.shape[1]
        return self

    def _raw(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict_property(check_smiles_array(X), self.params_, self.config_)


class PropertyRegressor(RegressorMixin, _PropertyModel):
    """Transformer encoder + two-layer ReLU MLP for (multi-task) regression."""

    def fit(self, X, y):
        smiles = check_smiles_array(X)
        self._y_ndim = np.ndim(y)
        return self._fit(smiles, check_targets(y, len(smiles)))

    def predict(self, X) -> np.ndarray:
        out = self._raw(X)
        return out[:, 0] if self._y_ndim == 1 else out


class PropertyClassifier(ClassifierMixin, _PropertyModel):
    """Binary (or multi-label) classifier with per-task sigmoid outputs."""

    _task_type = "classification"

    def fit(self, X, y):
        smiles = check_smiles_array(X)
        arr = check_targets(y, len(smiles))
        present = arr[~np.isnan(arr)]
        if not np.isin(present, (0.0, 1.0)).all():
            raise ValueError("classification labels must be 0 or 1")
        self._y_ndim = np.ndim(y)
        self.classes_ = np.array([0, 1])
        return self._fit(smiles, arr)

    def predict_proba(self, X) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self._raw(X)))
        if self._y_ndim == 1:
            return np.column_stack([1 - p[:, 0], p[:, 0]])
        return p

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        if self._y_ndim == 1:
            return (p[:, 1] >= 0.5).astype(int)
        return (p >= 0.5).astype(int)
