"""Adam with a plateau learning-rate schedule, early stopping and member subsampling."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .data import SURFACE, SampleRecord, read_container, write_container
from .errors import ConfigError, NumericError, TrainingError
from .models import forward, init_params, load_params, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr0: float = 1e-3
    plateau_patience: int = 5
    lr_factor: float = 0.3
    stop_patience: int = 20
    max_epochs: int = 200
    subsample_members: int = 20
    seed: int = 0
    ddof: int = 1
    sigma_floor: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 16

    def validate(self):
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if self.subsample_members < 2:
            raise ConfigError("subsample_members must be >= 2")
        if self.plateau_patience < 1 or self.stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.lr0 <= 0:
            raise ConfigError("batch_size >= 1, max_epochs >= 0 and lr0 > 0 required")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc).validate()


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, state, lr):
    """Bias-corrected Adam update of every parameter in place."""
    plist = params.parameters() if hasattr(params, "parameters") else list(params)
    for p in plist:
        if p.grad is None:
            raise TrainingError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in plist:
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return state


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a new minimum."""

    def __init__(self, lr0, patience=5, factor=0.3, best=math.inf):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.best = best
        self.bad_epochs = 0

    def step(self, value):
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience=20, best=math.inf):
        self.patience = patience
        self.best = best
        self.bad_epochs = 0

    def step(self, value):
        """Returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# -- data handling -----------------------------------------------------------

def subsample_members(sample, m, rng):
    """Draw ``m`` distinct members of ``sample`` without replacement."""
    k = sample.k
    if not 2 <= m <= k:
        raise ConfigError(f"cannot subsample {m} of {k} members")
    idx = rng.choice(k, size=m, replace=False)
    return SampleRecord(sample.id, sample.valid_time, sample.inputs[idx], sample.target)


def _batch_inputs(dataset, index, m, rng):
    k = dataset.k
    if m >= k:
        return dataset.inputs[index]
    return np.stack([dataset.inputs[i][rng.choice(k, size=m, replace=False)] for i in index])


def batch_loss(params, inputs, targets, grid, ddof=1, sigma_floor=1e-6):
    """Mean latitude-weighted CRPS of a batch ``(B, k, 3, h, w)``."""
    dt = params.config.np_dtype
    x = ad.Tensor(np.asarray(inputs, dt))
    y = np.asarray(targets, dt)
    if params.config.variant == "ppnn":
        mu, sigma = forward(params, x)
        return metrics.crps_loss_parametric(mu, sigma, y, grid)
    members = forward(params, x)
    return metrics.crps_loss_members(members, y, grid, ddof, sigma_floor)


# -- inference and evaluation ------------------------------------------------

def predict(params, inputs, batch_size=16, diagnostics=False):
    """Run the model over ``(n, k, 3, h, w)`` without recording gradients.

    Returns members ``(n, k, h, w)`` or ``(mu, sigma)`` each ``(n, h, w)``.
    """
    dt = params.config.np_dtype
    outs, mus, sigmas = [], [], []
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            x = np.asarray(inputs[start:start + batch_size], dt)
            if params.config.variant == "ppnn":
                mu, sigma = forward(params, x)
                mus.append(mu.data)
                sigmas.append(sigma.data)
            else:
                outs.append(forward(params, x).data[:, :, 0])
    if params.config.variant == "ppnn":
        return np.concatenate(mus), np.concatenate(sigmas)
    return np.concatenate(outs)


def validation_crps(params, dataset, grid, cfg):
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(dataset), cfg.eval_batch_size):
            sl = slice(start, start + cfg.eval_batch_size)
            loss = batch_loss(params, dataset.inputs[sl], dataset.targets[sl], grid, cfg.ddof,
                              cfg.sigma_floor)
            total += float(loss.data) * len(dataset.targets[sl])
    return total / len(dataset)


@dataclass
class Evaluation:
    report: metrics.ScoreReport
    rank_counts: np.ndarray = None
    pit_counts: np.ndarray = None
    output: object = None


def evaluate(params, dataset, grid, ddof=1, sigma_floor=1e-6, seed=0, label="", batch_size=16):
    """Score a model on the full (non-subsampled) ensembles of ``dataset``.

    ``dataset`` must already be normalized.  Rank-histogram tie-breaking uses
    ``seed``, so repeated calls give identical results.
    """
    rng = np.random.default_rng(seed)
    out = predict(params, dataset.inputs, batch_size)
    if params.config.variant == "ppnn":
        mu, sigma = out
        rep = metrics.score_parametric(mu, sigma, dataset.targets, grid, dataset.ids, label)
        pit = metrics.pit_parametric(mu, sigma, dataset.targets)
        return Evaluation(rep, pit_counts=metrics.pit_histogram(pit, dataset.k + 1), output=out)
    rep = metrics.score_members(out, dataset.targets, grid, dataset.ids, ddof, sigma_floor, label)
    counts = metrics.rank_histogram(out, dataset.targets, rng)
    return Evaluation(rep, rank_counts=counts, output=out)


def evaluate_raw(dataset, grid, ddof=1, sigma_floor=1e-6, seed=0, label="raw ensemble"):
    """Score the physical surface-temperature input members directly."""
    members = dataset.inputs[:, :, SURFACE]
    rep = metrics.score_members(members, dataset.targets, grid, dataset.ids, ddof, sigma_floor, label)
    counts = metrics.rank_histogram(members, dataset.targets, np.random.default_rng(seed))
    return Evaluation(rep, rank_counts=counts, output=members)


# -- training loop -----------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to resume training after ``epoch``."""
    epoch: int
    params: object
    adam: AdamState
    scheduler: PlateauScheduler
    stopper: EarlyStopping
    best_val: float
    best_epoch: int
    best_state: dict
    history: list
    stopped: bool = False


@dataclass
class TrainResult:
    params: object          # best-validation parameters
    history: list           # dicts: epoch, train_loss, val_crps, lr
    best_epoch: int
    best_val: float
    state: TrainState


def initial_state(params, cfg, val_crps):
    return TrainState(
        epoch=0, params=params,
        adam=AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps),
        scheduler=PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.lr_factor, best=val_crps),
        stopper=EarlyStopping(cfg.stop_patience, best=val_crps),
        best_val=val_crps, best_epoch=0, best_state=params.state_dict(),
        history=[{"epoch": 0, "train_loss": float("nan"), "val_crps": val_crps, "lr": cfg.lr0}],
    )


def _snapshot(params, epoch, batch):
    return {"epoch": epoch, "batch": batch,
            "param_norms": {p.name: float(np.linalg.norm(p.data)) for p in params.parameters()}}


def train(params, train_set, val_set, grid, cfg=None, state=None, on_epoch=None):
    """Fit ``params`` on normalized ``train_set``; validation uses full ensembles.

    Epoch ``e`` draws its shuffling and member subsets from
    ``default_rng([seed, e])`` so a resumed run continues identically.
    Returns a :class:`TrainResult` holding the best-validation parameters.
    """
    cfg = (cfg or TrainConfig()).validate()
    if set(train_set.ids) & set(val_set.ids):
        raise ConfigError("training and validation sets overlap")
    if cfg.subsample_members > train_set.k:
        raise ConfigError(f"subsample_members={cfg.subsample_members} exceeds ensemble size {train_set.k}")
    if state is None:
        state = initial_state(params, cfg, validation_crps(params, val_set, grid, cfg))
    params = state.params
    n = len(train_set)
    for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
        if state.stopped:
            break
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        lr = state.scheduler.lr
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            index = order[start:start + cfg.batch_size]
            x = _batch_inputs(train_set, index, cfg.subsample_members, rng)
            params.zero_grad()
            loss = batch_loss(params, x, train_set.targets[index], grid, cfg.ddof, cfg.sigma_floor)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}",
                                   _snapshot(params, epoch, b))
            loss.backward()
            adam_step(params, state.adam, lr)
            total += float(loss.data) * len(index)
        val = validation_crps(params, val_set, grid, cfg)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation CRPS at epoch {epoch}", _snapshot(params, epoch, -1))
        state.history.append({"epoch": epoch, "train_loss": total / n, "val_crps": val, "lr": lr})
        if val < state.best_val:
            state.best_val, state.best_epoch = val, epoch
            state.best_state = params.state_dict()
        state.scheduler.step(val)
        state.stopped = state.stopper.step(val)
        state.epoch = epoch
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, total / n, val, lr)
        if on_epoch is not None:
            on_epoch(state)
    best = copy.deepcopy(params)
    best.load_state_dict(state.best_state)
    return TrainResult(best, state.history, state.best_epoch, state.best_val, state)


def history_table(history, sep="\t"):
    lines = [sep.join(["epoch", "train_loss", "val_crps", "lr"])]
    for row in history:
        lines.append(sep.join([str(row["epoch"]), repr(row["train_loss"]), repr(row["val_crps"]),
                               repr(row["lr"])]))
    return "\n".join(lines) + "\n"


# -- resumable state on disk -------------------------------------------------

def save_state(path, state, train_cfg):
    tensors = {}
    for name, arr in state.params.state_dict().items():
        tensors[f"param/{name}"] = arr
    for name, arr in state.adam.m.items():
        tensors[f"adam_m/{name}"] = arr
    for name, arr in state.adam.v.items():
        tensors[f"adam_v/{name}"] = arr
    for name, arr in state.best_state.items():
        tensors[f"best/{name}"] = arr
    doc = {"kind": "enspost-train-state", "epoch": state.epoch,
           "model_config": state.params.config.to_dict(), "train_config": train_cfg.to_dict(),
           "adam_step": state.adam.step,
           "scheduler": {"lr": state.scheduler.lr, "best": state.scheduler.best,
                         "bad_epochs": state.scheduler.bad_epochs},
           "stopper": {"best": state.stopper.best, "bad_epochs": state.stopper.bad_epochs},
           "best_val": state.best_val, "best_epoch": state.best_epoch, "stopped": state.stopped,
           "history": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
                       for r in state.history]}
    write_container(path, tensors, doc)


def load_state(path):
    tensors, doc = read_container(path)
    if doc.get("kind") != "enspost-train-state":
        raise TrainingError(f"{path} is not a training state file")
    cfg = TrainConfig.from_dict(doc["train_config"])
    params = init_params(ModelConfig.from_dict(doc["model_config"]))

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    params.load_state_dict(group("param/"))
    adam = AdamState(group("adam_m/"), group("adam_v/"), doc["adam_step"], cfg.beta1, cfg.beta2, cfg.adam_eps)
    sch = PlateauScheduler(doc["scheduler"]["lr"], cfg.plateau_patience, cfg.lr_factor,
                           doc["scheduler"]["best"])
    sch.bad_epochs = doc["scheduler"]["bad_epochs"]
    stop = EarlyStopping(cfg.stop_patience, doc["stopper"]["best"])
    stop.bad_epochs = doc["stopper"]["bad_epochs"]
    history = [{k: (float("nan") if v is None else v) for k, v in r.items()} for r in doc["history"]]
    state = TrainState(doc["epoch"], params, adam, sch, stop, doc["best_val"], doc["best_epoch"],
                       group("best/"), history, doc["stopped"])
    return state, cfg


__all__ = ["TrainConfig", "AdamState", "adam_step", "PlateauScheduler", "EarlyStopping",
           "subsample_members", "batch_loss", "predict", "evaluate", "evaluate_raw", "train",
           "history_table", "save_state", "load_state", "load_params"]
