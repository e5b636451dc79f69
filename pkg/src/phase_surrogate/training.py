"""Composite loss, Adam optimizer, training loop, and fine-tuning.

All losses operate in normalized [0, 1] space.  The flux triple shares one
pure scale factor, so the npp = gpp - ar relation holds in normalized space
exactly when it holds physically and the soft constraint stays linear.
"""

import dataclasses
import io

import numpy as np

from . import autodiff as ad
from . import blobio
from . import pipeline
from .autodiff import GradTape, Tensor
from .errors import (ConfigurationError, ContractError, DivergenceError,
                     RangeError, ShapeError)
from .model import ModelConfig, Surrogate

_G4_INITIALS = {"deadcrootc": 2, "deadstemc": 3, "tlai": 4}
_G5_INITIALS = {"cwdc": 0, "soil3c": 1, "soil4c": 2}


@dataclasses.dataclass
class TrainConfig:
    task_weights: dict = None
    phys_weight: float = 1.0
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    width: str = "float32"

    def __post_init__(self):
        if self.phys_weight < 0:
            raise ConfigurationError("phys_weight must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError(
                "batch_size, max_epochs and patience must be >= 1")
        if self.width not in ("float32", "float64"):
            raise ConfigurationError(f"unknown numeric width {self.width!r}")
        if self.task_weights is not None:
            for task, w in self.task_weights.items():
                if task not in pipeline.TASKS:
                    raise ConfigurationError(f"unknown task {task!r} in "
                                             "task_weights")
                if w < 0:
                    raise ConfigurationError("task weights must be >= 0")
            if not any(w > 0 for w in self.task_weights.values()):
                raise ConfigurationError("at least one task weight must be "
                                         "positive")

    @property
    def dtype(self):
        return np.float32 if self.width == "float32" else np.float64

    def weight(self, task):
        if self.task_weights is None:
            return 1.0
        return float(self.task_weights.get(task, 0.0))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigurationError(f"unknown train config key {key!r}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Loss components
# ---------------------------------------------------------------------------

def task_loss(pred, target):
    """Mean squared error over all samples and task components."""
    target = np.asarray(target)
    if pred.data.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.data.shape} does not match "
                         f"target shape {target.shape}")
    diff = ad.sub(pred, Tensor(target.astype(pred.data.dtype)))
    return ad.mean_all(ad.square(diff))


def phys_loss(npp, gpp, ar):
    """Mean over samples of (npp - (gpp - ar))^2, the soft-constraint term."""
    if not npp.data.shape == gpp.data.shape == ar.data.shape:
        raise ShapeError("flux predictions must share one shape")
    residual = ad.sub(npp, ad.sub(gpp, ar))
    return ad.mean_all(ad.square(residual))


def pinn_delta_loss(pred_final, pred_delta, initial_state, target_final):
    """Data term plus state-evolution term, equally weighted."""
    if initial_state is None:
        raise ContractError("delta-state loss requires initial states")
    initial = np.asarray(initial_state)
    if initial.shape != pred_delta.data.shape:
        raise ShapeError(f"initial state shape {initial.shape} does not match "
                         f"delta shape {pred_delta.data.shape}")
    evolved = ad.add(Tensor(initial.astype(pred_delta.data.dtype)), pred_delta)
    return ad.add(task_loss(pred_final, target_final),
                  task_loss(evolved, target_final))


def total_loss(preds, targets, config, deltas=None, initials=None):
    """Weighted task losses plus the physics penalty.

    Returns (scalar tensor, dict of per-component float values).  When delta
    predictions are supplied, slow tasks use the two-term delta-state loss.
    """
    total = None
    components = {}
    for task in pipeline.TASKS:
        w = config.weight(task)
        if deltas is not None and task in pipeline.SLOW_TASKS:
            if initials is None or task not in initials:
                raise ContractError(f"missing initial state for {task}")
            part = pinn_delta_loss(preds[task], deltas[task], initials[task],
                                   targets[task])
        else:
            part = task_loss(preds[task], targets[task])
        components[task] = part.data.item()
        if w == 0.0:
            continue
        term = ad.mul_scalar(part, w)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ConfigurationError("all task weights are zero")
    phys = phys_loss(preds["npp"], preds["gpp"], preds["ar"])
    components["phys"] = phys.data.item()
    if config.phys_weight > 0:
        total = ad.add(total, ad.mul_scalar(phys, config.phys_weight))
    components["total"] = total.data.item()
    return total, components


def pinn_initial_states(groups, feature_stats, target_stats):
    """Window-end slow-pool states re-expressed in normalized target space.

    The observed year-20 pools arrive as normalized features; the delta head
    needs them on the same scale as the targets, so each channel is mapped
    back to physical units and forward through the target stats.
    """
    if feature_stats is None or target_stats is None:
        raise ContractError("initial states need feature and target stats")
    out = {}
    for task, idx in _G4_INITIALS.items():
        phys = pipeline.minmax_invert(groups["g4"][..., idx],
                                      feature_stats[f"g4.{task}"])
        out[task] = pipeline.minmax_apply(
            phys, target_stats[task]).astype(np.float32)
    for task, idx in _G5_INITIALS.items():
        phys = pipeline.minmax_invert(groups["g5"][..., idx],
                                      feature_stats[f"g5.{task}"])
        out[task] = pipeline.minmax_apply(
            phys, target_stats[task]).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive moment optimizer over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for key, tensor in self.params.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            tensor.data = tensor.data - self.lr * update

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------

def _split_indices(n, seed):
    if n < 2:
        raise ContractError("too few samples to hold out a validation set")
    n_val = max(1, n // 10)
    perm = np.random.default_rng([seed, 13]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _subset_arrays(split, idx):
    arrays = {g: split.groups[g][idx] for g in pipeline.GROUPS}
    for task in pipeline.TASKS:
        arrays[f"y_{task}"] = split.targets[task][idx]
    return arrays


def _make_batches(arrays, batch_size):
    n = arrays["g1"].shape[0]
    batches = []
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        batches.append({k: v[sl] for k, v in arrays.items()})
    return batches


def _attach_initials(arrays, model):
    initials = pinn_initial_states(arrays, model.feature_stats,
                                   model.target_stats)
    for task, vals in initials.items():
        arrays[f"init_{task}"] = vals


def _batch_targets(batch):
    return {t: batch[f"y_{t}"] for t in pipeline.TASKS}


def _batch_initials(batch):
    if "init_soil3c" not in batch:
        return None
    return {t: batch[f"init_{t}"] for t in pipeline.SLOW_TASKS}


def _batch_loss(model, batch, config):
    preds, z = model.forward(batch)
    deltas = None
    initials = None
    if model.delta_heads is not None:
        deltas = model.delta_forward(z)
        initials = _batch_initials(batch)
    return total_loss(preds, _batch_targets(batch), config, deltas, initials)


def _eval_loss(model, batches, config):
    loss_sum = 0.0
    phys_sum = 0.0
    n = 0
    for batch in batches:
        k = batch["g1"].shape[0]
        total, comps = _batch_loss(model, batch, config)
        loss_sum += total.data.item() * k
        phys_sum += comps["phys"] * k
        n += k
    return loss_sum / n, phys_sum / n


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _snapshot(params):
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params, state):
    for key, tensor in params.items():
        tensor.data = state[key].copy()


def _write_history(path, rows):
    buf = io.StringIO()
    buf.write("epoch,train_loss,val_loss,phys_residual\n")
    for epoch, tr, val, phys in rows:
        buf.write(f"{epoch},{tr!r},{val!r},{phys!r}\n")
    blobio.atomic_write_bytes(path, buf.getvalue().encode("ascii"))


def _optimize(model, train_arrays, val_arrays, config, history_path=None):
    params = model.named_params()
    opt = Adam(params, lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 17])
    batches = _make_batches(train_arrays, config.batch_size)
    val_batches = _make_batches(val_arrays, config.batch_size)
    best_val = np.inf
    best_state = _snapshot(params)
    bad = 0
    history = []
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(batches))
        loss_sum = 0.0
        n_seen = 0
        for b in order:
            batch = batches[b]
            with GradTape() as tape:
                total, _ = _batch_loss(model, batch, config)
            if not np.isfinite(total.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            tape.backward(total)
            opt.step()
            k = batch["g1"].shape[0]
            loss_sum += total.data.item() * k
            n_seen += k
        train_loss = loss_sum / n_seen
        val_loss, val_phys = _eval_loss(model, val_batches, config)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch "
                                  f"{epoch}")
        history.append((epoch, train_loss, val_loss, val_phys))
        if val_loss < best_val:
            best_val = val_loss
            best_state = _snapshot(params)
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    _restore(params, best_state)
    if history_path is not None:
        _write_history(history_path, history)
    return history


def train(config, dataset, model_config=None, history_path=None):
    """Trains a surrogate on a built dataset; deterministic under the seed."""
    if dataset.train.n == 0:
        raise ContractError("dataset has no training samples")
    if model_config is None:
        model_config = ModelConfig()
    months = dataset.train.groups["g1"].shape[1]
    if model_config.window_months != months:
        model_config = dataclasses.replace(model_config,
                                           window_months=months)
    model = Surrogate(model_config, rng=np.random.default_rng([config.seed, 5]),
                      dtype=config.dtype)
    model.feature_stats = dict(dataset.feature_stats)
    model.target_stats = dict(dataset.target_stats)

    tr_idx, val_idx = _split_indices(dataset.train.n, config.seed)
    train_arrays = _subset_arrays(dataset.train, tr_idx)
    val_arrays = _subset_arrays(dataset.train, val_idx)
    if model.delta_heads is not None:
        _attach_initials(train_arrays, model)
        _attach_initials(val_arrays, model)

    history = _optimize(model, train_arrays, val_arrays, config, history_path)
    model.train_config = config.to_dict()
    model.history = history
    from .ood import fit_ood
    model.ood_stats = fit_ood(model, dataset)
    return model


def _renorm_split(split, dataset, model):
    """Re-expresses a foreign dataset split in the model's stats space."""
    if model.feature_stats is None or model.target_stats is None:
        raise ContractError("model carries no normalization stats")
    arrays = {}
    for g in pipeline.GROUPS:
        arr = split.groups[g].astype(np.float64)
        out = np.empty_like(arr)
        for name, grp, i in pipeline.FEATURE_CHANNELS:
            if grp != g:
                continue
            phys = pipeline.minmax_invert(arr[..., i],
                                          dataset.feature_stats[name])
            out[..., i] = pipeline.minmax_apply(phys,
                                                model.feature_stats[name])
        arrays[g] = out.astype(np.float32)
    for task in pipeline.TASKS:
        phys = dataset.denorm_target(task, split.targets[task])
        arrays[f"y_{task}"] = pipeline.minmax_apply(
            phys, model.target_stats[task]).astype(np.float32)
    return arrays


def fine_tune(model, fine_dataset, fraction, config, history_path=None):
    """Continues optimization on a seeded fraction of a new dataset.

    The fine data is renormalized with the model's own stats so features and
    targets keep the meaning the weights were trained against.
    """
    if not 0.0 < fraction <= 1.0:
        raise RangeError(f"fraction must lie in (0, 1], got {fraction}")
    arrays = _renorm_split(fine_dataset.train, fine_dataset, model)
    n = fine_dataset.train.n
    k = max(2, int(round(fraction * n)))
    pick = np.sort(np.random.default_rng([config.seed, 23]).choice(
        n, size=min(k, n), replace=False))
    sub = {key: val[pick] for key, val in arrays.items()}

    tuned = model.clone()
    tr_idx, val_idx = _split_indices(len(pick), config.seed)
    train_arrays = {key: val[tr_idx] for key, val in sub.items()}
    val_arrays = {key: val[val_idx] for key, val in sub.items()}
    if tuned.delta_heads is not None:
        _attach_initials(train_arrays, tuned)
        _attach_initials(val_arrays, tuned)
    history = _optimize(tuned, train_arrays, val_arrays, config, history_path)
    tuned.train_config = config.to_dict()
    tuned.history = history
    return tuned
