"""Surrogate assembly: branch encoders, fusion, task heads, persistence.

A :class:`Surrogate` owns one encoder per input group, a fusion module
producing the unified latent, and one head per task.  Variants swap or drop
components; everything else (heads, loss wiring, persistence) is shared so a
variant differs from the full model by exactly the removed part.
"""

import dataclasses
import json

import numpy as np

from . import blobio
from . import pipeline
from .autodiff import Tensor
from .encoders import (LayeredEncoder, PftEncoder, StaticEncoder,
                       TemporalEncoder, xavier, zeros_param)
from .errors import CompletenessError, ConfigurationError, ContractError, ShapeError
from .fusion import ConcatFusion, TransformerFusion
from .heads import TaskHeads, denormalize, task_registry

VARIANTS = ("full", "no_cnn", "no_fc", "no_lstm", "no_trans", "no_phys",
            "baseline_mlp", "baseline_pinn")

BRANCHES = ("temporal", "layered", "static", "pft")

_BRANCH_DROPS = {
    "no_lstm": ("temporal",),
    "no_cnn": ("layered",),
    "no_fc": ("static", "pft"),
}

_CHANNEL_NAMES = tuple(name for name, _, _ in pipeline.FEATURE_CHANNELS)


def active_branches(variant):
    if variant == "baseline_mlp":
        return ()
    dropped = _BRANCH_DROPS.get(variant, ())
    return tuple(b for b in BRANCHES if b not in dropped)


@dataclasses.dataclass
class ModelConfig:
    dim: int = 64
    hidden: int = 64
    heads: int = 4
    depth: int = 2
    ff_mult: int = 4
    channels: tuple = (16, 32)
    n_pft: int = 5
    n_layers: int = 9
    window_months: int = 240
    variant: str = "full"
    masked_features: tuple = ()

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.masked_features = tuple(self.masked_features)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        for field in ("dim", "hidden", "heads", "depth", "ff_mult",
                      "n_pft", "n_layers", "window_months"):
            if getattr(self, field) < 1:
                raise ConfigurationError(f"{field} must be positive")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ConfigurationError("channels must be two positive widths")
        if self.dim % self.heads:
            raise ConfigurationError("dim must be divisible by heads")
        for name in self.masked_features:
            if name not in _CHANNEL_NAMES:
                raise ConfigurationError(f"unknown masked feature {name!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["masked_features"] = list(self.masked_features)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigurationError(f"unknown model config key {key!r}")
        return cls(**data)


class MlpTrunk:
    """Concatenate-everything dense stack used by the plain baseline."""

    def __init__(self, in_dim, hidden, out_dim, rng, dtype=np.float32):
        self.in_dim = in_dim
        self.w1 = xavier(rng, (in_dim, hidden), dtype)
        self.b1 = zeros_param(hidden, dtype)
        self.w2 = xavier(rng, (hidden, hidden), dtype)
        self.b2 = zeros_param(hidden, dtype)
        self.w3 = xavier(rng, (hidden, out_dim), dtype)
        self.b3 = zeros_param(out_dim, dtype)

    def named_params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def encode(self, x):
        from . import autodiff as ad
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeError(f"expected [batch, {self.in_dim}] input, "
                             f"got {x.data.shape}")
        h = ad.relu(ad.add_rowvec(ad.matmul(x, self.w1), self.b1))
        h = ad.relu(ad.add_rowvec(ad.matmul(h, self.w2), self.b2))
        return ad.add_rowvec(ad.matmul(h, self.w3), self.b3)


def _delta_registry(n_pft, n_layers):
    reg = {}
    for task, entry in task_registry(n_pft, n_layers).items():
        if task in pipeline.SLOW_TASKS:
            reg[task] = {"shape": entry["shape"], "nonneg": False}
    return reg


class Surrogate:
    """Full heterogeneous-input multi-task model."""

    def __init__(self, config, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.dtype = dtype
        self.feature_stats = None
        self.target_stats = None
        self.train_config = None
        self.ood_stats = None
        d, hid = config.dim, config.hidden
        n_g1 = len(pipeline.G1_FIELDS)
        n_g2 = len(pipeline.G2_FIELDS)
        n_pft_fields = len(pipeline.G3_FIELDS) + len(pipeline.G4_FIELDS)
        n_g5 = len(pipeline.G5_FIELDS)

        self.branches = {}
        names = active_branches(config.variant)
        if "temporal" in names:
            self.branches["temporal"] = TemporalEncoder(
                n_g1, hidden=hid, out_dim=d, rng=rng, dtype=dtype)
        if "layered" in names:
            self.branches["layered"] = LayeredEncoder(
                config.n_layers, n_g5, channels=config.channels, out_dim=d,
                rng=rng, dtype=dtype)
        if "static" in names:
            self.branches["static"] = StaticEncoder(
                n_g2, hidden=hid, out_dim=d, rng=rng, dtype=dtype)
        if "pft" in names:
            self.branches["pft"] = PftEncoder(
                config.n_pft, n_pft_fields, hidden=hid, out_dim=d,
                rng=rng, dtype=dtype)

        self.trunk = None
        self.fusion = None
        if config.variant == "baseline_mlp":
            flat = (config.window_months * n_g1 + n_g2
                    + config.n_pft * n_pft_fields + config.n_layers * n_g5)
            self.trunk = MlpTrunk(flat, hid, d, rng, dtype)
        elif config.variant == "no_trans":
            self.fusion = ConcatFusion(len(names), d, rng=rng, dtype=dtype)
        else:
            self.fusion = TransformerFusion(
                len(names), dim=d, heads=config.heads, n_layers=config.depth,
                ff_mult=config.ff_mult, rng=rng, dtype=dtype)

        self.heads = TaskHeads(task_registry(config.n_pft, config.n_layers),
                               in_dim=d, hidden=hid, rng=rng, dtype=dtype)
        self.delta_heads = None
        if config.variant == "baseline_pinn":
            self.delta_heads = TaskHeads(
                _delta_registry(config.n_pft, config.n_layers),
                in_dim=d, hidden=hid, rng=rng, dtype=dtype)

    # -- parameters ---------------------------------------------------------

    def named_params(self):
        out = {}
        for name, branch in self.branches.items():
            for key, tensor in branch.named_params().items():
                out[f"{name}.{key}"] = tensor
        if self.trunk is not None:
            for key, tensor in self.trunk.named_params().items():
                out[f"trunk.{key}"] = tensor
        if self.fusion is not None:
            for key, tensor in self.fusion.named_params().items():
                out[f"fusion.{key}"] = tensor
        for key, tensor in self.heads.named_params().items():
            out[f"heads.{key}"] = tensor
        if self.delta_heads is not None:
            for key, tensor in self.delta_heads.named_params().items():
                out[f"delta.{key}"] = tensor
        return out

    def param_count(self):
        return sum(t.data.size for t in self.named_params().values())

    # -- forward ------------------------------------------------------------

    def _masked_groups(self, batch):
        missing = [g for g in pipeline.GROUPS if g not in batch]
        if missing:
            raise ContractError(f"batch lacks groups: {', '.join(missing)}")
        arrays = {g: np.asarray(batch[g], dtype=self.dtype)
                  for g in pipeline.GROUPS}
        masked_groups = set()
        for name in self.config.masked_features:
            _, group, idx = next(c for c in pipeline.FEATURE_CHANNELS
                                 if c[0] == name)
            if group not in masked_groups:
                arrays[group] = arrays[group].copy()
                masked_groups.add(group)
            arrays[group][..., idx] = 0.0
        return arrays

    def _branch_latents(self, arrays):
        z_list = []
        for name in active_branches(self.config.variant):
            enc = self.branches[name]
            if name == "temporal":
                z_list.append(enc.encode(Tensor(arrays["g1"])))
            elif name == "layered":
                z_list.append(enc.encode(Tensor(arrays["g5"])))
            elif name == "static":
                z_list.append(enc.encode(Tensor(arrays["g2"])))
            else:
                pft_in = np.concatenate([arrays["g3"], arrays["g4"]], axis=-1)
                z_list.append(enc.encode(Tensor(pft_in)))
        return z_list

    def latent(self, batch):
        """Unified latent for a batch dict with keys g1..g5, shape [B, d]."""
        arrays = self._masked_groups(batch)
        if self.trunk is not None:
            n = arrays["g1"].shape[0]
            flat = np.concatenate(
                [arrays[g].reshape(n, -1) for g in pipeline.GROUPS], axis=1)
            return self.trunk.encode(Tensor(flat))
        return self.fusion.fuse(self._branch_latents(arrays))

    def forward(self, batch):
        """Returns (predictions dict of normalized tensors, latent tensor)."""
        z = self.latent(batch)
        return self.heads.predict_all(z), z

    def delta_forward(self, z):
        if self.delta_heads is None:
            raise ContractError("delta heads exist only on the baseline_pinn "
                                "variant")
        return self.delta_heads.predict_all(z)

    def predict_physical(self, batch):
        """Denormalized predictions as float64 arrays."""
        if self.target_stats is None:
            raise ContractError("model carries no target stats; train first")
        preds, _ = self.forward(batch)
        return denormalize(preds, self.target_stats)

    def attention_weights(self, batch):
        if self.fusion is None:
            raise ContractError("the dense baseline has no attention")
        arrays = self._masked_groups(batch)
        return self.fusion.attention_weights(self._branch_latents(arrays))

    # -- persistence --------------------------------------------------------

    def save(self, path):
        params = self.named_params()
        manifest = {
            "format": "surrogate",
            "version": 1,
            "config": self.config.to_dict(),
            "train_config": self.train_config,
            "feature_stats": _stats_to_json(self.feature_stats),
            "target_stats": _stats_to_json(self.target_stats),
            "params": sorted(params),
        }
        arrays = {name: params[name].data for name in params}
        if self.ood_stats is not None:
            ood_manifest, ood_arrays = self.ood_stats.to_manifest()
            manifest["ood"] = ood_manifest
            manifest["params"] = sorted(params) + sorted(ood_arrays)
            arrays.update(ood_arrays)
        blobio.write_model_file(path, manifest, arrays)

    @classmethod
    def load(cls, path):
        manifest, arrays = blobio.read_model_file(path)
        if manifest.get("format") != "surrogate":
            raise ContractError(f"not a surrogate model file: "
                                f"{manifest.get('format')!r}")
        config = ModelConfig.from_dict(manifest["config"])
        model = cls(config, rng=np.random.default_rng(0))
        params = model.named_params()
        missing = [n for n in params if n not in arrays]
        if missing:
            raise CompletenessError(
                f"model file lacks parameters: {', '.join(missing[:5])}")
        for name, tensor in params.items():
            stored = arrays[name]
            if stored.shape != tensor.data.shape:
                raise ShapeError(f"parameter {name} has shape {stored.shape}, "
                                 f"expected {tensor.data.shape}")
            tensor.data = stored.astype(tensor.data.dtype)
        model.train_config = manifest.get("train_config")
        model.feature_stats = _stats_from_json(manifest.get("feature_stats"))
        model.target_stats = _stats_from_json(manifest.get("target_stats"))
        if "ood" in manifest:
            from .ood import OodStats
            model.ood_stats = OodStats.from_manifest(manifest["ood"], arrays)
        return model

    def clone(self):
        twin = Surrogate(self.config, rng=np.random.default_rng(0),
                         dtype=self.dtype)
        source = self.named_params()
        for name, tensor in twin.named_params().items():
            tensor.data = source[name].data.copy()
        twin.feature_stats = self.feature_stats
        twin.target_stats = self.target_stats
        twin.train_config = self.train_config
        twin.ood_stats = self.ood_stats
        return twin


def _stats_to_json(stats):
    if stats is None:
        return None
    return {k: [float(v[0]), float(v[1])] for k, v in stats.items()}


def _stats_from_json(stats):
    if stats is None:
        return None
    return {k: (v[0], v[1]) for k, v in stats.items()}


def config_from_file(path):
    """Reads {"model": {...}, "train": {...}} JSON; either section optional."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    for key in data:
        if key not in ("model", "train"):
            raise ConfigurationError(f"unknown config section {key!r}")
    return data.get("model", {}), data.get("train", {})
