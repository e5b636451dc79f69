"""Task-specific prediction heads with a hard positivity constraint.

Each registered task owns a dense(relu)dense stack from the fused latent
to its output shape.  Tasks flagged non-negative (all nine defaults) end
in softplus, so every prediction is strictly positive no matter how
extreme the latent: the property that makes the predicted state safe to
write into a restart file.

The net primary production head is a free head, not the difference of the
other two flux heads; the identity NPP = GPP - AR is enforced only softly
during training, which keeps the physics residual informative.
"""

import numpy as np

from . import autodiff as ad
from . import blobio
from .autodiff import Tensor
from .encoders import xavier, zeros_param
from .errors import CompletenessError, ContractError, ShapeError


def task_registry(n_pft, n_layers):
    """Default task set: per-type pools, per-layer pools, flux scalars.
    Shapes may have any rank; a (type x layer) matrix head is legal."""
    reg = {
        "deadcrootc": (n_pft,),
        "deadstemc": (n_pft,),
        "tlai": (n_pft,),
        "cwdc": (n_layers,),
        "soil3c": (n_layers,),
        "soil4c": (n_layers,),
        "gpp": (),
        "ar": (),
        "npp": (),
    }
    return {name: {"shape": shape, "nonneg": True} for name, shape in reg.items()}


class TaskHeads:
    def __init__(self, registry, in_dim=64, hidden=64, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.registry = dict(registry)
        self.in_dim = in_dim
        self.params = {}
        for name, spec in self.registry.items():
            width = int(np.prod(spec["shape"])) if spec["shape"] else 1
            self.params[name] = {
                "w1": xavier(rng, (in_dim, hidden), dtype),
                "b1": zeros_param(hidden, dtype),
                "w2": xavier(rng, (hidden, width), dtype),
                "b2": zeros_param(width, dtype),
            }

    def named_params(self):
        out = {}
        for name in sorted(self.params):
            for key, tensor in self.params[name].items():
                out[f"{name}.{key}"] = tensor
        return out

    def predict(self, z, task):
        """Fused latent [batch, d] -> prediction [batch, *shape]."""
        if task not in self.registry:
            raise ContractError(f"no head registered for task {task!r}")
        if z.data.ndim != 2 or z.shape[1] != self.in_dim:
            raise ShapeError(f"latent must be [batch, {self.in_dim}], "
                             f"got {z.shape}")
        p = self.params[task]
        hidden = ad.relu(ad.add_rowvec(ad.matmul(z, p["w1"]), p["b1"]))
        out = ad.add_rowvec(ad.matmul(hidden, p["w2"]), p["b2"])
        if self.registry[task]["nonneg"]:
            out = ad.softplus(out)
        shape = self.registry[task]["shape"]
        return ad.reshape(out, (z.shape[0],) + shape)

    def predict_all(self, z):
        return {task: self.predict(z, task) for task in self.registry}


def denormalize(bundle, stats):
    """Map normalized predictions back to physical units via the stored
    per-task (min, max).  Accepts tensors or arrays; returns arrays."""
    out = {}
    for task, values in bundle.items():
        if task not in stats:
            raise ContractError(f"no normalization stats for task {task!r}")
        lo, hi = stats[task]
        data = values.data if isinstance(values, Tensor) else np.asarray(values)
        out[task] = data.astype(np.float64) * (hi - lo) + lo
    return out


def write_restart_state(predictions, cell_ids, n_pft, n_layers, path,
                        expected_ids=None):
    """Write denormalized slow-pool predictions as a restart file.

    ``predictions`` maps each restart pool to [n_cells, width] physical
    values.  When ``expected_ids`` is given, every expected cell must be
    present.
    """
    cell_ids = np.asarray(cell_ids, dtype=np.int64)
    if expected_ids is not None:
        have = set(int(v) for v in cell_ids)
        missing = [int(v) for v in expected_ids if int(v) not in have]
        if missing:
            raise CompletenessError(
                f"restart export missing {len(missing)} cells: "
                f"{missing[:5]}{'...' if len(missing) > 5 else ''}")
    pools = {}
    for name in blobio.RESTART_POOLS:
        if name not in predictions:
            raise CompletenessError(f"restart export missing pool {name!r}")
        pools[name] = np.asarray(predictions[name], dtype=np.float64)
    blobio.write_restart(path, cell_ids, pools, n_pft, n_layers)
