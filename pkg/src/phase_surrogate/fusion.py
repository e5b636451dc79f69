"""Attention fusion of the per-modality latents.

The branch outputs are stacked into a short sequence (one position per
feature group), tagged with learned modality embeddings, passed through a
small stack of self-attention blocks, and mean-pooled back to a single
latent.  Because the pool is symmetric, permuting the groups together with
their embeddings leaves the fused latent unchanged.

A concatenate+dense variant offers the same call surface so the fusion
stage can be swapped out wholesale in ablation runs.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import xavier, zeros_param
from .errors import ConfigurationError, ContractError, ShapeError


def _stack_groups(z_list, dim):
    if len(z_list) == 0:
        raise ShapeError("fusion needs at least one group latent")
    tensors = []
    squeezed = None
    for z in z_list:
        if z.data.ndim == 1:
            z = ad.reshape(z, (1, z.shape[0]))
            now = True
        elif z.data.ndim == 2:
            now = False
        else:
            raise ShapeError(f"group latent must be [d] or [batch, d], got {z.shape}")
        if z.shape[1] != dim:
            raise ShapeError(f"group latent width {z.shape[1]} != fusion width {dim}")
        if squeezed is None:
            squeezed = now
        elif squeezed != now:
            raise ShapeError("mixed batched and single-sample group latents")
        tensors.append(z)
    batches = {t.shape[0] for t in tensors}
    if len(batches) != 1:
        raise ShapeError(f"group latents disagree on batch size: {sorted(batches)}")
    return ad.stack(tensors, axis=1), squeezed


class TransformerFusion:
    """Multi-head self-attention over the group axis, mean-pooled."""

    def __init__(self, n_groups, dim=64, heads=4, n_layers=2, ff_mult=4,
                 rng=None, dtype=np.float32):
        if dim % heads:
            raise ConfigurationError(f"latent width {dim} not divisible by "
                                     f"{heads} heads")
        rng = rng or np.random.default_rng(0)
        self.n_groups = n_groups
        self.dim = dim
        self.heads = heads
        self.n_layers = n_layers
        # distinct rows so positions stay distinguishable at initialization
        self.embed = Tensor(
            (0.02 * rng.standard_normal((n_groups, dim))).astype(dtype),
            requires_grad=True)
        self.layers = []
        ff = ff_mult * dim
        for _ in range(n_layers):
            self.layers.append({
                "wq": xavier(rng, (dim, dim), dtype),
                "wk": xavier(rng, (dim, dim), dtype),
                "wv": xavier(rng, (dim, dim), dtype),
                "wo": xavier(rng, (dim, dim), dtype),
                "ln1_g": Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
                "ln1_b": zeros_param(dim, dtype),
                "ff1": xavier(rng, (dim, ff), dtype),
                "ff1_b": zeros_param(ff, dtype),
                "ff2": xavier(rng, (ff, dim), dtype),
                "ff2_b": zeros_param(dim, dtype),
                "ln2_g": Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
                "ln2_b": zeros_param(dim, dtype),
            })
        self.ln_f_g = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.ln_f_b = zeros_param(dim, dtype)

    def named_params(self):
        out = {"embed": self.embed,
               "ln_f_g": self.ln_f_g, "ln_f_b": self.ln_f_b}
        for i, layer in enumerate(self.layers):
            for key, tensor in layer.items():
                out[f"layer{i}.{key}"] = tensor
        return out

    def _split_heads(self, t, batch, n):
        dh = self.dim // self.heads
        t = ad.reshape(t, (batch, n, self.heads, dh))
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (batch * self.heads, n, dh))

    def _merge_heads(self, t, batch, n):
        dh = self.dim // self.heads
        t = ad.reshape(t, (batch, self.heads, n, dh))
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (batch, n, self.dim))

    def _attention(self, x, layer, batch, n, return_weights=False):
        q = self._split_heads(ad.matmul(x, layer["wq"]), batch, n)
        k = self._split_heads(ad.matmul(x, layer["wk"]), batch, n)
        v = self._split_heads(ad.matmul(x, layer["wv"]), batch, n)
        dh = self.dim // self.heads
        scores = ad.mul_scalar(ad.matmul(q, ad.transpose(k, (0, 2, 1))),
                               1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        mixed = self._merge_heads(ad.matmul(attn, v), batch, n)
        out = ad.matmul(mixed, layer["wo"])
        if return_weights:
            return out, attn.data.reshape(batch, self.heads, n, n)
        return out

    def _encode_sequence(self, x, batch, n, first_layer_weights=False):
        # normalize before each sublayer and keep the residual path clean,
        # which trains stably at the default learning rate without warmup
        weights = None
        for i, layer in enumerate(self.layers):
            normed = ad.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            if i == 0 and first_layer_weights:
                att, weights = self._attention(normed, layer, batch, n,
                                               return_weights=True)
            else:
                att = self._attention(normed, layer, batch, n)
            x = ad.add(x, att)
            normed = ad.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            hidden = ad.relu(ad.add_rowvec(ad.matmul(normed, layer["ff1"]),
                                           layer["ff1_b"]))
            ffn = ad.add_rowvec(ad.matmul(hidden, layer["ff2"]), layer["ff2_b"])
            x = ad.add(x, ffn)
        x = ad.layer_norm(x, self.ln_f_g, self.ln_f_b)
        return x, weights

    def fuse(self, z_list):
        """[n_groups] latents of [batch, d] -> fused [batch, d]."""
        if len(z_list) != self.n_groups:
            raise ShapeError(f"expected {self.n_groups} group latents, "
                             f"got {len(z_list)}")
        x, squeezed = _stack_groups(z_list, self.dim)
        batch, n = x.shape[0], x.shape[1]
        x = ad.add_leading(x, self.embed)
        x, _ = self._encode_sequence(x, batch, n)
        pooled = ad.mean_axis(x, axis=1)
        return ad.reshape(pooled, (self.dim,)) if squeezed else pooled

    def attention_weights(self, z_list):
        """First-layer softmax attention for one sample: [heads, n, n]."""
        if len(z_list) != self.n_groups:
            raise ShapeError(f"expected {self.n_groups} group latents, "
                             f"got {len(z_list)}")
        x, squeezed = _stack_groups(z_list, self.dim)
        batch, n = x.shape[0], x.shape[1]
        x = ad.add_leading(x, self.embed)
        _, weights = self._encode_sequence(x, batch, n, first_layer_weights=True)
        return weights[0] if squeezed else weights


class ConcatFusion:
    """Ablation replacement: concatenate the group latents and project."""

    def __init__(self, n_groups, dim=64, rng=None, dtype=np.float32, **_ignored):
        rng = rng or np.random.default_rng(0)
        self.n_groups = n_groups
        self.dim = dim
        self.w = xavier(rng, (n_groups * dim, dim), dtype)
        self.b = zeros_param(dim, dtype)

    def named_params(self):
        return {"w": self.w, "b": self.b}

    def fuse(self, z_list):
        if len(z_list) != self.n_groups:
            raise ShapeError(f"expected {self.n_groups} group latents, "
                             f"got {len(z_list)}")
        x, squeezed = _stack_groups(z_list, self.dim)
        batch = x.shape[0]
        flat = ad.reshape(x, (batch, self.n_groups * self.dim))
        z = ad.add_rowvec(ad.matmul(flat, self.w), self.b)
        return ad.reshape(z, (self.dim,)) if squeezed else z

    def attention_weights(self, z_list):
        raise ContractError("concatenation fusion has no attention weights")
