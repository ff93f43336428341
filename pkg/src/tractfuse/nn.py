"""MLP and causal-transformer building blocks, AdamW, and checkpoint IO.

Built on the autodiff tape in `autodiff`. Architectures follow the fixed
shapes used by the pipeline: 3-hidden-layer ReLU MLPs for actors/critics
and a 4-block single-head causal transformer for the fusion policy.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor, concat, dropout, layernorm, relu, softmax

CKP_MAGIC = b"CKP1"
_META_PREFIX = "__meta__/"


def parameter(arr):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


class Linear:
    def __init__(self, n_in, n_out, rng, init="kaiming"):
        if init == "kaiming":
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        else:
            w = rng.normal(0.0, 0.02, size=(n_in, n_out))
        self.w = parameter(w)
        self.b = parameter(np.zeros(n_out))
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x):
        return x @ self.w + self.b

    def params(self, prefix):
        return {prefix + ".w": self.w, prefix + ".b": self.b}


class Mlp:
    """ReLU-activated fully connected net with 3 hidden layers."""

    N_HIDDEN_LAYERS = 3

    def __init__(self, n_in, n_out, hidden=1024, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [n_in] + [hidden] * self.N_HIDDEN_LAYERS + [n_out]
        self.layers = [Linear(widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)]
        self.n_in = n_in
        self.n_out = n_out
        self.hidden = hidden

    def __call__(self, x, training=False):
        x = Tensor.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Mlp expects input width {self.n_in}, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    def params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}l{i}"))
        return out


class LayerNorm:
    def __init__(self, width):
        self.g = parameter(np.ones(width))
        self.b = parameter(np.zeros(width))

    def __call__(self, x):
        return layernorm(x) * self.g + self.b

    def params(self, prefix):
        return {prefix + ".g": self.g, prefix + ".b": self.b}


class CausalSelfAttention:
    """Single-head attention with 1/sqrt(d) scaling and a causal mask."""

    def __init__(self, width, rng, p_drop):
        self.qkv = Linear(width, 3 * width, rng, init="gpt")
        self.proj = Linear(width, width, rng, init="gpt")
        self.width = width
        self.p_drop = p_drop

    def __call__(self, x, causal_bias, pad_bias, rng, training):
        d = self.width
        qkv = self.qkv(x)
        q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
        scores = scores + causal_bias
        if pad_bias is not None:
            scores = scores + pad_bias
        att = softmax(scores, axis=-1)
        att = dropout(att, self.p_drop, rng, training)
        return self.proj(att @ v)

    def params(self, prefix):
        out = self.qkv.params(prefix + ".qkv")
        out.update(self.proj.params(prefix + ".proj"))
        return out


class TransformerBlock:
    def __init__(self, width, rng, p_drop):
        self.ln1 = LayerNorm(width)
        self.attn = CausalSelfAttention(width, rng, p_drop)
        self.ln2 = LayerNorm(width)
        self.fc = Linear(width, 4 * width, rng, init="gpt")
        self.fc_out = Linear(4 * width, width, rng, init="gpt")
        self.p_drop = p_drop

    def __call__(self, x, causal_bias, pad_bias, rng, training):
        x = x + self.attn(self.ln1(x), causal_bias, pad_bias, rng, training)
        h = relu(self.fc(self.ln2(x)))
        h = dropout(self.fc_out(h), self.p_drop, rng, training)
        return x + h

    def params(self, prefix):
        out = {}
        out.update(self.ln1.params(prefix + ".ln1"))
        out.update(self.attn.params(prefix + ".attn"))
        out.update(self.ln2.params(prefix + ".ln2"))
        out.update(self.fc.params(prefix + ".fc"))
        out.update(self.fc_out.params(prefix + ".fc_out"))
        return out


class GptBlockStack:
    """Stack of causal transformer blocks with learned position embeddings.

    Input is a (batch, tokens, width) embedding tensor; output has the same
    shape. `pad_mask` (batch, tokens) with 1 = real token, 0 = padding,
    removes padded positions from every attention pattern.
    """

    def __init__(self, width=128, n_blocks=4, n_tokens=120, p_drop=0.1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = width
        self.n_tokens = n_tokens
        self.pos = parameter(rng.normal(0.0, 0.02, size=(n_tokens, width)))
        self.blocks = [TransformerBlock(width, rng, p_drop) for _ in range(n_blocks)]
        self.ln_f = LayerNorm(width)

    def __call__(self, tok_emb, training=False, rng=None, pad_mask=None):
        tok_emb = Tensor.as_tensor(tok_emb)
        t = tok_emb.shape[-2]
        if tok_emb.shape[-1] != self.width:
            raise ValueError(f"GptBlockStack expects width {self.width}, got {tok_emb.shape[-1]}")
        if t > self.n_tokens:
            raise ValueError(f"sequence of {t} tokens exceeds window {self.n_tokens}")
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = tok_emb.dtype
        causal = np.where(np.tri(t, dtype=bool), 0.0, -1e9).astype(dt)
        pad_bias = None
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask)
            pad_bias = np.where(pad_mask[:, None, :] > 0, 0.0, -1e9).astype(dt)
            pad_bias = np.broadcast_to(pad_bias, (pad_bias.shape[0], t, t)).copy()
            # keep the diagonal open so fully padded query rows stay finite
            pad_bias[:, np.arange(t), np.arange(t)] = 0.0
        x = tok_emb + self.pos[:t]
        for block in self.blocks:
            x = block(x, causal, pad_bias, rng, training)
        return self.ln_f(x)

    def params(self, prefix=""):
        out = {prefix + "pos": self.pos}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{prefix}blk{i}"))
        out.update(self.ln_f.params(prefix + "ln_f"))
        return out


class AdamW:
    """AdamW with bias correction and a linear warmup ramp to a flat lr."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, warmup=0):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def effective_lr(self):
        if self.warmup > 0:
            return self.lr * min(1.0, self.step_count / self.warmup)
        return self.lr

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise ValueError(f"non-finite gradient for parameter '{name}'; step rejected")
        lr_eff = self.effective_lr()
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** t)
            vhat = self.v[name] / (1 - b2 ** t)
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data = (p.data - lr_eff * upd).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        out = {}
        for name in self.params:
            out[name + ".m"] = self.m[name]
            out[name + ".v"] = self.v[name]
        out["step"] = np.asarray(float(self.step_count), dtype=np.float32)
        return out


# -- checkpoint IO ("CKP1") ---------------------------------------------------

def save_checkpoint(path, tensors, meta=None):
    """Write named float32 arrays plus string metadata to a CKP1 file."""
    entries = []
    for key, value in (meta or {}).items():
        entries.append((f"{_META_PREFIX}{key}={value}", np.zeros((), dtype=np.float32)))
    for name, arr in tensors.items():
        entries.append((name, np.asarray(arr, dtype=np.float32)))
    with open(path, "wb") as f:
        f.write(CKP_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a CKP1 file; returns (tensors: dict, meta: dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKP_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}: {raw[:4]!r}")
    off = 4
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors, meta = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        if name.startswith(_META_PREFIX):
            key, _, value = name[len(_META_PREFIX):].partition("=")
            meta[key] = value
        else:
            tensors[name] = arr.copy()
    if off != len(raw):
        raise ValueError(f"trailing bytes in checkpoint {path} at offset {off}")
    return tensors, meta


def assign_params(params, tensors, prefix=""):
    """Load checkpoint arrays into a params dict in place."""
    for name, p in params.items():
        key = prefix + name
        if key not in tensors:
            raise KeyError(f"checkpoint missing tensor '{key}'")
        arr = tensors[key]
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for '{key}': {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
