"""Parameter registry, neural layers composed from autodiff primitives,
the Adam optimizer, and the finite-difference gradient checker."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor


class BadFreezeDepth(ValueError):
    """Requested fine-tune depth outside [0, num_layers]."""


# ---------------------------------------------------------------------------
# parameter registry

@dataclass
class ParamInfo:
    tensor: Tensor
    trainable: bool
    pinned_rows: tuple = ()


class ParamGraph:
    """Named parameter tensors with trainable flags.

    Frozen parameters have ``requires_grad=False`` so no graph is recorded
    through them; the optimizer never touches them. ``pinned_rows`` marks
    table rows (e.g. the pad row) whose gradient is zeroed before every
    update, keeping them bit-identical forever.
    """

    def __init__(self):
        self._params: dict[str, ParamInfo] = {}

    def add(self, name, data, trainable=True, pinned_rows=()):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self._params[name] = ParamInfo(t, trainable, tuple(pinned_rows))
        return t

    def __getitem__(self, name):
        return self._params[name].tensor

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return [(n, info) for n, info in self._params.items()]

    def info(self, name):
        return self._params[name]

    def set_trainable(self, name, flag):
        info = self._params[name]
        info.trainable = bool(flag)
        info.tensor.requires_grad = bool(flag)

    def trainable_items(self):
        return [(n, i) for n, i in self._params.items() if i.trainable]

    def zero_grad(self):
        for info in self._params.values():
            info.tensor.grad = None

    def state_dict(self):
        return {n: info.tensor.data.copy() for n, info in self._params.items()}

    def load_state_dict(self, state, strict=True):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            if name not in self._params:
                continue
            t = self._params[name].tensor
            if t.data.shape != arr.shape:
                raise ShapeMismatch(
                    f"{name}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
            t.data = np.asarray(arr, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# initializers

def xavier_uniform(shape, rng):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def small_uniform(shape, rng, scale=0.1):
    return rng.uniform(-scale, scale, size=shape)


# ---------------------------------------------------------------------------
# layers

def dense(x, w, b=None):
    """x @ w + b with shape validation."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(f"dense: {x.data.shape} @ {w.data.shape}")
    out = ad.matmul(x, w)
    if b is not None:
        if b.data.shape != (w.data.shape[-1],):
            raise ShapeMismatch(f"dense: bias {b.data.shape} vs {w.data.shape}")
        out = ad.add(out, b)
    return out


def additive_attention(h, w, v, mask=None, allow_empty=False):
    """Score each position with query . tanh(W h_i), softmax, pool.

    h: (..., n, d), w: (d, da), v: (da,). Returns (weights (..., n),
    pooled (..., d)).
    """
    da = w.data.shape[-1]
    if v.data.shape != (da,):
        raise ShapeMismatch(f"attention query {v.data.shape} vs projection {w.data.shape}")
    proj = ad.tanh(ad.matmul(h, w))                      # (..., n, da)
    scores = ad.matmul(proj, ad.reshape(v, (da, 1)))     # (..., n, 1)
    lead = h.data.shape[:-1]
    scores = ad.reshape(scores, lead)                    # (..., n)
    weights = ad.masked_softmax(scores, mask, axis=-1, allow_empty=allow_empty)
    pooled = ad.matmul(ad.reshape(weights, lead[:-1] + (1, lead[-1])), h)
    pooled = ad.reshape(pooled, lead[:-1] + (h.data.shape[-1],))
    return weights, pooled


def multi_head_self_attention(h, wq, bq, wk, bk, wv, bv, wo, bo, heads,
                              mask=None, allow_empty=False):
    """Scaled dot-product self-attention, heads concatenated then projected.

    h: (B, n, d) with d divisible by heads; mask: (B, n) keys to attend to.
    Masked keys receive exactly zero weight. No positional encoding.
    """
    if h.ndim != 3:
        raise ShapeMismatch(f"self-attention expects (batch, seq, dim), got {h.data.shape}")
    B, n, d = h.data.shape
    if d % heads != 0:
        raise ShapeMismatch(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(t):
        return ad.swapaxes(ad.reshape(t, (B, n, heads, dh)), 1, 2)  # (B, H, n, dh)

    q = split_heads(dense(h, wq, bq))
    k = split_heads(dense(h, wk, bk))
    v = split_heads(dense(h, wv, bv))
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    key_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(B, 1, 1, n)
    attn = ad.masked_softmax(scores, key_mask, axis=-1, allow_empty=allow_empty)
    ctx = ad.matmul(attn, v)                              # (B, H, n, dh)
    ctx = ad.reshape(ad.swapaxes(ctx, 1, 2), (B, n, d))
    return dense(ctx, wo, bo)


def gru_step(x, h, params, prefix=""):
    """One GRU update: reset/update gates sigmoid, candidate tanh.

    params holds {prefix}w_r/u_r/b_r, w_z/u_z/b_z, w_n/u_n/b_n. The update
    gate interpolates toward the previous state: h' = (1-z)*n + z*h.
    """
    p = lambda s: params[prefix + s]
    r = ad.sigmoid(ad.add(ad.add(dense(x, p("w_r")), dense(h, p("u_r"))), p("b_r")))
    z = ad.sigmoid(ad.add(ad.add(dense(x, p("w_z")), dense(h, p("u_z"))), p("b_z")))
    n = ad.tanh(ad.add(ad.add(dense(x, p("w_n")), dense(ad.mul(r, h), p("u_n"))), p("b_n")))
    return ad.add(ad.mul(ad.sub(Tensor(1.0), z), n), ad.mul(z, h))


def add_gru_params(graph, prefix, d_in, d_h, rng):
    for gate in ("r", "z", "n"):
        graph.add(f"{prefix}w_{gate}", xavier_uniform((d_in, d_h), rng))
        graph.add(f"{prefix}u_{gate}", xavier_uniform((d_h, d_h), rng))
        graph.add(f"{prefix}b_{gate}", np.zeros(d_h))


# ---------------------------------------------------------------------------
# transformer encoder (post-norm, GELU feed-forward, learned positions)

@dataclass
class TransformerConfig:
    vocab_size: int
    num_layers: int = 4
    hidden_size: int = 128
    num_heads: int = 4
    ff_size: int = 512
    max_positions: int = 64
    layer_norm_eps: float = 1e-12


_MHSA_KEYS = ("attn.query.weight", "attn.query.bias", "attn.key.weight",
              "attn.key.bias", "attn.value.weight", "attn.value.bias",
              "attn.output.weight", "attn.output.bias")
_BLOCK_KEYS = _MHSA_KEYS + (
    "attn.norm.gain", "attn.norm.bias",
    "ffn.inner.weight", "ffn.inner.bias",
    "ffn.output.weight", "ffn.output.bias",
    "ffn.norm.gain", "ffn.norm.bias")


def add_transformer_params(graph, prefix, cfg, rng):
    """Register embedding and per-block tensors under ``prefix``."""
    d, ff = cfg.hidden_size, cfg.ff_size
    graph.add(f"{prefix}embeddings.word", small_uniform((cfg.vocab_size, d), rng))
    graph.add(f"{prefix}embeddings.position", small_uniform((cfg.max_positions, d), rng))
    graph.add(f"{prefix}embeddings.token_type", small_uniform((1, d), rng))
    graph.add(f"{prefix}embeddings.norm.gain", np.ones(d))
    graph.add(f"{prefix}embeddings.norm.bias", np.zeros(d))
    for i in range(cfg.num_layers):
        base = f"{prefix}block{i}."
        for key in _MHSA_KEYS:
            shape = (d, d) if key.endswith("weight") else (d,)
            init = xavier_uniform(shape, rng) if key.endswith("weight") else np.zeros(d)
            graph.add(base + key, init)
        graph.add(base + "attn.norm.gain", np.ones(d))
        graph.add(base + "attn.norm.bias", np.zeros(d))
        graph.add(base + "ffn.inner.weight", xavier_uniform((d, ff), rng))
        graph.add(base + "ffn.inner.bias", np.zeros(ff))
        graph.add(base + "ffn.output.weight", xavier_uniform((ff, d), rng))
        graph.add(base + "ffn.output.bias", np.zeros(d))
        graph.add(base + "ffn.norm.gain", np.ones(d))
        graph.add(base + "ffn.norm.bias", np.zeros(d))


def transformer_block(h, graph, base, heads, mask=None, eps=1e-12):
    """Post-norm block: MHSA + residual + LN, then GELU FFN + residual + LN."""
    p = lambda s: graph[base + s]
    attn = multi_head_self_attention(
        h, p("attn.query.weight"), p("attn.query.bias"),
        p("attn.key.weight"), p("attn.key.bias"),
        p("attn.value.weight"), p("attn.value.bias"),
        p("attn.output.weight"), p("attn.output.bias"),
        heads, mask=mask)
    h = ad.layer_norm(ad.add(h, attn), p("attn.norm.gain"), p("attn.norm.bias"), eps)
    ff = dense(ad.gelu(dense(h, p("ffn.inner.weight"), p("ffn.inner.bias"))),
               p("ffn.output.weight"), p("ffn.output.bias"))
    return ad.layer_norm(ad.add(h, ff), p("ffn.norm.gain"), p("ffn.norm.bias"), eps)


def transformer_encode(token_ids, mask, graph, prefix, cfg):
    """Embed ids (word + position + token type, normalized) and run all blocks.

    token_ids: (B, n) ints; mask: (B, n) padding mask. Returns (B, n, d).
    """
    token_ids = np.asarray(token_ids)
    B, n = token_ids.shape
    if n > cfg.max_positions:
        raise ShapeMismatch(f"sequence length {n} exceeds {cfg.max_positions} positions")
    word = ad.rows(graph[f"{prefix}embeddings.word"], token_ids)
    pos = ad.rows(graph[f"{prefix}embeddings.position"], np.arange(n))
    tt = ad.rows(graph[f"{prefix}embeddings.token_type"], np.zeros(n, dtype=int))
    h = ad.add(ad.add(word, pos), tt)
    h = ad.layer_norm(h, graph[f"{prefix}embeddings.norm.gain"],
                      graph[f"{prefix}embeddings.norm.bias"], cfg.layer_norm_eps)
    for i in range(cfg.num_layers):
        h = transformer_block(h, graph, f"{prefix}block{i}.", cfg.num_heads,
                              mask=mask, eps=cfg.layer_norm_eps)
    return h


def transformer_graph_from_tensors(tensors, prefix=""):
    """Build a frozen ParamGraph + config from a loaded weight container
    (natively saved or sidecar-exported). config.* scalars in the container
    describe the stack; everything else is a parameter tensor."""
    def scalar(name):
        return float(np.ravel(tensors[name])[0])

    cfg = TransformerConfig(
        vocab_size=int(scalar("config.vocab_size")),
        num_layers=int(scalar("config.num_layers")),
        hidden_size=int(scalar("config.hidden_size")),
        num_heads=int(scalar("config.num_heads")),
        ff_size=int(scalar("config.ff_size")),
        max_positions=int(scalar("config.max_positions")),
        layer_norm_eps=scalar("config.layer_norm_eps"))
    graph = ParamGraph()
    for name, arr in tensors.items():
        if not name.startswith("config."):
            graph.add(prefix + name, arr, trainable=False)
    return graph, cfg


def set_transformer_finetune_depth(graph, prefix, cfg, k):
    """Make exactly the top ``k`` blocks trainable; everything else frozen.

    Embedding matrices stay frozen at every depth; depth counts blocks from
    the top of the stack.
    """
    if not 0 <= k <= cfg.num_layers:
        raise BadFreezeDepth(f"depth {k} outside [0, {cfg.num_layers}]")
    for name in graph.names():
        if not name.startswith(prefix):
            continue
        rest = name[len(prefix):]
        if rest.startswith("embeddings."):
            graph.set_trainable(name, False)
        elif rest.startswith("block"):
            i = int(rest[5:rest.index(".")])
            graph.set_trainable(name, i >= cfg.num_layers - k)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over a ParamGraph's trainable parameters."""

    def __init__(self, graph, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.graph = graph
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(i.tensor.data) for n, i in graph.trainable_items()}
        self.v = {n: np.zeros_like(i.tensor.data) for n, i in graph.trainable_items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, info in self.graph.trainable_items():
            t = info.tensor
            if t.grad is None:
                continue
            g = t.grad
            if info.pinned_rows:
                g = g.copy()
                g[list(info.pinned_rows)] = 0.0
            if name not in self.m:  # parameter thawed after construction
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self):
        out = {"__step__": np.array(float(self.t))}
        for n, arr in self.m.items():
            out[f"m.{n}"] = arr.copy()
        for n, arr in self.v.items():
            out[f"v.{n}"] = arr.copy()
        return out

    def load_state_dict(self, state):
        self.t = int(np.ravel(state["__step__"])[0])
        self.m = {n[2:]: np.asarray(a, dtype=np.float64).copy()
                  for n, a in state.items() if n.startswith("m.")}
        self.v = {n[2:]: np.asarray(a, dtype=np.float64).copy()
                  for n, a in state.items() if n.startswith("v.")}


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(graph, loss_fn, eps=1e-5, coords_per_param=4, rng=None,
                      params=None):
    """Max relative error between analytic gradients and central differences.

    loss_fn must be deterministic (dropout off). Relative error uses
    max(|analytic|, |numeric|, 1e-4) as denominator: below 1e-4 the
    float64 cancellation noise in (f+ - f-)/2eps swamps any relative
    comparison, so tiny gradients are compared absolutely at that scale.
    """
    rng = rng or np.random.default_rng(0)
    graph.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    worst = 0.0
    names = params if params is not None else [n for n, _ in graph.trainable_items()]
    for name in names:
        info = graph.info(name)
        t = info.tensor
        flat = t.data.reshape(-1)
        gflat = (np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1))
        n_coords = min(coords_per_param, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with ad.no_grad():
                f_plus = loss_fn().item()
            flat[c] = orig - eps
            with ad.no_grad():
                f_minus = loss_fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = gflat[c]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            worst = max(worst, rel)
    return worst
