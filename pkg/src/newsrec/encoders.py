"""News and user encoders for the three architectures under each
language-model mode.

Text pathway per mode:
  slm / slm-frozen  architecture's own token encoder over a static word
                    table (trainable vs frozen)
  plm:k             native mini-transformer, sequence-start token output,
                    top k blocks fine-tuned, the rest (and embeddings) frozen
  plm-frozen        precomputed sequence-start vectors from an NRE1 store
  llm               precomputed last-l token concatenations from an NRE1
                    store (prompt-tagged)

In plm/llm modes the LM-derived vector replaces the architecture's
token-level text encoder; category embeddings (LSTUR) and the view
attention (NAML) are kept on top.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ShapeMismatch, Tensor
from .embeddings import DimMismatch
from .layers import (ParamGraph, TransformerConfig, add_gru_params,
                     add_transformer_params, additive_attention, dense,
                     gru_step, multi_head_self_attention,
                     set_transformer_finetune_depth, transformer_encode,
                     xavier_uniform)

ARCHITECTURES = ("naml", "nrms", "lstur")


@dataclass(frozen=True)
class LmMode:
    """Which language model feeds the news encoder, and what is trainable."""
    kind: str                 # slm | plm | plm-frozen | llm
    finetune: bool = True     # slm only: word table trainable?
    finetune_layers: int = 0  # plm only: top blocks receiving gradients
    last_tokens: int = 10     # llm only

    @classmethod
    def parse(cls, text):
        text = text.strip().lower()
        if text == "slm":
            return cls("slm", finetune=True)
        if text == "slm-frozen":
            return cls("slm", finetune=False)
        if text == "plm-frozen":
            return cls("plm-frozen")
        if text.startswith("plm:"):
            return cls("plm", finetune_layers=int(text.split(":", 1)[1]))
        if text == "plm":
            return cls("plm", finetune_layers=0)
        if text == "llm":
            return cls("llm")
        raise ValueError(f"unknown lm mode {text!r}")

    def describe(self):
        if self.kind == "slm":
            return "slm" if self.finetune else "slm-frozen"
        if self.kind == "plm":
            return f"plm:{self.finetune_layers}"
        return self.kind

    @property
    def store_backed(self):
        return self.kind in ("plm-frozen", "llm")


@dataclass
class EncoderConfig:
    news_dim: int = 256
    word_dim: int = 300
    attn_query_dim: int = 200
    title_heads: int = 12   # must divide word_dim; 300-dim tables -> 12
    user_heads: int = 8
    conv_width: int = 3
    category_dim: int = 64
    dropout: float = 0.2
    plm_layers: int = 4
    plm_dim: int = 128
    plm_heads: int = 4
    plm_ff_dim: int = 512
    llm_last_tokens: int = 10
    # keep NRMS's own self-attention stack over PLM token outputs instead of
    # replacing it with the sequence-start vector
    nrms_plm_self_attention: bool = False

    def __post_init__(self):
        if self.llm_last_tokens < 1:
            raise ValueError("last-token count must be >= 1")


@dataclass
class EncoderData:
    """Mode-specific resources resolved against one tokenized catalog."""
    catalog: "TokenizedCatalog"
    static_matrix: np.ndarray | None = None
    static_trainable: bool = False
    title_store: np.ndarray | None = None      # (num rows, store dim)
    abstract_store: np.ndarray | None = None
    num_users: int = 1
    plm_weights: dict | None = None            # optional pretrained tensors


# ---------------------------------------------------------------------------
# the generic LM-vector operations

def slm_concat_news_vec(token_ids, table, fc_w, fc_b):
    """Concatenate the (padded) title's word vectors and apply one dense
    layer; the plain static-embedding news pathway."""
    token_ids = np.asarray(token_ids)
    n, seq = token_ids.shape
    emb = ad.rows(table, token_ids)                    # (n, seq, dw)
    flat = ad.reshape(emb, (n, seq * table.data.shape[1]))
    return dense(flat, fc_w, fc_b)


def cls_news_vec(token_ids, mask, graph, prefix, tf_cfg, fc_w, fc_b):
    """Run the transformer stack and project the sequence-start output."""
    hidden = transformer_encode(token_ids, mask, graph, prefix, tf_cfg)
    cls = ad.select(hidden, 1, 0)                      # (n, d_model)
    return dense(cls, fc_w, fc_b)


def stored_news_vec(store_matrix, rows_idx, fc_w, fc_b):
    """Project precomputed news vectors; the store itself is never touched."""
    vecs = Tensor(store_matrix[np.asarray(rows_idx)])
    return dense(vecs, fc_w, fc_b)


# ---------------------------------------------------------------------------
# shared building blocks

def _attention_pool(model, name, h, mask, train, rng):
    w = model.graph[f"{name}.proj"]
    v = model.graph[f"{name}.query"]
    _, pooled = additive_attention(h, w, v, mask=mask, allow_empty=True)
    return model._drop(pooled, train, rng)


def _mhsa(model, name, h, mask, heads):
    g = model.graph
    return multi_head_self_attention(
        h, g[f"{name}.wq"], g[f"{name}.bq"], g[f"{name}.wk"], g[f"{name}.bk"],
        g[f"{name}.wv"], g[f"{name}.bv"], g[f"{name}.wo"], g[f"{name}.bo"],
        heads=heads, mask=mask, allow_empty=True)


class _ModelBase:
    arch = ""

    def __init__(self, mode, cfg, data, rng):
        self.mode = mode
        self.cfg = cfg
        self.data = data
        self.graph = ParamGraph()
        self.tf_cfg = None
        self._rng = rng
        self._build_lm(rng)
        self._build_arch(rng)

    # -- construction -------------------------------------------------

    def _build_lm(self, rng):
        cfg, data, mode = self.cfg, self.data, self.mode
        if mode.kind == "slm":
            if data.static_matrix is None:
                raise ValueError("slm mode needs a static word table")
            self.word_table = self.graph.add(
                "lm.word_table", data.static_matrix,
                trainable=mode.finetune, pinned_rows=(0,))
        elif mode.kind == "plm":
            self.tf_cfg = TransformerConfig(
                vocab_size=data.catalog.plm_vocab_size(),
                num_layers=cfg.plm_layers, hidden_size=cfg.plm_dim,
                num_heads=cfg.plm_heads, ff_size=cfg.plm_ff_dim,
                max_positions=data.catalog.max_title + 2
                if self.arch != "naml" else
                max(data.catalog.max_title, data.catalog.max_abstract) + 2)
            add_transformer_params(self.graph, "lm.plm.", self.tf_cfg, rng)
            if data.plm_weights:
                self.graph.load_state_dict(
                    {f"lm.plm.{k}": v for k, v in data.plm_weights.items()},
                    strict=False)
            set_transformer_finetune_depth(
                self.graph, "lm.plm.", self.tf_cfg, mode.finetune_layers)
            self.plm_title = data.catalog.plm_sequences("title")
            if self.arch == "naml":
                self.plm_abstract = data.catalog.plm_sequences("abstract")
        else:
            if data.title_store is None:
                raise ValueError(f"{mode.kind} mode needs a news-embedding store")
            if mode.kind == "llm":
                dim = data.title_store.shape[1]
                if dim % cfg.llm_last_tokens != 0:
                    raise DimMismatch(
                        f"store dim {dim} not divisible by last-token count "
                        f"{cfg.llm_last_tokens}")

    def _add_fc(self, name, d_in, rng):
        self.graph.add(f"fc.{name}.weight", xavier_uniform((d_in, self.cfg.news_dim), rng))
        self.graph.add(f"fc.{name}.bias", np.zeros(self.cfg.news_dim))

    def _add_attention(self, name, d_in, rng):
        self.graph.add(f"{name}.proj", xavier_uniform((d_in, self.cfg.attn_query_dim), rng))
        self.graph.add(f"{name}.query", xavier_uniform((self.cfg.attn_query_dim, 1), rng)[:, 0])

    def _add_mhsa(self, name, d, rng):
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            self.graph.add(f"{name}.{w}", xavier_uniform((d, d), rng))
            self.graph.add(f"{name}.{b}", np.zeros(d))

    def _add_conv(self, name, d_in, rng):
        k = self.cfg.conv_width
        self.graph.add(f"{name}.filters",
                       xavier_uniform((k * d_in, self.cfg.news_dim), rng)
                       .reshape(k, d_in, self.cfg.news_dim))
        self.graph.add(f"{name}.bias", np.zeros(self.cfg.news_dim))

    # -- helpers --------------------------------------------------------

    def _drop(self, t, train, rng):
        if train and self.cfg.dropout > 0:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            return ad.dropout(t, self.cfg.dropout, rng)
        return t

    def _store_dim(self, store):
        return store.shape[1]

    def _text_vec_store(self, rows_idx, store, fc_name, train, rng):
        vecs = Tensor(store[np.asarray(rows_idx)])
        vecs = self._drop(vecs, train, rng)
        return dense(vecs, self.graph[f"fc.{fc_name}.weight"],
                     self.graph[f"fc.{fc_name}.bias"])

    def _plm_cls_vec(self, rows_idx, sequences, fc_name, train, rng):
        ids, mask = sequences
        ids, mask = ids[rows_idx], mask[rows_idx]
        hidden = transformer_encode(ids, mask, self.graph, "lm.plm.", self.tf_cfg)
        cls = ad.select(hidden, 1, 0)
        cls = self._drop(cls, train, rng)
        return dense(cls, self.graph[f"fc.{fc_name}.weight"],
                     self.graph[f"fc.{fc_name}.bias"])

    def _conv_attn_view(self, rows_idx, ids, mask, conv_name, attn_name, train, rng):
        tok = ad.rows(self.word_table, ids[rows_idx])
        feats = ad.relu(ad.conv1d_same(tok, self.graph[f"{conv_name}.filters"],
                                       self.graph[f"{conv_name}.bias"]))
        return _attention_pool(self, attn_name, feats, mask[rows_idx], train, rng)

    # -- public API -----------------------------------------------------

    def news_vectors(self, rows_idx, train=False, rng=None):
        raise NotImplementedError

    def user_vectors(self, history_vecs, history_mask, user_rows, train=False, rng=None):
        raise NotImplementedError

    def encode_news_matrix(self, rows_idx, batch_size=512):
        """Evaluation helper: news vectors as a plain array, no graph."""
        rows_idx = np.asarray(rows_idx)
        out = np.zeros((len(rows_idx), self.cfg.news_dim))
        with ad.no_grad():
            for start in range(0, len(rows_idx), batch_size):
                chunk = rows_idx[start:start + batch_size]
                out[start:start + len(chunk)] = self.news_vectors(chunk).data
        return out


class NrmsModel(_ModelBase):
    """Title self-attention news encoder; self-attention user encoder."""

    arch = "nrms"

    def _build_arch(self, rng):
        cfg, mode = self.cfg, self.mode
        if mode.kind == "slm":
            if cfg.word_dim % cfg.title_heads:
                raise ShapeMismatch(
                    f"word dim {cfg.word_dim} not divisible by {cfg.title_heads} heads")
            self._add_mhsa("arch.title_mhsa", cfg.word_dim, rng)
            self._add_attention("arch.title_attn", cfg.word_dim, rng)
            self._add_fc("news", cfg.word_dim, rng)
        elif mode.kind == "plm":
            if cfg.nrms_plm_self_attention:
                self._add_mhsa("arch.title_mhsa", cfg.plm_dim, rng)
                self._add_attention("arch.title_attn", cfg.plm_dim, rng)
            self._add_fc("news", cfg.plm_dim, rng)
        else:
            self._add_fc("news", self._store_dim(self.data.title_store), rng)
        self._add_mhsa("arch.user_mhsa", cfg.news_dim, rng)
        self._add_attention("arch.user_attn", cfg.news_dim, rng)

    def news_vectors(self, rows_idx, train=False, rng=None):
        rows_idx = np.asarray(rows_idx)
        cat = self.data.catalog
        if self.mode.kind == "slm":
            ids = cat.title_ids[rows_idx]
            mask = cat.title_mask[rows_idx]
            tok = ad.rows(self.word_table, ids)
            attended = _mhsa(self, "arch.title_mhsa", tok, mask, self.cfg.title_heads)
            attended = self._drop(attended, train, rng)
            pooled = _attention_pool(self, "arch.title_attn", attended, mask, train, rng)
            return dense(pooled, self.graph["fc.news.weight"], self.graph["fc.news.bias"])
        if self.mode.kind == "plm":
            if not self.cfg.nrms_plm_self_attention:
                return self._plm_cls_vec(rows_idx, self.plm_title, "news", train, rng)
            ids, mask = self.plm_title
            ids, mask = ids[rows_idx], mask[rows_idx]
            hidden = transformer_encode(ids, mask, self.graph, "lm.plm.", self.tf_cfg)
            attended = _mhsa(self, "arch.title_mhsa", hidden, mask, self.cfg.plm_heads)
            attended = self._drop(attended, train, rng)
            pooled = _attention_pool(self, "arch.title_attn", attended, mask, train, rng)
            return dense(pooled, self.graph["fc.news.weight"], self.graph["fc.news.bias"])
        return self._text_vec_store(rows_idx, self.data.title_store, "news", train, rng)

    def user_vectors(self, history_vecs, history_mask, user_rows=None,
                     train=False, rng=None):
        attended = _mhsa(self, "arch.user_mhsa", history_vecs, history_mask,
                         self.cfg.user_heads)
        attended = self._drop(attended, train, rng)
        return _attention_pool(self, "arch.user_attn", attended, history_mask,
                               train, rng)


class NamlModel(_ModelBase):
    """Title+abstract views fused by view-level attention; attention user
    encoder."""

    arch = "naml"

    def _build_arch(self, rng):
        cfg, mode = self.cfg, self.mode
        if mode.kind == "slm":
            for view in ("title", "abstract"):
                self._add_conv(f"arch.{view}_conv", cfg.word_dim, rng)
                self._add_attention(f"arch.{view}_attn", cfg.news_dim, rng)
        elif mode.kind == "plm":
            self._add_fc("title", cfg.plm_dim, rng)
            self._add_fc("abstract", cfg.plm_dim, rng)
        else:
            self._add_fc("title", self._store_dim(self.data.title_store), rng)
            if self.data.abstract_store is not None:
                self._add_fc("abstract", self._store_dim(self.data.abstract_store), rng)
        self._add_attention("arch.view_attn", cfg.news_dim, rng)
        self._add_attention("arch.user_attn", cfg.news_dim, rng)

    def _view_vectors(self, rows_idx, train, rng):
        """Per-view vectors (n, d) plus per-article view availability."""
        cat = self.data.catalog
        views, masks = [], []
        if self.mode.kind == "slm":
            views.append(self._conv_attn_view(
                rows_idx, cat.title_ids, cat.title_mask,
                "arch.title_conv", "arch.title_attn", train, rng))
            masks.append(cat.title_mask[rows_idx].any(axis=1))
            views.append(self._conv_attn_view(
                rows_idx, cat.abstract_ids, cat.abstract_mask,
                "arch.abstract_conv", "arch.abstract_attn", train, rng))
            masks.append(cat.abstract_mask[rows_idx].any(axis=1))
        elif self.mode.kind == "plm":
            views.append(self._plm_cls_vec(rows_idx, self.plm_title, "title", train, rng))
            masks.append(cat.title_mask[rows_idx].any(axis=1))
            views.append(self._plm_cls_vec(rows_idx, self.plm_abstract, "abstract",
                                           train, rng))
            masks.append(cat.abstract_mask[rows_idx].any(axis=1))
        else:
            views.append(self._text_vec_store(rows_idx, self.data.title_store,
                                              "title", train, rng))
            masks.append(cat.title_mask[rows_idx].any(axis=1))
            if self.data.abstract_store is not None:
                views.append(self._text_vec_store(rows_idx, self.data.abstract_store,
                                                  "abstract", train, rng))
                masks.append(cat.abstract_mask[rows_idx].any(axis=1))
        return views, masks

    def news_vectors(self, rows_idx, train=False, rng=None):
        rows_idx = np.asarray(rows_idx)
        views, masks = self._view_vectors(rows_idx, train, rng)
        if len(views) == 1:
            return views[0]
        n = len(rows_idx)
        stacked = ad.concat([ad.reshape(v, (n, 1, self.cfg.news_dim)) for v in views],
                            axis=1)                          # (n, views, d)
        view_mask = np.stack(masks, axis=1)
        _, fused = additive_attention(
            stacked, self.graph["arch.view_attn.proj"],
            self.graph["arch.view_attn.query"], mask=view_mask, allow_empty=True)
        return fused

    def user_vectors(self, history_vecs, history_mask, user_rows=None,
                     train=False, rng=None):
        return _attention_pool(self, "arch.user_attn", history_vecs, history_mask,
                               train, rng)


class LsturModel(_ModelBase):
    """Title+category news encoder; GRU user encoder seeded with a
    per-user long-term embedding."""

    arch = "lstur"

    def _build_arch(self, rng):
        cfg, mode = self.cfg, self.mode
        cat = self.data.catalog
        if mode.kind == "slm":
            self._add_conv("arch.title_conv", cfg.word_dim, rng)
            self._add_attention("arch.title_attn", cfg.news_dim, rng)
        elif mode.kind == "plm":
            self._add_fc("title", cfg.plm_dim, rng)
        else:
            self._add_fc("title", self._store_dim(self.data.title_store), rng)
        def zero_row0(matrix):
            matrix[0] = 0.0
            return matrix

        self.graph.add("arch.category_table",
                       zero_row0(layers.small_uniform(
                           (cat.num_categories, cfg.category_dim), rng)),
                       pinned_rows=(0,))
        self.graph.add("arch.subcategory_table",
                       zero_row0(layers.small_uniform(
                           (cat.num_subcategories, cfg.category_dim), rng)),
                       pinned_rows=(0,))
        self._add_fc("news", cfg.news_dim + 2 * cfg.category_dim, rng)
        # row 0 is the shared cold-user slot: zero, never updated
        self.graph.add("user.table",
                       zero_row0(layers.small_uniform(
                           (self.data.num_users, cfg.news_dim), rng)),
                       pinned_rows=(0,))
        add_gru_params(self.graph, "arch.user_gru.", cfg.news_dim, cfg.news_dim, rng)

    def news_vectors(self, rows_idx, train=False, rng=None):
        rows_idx = np.asarray(rows_idx)
        cat = self.data.catalog
        if self.mode.kind == "slm":
            title = self._conv_attn_view(rows_idx, cat.title_ids, cat.title_mask,
                                         "arch.title_conv", "arch.title_attn",
                                         train, rng)
        elif self.mode.kind == "plm":
            title = self._plm_cls_vec(rows_idx, self.plm_title, "title", train, rng)
        else:
            title = self._text_vec_store(rows_idx, self.data.title_store,
                                         "title", train, rng)
        cats = ad.rows(self.graph["arch.category_table"], cat.category[rows_idx])
        subcats = ad.rows(self.graph["arch.subcategory_table"],
                          cat.subcategory[rows_idx])
        joined = ad.concat([title, cats, subcats], axis=1)
        return dense(joined, self.graph["fc.news.weight"], self.graph["fc.news.bias"])

    def user_vectors(self, history_vecs, history_mask, user_rows, train=False, rng=None):
        if user_rows is None:
            raise ValueError("lstur user encoding needs user rows")
        h = ad.rows(self.graph["user.table"], np.asarray(user_rows))
        steps = history_vecs.data.shape[1]
        for t in range(steps):
            x = ad.select(history_vecs, 1, t)
            nxt = gru_step(x, h, self.graph, "arch.user_gru.")
            m = Tensor(history_mask[:, t:t + 1].astype(np.float64))
            h = ad.add(ad.mul(m, nxt), ad.mul(Tensor(1.0) - m, h))
        return h


_MODEL_CLASSES = {"naml": NamlModel, "nrms": NrmsModel, "lstur": LsturModel}


def build_model(arch, mode, cfg, data, rng):
    if arch not in _MODEL_CLASSES:
        raise ValueError(f"unknown architecture {arch!r}; pick from {ARCHITECTURES}")
    if isinstance(mode, str):
        mode = LmMode.parse(mode)
    if mode.kind == "llm" and data.title_store is None:
        raise ValueError("llm mode needs a news-embedding store")
    return _MODEL_CLASSES[arch](mode, cfg, data, rng)
