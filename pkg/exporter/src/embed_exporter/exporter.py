"""Embedding export jobs over pretrained transformer checkpoints.

Two pooling modes:
  cls     the hidden state at sequence position 0 (encoder-style models)
  last-l  the concatenated final hidden states of the last l tokens of the
          prompted text (dim = l * hidden size)

last-l wraps the news text in the fixed fill-in-the-blank prompt below;
its SHA-256 lands in the store tag so a consumer can reject stores built
with a tampered prompt.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .formats import write_embedding_store, write_tensor_container

PROMPT_TEMPLATE = "This news: [{news}] means in one word:"
# generous char budget per article; keeps the prompt suffix clear of any
# tokenizer-side truncation at desk scale
MAX_NEWS_CHARS = 2000


def prompt_hash(template=PROMPT_TEMPLATE):
    return hashlib.sha256(template.encode("utf-8")).hexdigest()


class CheckpointUnavailable(RuntimeError):
    pass


class TokenizerMismatch(RuntimeError):
    pass


class SequenceTooShort(ValueError):
    pass


class UnsupportedArchitecture(RuntimeError):
    pass


def parse_news_tsv(path):
    """MIND news.tsv: id, category, subcategory, title, abstract, [extras].
    Returns [(news_id, title, abstract)] in file order."""
    out = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 5:
                raise ValueError(f"{path}:{line_no}: expected >=5 fields")
            nid = fields[0]
            if nid in seen:
                raise ValueError(f"{path}:{line_no}: duplicate id {nid}")
            seen.add(nid)
            out.append((nid, fields[3], fields[4]))
    return out


@dataclass
class ExportJob:
    model_id: str                 # HF id or local checkpoint directory
    pooling: str                  # "cls" | "last-l"
    news_path: str
    output_path: str
    last_tokens: int = 10
    text_field: str = "title"     # "title" | "abstract"
    prompt_template: str = PROMPT_TEMPLATE
    batch_size: int = 16

    def __post_init__(self):
        if self.pooling not in ("cls", "last-l"):
            raise ValueError(f"pooling must be cls or last-l, not {self.pooling!r}")
        if self.text_field not in ("title", "abstract"):
            raise ValueError(f"text_field must be title or abstract")
        if self.last_tokens < 1:
            raise ValueError("last-token count must be >= 1")


def _load(model_id):
    from transformers import AutoModel, AutoTokenizer
    try:
        model = AutoModel.from_pretrained(model_id)
        tokenizer = AutoTokenizer.from_pretrained(model_id)
    except Exception as e:
        raise CheckpointUnavailable(f"{model_id}: {e}") from e
    embed = model.get_input_embeddings()
    if embed is not None and tokenizer.vocab_size > embed.weight.shape[0]:
        raise TokenizerMismatch(
            f"tokenizer vocab {tokenizer.vocab_size} exceeds embedding rows "
            f"{embed.weight.shape[0]}")
    model.eval()
    return model, tokenizer


def _article_text(article, field):
    nid, title, abstract = article
    text = title if field == "title" else abstract
    return text[:MAX_NEWS_CHARS]


def export_cls(job: ExportJob):
    """Position-0 hidden state for each article, written as an NRE1 store."""
    model, tokenizer = _load(job.model_id)
    articles = parse_news_tsv(job.news_path)
    vectors = {}
    with torch.no_grad():
        for start in range(0, len(articles), job.batch_size):
            chunk = articles[start:start + job.batch_size]
            texts = [_article_text(a, job.text_field) for a in chunk]
            enc = tokenizer(texts, return_tensors="pt", padding=True,
                            truncation=True)
            hidden = model(**enc).last_hidden_state
            for (nid, _, _), vec in zip(chunk, hidden[:, 0, :]):
                vectors[nid] = vec.numpy().astype(np.float32)
    dim = model.config.hidden_size
    tag = {"model": str(job.model_id), "pooling": "cls",
           "field": job.text_field}
    write_embedding_store(job.output_path, vectors, dim, tag=tag)
    return vectors


def export_last_l(job: ExportJob):
    """Concatenated final hidden states of the last l prompted tokens."""
    model, tokenizer = _load(job.model_id)
    articles = parse_news_tsv(job.news_path)
    l = job.last_tokens
    vectors = {}
    with torch.no_grad():
        for nid_title_abs in articles:
            nid = nid_title_abs[0]
            text = job.prompt_template.format(
                news=_article_text(nid_title_abs, job.text_field))
            enc = tokenizer(text, return_tensors="pt", truncation=True)
            n_tokens = enc["input_ids"].shape[1]
            if n_tokens < l:
                raise SequenceTooShort(
                    f"{nid}: {n_tokens} tokens after prompting, need {l}")
            hidden = model(**enc).last_hidden_state[0]
            vectors[nid] = hidden[-l:].reshape(-1).numpy().astype(np.float32)
    dim = l * model.config.hidden_size
    tag = {"model": str(job.model_id), "pooling": "last-l", "l": l,
           "field": job.text_field,
           "prompt_sha256": prompt_hash(job.prompt_template)}
    write_embedding_store(job.output_path, vectors, dim, tag=tag)
    return vectors


def run_export(job: ExportJob):
    return export_cls(job) if job.pooling == "cls" else export_last_l(job)


# ---------------------------------------------------------------------------
# transformer weight export

# HF BERT parameter name -> container name; Linear weights are transposed
# from torch's (out, in) to the container's (in, out).
_EMBEDDING_MAP = {
    "embeddings.word_embeddings.weight": "embeddings.word",
    "embeddings.position_embeddings.weight": "embeddings.position",
    "embeddings.token_type_embeddings.weight": "embeddings.token_type",
    "embeddings.LayerNorm.weight": "embeddings.norm.gain",
    "embeddings.LayerNorm.bias": "embeddings.norm.bias",
}

_BLOCK_MAP = {
    "attention.self.query.weight": ("attn.query.weight", True),
    "attention.self.query.bias": ("attn.query.bias", False),
    "attention.self.key.weight": ("attn.key.weight", True),
    "attention.self.key.bias": ("attn.key.bias", False),
    "attention.self.value.weight": ("attn.value.weight", True),
    "attention.self.value.bias": ("attn.value.bias", False),
    "attention.output.dense.weight": ("attn.output.weight", True),
    "attention.output.dense.bias": ("attn.output.bias", False),
    "attention.output.LayerNorm.weight": ("attn.norm.gain", False),
    "attention.output.LayerNorm.bias": ("attn.norm.bias", False),
    "intermediate.dense.weight": ("ffn.inner.weight", True),
    "intermediate.dense.bias": ("ffn.inner.bias", False),
    "output.dense.weight": ("ffn.output.weight", True),
    "output.dense.bias": ("ffn.output.bias", False),
    "output.LayerNorm.weight": ("ffn.norm.gain", False),
    "output.LayerNorm.bias": ("ffn.norm.bias", False),
}


def export_mini_transformer(model_id, depth, output_path):
    """Write the bottom ``depth`` encoder blocks (plus embeddings and stack
    geometry) into the named-tensor container. depth=0 exports embeddings
    only."""
    model, _ = _load(model_id)
    cfg = model.config
    num_layers = getattr(cfg, "num_hidden_layers", None)
    if num_layers is None:
        raise UnsupportedArchitecture(f"{model_id}: no encoder layer stack")
    if depth > num_layers:
        raise UnsupportedArchitecture(
            f"{model_id}: depth {depth} exceeds model depth {num_layers}")
    params = dict(model.named_parameters())
    for key in _EMBEDDING_MAP:
        if key not in params:
            raise UnsupportedArchitecture(f"{model_id}: missing {key}")

    out = {
        "config.vocab_size": np.array(float(cfg.vocab_size)),
        "config.num_layers": np.array(float(depth)),
        "config.hidden_size": np.array(float(cfg.hidden_size)),
        "config.num_heads": np.array(float(cfg.num_attention_heads)),
        "config.ff_size": np.array(float(cfg.intermediate_size)),
        "config.max_positions": np.array(float(cfg.max_position_embeddings)),
        "config.layer_norm_eps": np.array(float(cfg.layer_norm_eps)),
    }
    with torch.no_grad():
        for src, dst in _EMBEDDING_MAP.items():
            out[dst] = params[src].detach().numpy().astype(np.float64)
        for i in range(depth):
            for src, (dst, transpose) in _BLOCK_MAP.items():
                full = f"encoder.layer.{i}.{src}"
                if full not in params:
                    raise UnsupportedArchitecture(f"{model_id}: missing {full}")
                arr = params[full].detach().numpy().astype(np.float64)
                out[f"block{i}.{dst}"] = arr.T if transpose else arr
    write_tensor_container(output_path, out)
    return out
