"""Scoring, the sampled-softmax objective, and the training loop.

All run randomness flows from the single config seed: initialization,
per-epoch negative sampling, shuffling, and dropout each draw from a
stream keyed (seed, purpose, epoch), so a run resumed from an
epoch-boundary checkpoint replays the exact trajectory.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import ShapeMismatch, Tensor
from .corpus import (TokenizedCatalog, build_vocabulary, parse_behaviors,
                     parse_news, sample_negatives)
from .embeddings import (aligned_store_matrix, load_static_table, prompt_hash,
                         random_static_table, read_interchange,
                         validate_store_tag)
from .encoders import ARCHITECTURES, EncoderConfig, EncoderData, LmMode, build_model
from .evaluation import evaluate_scores
from .layers import Adam


class NonFiniteScore(ValueError):
    pass


class NoTrainingData(ValueError):
    pass


@dataclass
class RunConfig:
    architecture: str = "nrms"
    lm_mode: str = "slm"
    negatives: int = 4
    dropout: float = 0.2
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0
    max_title: int = 20
    max_abstract: int = 50
    max_history: int = 50
    min_word_count: int = 2
    validation_fraction: float = 0.1
    static_vectors: str = ""
    news_embeddings: str = ""
    news_embeddings_abstract: str = ""
    plm_weights: str = ""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        LmMode.parse(self.lm_mode)
        if not 1 <= self.negatives <= 4:
            raise ValueError("negatives outside the searched range {1,2,3,4}")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError("dropout outside [0, 0.5]")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("bad batch size / epochs / patience")

    def to_flat_dict(self):
        out = {}
        for f in fields(self):
            if f.name == "encoder":
                for ef, val in asdict(self.encoder).items():
                    out[f"encoder.{ef}"] = val
            else:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat_dict(cls, flat):
        enc_kwargs, kwargs = {}, {}
        enc_fields = {f.name: f.type for f in fields(EncoderConfig)}
        own_fields = {f.name for f in fields(cls)} - {"encoder"}
        for key, val in flat.items():
            if key.startswith("encoder."):
                name = key.split(".", 1)[1]
                if name not in enc_fields:
                    raise ValueError(f"unknown encoder option {name!r}")
                enc_kwargs[name] = val
            elif key in own_fields:
                kwargs[key] = val
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(encoder=EncoderConfig(**enc_kwargs), **kwargs)


# ---------------------------------------------------------------------------
# click scoring and loss

def score_click(user_vec, news_vec):
    """Dot-product click score for one pair of plain vectors."""
    user_vec = np.asarray(user_vec, dtype=np.float64)
    news_vec = np.asarray(news_vec, dtype=np.float64)
    if user_vec.shape != news_vec.shape:
        raise ShapeMismatch(f"{user_vec.shape} vs {news_vec.shape}")
    return float(math.fsum(user_vec * news_vec))


def loss_nll(pos_score, neg_scores):
    """Sampled-softmax negative log-likelihood for one positive against its
    sampled negatives, computed with max subtraction."""
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if neg_scores.ndim != 1 or neg_scores.size < 1:
        raise ShapeMismatch("neg_scores must be a non-empty vector")
    all_scores = np.concatenate([[pos_score], neg_scores])
    if not np.isfinite(all_scores).all():
        raise NonFiniteScore(str(all_scores))
    m = all_scores.max()
    return float(np.log(np.exp(all_scores - m).sum()) - (pos_score - m))


def batch_softmax_loss(scores):
    """Mean NLL over a (batch, 1+K) score Tensor, positives in column 0."""
    if not np.isfinite(scores.data).all():
        raise NonFiniteScore("non-finite score in batch")
    m = Tensor(scores.data.max(axis=1, keepdims=True))
    shifted = ad.sub(scores, m)
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=1))
    return ad.tmean(ad.sub(lse, ad.select(shifted, 1, 0)))


# ---------------------------------------------------------------------------
# dataset plumbing

@dataclass
class DatasetBundle:
    catalog: TokenizedCatalog
    train_impressions: list
    val_impressions: list
    test_impressions: list
    user_index: dict
    train_catalog_size: int = 0


def build_user_index(impressions):
    """Train-time users to table rows; row 0 is the shared cold row."""
    index = {}
    for imp in impressions:
        if imp.user_id not in index:
            index[imp.user_id] = len(index) + 1
    return index


def split_by_time(impressions, validation_fraction):
    ordered = sorted(range(len(impressions)),
                     key=lambda i: (impressions[i].timestamp, i))
    n_val = int(len(impressions) * validation_fraction)
    train_idx = ordered[:len(ordered) - n_val] if n_val else ordered
    val_idx = ordered[len(ordered) - n_val:] if n_val else []
    return ([impressions[i] for i in train_idx],
            [impressions[i] for i in val_idx])


def load_dataset(data_dir, config) -> DatasetBundle:
    """Read MIND-layout train/dev directories into one bundle.

    Vocabulary comes from the train catalog only; the tokenized catalog is
    the union so dev-only articles are still encodable.
    """
    data_dir = Path(data_dir)
    train_dir, dev_dir = data_dir / "train", data_dir / "dev"
    for d in (train_dir, dev_dir):
        if not (d / "news.tsv").exists() or not (d / "behaviors.tsv").exists():
            raise FileNotFoundError(f"missing news.tsv/behaviors.tsv under {d}")
    with open(train_dir / "news.tsv", encoding="utf-8") as f:
        train_catalog = parse_news(f)
    with open(dev_dir / "news.tsv", encoding="utf-8") as f:
        dev_catalog = parse_news(f)
    with open(train_dir / "behaviors.tsv", encoding="utf-8") as f:
        train_imps = parse_behaviors(f)
    with open(dev_dir / "behaviors.tsv", encoding="utf-8") as f:
        test_imps = parse_behaviors(f)
    vocab = build_vocabulary(train_catalog, config.min_word_count)
    train_size = len(train_catalog)
    train_catalog.merge(dev_catalog)
    catalog = TokenizedCatalog(train_catalog, vocab,
                               config.max_title, config.max_abstract)
    train_imps, val_imps = split_by_time(train_imps, config.validation_fraction)
    return DatasetBundle(
        catalog=catalog, train_impressions=train_imps, val_impressions=val_imps,
        test_impressions=test_imps, user_index=build_user_index(train_imps),
        train_catalog_size=train_size)


def build_encoder_data(config, bundle, rng) -> EncoderData:
    mode = LmMode.parse(config.lm_mode)
    catalog = bundle.catalog
    data = EncoderData(catalog=catalog, num_users=len(bundle.user_index) + 1)
    if mode.kind == "slm":
        if config.static_vectors:
            with open(config.static_vectors, encoding="utf-8") as f:
                table = load_static_table(f, catalog.vocab,
                                          trainable=mode.finetune, rng=rng)
        else:
            table = random_static_table(catalog.vocab, config.encoder.word_dim,
                                        rng, trainable=mode.finetune)
        if table.matrix.shape[1] != config.encoder.word_dim:
            config.encoder.word_dim = table.matrix.shape[1]
        data.static_matrix = table.matrix
        data.static_trainable = mode.finetune
    elif mode.kind == "plm":
        if config.plm_weights:
            raw = container.load_tensors(config.plm_weights)
            data.plm_weights = {k: v for k, v in raw.items()
                                if not k.startswith("config.")}
    else:
        if not config.news_embeddings:
            raise FileNotFoundError(f"{mode.kind} mode needs --news-embeddings")
        store = read_interchange(config.news_embeddings)
        if mode.kind == "llm":
            validate_store_tag(store, expect_pooling="last-l",
                               expect_prompt_hash=prompt_hash())
        else:
            validate_store_tag(store, expect_pooling="cls")
        data.title_store = aligned_store_matrix(store, catalog.news_ids)
        if config.news_embeddings_abstract:
            abs_store = read_interchange(config.news_embeddings_abstract)
            data.abstract_store = aligned_store_matrix(abs_store, catalog.news_ids)
    return data


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    hist_rows: np.ndarray    # (B, H) catalog rows, 0 where padded
    hist_mask: np.ndarray    # (B, H)
    cand_rows: np.ndarray    # (B, 1+K), positive first
    user_rows: np.ndarray    # (B,)


def make_samples(impressions, k, rng):
    """One training sample per positive, negatives drawn per impression."""
    samples = []
    for imp in impressions:
        positives = imp.positives()
        if not positives or not imp.negatives():
            continue
        for pos in positives:
            samples.append(sample_negatives(imp, pos, k, rng))
    return samples


def assemble_batch(samples, catalog, user_index, max_history) -> Batch:
    B = len(samples)
    H = max_history
    hist_rows = np.zeros((B, H), dtype=np.int64)
    hist_mask = np.zeros((B, H), dtype=bool)
    cand_rows = np.zeros((B, 1 + len(samples[0].negatives)), dtype=np.int64)
    user_rows = np.zeros(B, dtype=np.int64)
    for i, s in enumerate(samples):
        hist_rows[i], hist_mask[i] = catalog.history_rows(s.history, H)
        cand_rows[i, 0] = catalog.row_of(s.positive)
        cand_rows[i, 1:] = catalog.rows_of(s.negatives)
        user_rows[i] = user_index.get(s.user_id, 0)
    return Batch(hist_rows, hist_mask, cand_rows, user_rows)


def forward_batch(model, batch, train, rng):
    """Scores (B, 1+K) for one batch; articles deduped within the step."""
    B, H = batch.hist_rows.shape
    C = batch.cand_rows.shape[1]
    all_rows = np.concatenate([batch.hist_rows.ravel(), batch.cand_rows.ravel()])
    uniq, inverse = np.unique(all_rows, return_inverse=True)
    news = model.news_vectors(uniq, train=train, rng=rng)
    gathered = ad.rows(news, inverse)
    d = model.cfg.news_dim
    hist = ad.reshape(ad.rows(gathered, np.arange(B * H)), (B, H, d))
    cand = ad.reshape(ad.rows(gathered, np.arange(B * H, B * (H + C))), (B, C, d))
    users = model.user_vectors(hist, batch.hist_mask, batch.user_rows,
                               train=train, rng=rng)
    users_b = ad.reshape(users, (B, 1, d))
    return ad.tsum(ad.mul(users_b, cand), axis=2)


def train_step(model, optimizer, batch, rng):
    """Forward, loss, backward, update. Returns the pre-update loss."""
    model.graph.zero_grad()
    scores = forward_batch(model, batch, train=True, rng=rng)
    loss = batch_softmax_loss(scores)
    ad.backward(loss)
    optimizer.step()
    return loss.item()


# ---------------------------------------------------------------------------
# prediction

def predict_impressions(model, catalog, impressions, user_index, max_history,
                        user_batch=256):
    """Scores for every candidate of every impression (no sampling),
    dropout off. Returns {impression_id: [scores in candidate order]}."""
    needed = set()
    for imp in impressions:
        needed.update(imp.history[-max_history:])
        needed.update(nid for nid, _ in imp.candidates)
    rows_idx = np.array(sorted(catalog.row_of(nid) for nid in needed), dtype=np.int64)
    news_matrix = np.zeros((len(catalog), model.cfg.news_dim))
    if len(rows_idx):
        news_matrix[rows_idx] = model.encode_news_matrix(rows_idx)

    out = {}
    with ad.no_grad():
        for start in range(0, len(impressions), user_batch):
            chunk = impressions[start:start + user_batch]
            B = len(chunk)
            hist_rows = np.zeros((B, max_history), dtype=np.int64)
            hist_mask = np.zeros((B, max_history), dtype=bool)
            user_rows = np.zeros(B, dtype=np.int64)
            for i, imp in enumerate(chunk):
                hist_rows[i], hist_mask[i] = catalog.history_rows(imp.history, max_history)
                user_rows[i] = user_index.get(imp.user_id, 0)
            hist_vecs = Tensor(news_matrix[hist_rows])
            users = model.user_vectors(hist_vecs, hist_mask, user_rows).data
            for i, imp in enumerate(chunk):
                cand = news_matrix[catalog.rows_of([n for n, _ in imp.candidates])]
                out[imp.impression_id] = list(cand @ users[i])
    return out


def scored_for_eval(predictions, impressions):
    for imp in impressions:
        yield (imp.impression_id, predictions[imp.impression_id],
               [lab for _, lab in imp.candidates])


# ---------------------------------------------------------------------------
# the training loop

@dataclass
class TrainResult:
    model: object
    best_epoch: int
    best_val_auc: float
    history: list           # (epoch, mean loss, val auc)
    checkpoint_dir: str = ""


def _stream(seed, purpose, epoch=0):
    return np.random.default_rng([seed, purpose, epoch])


def _epoch_pass(model, optimizer, bundle, config, epoch):
    sample_rng = _stream(config.seed, 1, epoch)
    shuffle_rng = _stream(config.seed, 2, epoch)
    dropout_rng = _stream(config.seed, 3, epoch)
    samples = make_samples(bundle.train_impressions, config.negatives, sample_rng)
    if not samples:
        raise NoTrainingData("no impression yields a (positive, negatives) sample")
    order = shuffle_rng.permutation(len(samples))
    losses = []
    for start in range(0, len(order), config.batch_size):
        chunk = [samples[i] for i in order[start:start + config.batch_size]]
        batch = assemble_batch(chunk, bundle.catalog, bundle.user_index,
                               config.max_history)
        losses.append(train_step(model, optimizer, batch, dropout_rng))
    return math.fsum(losses) / len(losses)


def _validation_auc(model, bundle, config):
    if not bundle.val_impressions:
        return float("nan")
    preds = predict_impressions(model, bundle.catalog, bundle.val_impressions,
                                bundle.user_index, config.max_history)
    report = evaluate_scores(scored_for_eval(preds, bundle.val_impressions),
                             keep_per_impression=False)
    return report.auc


def train_run(config, bundle, out_dir=None, resume=False, log=None) -> TrainResult:
    """Epoch loop with per-epoch validation AUC and patience-based early
    stopping; returns the model restored to its best checkpoint."""
    if not bundle.train_impressions:
        raise NoTrainingData("empty training split")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    init_rng = _stream(config.seed, 0)
    data = build_encoder_data(config, bundle, init_rng)
    model = build_model(config.architecture, config.lm_mode, config.encoder,
                        data, init_rng)
    optimizer = Adam(model.graph, lr=config.learning_rate)

    start_epoch = 0
    best_auc = -np.inf
    best_epoch = -1
    history = []
    state_path = out_dir / "state.json" if out_dir else None
    if resume and state_path and state_path.exists():
        state = json.loads(state_path.read_text())
        model.graph.load_state_dict(container.load_tensors(out_dir / "params_last.ntc"))
        optimizer.load_state_dict(container.load_tensors(out_dir / "adam_last.ntc"))
        start_epoch = state["epoch"] + 1
        best_auc = state["best_val_auc"]
        best_epoch = state["best_epoch"]
        history = [tuple(h) for h in state["history"]]

    best_params = model.graph.state_dict()
    if out_dir and (out_dir / "params_best.ntc").exists() and resume:
        best_params = container.load_tensors(out_dir / "params_best.ntc")

    for epoch in range(start_epoch, config.max_epochs):
        mean_loss = _epoch_pass(model, optimizer, bundle, config, epoch)
        val_auc = _validation_auc(model, bundle, config)
        history.append((epoch, mean_loss, val_auc))
        if log:
            log(f"epoch {epoch}  loss {mean_loss:.4f}  val_auc {val_auc:.2f}")
        improved = math.isnan(val_auc) or val_auc > best_auc
        if improved:
            best_auc = val_auc
            best_epoch = epoch
            best_params = model.graph.state_dict()
        if out_dir:
            container.save_tensors(out_dir / "params_last.ntc", model.graph.state_dict())
            container.save_tensors(out_dir / "adam_last.ntc", optimizer.state_dict())
            container.save_tensors(out_dir / "params_best.ntc", best_params)
            state_path.write_text(json.dumps({
                "epoch": epoch, "best_epoch": best_epoch,
                "best_val_auc": best_auc, "history": history}))
        if epoch - best_epoch >= config.patience:
            break

    model.graph.load_state_dict(best_params)
    return TrainResult(model=model, best_epoch=best_epoch,
                       best_val_auc=float(best_auc), history=history,
                       checkpoint_dir=str(out_dir) if out_dir else "")
