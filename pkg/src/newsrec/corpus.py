"""MIND-format parsing, vocabularies, tokenization, and training samples.

news.tsv lines carry at least five tab-separated fields (id, category,
subcategory, title, abstract; extra fields such as url/entities are
ignored). behaviors.tsv lines carry impression id, user id, timestamp,
space-separated click history, and space-separated "newsid-label"
candidates.
"""

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_WORD = "<pad>"
UNK_WORD = "<unk>"

TIME_FORMAT = "%m/%d/%Y %I:%M:%S %p"

# lowercase words (apostrophes kept) plus single punctuation marks,
# mirroring static-vector vocabularies
_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


class MalformedLine(ValueError):
    def __init__(self, line_no, detail=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {detail}" if detail else f"line {line_no}")


class DuplicateId(ValueError):
    def __init__(self, news_id):
        self.news_id = news_id
        super().__init__(f"duplicate news id {news_id}")


class MalformedLabel(ValueError):
    pass


class NoNegativesAvailable(ValueError):
    pass


def tokenize(text):
    return _TOKEN_RE.findall(text.lower())


@dataclass
class NewsArticle:
    news_id: str
    category: str
    subcategory: str
    raw_title: str
    raw_abstract: str
    category_id: int = -1
    subcategory_id: int = -1
    title_words: list = field(default_factory=list)
    abstract_words: list = field(default_factory=list)
    title_tokens: np.ndarray | None = None
    abstract_tokens: np.ndarray | None = None


@dataclass
class Impression:
    impression_id: str
    user_id: str
    raw_time: str
    timestamp: datetime
    history: list
    candidates: list  # (news_id, label) pairs

    def positives(self):
        return [nid for nid, lab in self.candidates if lab == 1]

    def negatives(self):
        return [nid for nid, lab in self.candidates if lab == 0]


def serialize_behaviors_line(imp):
    cands = " ".join(f"{nid}-{lab}" for nid, lab in imp.candidates)
    return "\t".join([imp.impression_id, imp.user_id, imp.raw_time,
                      " ".join(imp.history), cands])


@dataclass
class TrainingSample:
    user_id: str
    history: list          # news ids, chronological, already truncated
    positive: str
    negatives: list        # length K


class Vocabulary:
    """word<->id maps with reserved pad (0) and unknown (1) slots."""

    def __init__(self, words):
        self._word_to_id = {PAD_WORD: PAD_ID, UNK_WORD: UNK_ID}
        self._id_to_word = [PAD_WORD, UNK_WORD]
        for w in words:
            if w in self._word_to_id:
                raise ValueError(f"duplicate vocabulary word {w!r}")
            self._word_to_id[w] = len(self._id_to_word)
            self._id_to_word.append(w)

    def __len__(self):
        return len(self._id_to_word)

    def __contains__(self, word):
        return word in self._word_to_id

    def id_of(self, word):
        return self._word_to_id.get(word, UNK_ID)

    def word_of(self, idx):
        return self._id_to_word[idx]

    def words(self):
        """Non-reserved words in id order."""
        return self._id_to_word[2:]


class NewsCatalog:
    """Parsed articles with interned category ids, keyed by news id."""

    def __init__(self):
        self.articles: dict[str, NewsArticle] = {}
        self.categories: dict[str, int] = {}
        self.subcategories: dict[str, int] = {}

    def __len__(self):
        return len(self.articles)

    def __contains__(self, news_id):
        return news_id in self.articles

    def __getitem__(self, news_id):
        return self.articles[news_id]

    def add(self, article):
        if article.news_id in self.articles:
            raise DuplicateId(article.news_id)
        article.category_id = self.categories.setdefault(
            article.category, len(self.categories))
        article.subcategory_id = self.subcategories.setdefault(
            article.subcategory, len(self.subcategories))
        self.articles[article.news_id] = article

    def merge(self, other):
        """Add articles from another catalog, skipping ids already present."""
        for article in other.articles.values():
            if article.news_id not in self.articles:
                self.add(NewsArticle(
                    news_id=article.news_id, category=article.category,
                    subcategory=article.subcategory, raw_title=article.raw_title,
                    raw_abstract=article.raw_abstract,
                    title_words=list(article.title_words),
                    abstract_words=list(article.abstract_words)))


def parse_news(stream) -> NewsCatalog:
    catalog = NewsCatalog()
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) < 5:
            raise MalformedLine(line_no, f"expected >=5 fields, got {len(fields)}")
        news_id, category, subcategory, title, abstract = fields[:5]
        catalog.add(NewsArticle(
            news_id=news_id, category=category, subcategory=subcategory,
            raw_title=title, raw_abstract=abstract,
            title_words=tokenize(title), abstract_words=tokenize(abstract)))
    return catalog


def parse_behaviors(stream) -> list:
    impressions = []
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise MalformedLine(line_no, f"expected 5 fields, got {len(fields)}")
        imp_id, user_id, raw_time, history_field, cand_field = fields
        try:
            ts = datetime.strptime(raw_time, TIME_FORMAT)
        except ValueError as e:
            raise MalformedLine(line_no, f"bad timestamp {raw_time!r}") from e
        history = history_field.split(" ") if history_field else []
        cand_tokens = cand_field.split(" ") if cand_field else []
        if not cand_tokens:
            raise MalformedLine(line_no, "impression with no candidates")
        candidates = []
        for tok in cand_tokens:
            nid, sep, label = tok.rpartition("-")
            if not sep or label not in ("0", "1"):
                raise MalformedLabel(f"line {line_no}: candidate {tok!r}")
            candidates.append((nid, int(label)))
        impressions.append(Impression(imp_id, user_id, raw_time, ts, history, candidates))
    return impressions


def build_vocabulary(catalog, min_count=1) -> Vocabulary:
    """Frequency-filtered vocabulary, ordered by count desc then word asc."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for article in catalog.articles.values():
        counts.update(article.title_words)
        counts.update(article.abstract_words)
    kept = [w for w, c in counts.items() if c >= min_count]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(kept)


def encode_text(words, vocab, max_len) -> np.ndarray:
    """Map words to ids, truncate to max_len, right-pad with the pad id."""
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    ids = [vocab.id_of(w) for w in words[:max_len]]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return np.array(ids, dtype=np.int32)


def sample_negatives(imp, positive, k, rng) -> TrainingSample:
    """Draw K negatives from the impression's non-clicked candidates.

    Without replacement when enough exist, otherwise with replacement so
    every impression keeps a rectangular sample.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = dict(imp.candidates)
    if labels.get(positive) != 1:
        raise ValueError(f"{positive} is not a positive candidate of {imp.impression_id}")
    pool = imp.negatives()
    if not pool:
        raise NoNegativesAvailable(imp.impression_id)
    replace = len(pool) < k
    chosen = rng.choice(len(pool), size=k, replace=replace)
    return TrainingSample(
        user_id=imp.user_id,
        history=list(imp.history),
        positive=positive,
        negatives=[pool[i] for i in chosen])


def truncate_history(history, max_history):
    """Keep the most recent clicks; pad slots sit on the older (front) side."""
    recent = history[-max_history:]
    return [None] * (max_history - len(recent)) + list(recent)


@dataclass
class CorpusStats:
    user_count: int
    news_count: int
    mean_title_words: float
    mean_abstract_words: float
    positive_clicks: int
    negative_clicks: int
    unseen_news_fraction: float | None = None

    def render(self):
        lines = [
            f"users                 {self.user_count}",
            f"news                  {self.news_count}",
            f"mean title words      {self.mean_title_words:.2f}",
            f"mean abstract words   {self.mean_abstract_words:.2f}",
            f"positive clicks       {self.positive_clicks}",
            f"negative clicks       {self.negative_clicks}",
        ]
        if self.unseen_news_fraction is not None:
            lines.append(f"unseen news fraction  {self.unseen_news_fraction:.3f}")
        return "\n".join(lines)


def corpus_stats(catalog, impressions, test_catalog=None) -> CorpusStats:
    """Summary counts; pass the held-out catalog to get the fraction of its
    articles never seen in this one."""
    users = {imp.user_id for imp in impressions}
    pos = sum(len(imp.positives()) for imp in impressions)
    neg = sum(len(imp.negatives()) for imp in impressions)
    n = len(catalog)
    title_mean = (math.fsum(len(a.title_words) for a in catalog.articles.values()) / n
                  if n else 0.0)
    abs_mean = (math.fsum(len(a.abstract_words) for a in catalog.articles.values()) / n
                if n else 0.0)
    unseen = None
    if test_catalog is not None and len(test_catalog):
        unseen = sum(1 for nid in test_catalog.articles if nid not in catalog)
        unseen /= len(test_catalog)
    return CorpusStats(len(users), n, title_mean, abs_mean, pos, neg, unseen)


# ---------------------------------------------------------------------------
# id-space view used by the models

class TokenizedCatalog:
    """Catalog flattened to dense arrays, one row per article.

    Row 0 is a reserved pad article (all pad tokens, category 0) so that
    history buffers can point somewhere harmless.
    """

    def __init__(self, catalog, vocab, max_title, max_abstract):
        self.vocab = vocab
        self.max_title = max_title
        self.max_abstract = max_abstract
        ids = list(catalog.articles)
        self.index = {nid: i + 1 for i, nid in enumerate(ids)}
        self.news_ids = ["<pad-news>"] + ids
        n = len(ids) + 1
        self.title_ids = np.zeros((n, max_title), dtype=np.int32)
        self.title_mask = np.zeros((n, max_title), dtype=bool)
        self.abstract_ids = np.zeros((n, max_abstract), dtype=np.int32)
        self.abstract_mask = np.zeros((n, max_abstract), dtype=bool)
        self.category = np.zeros(n, dtype=np.int32)
        self.subcategory = np.zeros(n, dtype=np.int32)
        for nid, article in catalog.articles.items():
            row = self.index[nid]
            t = encode_text(article.title_words, vocab, max_title)
            a = encode_text(article.abstract_words, vocab, max_abstract)
            article.title_tokens = t
            article.abstract_tokens = a
            self.title_ids[row] = t
            self.title_mask[row] = np.arange(max_title) < min(len(article.title_words), max_title)
            self.abstract_ids[row] = a
            self.abstract_mask[row] = np.arange(max_abstract) < min(
                len(article.abstract_words), max_abstract)
            self.category[row] = article.category_id + 1   # 0 reserved for pad
            self.subcategory[row] = article.subcategory_id + 1
        self.num_categories = len(catalog.categories) + 1
        self.num_subcategories = len(catalog.subcategories) + 1

    def __len__(self):
        return len(self.news_ids)

    def row_of(self, news_id):
        return self.index[news_id]

    def rows_of(self, news_ids):
        return np.array([self.index[nid] for nid in news_ids], dtype=np.int64)

    def history_rows(self, history, max_history):
        """(max_history,) row indices plus mask, pads on the older side."""
        slots = truncate_history(history, max_history)
        rows = np.array([0 if s is None else self.index[s] for s in slots], dtype=np.int64)
        mask = np.array([s is not None for s in slots], dtype=bool)
        return rows, mask

    # PLM tokenization: word-level ids shifted up to make room for the
    # transformer's own reserved slots.
    PLM_PAD, PLM_UNK, PLM_CLS, PLM_SEP = 0, 1, 2, 3
    PLM_RESERVED = 4

    def plm_vocab_size(self):
        return len(self.vocab) - 2 + self.PLM_RESERVED

    def plm_sequences(self, field="title"):
        """(n, max_len + 2) id matrix: CLS + shifted word ids + SEP + pads."""
        src = self.title_ids if field == "title" else self.abstract_ids
        src_mask = self.title_mask if field == "title" else self.abstract_mask
        n, L = src.shape
        out = np.zeros((n, L + 2), dtype=np.int32)
        mask = np.zeros((n, L + 2), dtype=bool)
        for i in range(n):
            length = int(src_mask[i].sum())
            shifted = [self._plm_id(t) for t in src[i, :length]]
            seq = [self.PLM_CLS] + shifted + [self.PLM_SEP]
            out[i, :len(seq)] = seq
            mask[i, :len(seq)] = True
        return out, mask

    def _plm_id(self, word_id):
        if word_id == PAD_ID:
            return self.PLM_PAD
        if word_id == UNK_ID:
            return self.PLM_UNK
        return int(word_id) - 2 + self.PLM_RESERVED
