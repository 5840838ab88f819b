"""Synthetic MIND-format corpus where clicks are fully determined by a
latent topic match between user and article.

Each topic owns a large private word pool; titles mix topic words with
shared filler. Click histories contain the user's topic, each impression
pairs one on-topic positive with off-topic negatives. Category labels are
random noise so category embeddings cannot shortcut the text pathway.
With a large pool and a small embedding width a frozen random word table
cannot be decoded by the downstream layers, while trainable embeddings
separate the topics easily; that gap is what the learnability acceptance
criterion measures.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SyntheticSpec:
    num_topics: int = 5
    num_articles: int = 2000
    num_impressions: int = 5000
    num_users: int = 600
    words_per_topic: int = 250
    shared_words: int = 100
    title_topic_words: int = 8
    title_shared_words: int = 4
    abstract_topic_words: int = 12
    abstract_shared_words: int = 6
    negatives_per_impression: int = 4
    history_min: int = 2
    history_max: int = 12
    num_categories: int = 6
    num_subcategories: int = 12
    test_fraction: float = 0.1
    seed: int = 0


def _word(pool, i):
    return f"{pool}{i:04d}"


def generate(spec: SyntheticSpec):
    """Returns (news_lines, train_behavior_lines, test_behavior_lines,
    article_topics, user_topics)."""
    rng = np.random.default_rng(spec.seed)
    topic_pools = [[_word(f"t{t}w", i) for i in range(spec.words_per_topic)]
                   for t in range(spec.num_topics)]
    shared_pool = [_word("common", i) for i in range(spec.shared_words)]

    news_lines = []
    article_topics = {}
    articles_by_topic = [[] for _ in range(spec.num_topics)]
    for a in range(spec.num_articles):
        topic = int(rng.integers(spec.num_topics))
        nid = f"S{a:05d}"
        article_topics[nid] = topic
        articles_by_topic[topic].append(nid)

        def draw(pool, k):
            return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]

        title = draw(topic_pools[topic], spec.title_topic_words) + \
            draw(shared_pool, spec.title_shared_words)
        rng.shuffle(title)
        abstract = draw(topic_pools[topic], spec.abstract_topic_words) + \
            draw(shared_pool, spec.abstract_shared_words)
        rng.shuffle(abstract)
        cat = f"cat{rng.integers(spec.num_categories)}"
        subcat = f"sub{rng.integers(spec.num_subcategories)}"
        news_lines.append("\t".join([nid, cat, subcat, " ".join(title),
                                     " ".join(abstract)]))

    user_topics = {f"V{u:04d}": int(rng.integers(spec.num_topics))
                   for u in range(spec.num_users)}
    user_ids = list(user_topics)

    behavior_lines = []
    minute = 0
    for i in range(spec.num_impressions):
        uid = user_ids[int(rng.integers(len(user_ids)))]
        topic = user_topics[uid]
        own = articles_by_topic[topic]
        h = int(rng.integers(spec.history_min, spec.history_max + 1))
        history = [own[j] for j in
                   rng.choice(len(own), size=h, replace=len(own) < h)]
        positive = own[int(rng.integers(len(own)))]
        negatives = []
        while len(negatives) < spec.negatives_per_impression:
            other = int(rng.integers(spec.num_topics))
            if other == topic:
                continue
            pool = articles_by_topic[other]
            negatives.append(pool[int(rng.integers(len(pool)))])
        candidates = [(positive, 1)] + [(n, 0) for n in negatives]
        order = rng.permutation(len(candidates))
        cand_str = " ".join(f"{candidates[j][0]}-{candidates[j][1]}" for j in order)
        day, rem = divmod(minute, 24 * 60)
        hour, mn = divmod(rem, 60)
        hour12 = hour % 12 or 12
        ampm = "AM" if hour < 12 else "PM"
        ts = f"11/{9 + day % 6:02d}/2019 {hour12}:{mn:02d}:00 {ampm}"
        minute += 1
        behavior_lines.append("\t".join(
            [str(i + 1), uid, ts, " ".join(history), cand_str]))

    n_test = int(spec.num_impressions * spec.test_fraction)
    return (news_lines, behavior_lines[:-n_test], behavior_lines[-n_test:],
            article_topics, user_topics)


def write_mind_layout(out_dir, spec: SyntheticSpec):
    """Materialize the corpus as train/ and dev/ MIND directories."""
    out_dir = Path(out_dir)
    news, train_b, test_b, _, _ = generate(spec)
    for split, behaviors in (("train", train_b), ("dev", test_b)):
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        (d / "news.tsv").write_text("\n".join(news) + "\n", encoding="utf-8")
        (d / "behaviors.tsv").write_text("\n".join(behaviors) + "\n", encoding="utf-8")
    return out_dir
