"""Acceptance suite. One test per criterion; each prints a PASS line when
it survives its assertions. Dataset-dependent criteria skip unless
NEWSREC_DATA_ROOT points at a MIND-small train/dev layout.

Run with: pytest tests/test_acceptance.py -v -s
"""

import dataclasses
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from newsrec import autodiff as ad
from newsrec import layers
from newsrec.autodiff import Tensor
from newsrec.corpus import (TokenizedCatalog, build_vocabulary, corpus_stats,
                            parse_behaviors, parse_news)
from newsrec.embeddings import (PrecomputedStore, aligned_store_matrix,
                                read_interchange, write_interchange)
from newsrec.encoders import (EncoderConfig, EncoderData, build_model,
                              cls_news_vec, slm_concat_news_vec,
                              stored_news_vec)
from newsrec.evaluation import (bucket_users, count_params, evaluate_scores,
                                metric_auc, metric_mrr, metric_ndcg)
from newsrec.layers import (ParamGraph, TransformerConfig,
                            add_transformer_params, finite_diff_check)
from newsrec.synthetic import SyntheticSpec, generate
from newsrec.training import (DatasetBundle, RunConfig, batch_softmax_loss,
                              build_user_index, forward_batch, loss_nll,
                              make_samples, predict_impressions,
                              scored_for_eval, split_by_time, train_run)
from newsrec.training import assemble_batch

DATA_ROOT = os.environ.get("NEWSREC_DATA_ROOT", "")
GLOVE_PATH = os.environ.get("NEWSREC_GLOVE", "")


def _mind_present():
    if not DATA_ROOT:
        return False
    root = Path(DATA_ROOT)
    return (root / "train" / "behaviors.tsv").exists() and \
        (root / "dev" / "behaviors.tsv").exists()


needs_mind = pytest.mark.skipif(
    not _mind_present(), reason="MIND-small not present (set NEWSREC_DATA_ROOT)")


def ok(name):
    print(f"\nACCEPTANCE {name}: PASS")


# -------------------------------------------------------------------------
# shared synthetic fixtures

def small_encoder(**kw):
    base = dict(news_dim=32, word_dim=16, attn_query_dim=16, title_heads=2,
                user_heads=2, conv_width=3, category_dim=8, dropout=0.2,
                plm_layers=2, plm_dim=16, plm_heads=2, plm_ff_dim=32,
                llm_last_tokens=2)
    base.update(kw)
    return EncoderConfig(**base)


def bundle_from_spec(spec, max_title=12, max_abstract=18):
    news, train_b, test_b, _, user_topics = generate(spec)
    catalog = parse_news(news)
    vocab = build_vocabulary(catalog)
    tok = TokenizedCatalog(catalog, vocab, max_title, max_abstract)
    train_imps = parse_behaviors(train_b)
    train_imps, val_imps = split_by_time(train_imps, 0.1)
    return DatasetBundle(tok, train_imps, val_imps, parse_behaviors(test_b),
                         build_user_index(train_imps)), user_topics


@pytest.fixture(scope="module")
def full_synthetic():
    return bundle_from_spec(SyntheticSpec())


def held_out_auc(model, bundle, max_history):
    preds = predict_impressions(model, bundle.catalog, bundle.test_impressions,
                                bundle.user_index, max_history)
    report = evaluate_scores(scored_for_eval(preds, bundle.test_impressions),
                             keep_per_impression=False)
    return report.auc / 100.0


# -------------------------------------------------------------------------
# criterion: metric oracle equivalence

def auc_pairwise_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def mrr_brute_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    rr = [1.0 / (r + 1) for r, i in enumerate(order) if labels[i] == 1]
    return math.fsum(rr) / len(rr)


def ndcg_brute_oracle(scores, labels, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    dcg = math.fsum((2.0 ** labels[i] - 1) / math.log2(r + 2)
                    for r, i in enumerate(order[:k]))
    ideal = sorted(range(len(scores)), key=lambda i: -labels[i])
    idcg = math.fsum((2.0 ** labels[i] - 1) / math.log2(r + 2)
                     for r, i in enumerate(ideal[:k]))
    return dcg / idcg


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.time()
    random_ranker_aucs = []
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = np.zeros(n, dtype=int)
        n_pos = int(rng.integers(1, n))
        labels[rng.choice(n, size=n_pos, replace=False)] = 1
        if labels.all():
            labels[rng.integers(n)] = 0
        scores = np.round(rng.normal(size=n), 2)  # coarse grid induces ties
        assert metric_auc(scores, labels) == auc_pairwise_oracle(scores, labels)
        assert abs(metric_mrr(scores, labels) -
                   mrr_brute_oracle(scores, labels)) <= 1e-12
        for k in (5, 10):
            assert abs(metric_ndcg(scores, labels, k) -
                       ndcg_brute_oracle(scores, list(labels), k)) <= 1e-12
        random_ranker_aucs.append(metric_auc(rng.normal(size=n), labels))
    elapsed = time.time() - start
    assert elapsed < 10.0, f"metric oracle sweep took {elapsed:.1f}s"
    # a random ranker over many impressions sits at chance level
    assert abs(100.0 * np.mean(random_ranker_aucs) - 50.0) < 1.5
    ok("metric oracle equivalence (1000 impressions, "
       f"{elapsed:.1f}s)")


# -------------------------------------------------------------------------
# criterion: loss properties

def test_loss_properties():
    for k in (1, 2, 3, 4):
        assert abs(loss_nll(1.3, [1.3] * k) - math.log(k + 1)) <= 1e-12
    # saturation: positive 20 above the best negative
    assert loss_nll(21.0, [1.0, 0.5, -0.2, 1.0]) < 1e-8
    # monotone decreasing in the positive score, nonnegative everywhere
    negs = [0.3, -0.1, 0.7, 0.2]
    values = [loss_nll(p, negs) for p in np.linspace(-4, 4, 33)]
    assert all(b < a for a, b in zip(values, values[1:]))
    assert all(v >= 0.0 for v in values)
    # batch form agrees with the scalar form
    rng = np.random.default_rng(7)
    scores = rng.normal(size=(16, 5))
    batch = batch_softmax_loss(Tensor(scores)).item()
    ref = math.fsum(loss_nll(s[0], s[1:]) for s in scores) / 16
    assert abs(batch - ref) <= 1e-12
    ok("loss properties (uniform = ln(K+1), saturation, monotonicity)")


# -------------------------------------------------------------------------
# criterion: gradient suite

def _tiny_catalog():
    lines = [
        "N1\tsports\tgolf\talpha beta gamma delta\tlong abstract text here",
        "N2\tnews\tworld\tepsilon zeta\tanother body of words",
        "N3\tsports\tsoccer\teta theta iota\tshort words",
        "N4\tfinance\tstocks\tkappa lam mu\tmore abstract words again",
        "N5\ttravel\tair\tnu xi omicron pi\tfinal piece of text",
    ]
    cat = parse_news(lines)
    vocab = build_vocabulary(cat)
    return TokenizedCatalog(cat, vocab, max_title=6, max_abstract=6)


def _seeded_store(catalog, dim, seed, tmp_path, name):
    """Random NRE1 store written and read back through the engine's own
    interchange code (the acceptance substitute for sidecar exports)."""
    rng = np.random.default_rng(seed)
    vectors = {nid: rng.normal(size=dim).astype(np.float32).astype(np.float64)
               for nid in catalog.news_ids[1:]}
    path = tmp_path / f"{name}.nre1"
    write_interchange(PrecomputedStore(vectors, dim=dim), path)
    return aligned_store_matrix(read_interchange(path), catalog.news_ids)


def _encoder_data(catalog, mode, rng, tmp_path):
    data = EncoderData(catalog=catalog, num_users=4)
    if mode.startswith("slm"):
        data.static_matrix = np.zeros((len(catalog.vocab), 8))
        data.static_matrix[1:] = rng.uniform(-0.1, 0.1,
                                             size=(len(catalog.vocab) - 1, 8))
        data.static_trainable = mode == "slm"
    elif mode in ("plm-frozen", "llm"):
        data.title_store = _seeded_store(catalog, 4, 11, tmp_path, f"t-{mode}")
        data.abstract_store = _seeded_store(catalog, 4, 12, tmp_path, f"a-{mode}")
    return data


GRAD_MODES = ["slm", "slm-frozen", "plm:1", "plm-frozen", "llm"]


def test_gradient_suite(tmp_path):
    start = time.time()
    catalog = _tiny_catalog()
    cfg = small_encoder(news_dim=8, word_dim=8, attn_query_dim=6,
                        category_dim=4, dropout=0.0, llm_last_tokens=2)
    worst = {}

    # the three generic LM-vector operations
    rng = np.random.default_rng(0)
    g = ParamGraph()
    table = g.add("table", rng.normal(size=(10, 4)) * 0.3)
    w1 = g.add("w1", rng.normal(size=(12, 5)) * 0.3)
    b1 = g.add("b1", np.zeros(5))
    ids = np.array([[3, 7, 2], [1, 4, 9]])
    worst["concat-words"] = finite_diff_check(
        g, lambda: ad.tsum(ad.tanh(slm_concat_news_vec(ids, table, w1, b1))), rng=rng)

    tf_cfg = TransformerConfig(vocab_size=16, num_layers=2, hidden_size=8,
                               num_heads=2, ff_size=16, max_positions=8)
    g2 = ParamGraph()
    add_transformer_params(g2, "t.", tf_cfg, rng)
    fw = g2.add("fc.w", rng.normal(size=(8, 4)) * 0.3)
    fb = g2.add("fc.b", np.zeros(4))
    pids = np.array([[2, 5, 6, 3], [2, 8, 9, 3]])
    pmask = np.ones((2, 4), dtype=bool)
    worst["cls-token"] = finite_diff_check(
        g2, lambda: ad.tsum(ad.tanh(cls_news_vec(pids, pmask, g2, "t.", tf_cfg, fw, fb))),
        rng=rng, coords_per_param=2)

    g3 = ParamGraph()
    store = rng.normal(size=(5, 6))
    w3 = g3.add("w", rng.normal(size=(6, 4)) * 0.3)
    b3 = g3.add("b", np.zeros(4))
    worst["stored-vector"] = finite_diff_check(
        g3, lambda: ad.tsum(ad.tanh(stored_news_vec(store, [1, 3], w3, b3))), rng=rng)

    # the six architecture encoders (news + user per architecture), plus the
    # full forward + sampled-softmax loss, for every mode
    imps = parse_behaviors([
        "1\tU1\t11/15/2019 8:00:00 AM\tN1 N2\tN3-1 N4-0 N5-0",
        "2\tU2\t11/15/2019 9:00:00 AM\tN3\tN1-0 N2-1 N4-0",
    ])
    user_index = {"U1": 1, "U2": 2}
    for arch in ("naml", "nrms", "lstur"):
        for mode in GRAD_MODES:
            rng_m = np.random.default_rng(42)
            data = _encoder_data(catalog, mode, rng_m, tmp_path)
            model = build_model(arch, mode, cfg, data, rng_m)
            samples = make_samples(imps, 2, np.random.default_rng(1))
            batch = assemble_batch(samples, catalog, user_index, max_history=3)

            def loss_fn():
                return batch_softmax_loss(forward_batch(model, batch,
                                                        train=False, rng=None))

            err = finite_diff_check(model.graph, loss_fn,
                                    rng=np.random.default_rng(2),
                                    coords_per_param=2)
            worst[f"{arch}/{mode}"] = err

    elapsed = time.time() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    assert not bad, f"gradient failures: {bad}"
    assert elapsed < 300.0, f"gradient suite took {elapsed:.0f}s"
    ok(f"gradient suite (max rel err {max(worst.values()):.2e} over "
       f"{len(worst)} checks, {elapsed:.0f}s)")


# -------------------------------------------------------------------------
# criterion: freeze accounting

def test_freeze_accounting():
    catalog = _tiny_catalog()
    cfg = small_encoder(plm_layers=4, plm_dim=16, plm_heads=2, plm_ff_dim=32,
                        news_dim=8, attn_query_dim=6)
    d, ff = cfg.plm_dim, cfg.plm_ff_dim
    dn, da = cfg.news_dim, cfg.attn_query_dim

    block = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
    fc = d * dn + dn
    user_mhsa = 4 * (dn * dn + dn)
    user_attn = dn * da + da
    head = fc + user_mhsa + user_attn

    counts = []
    for k in range(5):
        rng = np.random.default_rng(0)
        data = EncoderData(catalog=catalog, num_users=4)
        model = build_model("nrms", f"plm:{k}", cfg, data, rng)
        acc = count_params(model.graph)
        counts.append(acc.trainable)
        assert acc.trainable == head + k * block, f"k={k}"
        assert acc.total == acc.trainable + (
            sum(i.tensor.data.size for _, i in model.graph.items()
                if not i.trainable))
    assert counts == sorted(counts)
    # depth 0: the trainable set is exactly the projection head + downstream
    rng = np.random.default_rng(0)
    model0 = build_model("nrms", "plm:0", cfg,
                         EncoderData(catalog=catalog, num_users=4), rng)
    trainable_names = {n for n, _ in model0.graph.trainable_items()}
    assert all(not n.startswith("lm.") for n in trainable_names)
    assert {"fc.news.weight", "fc.news.bias"} <= trainable_names
    ok("freeze accounting (k=0..4 trainable counts match analytic formulas)")


# -------------------------------------------------------------------------
# criterion: synthetic end-to-end learnability

@pytest.mark.slow
def test_synthetic_learnability(full_synthetic):
    bundle, _ = full_synthetic
    start = time.time()
    base = RunConfig(architecture="nrms", lm_mode="slm", negatives=4,
                     dropout=0.2, learning_rate=1e-3, batch_size=32,
                     max_epochs=10, patience=2, seed=1, max_title=12,
                     max_abstract=18, max_history=12, encoder=small_encoder())
    aucs = {}
    for arch in ("naml", "nrms", "lstur"):
        cfg = dataclasses.replace(base, architecture=arch)
        result = train_run(cfg, bundle)
        aucs[arch] = held_out_auc(result.model, bundle, cfg.max_history)
        assert aucs[arch] >= 0.90, f"{arch} reached only {aucs[arch]:.3f}"

    frozen_cfg = dataclasses.replace(base, lm_mode="slm-frozen")
    frozen = train_run(frozen_cfg, bundle)
    frozen_auc = held_out_auc(frozen.model, bundle, base.max_history)
    assert frozen_auc <= 0.75, f"frozen baseline reached {frozen_auc:.3f}"

    elapsed = time.time() - start
    assert elapsed < 600.0, f"learnability runs took {elapsed:.0f}s"
    summary = ", ".join(f"{a}={v:.3f}" for a, v in aucs.items())
    ok(f"synthetic learnability ({summary}; frozen baseline "
       f"{frozen_auc:.3f}; {elapsed:.0f}s)")


# -------------------------------------------------------------------------
# criterion: determinism

@pytest.mark.slow
def test_determinism(full_synthetic, tmp_path):
    bundle, _ = full_synthetic
    cfg = RunConfig(architecture="nrms", lm_mode="slm", negatives=4,
                    dropout=0.3, learning_rate=1e-3, batch_size=32,
                    max_epochs=2, patience=2, seed=123, max_title=12,
                    max_abstract=18, max_history=12, encoder=small_encoder())

    def one(tag):
        out = tmp_path / tag
        result = train_run(cfg, bundle, out_dir=out)
        preds = predict_impressions(result.model, bundle.catalog,
                                    bundle.test_impressions, bundle.user_index,
                                    cfg.max_history)
        report = evaluate_scores(scored_for_eval(preds, bundle.test_impressions),
                                 keep_per_impression=False)
        return (out / "params_best.ntc").read_bytes(), report.render(), result.history

    ckpt_a, report_a, hist_a = one("a")
    ckpt_b, report_b, hist_b = one("b")
    assert ckpt_a == ckpt_b, "checkpoints differ bitwise"
    assert report_a == report_b, "metric reports differ"
    assert hist_a == hist_b
    ok("determinism (identical seeds -> bitwise-identical checkpoints and reports)")


# -------------------------------------------------------------------------
# criterion: cold-start pipeline

def test_cold_start_partition_synthetic(full_synthetic):
    bundle, _ = full_synthetic
    partition = bucket_users(bundle.test_impressions)
    users = {imp.user_id for imp in bundle.test_impressions}
    flat = [u for g in partition.groups for u in g]
    assert sorted(flat) == sorted(users)
    assert len(flat) == len(set(flat))
    sizes = [len(g) for g in partition.groups]
    assert sum(sizes) == len(users)
    assert max(sizes) - min(sizes) <= 1
    assert partition.mean_history_lengths == sorted(partition.mean_history_lengths)
    ok("cold-start pipeline (synthetic users partition exactly into quintiles)")


@needs_mind
def test_cold_start_quintiles_mind():
    with open(Path(DATA_ROOT) / "dev" / "behaviors.tsv", encoding="utf-8") as f:
        imps = parse_behaviors(f)
    partition = bucket_users(imps)
    expected = [4.01, 9.27, 16.57, 29.60, 48.58]
    for got, want in zip(partition.mean_history_lengths, expected):
        assert abs(got - want) / want <= 0.05, (got, want)
    ok("cold-start pipeline (MIND quintile means within 5%)")


@needs_mind
def test_random_ranker_sits_at_chance_on_mind():
    rng = np.random.default_rng(0)
    with open(Path(DATA_ROOT) / "dev" / "behaviors.tsv", encoding="utf-8") as f:
        imps = parse_behaviors(f)
    scored = ((imp.impression_id, rng.normal(size=len(imp.candidates)),
               [lab for _, lab in imp.candidates]) for imp in imps)
    report = evaluate_scores(scored, keep_per_impression=False)
    assert abs(report.auc - 50.0) <= 0.5
    ok(f"random ranker at chance on MIND dev (AUC {report.auc:.2f})")


# -------------------------------------------------------------------------
# criterion: dataset statistics (MIND-small)

@needs_mind
def test_dataset_statistics_mind():
    root = Path(DATA_ROOT)
    with open(root / "train" / "news.tsv", encoding="utf-8") as f:
        train_catalog = parse_news(f)
    with open(root / "dev" / "news.tsv", encoding="utf-8") as f:
        dev_catalog = parse_news(f)
    with open(root / "train" / "behaviors.tsv", encoding="utf-8") as f:
        train_imps = parse_behaviors(f)
    with open(root / "dev" / "behaviors.tsv", encoding="utf-8") as f:
        dev_imps = parse_behaviors(f)

    split_stats = corpus_stats(train_catalog, [], test_catalog=dev_catalog)
    union = train_catalog
    union.merge(dev_catalog)
    stats = corpus_stats(union, train_imps + dev_imps)
    assert stats.user_count == 94_057
    assert stats.news_count == 65_238
    assert stats.positive_clicks == 347_727
    assert stats.negative_clicks == 8_236_715
    assert abs(stats.mean_title_words - 11.79) <= 0.01
    assert abs(stats.mean_abstract_words - 38.17) <= 0.01
    assert abs(split_stats.unseen_news_fraction - 0.329) <= 0.005
    ok("dataset statistics (MIND-small counts, means, unseen fraction)")


# -------------------------------------------------------------------------
# criterion: comparison smoke reproduction (dataset-dependent)

@pytest.mark.skipif(not (_mind_present() and GLOVE_PATH),
                    reason="needs MIND-small and NEWSREC_GLOVE vectors")
@pytest.mark.slow
def test_table_smoke_naml_static_vectors(tmp_path):
    from newsrec.training import load_dataset
    cfg = RunConfig(architecture="naml", lm_mode="slm", negatives=4,
                    dropout=0.2, learning_rate=1e-4, batch_size=32,
                    max_epochs=6, patience=2, seed=0,
                    static_vectors=GLOVE_PATH,
                    encoder=EncoderConfig(news_dim=256, word_dim=300,
                                          attn_query_dim=200, dropout=0.2))
    bundle = load_dataset(DATA_ROOT, cfg)
    result = train_run(cfg, bundle, out_dir=tmp_path / "mind-naml")
    auc = 100.0 * held_out_auc(result.model, bundle, cfg.max_history)
    assert abs(auc - 66.29) <= 2.0, f"test AUC {auc:.2f}"
    ok(f"comparison smoke (NAML static-vector run, AUC {auc:.2f})")
