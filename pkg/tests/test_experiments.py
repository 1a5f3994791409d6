import pytest

from linkrank.embedder import HashBackend
from linkrank.experiments import (
    ExperimentError,
    embed_corpus,
    identity_heads,
    query_results,
    run_ablation_no_layout,
    run_full,
    run_leave_one_out,
)
from linkrank.trainer import TrainConfig

from ablation_fixture import layout_only_corpus, split, text_only_corpus

FAST = TrainConfig(max_epochs=3, patience=1)


def test_layout_only_fixture_direction():
    corpus = layout_only_corpus()
    full, stripped = run_ablation_no_layout(corpus, split(corpus), HashBackend(256), train_model=False)
    assert full.report.overall["mrr"] == 1.0
    assert stripped.report.overall["mrr"] < full.report.overall["mrr"]
    assert all(r.produced_with_layout for r in full.rankings.values())
    assert not any(r.produced_with_layout for r in stripped.rankings.values())


def test_text_only_fixture_equal():
    corpus = text_only_corpus()
    full, stripped = run_ablation_no_layout(corpus, split(corpus), HashBackend(256), train_model=False)
    assert full.report.overall["mrr"] == pytest.approx(stripped.report.overall["mrr"], abs=1e-9)


def test_stripped_embedding_marks_layout():
    pubs = embed_corpus(text_only_corpus()[:2], HashBackend(64), layout=False)
    assert not any(p.layout_included for p in pubs)


def test_self_link_removed_from_ranking_and_labels():
    corpus = text_only_corpus()[:1]
    rp = corpus[0]
    label, rep = rp.candidates[4]
    rp.candidates.append((type(label)(label.publication_id, rp.publication.landing_url, True, "self"), rep))
    [pub] = embed_corpus(corpus, HashBackend(64))
    results, rankings = query_results([pub], identity_heads(64))
    assert rp.publication.landing_url not in rankings[pub.publication_id].urls
    assert rp.publication.landing_url not in results[0].relevant_urls


def test_run_full_trains_and_reports_test_split():
    corpus = text_only_corpus()
    parts = split(corpus)
    result = run_full(embed_corpus(corpus, HashBackend(128)), parts, FAST)
    assert set(result.report.per_query) == set(parts.test)
    assert result.log is not None and result.log.best_epoch >= 1


def test_leave_one_out_provenance():
    corpus = text_only_corpus()
    embedded = embed_corpus(corpus, HashBackend(128))
    loo = run_leave_one_out(embedded, split(corpus), FAST)
    assert sorted(loo.folds) == ["north", "south", "west"]
    for held_out, ids in loo.provenance.items():
        assert ids and not any(i.startswith(held_out) for i in ids)
        assert len(loo.folds[held_out].report.per_query) == 10
    assert set(loo.to_json()) == {"per_publisher", "average", "training_provenance", "best_epochs"}


def test_leave_one_out_two_publishers():
    corpus = [rp for rp in text_only_corpus() if rp.publication.publisher != "west"]
    loo = run_leave_one_out(embed_corpus(corpus, HashBackend(64)), split(corpus), FAST)
    assert len(loo.folds) == 2


def test_leave_one_out_needs_two_publishers():
    corpus = [rp for rp in text_only_corpus() if rp.publication.publisher == "west"]
    with pytest.raises(ExperimentError):
        run_leave_one_out(embed_corpus(corpus, HashBackend(64)), split(corpus), FAST)
