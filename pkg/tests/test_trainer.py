import math
import zlib

import numpy as np
import pytest

import linkrank.trainer as trainer
from linkrank.embedder import HashBackend
from linkrank.trainer import (
    EarlyStopping,
    EmbeddedPublication,
    ProjectionHead,
    TrainConfig,
    TrainingError,
    TrainingExample,
    build_training_examples,
    example_loss_and_grads,
    info_nce_loss,
    load_heads,
    provenance,
    save_heads,
    train,
    validation_mrr,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


# -- loss -------------------------------------------------------------------------------


def test_equal_scores_give_ln_n_plus_one():
    q = unit([1, 2, 3])
    loss, *_ = info_nce_loss(q, q, np.stack([q, q, q]), 0.05)
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_hand_computed_pair():
    # s_pos = 1, s_neg = -1, tau = 1: ln(1 + e^-2)
    loss, *_ = info_nce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([[-1.0, 0.0]]), 1.0)
    assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert round(loss, 4) == 0.1269


def test_loss_positive_and_stable_at_small_tau():
    q = unit([1, 0, 0])
    loss, gq, gp, gn = info_nce_loss(q, q, np.stack([unit([-1, 0, 0])] * 3), 1e-4)
    assert 0.0 <= loss < 1e-6
    assert all(np.all(np.isfinite(g)) for g in (gq, gp, gn))


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        info_nce_loss(np.ones(2), np.ones(2), np.ones((1, 2)), 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    tau = [0.05, 0.5, 1.0][seed % 3]
    n = int(rng.integers(3, 16))
    q, pos, negs = unit(rng.standard_normal(16)), unit(rng.standard_normal(16)), rng.standard_normal((n, 16))
    negs /= np.linalg.norm(negs, axis=1, keepdims=True)
    _, gq, gp, gn = info_nce_loss(q, pos, negs, tau)
    f = lambda: info_nce_loss(q, pos, negs, tau)[0]  # noqa: E731
    assert rel_err(gq, numeric_grad(f, q)) < 1e-4
    assert rel_err(gp, numeric_grad(f, pos)) < 1e-4
    assert rel_err(gn, numeric_grad(f, negs)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_head_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    d = 6
    ex = TrainingExample(unit(rng.standard_normal(d)), unit(rng.standard_normal(d)),
                         rng.standard_normal((4, d)))
    wq = np.eye(d) + 0.3 * rng.standard_normal((d, d))
    wd = np.eye(d) + 0.3 * rng.standard_normal((d, d))
    _, gq, gd = example_loss_and_grads(ex, wq, wd, 0.5)
    f = lambda: example_loss_and_grads(ex, wq, wd, 0.5)[0]  # noqa: E731
    assert rel_err(gq, numeric_grad(f, wq)) < 1e-4
    assert rel_err(gd, numeric_grad(f, wd)) < 1e-4


# -- examples ---------------------------------------------------------------------------


def fake_pub(pid, n_rel, n_irr, publisher="p", rng=None, dim=8):
    rng = rng or np.random.default_rng(zlib.crc32(pid.encode()))
    docs = tuple((f"https://{pid}.test/{i:02d}", unit(rng.standard_normal(dim))) for i in range(n_rel + n_irr))
    return EmbeddedPublication(pid, publisher, f"https://{pid}.test/", unit(rng.standard_normal(dim)),
                               docs, frozenset(u for u, _ in docs[:n_rel]))


def test_example_counts_and_in_page_negatives():
    pub = fake_pub("a", 2, 20)
    examples = build_training_examples([pub], TrainConfig())
    assert len(examples) == 2
    assert all(len(ex.negative_vecs) == 7 and set(ex.negative_sources) == {"a"} for ex in examples)


def test_padding_from_same_publisher():
    short, other, foreign = fake_pub("a", 1, 3), fake_pub("b", 1, 10), fake_pub("c", 1, 10, publisher="q")
    [ex] = [e for e in build_training_examples([short, other, foreign]) if e.publication_id == "a"]
    assert len(ex.negative_vecs) == 7
    assert ex.negative_sources.count("a") == 3 and ex.negative_sources.count("b") == 4


def test_zero_relevant_skipped(caplog):
    assert build_training_examples([fake_pub("a", 0, 5)]) == []
    assert "no relevant" in caplog.text


def test_examples_deterministic():
    pubs = [fake_pub(f"x{i}", 3, 9) for i in range(5)]
    a = build_training_examples(pubs, TrainConfig(rng_seed=4))
    b = build_training_examples(pubs, TrainConfig(rng_seed=4))
    assert [e.negative_vecs.tobytes() for e in a] == [e.negative_vecs.tobytes() for e in b]
    assert provenance(a) == {f"x{i}" for i in range(5)}


# -- training loop -----------------------------------------------------------------------


def test_early_stopping_plateau_after_eleven():
    stopper = EarlyStopping(5)
    values = [0.5 + 0.04 * e for e in range(1, 12)] + [0.94] * 20
    stopped = next(e for e, v in enumerate(values, start=1) if stopper.update(e, v))
    assert stopped == 16 and stopper.best_epoch == 11


def test_train_returns_best_epoch_heads(monkeypatch):
    pubs = [fake_pub(f"x{i}", 2, 8) for i in range(4)]
    examples = build_training_examples(pubs)
    script = iter([0.5 + 0.04 * e for e in range(1, 12)] + [0.9] * 20)
    monkeypatch.setattr(trainer, "validation_mrr", lambda *a: next(script))
    snapshots = {}
    real_head = trainer.ProjectionHead

    def spy(weights, role):
        head = real_head(weights, role)
        snapshots.setdefault(role, []).append(head.weights.copy())
        return head

    monkeypatch.setattr(trainer, "ProjectionHead", spy)
    qh, dh, tlog = train(examples, pubs, TrainConfig(learning_rate=0.1, accumulation_steps=1))
    assert (tlog.best_epoch, tlog.stopped_epoch) == (11, 16)
    # one snapshot per epoch, then the returned pair
    assert np.array_equal(qh.weights, snapshots["query"][10])
    assert not np.array_equal(qh.weights, snapshots["query"][15])


def test_zero_learning_rate_keeps_identity():
    pubs = [fake_pub(f"x{i}", 2, 8) for i in range(4)]
    qh, dh, tlog = train(build_training_examples(pubs), pubs,
                         TrainConfig(learning_rate=0.0, max_epochs=6, patience=2))
    assert np.array_equal(qh.weights, np.eye(8)) and np.array_equal(dh.weights, np.eye(8))
    losses = [e["loss"] for e in tlog.epochs]
    assert max(losses) - min(losses) < 1e-12


def test_training_is_deterministic():
    pubs = [fake_pub(f"x{i}", 2, 8) for i in range(6)]
    cfg = TrainConfig(learning_rate=0.2, accumulation_steps=2, max_epochs=4, patience=4)
    a = train(build_training_examples(pubs, cfg), pubs[:2], cfg)
    b = train(build_training_examples(pubs, cfg), pubs[:2], cfg)
    assert a[0].weights.tobytes() == b[0].weights.tobytes()
    assert a[1].weights.tobytes() == b[1].weights.tobytes()


def test_shared_token_fixture_reaches_perfect_validation():
    be = HashBackend(dim=64)
    pubs = []
    for i in range(30):
        key = f"paper{i} topic{i} words{i}"
        docs = [(f"https://s.test/{i}/rel{j}", be.embed(f"{key} part{j}")) for j in range(2)]
        docs += [(f"https://s.test/{i}/nav{j}", be.embed(f"menu item{j} site chrome")) for j in range(8)]
        pubs.append(EmbeddedPublication(f"p{i:02d}", "s", f"https://s.test/{i}", be.embed(key),
                                        tuple(docs), frozenset(u for u, _ in docs[:2])))
    _, _, tlog = train(build_training_examples(pubs[:24]), pubs[24:], TrainConfig())
    assert max(e["val_mrr"] for e in tlog.epochs[:16]) == 1.0


def test_training_learns_a_rotation():
    """Relevant documents are a fixed permutation of the query: identity heads
    cannot find them, trained heads must."""
    rng = np.random.default_rng(0)
    d = 16
    perm = np.roll(np.eye(d), 5, axis=0)

    def make(pid):
        q = unit(rng.standard_normal(d))
        docs = [(f"https://{pid}.test/rel", unit(perm @ q + 0.05 * rng.standard_normal(d)))]
        docs += [(f"https://{pid}.test/n{j}", unit(rng.standard_normal(d))) for j in range(9)]
        return EmbeddedPublication(pid, "p", f"https://{pid}.test/", q, tuple(docs),
                                   frozenset({docs[0][0]}))

    train_pubs, val_pubs = [make(f"t{i}") for i in range(60)], [make(f"v{i}") for i in range(15)]
    ident = ProjectionHead.identity(d, "query"), ProjectionHead.identity(d, "document")
    assert validation_mrr(val_pubs, *ident) < 0.6
    cfg = TrainConfig(learning_rate=1.0, accumulation_steps=1, temperature=0.1, max_epochs=40)
    qh, dh, tlog = train(build_training_examples(train_pubs, cfg), val_pubs, cfg)
    assert validation_mrr(val_pubs, qh, dh) == 1.0


def test_non_finite_loss_aborts():
    ex = TrainingExample(np.array([np.nan, 0.0]), np.array([1.0, 0.0]), np.array([[0.0, 1.0]]))
    with pytest.raises(TrainingError):
        train([ex], [], TrainConfig(max_epochs=1, patience=1))


def test_heads_round_trip(tmp_path):
    qh = ProjectionHead(np.arange(9.0).reshape(3, 3) / 10, "query")
    dh = ProjectionHead.identity(3, "document")
    path = save_heads(tmp_path / "heads.json", qh, dh)
    q2, d2 = load_heads(path)
    assert np.array_equal(q2.weights, qh.weights) and np.array_equal(d2.weights, dh.weights)
    assert '"schema_version":1' in path.read_text()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=10, max_epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(temperature=0)
    assert TrainConfig.from_mapping({"learning_rate": 0.1, "unknown": 1}).learning_rate == 0.1
