import json
import statistics

import pytest
from hypothesis import given, strategies as st

from linkrank.corpus import (
    AuthorRecord,
    DatasetLoadError,
    DatasetSplit,
    LinkLabel,
    PublicationRecord,
    RecordError,
    ReferentialIntegrityError,
    compute_stats,
    count_self_links,
    load_dataset,
    remove_self_links,
    save_dataset,
    split_dataset,
)


def pub(pid, publisher="acme", landing=None, authors=(("Ann Lee", ("Uni A",)),)):
    return PublicationRecord(
        id=pid, doi=f"10.1000/{pid}", publisher=publisher, title=f"Title {pid}", year=2020,
        landing_url=landing or f"https://acme.test/{pid}",
        authors=tuple(AuthorRecord(n, a) for n, a in authors),
    )


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def small_dataset(tmp_path):
    pubs = [pub("p1"), pub("p2")]
    labels = [LinkLabel("p1", f"https://acme.test/p1/l{i}", i % 2 == 0, f"a{i}") for i in range(4)]
    labels += [LinkLabel("p2", f"https://acme.test/p2/l{i}", i == 0) for i in range(3)]
    save_dataset(tmp_path, pubs, labels)
    return pubs, labels


def test_load_preserves_counts(tmp_path):
    small_dataset(tmp_path)
    pubs, labels = load_dataset(tmp_path)
    assert (len(pubs), len(labels)) == (2, 7)


def test_round_trip_is_byte_identical(tmp_path):
    small_dataset(tmp_path)
    first = [(tmp_path / f).read_bytes() for f in ("publications.jsonl", "links.jsonl")]
    pubs, labels = load_dataset(tmp_path)
    out = tmp_path / "again"
    save_dataset(out, pubs, labels)
    assert [(out / f).read_bytes() for f in ("publications.jsonl", "links.jsonl")] == first
    assert load_dataset(out) == (pubs, labels)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DatasetLoadError) as err:
        load_dataset(tmp_path)
    assert "publications.jsonl" in str(err.value)


def test_malformed_record_names_line_and_field(tmp_path):
    good = pub("p1").to_json()
    bad = dict(pub("p2").to_json(), doi="11.2/x")
    write_jsonl(tmp_path / "publications.jsonl", [good, bad])
    write_jsonl(tmp_path / "links.jsonl", [])
    with pytest.raises(RecordError) as err:
        load_dataset(tmp_path)
    assert err.value.line == 2 and err.value.field == "doi"


@pytest.mark.parametrize("field,value", [("year", 1850), ("landing_url", "/relative"), ("year", "2020")])
def test_invalid_publication_fields(tmp_path, field, value):
    write_jsonl(tmp_path / "publications.jsonl", [dict(pub("p1").to_json(), **{field: value})])
    write_jsonl(tmp_path / "links.jsonl", [])
    with pytest.raises(RecordError) as err:
        load_dataset(tmp_path)
    assert err.value.field == field


def test_missing_field(tmp_path):
    row = pub("p1").to_json()
    del row["title"]
    write_jsonl(tmp_path / "publications.jsonl", [row])
    write_jsonl(tmp_path / "links.jsonl", [])
    with pytest.raises(RecordError) as err:
        load_dataset(tmp_path)
    assert (err.value.line, err.value.field) == (1, "title")


def test_dangling_publication_id(tmp_path):
    write_jsonl(tmp_path / "publications.jsonl", [pub("p1").to_json()])
    write_jsonl(tmp_path / "links.jsonl", [LinkLabel("nope", "https://x.test/", True).to_json()])
    with pytest.raises(ReferentialIntegrityError):
        load_dataset(tmp_path)


def test_duplicate_link_rejected(tmp_path):
    write_jsonl(tmp_path / "publications.jsonl", [pub("p1").to_json()])
    label = LinkLabel("p1", "https://x.test/a", True).to_json()
    write_jsonl(tmp_path / "links.jsonl", [label, label])
    with pytest.raises(RecordError) as err:
        load_dataset(tmp_path)
    assert err.value.line == 2


def test_split_100_per_publisher():
    pubs = [pub(f"{p}-{i:03d}", publisher=p) for p in "abcdef" for i in range(100)]
    split = split_dataset(pubs, (0.8, 0.1, 0.1), seed=7)
    assert (len(split.train), len(split.validation), len(split.test)) == (480, 60, 60)
    publisher = {p.id: p.publisher for p in pubs}
    for name in "abcdef":
        sizes = [sum(publisher[i] == name for i in split.part(part))
                 for part in ("train", "validation", "test")]
        assert sizes == [80, 10, 10]


def test_split_deterministic_and_seed_sensitive():
    pubs = [pub(f"x{i}") for i in range(50)]
    assert split_dataset(pubs, seed=3) == split_dataset(pubs, seed=3)
    assert split_dataset(pubs, seed=3) != split_dataset(pubs, seed=4)


def test_split_remainder_goes_to_train():
    pubs = [pub(f"x{i}") for i in range(17)]
    split = split_dataset(pubs)
    assert (len(split.train), len(split.validation), len(split.test)) == (15, 1, 1)


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_dataset([pub("a")], (0.8, 0.1, 0.2))


def test_split_parts_must_be_disjoint():
    with pytest.raises(ValueError):
        DatasetSplit(("a",), ("a",), ())


@given(n=st.integers(1, 60), publishers=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_split_partitions_ids(n, publishers, seed):
    pubs = [pub(f"p{i}", publisher=f"pub{i % publishers}") for i in range(n)]
    split = split_dataset(pubs, seed=seed)
    parts = split.train + split.validation + split.test
    assert sorted(parts) == sorted(p.id for p in pubs)
    assert len(set(parts)) == len(parts)


@pytest.mark.parametrize("landing,link,removed", [
    ("https://x.org/a", "https://x.org/a#top", True),
    ("https://x.org/a", "https://x.org/b", False),
    ("https://X.org/a/", "https://x.org/a", True),
])
def test_self_link_removal(landing, link, removed):
    p = pub("p", landing=landing)
    kept = remove_self_links(p, [LinkLabel("p", link, True)])
    assert (kept == []) is removed
    assert remove_self_links(p, kept) == kept


def test_stats_hand_examples():
    one = compute_stats([pub("a")], [LinkLabel("a", f"https://l.test/{i}", False) for i in range(4)])
    assert (one.mean_links_per_page, one.sd_links_per_page) == (4.0, 0.0)

    pubs = [pub("a"), pub("b")]
    labels = [LinkLabel("a", f"https://l.test/a{i}", i == 0) for i in range(2)]
    labels += [LinkLabel("b", f"https://l.test/b{i}", True) for i in range(4)]
    stats = compute_stats(pubs, labels)
    assert (stats.mean_links_per_page, stats.sd_links_per_page) == (3.0, 1.0)
    assert (stats.mean_relevant_per_page, stats.sd_relevant_per_page) == (2.5, 1.5)
    assert compute_stats(pubs, labels, sample_sd=True).sd_links_per_page == pytest.approx(2 ** 0.5)


def test_stats_match_brute_force(site):
    _, corpus = site
    stats = compute_stats(corpus.publications, corpus.labels)
    per_page = [sum(l.publication_id == p.id for l in corpus.labels) for p in corpus.publications]
    relevant = [sum(l.publication_id == p.id and l.relevant for l in corpus.labels)
                for p in corpus.publications]
    assert stats.n_links == sum(per_page)
    assert stats.mean_links_per_page == statistics.fmean(per_page)
    assert stats.sd_links_per_page == statistics.pstdev(per_page)
    assert stats.sd_relevant_per_page == statistics.pstdev(relevant)
    assert stats.n_self_links == count_self_links(corpus.publications, corpus.labels) == 60
    assert stats.n_links_excluding_self == stats.n_links - 60


def test_publication_invariants():
    with pytest.raises(ValueError):
        pub("p").__class__(id="p", doi="", publisher="a", title="t", year=2000,
                           landing_url="https://x.test/", authors=())
    with pytest.raises(ValueError):
        AuthorRecord("", ())
