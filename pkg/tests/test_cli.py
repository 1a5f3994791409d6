import json
import shutil

import pytest

from linkrank.cli import main
from linkrank.corpus import load_dataset, save_dataset
from linkrank.fixtures import Route


@pytest.fixture(autouse=True)
def fast_fetch(monkeypatch, tmp_path):
    monkeypatch.setenv("CRAWLDOC_FETCH_RESPECT_ROBOTS", "false")
    monkeypatch.setenv("CRAWLDOC_FETCH_PER_HOST_DELAY_MS", "0")
    monkeypatch.setenv("CRAWLDOC_RUN_MANIFEST_PATH", str(tmp_path / "manifest.jsonl"))


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def manifest_lines(tmp_path):
    return [json.loads(l) for l in (tmp_path / "manifest.jsonl").read_text().splitlines()]


def test_crawl_single_seed(site, tmp_path, capsys):
    srv, corpus = site
    pub = corpus.publications[0]
    code, out = run(capsys, "crawl", pub.landing_url, "--out", str(tmp_path / "b"))
    assert code == 0 and out["schema_version"] == 1
    assert (tmp_path / "b" / "index.json").is_file()
    [entry] = manifest_lines(tmp_path)
    assert entry["command"] == "crawl" and entry["exit_code"] == 0
    assert entry["config"]["fetch"]["respect_robots"] is False


def test_crawl_unreachable_seed(tmp_path, capsys):
    code, _ = run(capsys, "crawl", "http://127.0.0.1:1/x", "--out", str(tmp_path / "b"))
    assert code == 2
    assert manifest_lines(tmp_path)[0]["exit_code"] == 2


def test_crawl_bad_arguments(capsys):
    assert run(capsys, "crawl")[0] == 2
    assert run(capsys, "crawl", "not-a-url", "--out", "x")[0] == 2


def test_crawl_cache_rerun_makes_no_requests(site, tmp_path, capsys):
    srv, corpus = site
    seed = corpus.publications[1].landing_url
    cache = str(tmp_path / "cache")
    assert run(capsys, "--cache", cache, "crawl", seed, "--out", str(tmp_path / "a"))[0] == 0
    srv.clear_log()
    assert run(capsys, "--cache", cache, "crawl", seed, "--out", str(tmp_path / "b"))[0] == 0
    assert srv.requested_paths() == []
    assert (tmp_path / "a" / "index.json").read_bytes() == (tmp_path / "b" / "index.json").read_bytes()


def test_rank_bundle(crawled_dataset, capsys):
    bundle = str(crawled_dataset / "bundles" / "aurora-00")
    code, first = run(capsys, "rank", bundle)
    assert code == 0
    entries = first["ranked_list"]["entries"]
    scores = [e["score"] for e in entries]
    assert scores == sorted(scores, reverse=True) and first["ranked_list"]["produced_with_layout"]
    assert first["ranked_list"]["query_url"] not in [e["url"] for e in entries]
    assert run(capsys, "rank", bundle)[1] == first
    assert len(run(capsys, "rank", bundle, "--k", "5")[1]["ranked_list"]["entries"]) == 5
    assert run(capsys, "rank", bundle, "--no-layout")[1]["ranked_list"]["produced_with_layout"] is False


def test_rank_with_nothing_to_rank(site, tmp_path, capsys):
    srv, _ = site
    srv.routes["/lonely"] = Route(body=b"<html><body><p>No links here</p></body></html>")
    assert run(capsys, "crawl", srv.url("/lonely"), "--out", str(tmp_path / "b"))[0] == 0
    assert run(capsys, "rank", str(tmp_path / "b"))[0] == 3


def test_rank_bad_target(capsys):
    assert run(capsys, "rank", "no/such/dir")[0] == 2


def test_stats(crawled_dataset, capsys):
    code, out = run(capsys, "stats", "--dataset", str(crawled_dataset))
    assert code == 0
    assert out["stats"]["n_publications"] == 60


def test_docrepr_bundle_is_canonical(crawled_dataset, capsys):
    bundle = str(crawled_dataset / "bundles" / "aurora-00")
    assert main(["docrepr", bundle]) == 0
    raw = capsys.readouterr().out
    doc = json.loads(raw)
    assert doc["schema_version"] == 1 and doc["representation"]["format"] == "html"
    assert main(["docrepr", bundle, "--no-layout"]) == 0
    assert json.loads(capsys.readouterr().out)["representation"]["layout_included"] is False
    assert main(["docrepr", bundle]) == 0 and capsys.readouterr().out == raw


def test_docrepr_file_needs_url(tmp_path, capsys):
    page = tmp_path / "p.html"
    page.write_text("<p>abc</p>")
    assert run(capsys, "docrepr", str(page))[0] == 2
    code, out = run(capsys, "docrepr", str(page), "--url", "https://x.test/p")
    assert code == 0 and out["representation"]["blocks"][0]["text"] == "abc"


def test_train_then_evaluate(crawled_dataset, tmp_path, capsys):
    ds = str(crawled_dataset)
    heads = [tmp_path / "h1.json", tmp_path / "h2.json"]
    hashes = []
    for path in heads:
        code, out = run(capsys, "train", "--dataset", ds, "--out", str(path), "--max-epochs", "2", "--patience", "1")
        assert code == 0
        hashes.append(out["heads_sha256"])
    assert hashes[0] == hashes[1]
    code, out = run(capsys, "evaluate", "--dataset", ds, "--heads", str(heads[0]),
                    "--report-dir", str(tmp_path / "rep"))
    assert code == 0 and out["report"]["overall"]["mrr"] == 1.0
    assert sorted(p.name for p in (tmp_path / "rep").iterdir()) == [
        "evaluate_k_sweep.csv", "evaluate_k_sweep.png", "evaluate_publishers.png", "evaluate_table.txt"]
    assert [e["command"] for e in manifest_lines(tmp_path)] == ["train", "train", "evaluate"]


def test_evaluate_without_heads_all_split(crawled_dataset, capsys):
    code, out = run(capsys, "evaluate", "--dataset", str(crawled_dataset), "--split", "all",
                    "--aggregation", "micro")
    assert code == 0 and len(out["report"]["per_query"]) == 60
    assert out["report"]["aggregation"] == "micro"


def test_loo_two_publishers(crawled_dataset, tmp_path, capsys):
    pubs, labels = load_dataset(crawled_dataset)
    keep = {p.id for p in pubs if p.publisher in {"aurora", "borealis"}}
    sub = tmp_path / "sub"
    save_dataset(sub, [p for p in pubs if p.id in keep], [l for l in labels if l.publication_id in keep])
    for pid in keep:
        shutil.copytree(crawled_dataset / "bundles" / pid, sub / "bundles" / pid)
    code, out = run(capsys, "loo", "--dataset", str(sub), "--max-epochs", "2", "--patience", "1",
                    "--report-dir", str(tmp_path / "rep"))
    assert code == 0
    assert sorted(out["report"]["per_publisher"]) == ["aurora", "borealis"]
    assert "Average" in (tmp_path / "rep" / "loo_table.txt").read_text()


def test_missing_dataset(tmp_path, capsys):
    assert run(capsys, "stats", "--dataset", str(tmp_path / "none"))[0] == 2


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[bogus]\n")
    assert run(capsys, "--config", str(cfg), "stats", "--dataset", str(tmp_path))[0] == 2
