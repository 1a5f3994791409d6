import pytest

from linkrank.fetcher import FetchPolicy, crawl_one_hop, save_bundle
from linkrank.fixtures import FixtureServer, build_fixture_corpus

# no politeness delay and no robots.txt round trip against the local server
FAST = FetchPolicy(per_host_delay_ms=0, respect_robots=False, timeout_ms=5000)

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def site():
    with FixtureServer() as srv:
        corpus = build_fixture_corpus(srv.base_url)
        srv.routes.update(corpus.routes)
        yield srv, corpus


@pytest.fixture(scope="session")
def crawled_dataset(site, tmp_path_factory):
    """Dataset directory with every fixture publication crawled into bundles/."""
    srv, corpus = site
    root = tmp_path_factory.mktemp("dataset")
    corpus.write_dataset(root)
    for pub in corpus.publications:
        bundle = crawl_one_hop(corpus.doi_url(srv.base_url, pub.id), FAST)
        save_bundle(bundle, root / "bundles" / pub.id)
    return root


@pytest.fixture(scope="session")
def represented(site, crawled_dataset):
    from linkrank.experiments import represent_dataset

    _, corpus = site
    return represent_dataset(crawled_dataset, corpus.publications, corpus.labels)
