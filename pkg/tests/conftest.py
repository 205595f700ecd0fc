import json
import os

import pytest

from cellgate.policy import parse_composite, parse_policy_set
from cellgate.sitemap import parse_sitemap

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def fixture_path(*parts) -> str:
    return os.path.abspath(os.path.join(FIXTURES, *parts))


def load_json(*parts):
    with open(fixture_path(*parts), "r", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def fixtures_dir() -> str:
    return os.path.abspath(FIXTURES)


@pytest.fixture(scope="session")
def bundle_dir(fixtures_dir) -> str:
    return os.path.join(fixtures_dir, "bundles")


@pytest.fixture(scope="session")
def amazon_sitemap_doc():
    return load_json("bundles", "amazon.com", "sitemap.json")


@pytest.fixture(scope="session")
def amazon_policies_doc():
    return load_json("bundles", "amazon.com", "policies.json")


@pytest.fixture(scope="session")
def amazon_composite_doc():
    return load_json("composites", "amazon-budget.json")


@pytest.fixture(scope="session")
def amazon_sitemap(amazon_sitemap_doc):
    return parse_sitemap(amazon_sitemap_doc)


@pytest.fixture(scope="session")
def amazon_policies(amazon_policies_doc, amazon_sitemap):
    return parse_policy_set(amazon_policies_doc, amazon_sitemap)


@pytest.fixture(scope="session")
def amazon_composite(amazon_composite_doc):
    return parse_composite(amazon_composite_doc)


@pytest.fixture(scope="session")
def gitlab_sitemap():
    return parse_sitemap(load_json("bundles", "gitlab.com", "sitemap.json"))


@pytest.fixture(scope="session")
def gitlab_policies(gitlab_sitemap):
    return parse_policy_set(load_json("bundles", "gitlab.com", "policies.json"), gitlab_sitemap)


@pytest.fixture(scope="session")
def airbnb_sitemap():
    return parse_sitemap(load_json("bundles", "airbnb.com", "sitemap.json"))


@pytest.fixture(scope="session")
def airbnb_policies(airbnb_sitemap):
    return parse_policy_set(load_json("bundles", "airbnb.com", "policies.json"), airbnb_sitemap)
