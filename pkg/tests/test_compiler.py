"""Compilation of composites onto sitemaps, and table lookups."""

import random
from decimal import Decimal

import pytest

from cellgate.compiler import compile_table, lookup
from cellgate.errors import UnknownPolicyError
from cellgate.policy import assemble_composite, bind_composite
from cellgate.request import HttpRequestView

from helpers import assert_instance_agrees, naive_route, normalize_route


def req(method, url, body=b"", content_type=None):
    headers = {"Content-Type": content_type} if content_type else {}
    return HttpRequestView(method=method, url=url, headers=headers, body=body)


@pytest.fixture()
def budget_table(amazon_sitemap, amazon_policies, amazon_composite):
    return compile_table(amazon_sitemap, amazon_policies, amazon_composite)


class TestCompile:
    def test_budget_composite_decisions(self, budget_table):
        decisions = {r.semantic_action: r.decision for r in budget_table.rules}
        assert decisions["ViewCart"].kind == "allow"
        assert decisions["ViewCart"].source_policy == "view_shopping_cart"
        order = decisions["PlaceOrder"]
        assert order.kind == "evaluate"
        binding = order.conditions[0]
        assert binding.program.name == "allowPurchaseIfAmountLeq"
        assert binding.params == {"maxAmount": Decimal("50")}
        assert binding.required_args == ("totalAmount",)
        for action in ("AddToCart", "UpdateCartQuantity", "UpdateDeliveryAddress",
                       "AddPaymentMethod"):
            assert decisions[action].kind == "deny"
            assert decisions[action].source_policy == "default"
        assert budget_table.allowlist == ("https://m.media-amazon.com/*",)

    def test_empty_composite_denies_every_action(self, amazon_sitemap, amazon_policies):
        composite = assemble_composite(amazon_policies, [], [])
        table = compile_table(amazon_sitemap, amazon_policies, composite)
        assert all(r.decision.kind == "deny" for r in table.rules)
        route = table.lookup(req("GET", "https://www.amazon.com/some/unmapped/page"))
        assert route.route == "pass_through"

    def test_completeness(self, budget_table, amazon_sitemap):
        assert {r.semantic_action for r in budget_table.rules} == set(amazon_sitemap.actions())
        assert len(budget_table.rules) == len(amazon_sitemap.entries)

    def test_invalid_composite_propagates(self, amazon_sitemap, amazon_policies,
                                          amazon_composite):
        bad = amazon_composite.__class__(
            domain="amazon.com",
            selected=amazon_composite.selected + (type(amazon_composite.selected[0])(
                name="rename_the_moon", params=None),),
            allowlist=(),
        )
        with pytest.raises(UnknownPolicyError):
            compile_table(amazon_sitemap, amazon_policies, bad)

    def test_idempotent_compilation(self, amazon_sitemap, amazon_policies,
                                    amazon_composite, budget_table):
        again = compile_table(amazon_sitemap, amazon_policies, amazon_composite)
        probes = [
            req("GET", "https://www.amazon.com/gp/cart/view.html?ref=nav"),
            req("POST", "https://www.amazon.com/checkout/spc/place-order"),
            req("GET", "https://m.media-amazon.com/images/x.png"),
            req("GET", "https://www.amazon.com/deep/unknown"),
            req("POST", "https://www.amazon.com/account/addresses/update"),
        ]
        for r in probes:
            fresh = req(r.method, r.url)
            assert normalize_route(budget_table.lookup(r)) == normalize_route(again.lookup(fresh))


class TestLookup:
    def test_allowlisted_cdn(self, budget_table):
        route = budget_table.lookup(req("GET", "https://m.media-amazon.com/images/x.png"))
        assert route.route == "allowlisted"

    def test_unmapped_same_domain_passes_through(self, budget_table):
        route = budget_table.lookup(req("GET", "https://www.amazon.com/some/unmapped/page"))
        assert route.route == "pass_through"

    def test_place_order_matches_evaluate(self, budget_table):
        route = budget_table.lookup(
            req("POST", "https://www.amazon.com/checkout/spc/place-order",
                body=b"order_id=1", content_type="application/x-www-form-urlencoded"),
        )
        assert route.route == "matched"
        assert route.semantic_action == "PlaceOrder"
        assert route.decision.kind == "evaluate"

    def test_method_discriminates(self, budget_table):
        route = budget_table.lookup(req("POST", "https://www.amazon.com/gp/cart/view.html"))
        assert route.route == "pass_through"

    def test_lookup_is_read_only(self, budget_table):
        before = budget_table.to_dict()
        for _ in range(3):
            budget_table.lookup(req("GET", "https://www.amazon.com/gp/cart/view.html"))
        assert budget_table.to_dict() == before

    def test_unparseable_body_on_body_matched_entry_denies(self):
        from cellgate.policy import parse_policy_set
        from cellgate.sitemap import parse_sitemap
        sitemap = parse_sitemap({
            "domain": "shop.test", "version": 1,
            "sitemap": [{
                "method": "POST", "url_pattern": "https://shop.test/form/submit",
                "body": [{"path": "op", "equals": "buy"}],
                "semantic_action": "Buy", "description": "buy",
            }],
        })
        policies = parse_policy_set({
            "domain": "shop.test",
            "policies": [{"name": "buy", "effect": "allow", "actions": ["Buy"],
                          "description": "allow buying"}],
        }, sitemap)
        table = compile_table(sitemap, policies, assemble_composite(policies, [("buy", None)], []))
        garbled = req("POST", "https://shop.test/form/submit",
                      body=b"\x01(not json", content_type="application/json")
        route = table.lookup(garbled)
        assert route.route == "matched"
        assert route.decision.kind == "deny"
        assert route.decision.source_policy == "body-unparseable"
        clean = req("POST", "https://shop.test/form/submit",
                    body=b'{"op": "buy"}', content_type="application/json")
        assert table.lookup(clean).decision.kind == "allow"
        # a no-body request cannot be the body-matched action
        assert table.lookup(req("POST", "https://shop.test/form/submit")).route == "pass_through"


class TestOracleEquivalence:
    def test_seeded_instances_agree(self):
        rng = random.Random(1234)
        for _ in range(25):
            assert_instance_agrees(rng)

    def test_fixture_probe_sweep(self, amazon_sitemap, amazon_policies,
                                 amazon_composite, budget_table):
        rng = random.Random(5)
        from helpers import gen_probes
        for probe in gen_probes(rng, amazon_sitemap, amazon_composite, 100):
            fresh = req(probe.method, probe.url)
            fresh.headers = dict(probe.headers)
            fresh.body = probe.body
            want = naive_route(amazon_sitemap, amazon_policies, amazon_composite, fresh)
            assert normalize_route(budget_table.lookup(probe)) == want


def test_dump_shape(budget_table):
    doc = budget_table.to_dict()
    assert doc["domain"] == "amazon.com"
    assert doc["default"] == "deny"
    actions = [r["semantic_action"] for r in doc["rules"]]
    assert actions == [e.semantic_action for e in budget_table.rules]
    order_rule = next(r for r in doc["rules"] if r["semantic_action"] == "PlaceOrder")
    assert order_rule["decision"]["kind"] == "evaluate"
    assert order_rule["decision"]["conditions"][0]["params"] == {"maxAmount": 50}
