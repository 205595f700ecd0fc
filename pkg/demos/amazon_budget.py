#!/usr/bin/env python3
"""Dynamic policy walkthrough: a purchase cap enforced from page context.

The order-submission request never carries the cart total; the total lives
in the checkout page DOM. A simulated content script reports it over the
context feed, and the purchase-cap condition evaluates the cached value
when the submit request is intercepted. Watch the same request flip from
denied to forwarded as the reported total drops under the cap.
"""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cellgate.compiler import compile_table
from cellgate.context import ContextCache, ContextValue
from cellgate.policy import parse_composite, parse_policy_set
from cellgate.proxy import decide
from cellgate.request import HttpRequestView
from cellgate.sitemap import parse_sitemap

BUNDLES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def load(*parts):
    with open(os.path.join(BUNDLES, *parts), "r", encoding="utf-8") as fh:
        return fh.read()


def main():
    sitemap = parse_sitemap(load("bundles", "amazon.com", "sitemap.json"))
    policies = parse_policy_set(load("bundles", "amazon.com", "policies.json"), sitemap)
    composite = parse_composite(load("composites", "amazon-budget.json"))
    table = compile_table(sitemap, policies, composite)
    print("compiled decisions:")
    for rule in table.rules:
        print(f"  {rule.semantic_action:22s} -> {rule.decision.kind}")

    cache = ContextCache()
    cache.register_sitemap(sitemap)
    submit = HttpRequestView(
        method="POST", url="https://www.amazon.com/checkout/spc/place-order")

    print("\nagent clicks Submit Order before any total was observed:")
    outcome = decide(table, cache, submit)
    print(f"  verdict: {outcome.verdict} ({outcome.reason})")

    for seq, total in ((1, 60), (2, 40)):
        cache.ingest(ContextValue(session_id="default", arg_name="totalAmount",
                                  value=total, source_url="checkout page", seq=seq))
        outcome = decide(table, cache, submit)
        print(f"\ncontent script reports totalAmount={total} (seq {seq}); resubmitting:")
        print(f"  verdict: {outcome.verdict}"
              + (f" ({outcome.reason})" if outcome.reason else ""))

    print("\nreplayed stale report (seq 1, total 60) is ignored:")
    accepted = cache.ingest(ContextValue(session_id="default", arg_name="totalAmount",
                                         value=60, source_url="", seq=1))
    outcome = decide(table, cache, submit)
    print(f"  accepted={accepted}; verdict stays: {outcome.verdict}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
