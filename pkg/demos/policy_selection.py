#!/usr/bin/env python3
"""Selection walkthrough: from a plain-language task to a composite policy.

Uses the deterministic fixture provider, so it runs offline. Swap in a real
endpoint by exporting CELLGATE_PROVIDER_URL/_KEY/_MODEL and constructing a
RemoteProvider instead of the stub.
"""

import functools
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cellgate.selector import StubProvider, TaskSpec, confirm, fetch_bundle, run_selection

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")

TASKS = [
    "view my current shopping cart on Amazon and checkout if the total is under 50 dollars",
    "purchase a coffee maker",  # under-specified: no web application named
    "book a 2B2B in San Francisco on Airbnb from May 17 to 22 for 2 guests",
]


def main():
    provider = StubProvider(os.path.join(FIXTURES, "stubs", "selector_stub.json"))
    fetch = functools.partial(fetch_bundle, bundle_dir=os.path.join(FIXTURES, "bundles"))
    for text in TASKS:
        print(f"\ntask: {text}")
        result, bundles = run_selection(TaskSpec(text), provider, fetch=fetch)
        for note in result.notes:
            print(f"  note: {note}")
        if result.rejected:
            print("  -> rejected, no permissions granted")
            continue
        composites = confirm(result, bundles, assume_yes=True)
        for domain, composite in composites.items():
            print(f"  -> {domain}:")
            for selection in composite.selected:
                suffix = f" {dict(selection.params)}" if selection.params else ""
                print(f"       {selection.name}{suffix}")
            if composite.allowlist:
                print(f"       allowlist: {list(composite.allowlist)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
