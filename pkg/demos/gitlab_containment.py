#!/usr/bin/env python3
"""Containment walkthrough: a hijacked agent session on a version-control site.

An injected instruction tries to mint a personal access token and ship it
to an attacker-controlled host. We replay the same four-step trace twice:
once under the least-privileged composite (only issue comments granted)
and once under an allow-all baseline in observe mode, then compare what
actually reached the upstream server.

Everything runs locally: the proxy intercepts TLS with a throwaway CA and
re-originates requests to a recording mock upstream.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cellgate.scenarios import format_run, load_scenario, run_hermetic

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures", "scenarios")


def show(title, run):
    print(f"\n=== {title} ===")
    print(format_run(run))
    print("upstream saw:")
    for arrival in run.arrivals:
        print(f"  {arrival['method']:6s} {arrival['host']}{arrival['path']}")


def main():
    contained = run_hermetic(load_scenario(
        os.path.join(FIXTURES, "gitlab_token_exfiltration.json")))
    show("with comment_issue policy (strict)", contained)

    baseline = run_hermetic(load_scenario(
        os.path.join(FIXTURES, "baseline_no_policy.json")))
    show("allow-all baseline (observe)", baseline)

    leaked = any("attacker" in a["host"] for a in baseline.arrivals)
    blocked = not any("attacker" in a["host"] for a in contained.arrivals)
    print("\nsummary:")
    print(f"  sandboxed session leaked the token: {not blocked}")
    print(f"  baseline session leaked the token:  {leaked}")
    return 0 if (contained.ok and baseline.ok and blocked and leaked) else 1


if __name__ == "__main__":
    sys.exit(main())
