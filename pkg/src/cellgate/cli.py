"""Command-line entry point wiring the modules together.

Exit codes: 0 success, 1 usage error, 2 document validation failure,
3 runtime failure (fetch/provider/proxy/scenario).
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys

from .bench import format_report, load_dataset, run_bench
from .compiler import compile_table
from .errors import CellgateError, ValidationError
from .policy import parse_composite
from .proxy import ProxyConfig, ProxyServer, build_bundle
from .scenarios import format_run, load_scenario, replay, run_hermetic
from .selector import (
    RemoteProvider,
    StubProvider,
    TaskSpec,
    confirm,
    fetch_bundle,
    run_selection,
)
from .tls import CertificateAuthority

log = logging.getLogger("cellgate.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging(args) -> None:
    handlers = None
    if args.log_file:
        handlers = [logging.FileHandler(args.log_file)]
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        handlers=handlers,
    )


def _bundle_domains(bundle_dir: str) -> list[str]:
    return sorted(
        name for name in os.listdir(bundle_dir)
        if os.path.isdir(os.path.join(bundle_dir, name))
    )


def _make_provider(args):
    if getattr(args, "stub", None):
        return StubProvider(args.stub)
    return RemoteProvider()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    domains = args.domain or _bundle_domains(args.bundle_dir)
    if not domains:
        print(f"no domain bundles under {args.bundle_dir}", file=sys.stderr)
        return EXIT_VALIDATION
    failed = False
    for domain in domains:
        try:
            bundle = fetch_bundle(domain, bundle_dir=args.bundle_dir)
        except ValidationError as exc:
            print(f"{domain}: INVALID: {exc}")
            failed = True
            continue
        print(f"{domain}: ok ({len(bundle.sitemap.entries)} actions, "
              f"{len(bundle.policy_set.policies)} policies)")
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_compile(args) -> int:
    with open(args.composite, "rb") as fh:
        composite = parse_composite(fh.read())
    bundle = fetch_bundle(composite.domain, bundle_dir=args.bundle_dir)
    table = compile_table(bundle.sitemap, bundle.policy_set, composite)
    if args.dump:
        output = table.to_json()
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(output + "\n")
        else:
            print(output)
    else:
        print(f"compiled {len(table.rules)} rules, {len(table.allowlist)} allowlist patterns")
    return EXIT_OK


def cmd_select(args) -> int:
    provider = _make_provider(args)
    task = TaskSpec(text=args.task)
    fetch = functools.partial(fetch_bundle, bundle_dir=args.bundle_dir)
    result, bundles = run_selection(task, provider, fetch=fetch)
    for note in result.notes:
        print(f"note: {note}")
    if result.rejected:
        print("task rejected: no permissions granted")
        return EXIT_RUNTIME
    composites = confirm(result, bundles, assume_yes=args.yes)
    if not composites:
        print("aborted: nothing approved")
        return EXIT_RUNTIME
    os.makedirs(args.out_dir, exist_ok=True)
    for domain, composite in composites.items():
        path = os.path.join(args.out_dir, f"composite-{domain}.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(composite.to_json() + "\n")
        print(f"wrote {path}")
    return EXIT_OK


def _load_composites(path: str) -> list:
    paths = []
    if os.path.isdir(path):
        paths = [
            os.path.join(path, name) for name in sorted(os.listdir(path))
            if name.endswith(".json")
        ]
    else:
        paths = [path]
    composites = []
    for p in paths:
        with open(p, "rb") as fh:
            composites.append(parse_composite(fh.read()))
    return composites


def cmd_serve(args) -> int:
    host, _, port_text = args.listen.rpartition(":")
    config_doc = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config_doc = json.load(fh)
    ca = None
    ca_dir = args.ca or config_doc.get("ca")
    if ca_dir:
        ca = CertificateAuthority.load_or_create(ca_dir)
        print(f"TLS interception CA: {os.path.join(ca_dir, 'ca.pem')}")
    upstream_map = dict(config_doc.get("upstream_map", {}))
    if args.upstream_map:
        upstream_map.update(json.loads(args.upstream_map))
    token = args.token or config_doc.get("token")
    config = ProxyConfig(
        listen_host=host or "127.0.0.1",
        listen_port=int(port_text),
        mode=args.mode or config_doc.get("mode", "strict"),
        ca=ca,
        token=token,
        upstream_map=upstream_map,
        audit_log=args.audit_log or config_doc.get("audit_log"),
        lockout=args.lockout or bool(config_doc.get("lockout", False)),
        default_session=args.session,
    )
    composites = _load_composites(args.composite)
    triples = []
    for composite in composites:
        bundle = fetch_bundle(composite.domain, bundle_dir=args.bundle_dir)
        triples.append(build_bundle(bundle.sitemap, bundle.policy_set, composite))
    server = ProxyServer(config)
    server.load_session(args.session, triples)
    print(f"listening on {server.address[0]}:{server.port} "
          f"(mode={config.mode}, domains={[c.domain for c in composites]})")
    try:
        server.run_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_bench(args) -> int:
    tasks = load_dataset(args.dataset)
    provider = _make_provider(args)
    domains = sorted({d for task in tasks for d in task.domains})
    policy_sets = {}
    knowledge = {}
    for domain in domains:
        bundle = fetch_bundle(domain, bundle_dir=args.bundle_dir)
        policy_sets[domain] = bundle.policy_set
        if bundle.knowledge and not args.no_knowledge:
            knowledge[domain] = bundle.knowledge
    report = run_bench(tasks, provider, policy_sets, knowledge,
                       parallelism=args.parallelism)
    print(format_report(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.hermetic:
        run = run_hermetic(scenario, lockout=args.lockout)
    else:
        if not args.proxy:
            print("replay needs --proxy host:port (or --hermetic)", file=sys.stderr)
            return EXIT_USAGE
        host, _, port_text = args.proxy.rpartition(":")
        ca_pem = None
        if args.ca:
            with open(args.ca, "rb") as fh:
                ca_pem = fh.read()
        run = replay(scenario, host or "127.0.0.1", int(port_text),
                     ca_pem=ca_pem, token=args.token)
    print(format_run(run))
    return EXIT_OK if run.ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cellgate", description=__doc__)
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--log-file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate domain bundles")
    p.add_argument("--bundle-dir", required=True)
    p.add_argument("--domain", action="append")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compile", help="compile a composite into an authorization table")
    p.add_argument("--bundle-dir", required=True)
    p.add_argument("--composite", required=True)
    p.add_argument("--dump", action="store_true", help="emit the table as JSON")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("select", help="select and instantiate policies for a task")
    p.add_argument("--task", required=True)
    p.add_argument("--bundle-dir", required=True)
    p.add_argument("--stub", default=None, help="fixtures file for the deterministic provider")
    p.add_argument("--yes", action="store_true", help="approve without interactive review")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("serve", help="run the enforcement proxy")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--bundle-dir", required=True)
    p.add_argument("--composite", required=True,
                   help="composite JSON file, or a directory of them")
    p.add_argument("--mode", choices=["strict", "observe"], default=None)
    p.add_argument("--ca", default=None,
                   help="directory holding ca.pem/ca.key (created when missing)")
    p.add_argument("--token", default=None, help="shared secret for /ctl and /ctx")
    p.add_argument("--session", default="default")
    p.add_argument("--upstream-map", default=None,
                   help='JSON map of host to upstream, e.g. {"a.com": "http://127.0.0.1:8081"}')
    p.add_argument("--audit-log", default=None)
    p.add_argument("--lockout", action="store_true")
    p.add_argument("--config", default=None, help="JSON config file (flags win)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="run the selection benchmark")
    p.add_argument("--dataset", required=True)
    p.add_argument("--bundle-dir", required=True)
    p.add_argument("--stub", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--no-knowledge", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="replay a scenario against a proxy")
    p.add_argument("--scenario", required=True)
    p.add_argument("--proxy", default=None, metavar="HOST:PORT")
    p.add_argument("--ca", default=None, help="proxy CA certificate (PEM) to trust")
    p.add_argument("--token", default=None)
    p.add_argument("--hermetic", action="store_true",
                   help="self-host proxy and mock upstream")
    p.add_argument("--lockout", action="store_true")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CellgateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
