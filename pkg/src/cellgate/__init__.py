"""HTTP-level sandboxing for browser agents.

Sitemaps map HTTP requests to semantic actions; developer policies grant,
deny, or conditionally grant those actions; a composite policy binds a
session to its least-privileged selection; and an enforcing forward proxy
decides every intercepted request against the compiled lookup table.
"""

from .compiler import AuthTable, Decision, RouteDecision, compile_table, lookup
from .conditions import ALLOW, DENY, ConditionProgram, Verdict, evaluate, parse_condition
from .context import ContextCache, ContextValue
from .policy import (
    CompositePolicy,
    Policy,
    PolicySet,
    Selection,
    assemble_composite,
    parse_composite,
    parse_policy_set,
    validate_partial_order,
)
from .proxy import (
    DomainBundle,
    EnforcementRecord,
    Outcome,
    ProxyConfig,
    ProxyServer,
    build_bundle,
    decide,
    serve,
)
from .request import HttpRequestView
from .selector import (
    Bundle,
    RemoteProvider,
    SelectionResult,
    StubProvider,
    TaskSpec,
    confirm,
    fetch_bundle,
    predict_domains,
    run_selection,
    select_policies,
)
from .sitemap import (
    ArgSpec,
    HttpMatcher,
    SemanticHit,
    Sitemap,
    SitemapEntry,
    match_request,
    parse_sitemap,
    pattern_matches,
)
from .tls import CertificateAuthority

__version__ = "0.1.0"
