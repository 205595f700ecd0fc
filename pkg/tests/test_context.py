"""Context cache: sequencing, resolution precedence, lockout and freshness."""

import itertools
import threading
from decimal import Decimal

import pytest

from cellgate.context import ContextCache, ContextValue
from cellgate.errors import (
    MissingArgsError,
    SettleTimeout,
    StaleArgsError,
    UnknownArgError,
)


class FakeClock:
    def __init__(self):
        self.now = 1000.0

    def __call__(self):
        return self.now

    def advance(self, dt):
        self.now += dt


def report(arg, value, seq, session="default"):
    return ContextValue(session_id=session, arg_name=arg, value=value,
                        source_url="https://www.amazon.com/checkout/p/1", seq=seq)


@pytest.fixture()
def cache(amazon_sitemap):
    c = ContextCache()
    c.register_sitemap(amazon_sitemap)
    return c


@pytest.fixture()
def lockout_cache(amazon_sitemap):
    clock = FakeClock()
    c = ContextCache(clock=clock, settle_timeout=10.0, lockout=True)
    c.register_sitemap(amazon_sitemap)
    c.clock = clock
    return c


class TestIngest:
    def test_first_report_accepted(self, cache):
        assert cache.ingest(report("totalAmount", 60, seq=1)) is True
        assert cache.resolve_args("default", ["totalAmount"]) == {"totalAmount": Decimal("60")}

    def test_duplicate_seq_rejected(self, cache):
        assert cache.ingest(report("totalAmount", 60, seq=1)) is True
        assert cache.ingest(report("totalAmount", 60, seq=1)) is False

    def test_out_of_order_rejected(self, cache):
        assert cache.ingest(report("totalAmount", 30, seq=3)) is True
        assert cache.ingest(report("totalAmount", 99, seq=2)) is False
        assert cache.resolve_args("default", ["totalAmount"])["totalAmount"] == Decimal("30")

    def test_all_orderings_end_at_max_seq(self, amazon_sitemap):
        reports = [report("totalAmount", value, seq) for seq, value in
                   ((1, 10), (2, 20), (3, 30))]
        for ordering in itertools.permutations(reports):
            cache = ContextCache()
            cache.register_sitemap(amazon_sitemap)
            for r in ordering:
                cache.ingest(r)
            resolved = cache.resolve_args("default", ["totalAmount"])
            assert resolved["totalAmount"] == Decimal("30")

    def test_unknown_arg_rejected(self, cache):
        with pytest.raises(UnknownArgError):
            cache.ingest(report("mysteryValue", 1, seq=1))

    def test_uncoercible_value_kept_raw(self, cache):
        # declared number; producer sent text: stored, evaluation will deny
        assert cache.ingest(report("totalAmount", "sixty", seq=1)) is True
        assert cache.resolve_args("default", ["totalAmount"])["totalAmount"] == "sixty"


class TestResolveArgs:
    def test_empty_requirements(self, cache):
        assert cache.resolve_args("default", []) == {}

    def test_missing_arg_raises(self, cache):
        with pytest.raises(MissingArgsError) as err:
            cache.resolve_args("default", ["totalAmount"])
        assert err.value.missing == ["totalAmount"]

    def test_request_sourced_takes_precedence(self, cache):
        cache.ingest(report("totalAmount", 60, seq=1))
        resolved = cache.resolve_args("default", ["totalAmount"],
                                      {"totalAmount": Decimal("42")})
        assert resolved["totalAmount"] == Decimal("42")

    def test_session_isolation(self, cache):
        cache.ingest(report("totalAmount", 60, seq=1, session="alice"))
        with pytest.raises(MissingArgsError):
            cache.resolve_args("bob", ["totalAmount"])
        assert cache.resolve_args("alice", ["totalAmount"])["totalAmount"] == Decimal("60")

    def test_freshness_after_each_ingest(self, cache):
        for seq in range(1, 6):
            cache.ingest(report("totalAmount", seq * 10, seq=seq))
            resolved = cache.resolve_args("default", ["totalAmount"])
            assert resolved["totalAmount"] == Decimal(seq * 10)


class TestLockout:
    def test_no_pending_is_settled(self, lockout_cache):
        assert lockout_cache.is_settled("default") is True

    def test_pending_then_report_settles(self, lockout_cache):
        lockout_cache.mark_pending("default", "UpdateCartQuantity", ["totalAmount"])
        assert lockout_cache.is_settled("default") is False
        lockout_cache.ingest(report("totalAmount", 42, seq=1))
        assert lockout_cache.is_settled("default") is True

    def test_mark_settled_clears(self, lockout_cache):
        lockout_cache.mark_pending("default", "UpdateCartQuantity", ["totalAmount"])
        lockout_cache.mark_settled("default", "UpdateCartQuantity")
        assert lockout_cache.is_settled("default") is True

    def test_evaluation_blocked_while_pending(self, lockout_cache):
        lockout_cache.ingest(report("totalAmount", 40, seq=1))
        lockout_cache.mark_pending("default", "UpdateCartQuantity", ["totalAmount"])
        with pytest.raises(StaleArgsError):
            lockout_cache.check_freshness("default", ["totalAmount"])
        lockout_cache.ingest(report("totalAmount", 60, seq=2))
        lockout_cache.check_freshness("default", ["totalAmount"])  # settled now

    def test_settle_timeout_flags_session(self, lockout_cache):
        lockout_cache.mark_pending("default", "UpdateCartQuantity", ["totalAmount"])
        lockout_cache.clock.advance(10.1)
        with pytest.raises(SettleTimeout):
            lockout_cache.is_settled("default")
        # flagged: evaluations over the stale arg deny until a fresh report
        with pytest.raises(StaleArgsError):
            lockout_cache.check_freshness("default", ["totalAmount"])
        lockout_cache.ingest(report("totalAmount", 20, seq=1))
        lockout_cache.check_freshness("default", ["totalAmount"])

    def test_lockout_disabled_never_blocks(self, cache):
        cache.mark_pending("default", "UpdateCartQuantity", ["totalAmount"])
        cache.check_freshness("default", ["totalAmount"])

    def test_unwatched_args_unaffected(self, lockout_cache):
        lockout_cache.mark_pending("default", "UpdateCartQuantity", ["totalAmount"])
        lockout_cache.check_freshness("default", [])


def test_concurrent_ingest_and_reads(amazon_sitemap):
    cache = ContextCache()
    cache.register_sitemap(amazon_sitemap)
    errors = []

    def writer(start):
        for seq in range(start, start + 200):
            cache.ingest(report("totalAmount", seq, seq=seq))

    def reader():
        for _ in range(400):
            try:
                value = cache.resolve_args("default", ["totalAmount"])["totalAmount"]
                assert Decimal(0) <= value <= Decimal(1000)
            except MissingArgsError:
                pass
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

    threads = [threading.Thread(target=writer, args=(1,)),
               threading.Thread(target=writer, args=(100,)),
               threading.Thread(target=reader), threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert cache.snapshot("default")["totalAmount"].seq == 299
