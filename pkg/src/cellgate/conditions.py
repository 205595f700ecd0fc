"""Sandboxed boolean expression language for conditional grants.

Grammar (highest precedence first):

    atom   := number | string | true | false | params.NAME | args.NAME | ( expr )
    unary  := '!' unary | atom
    cmp    := unary ( ('<'|'<='|'>'|'>='|'=='|'!='|'in') unary )?
    conj   := cmp ( '&&' cmp )*
    expr   := conj ( '||' conj )*

There are no loops, calls, or assignments, so evaluation always terminates.
Numbers compare exactly at two fractional digits (stored as scaled-integer
hundredths), so currency amounts never hit float artifacts. Ordering
comparisons apply to numbers and to ISO ``YYYY-MM-DD`` date strings, whose
lexicographic order coincides with chronological order. ``in`` tests string
membership in a string list. Boolean operators short-circuit.

Evaluation is total: a missing identifier or a type mismatch yields the
distinguished DENY_BY_ERROR verdict instead of raising, so the enforcement
path fails closed without crashing.
"""

from __future__ import annotations

import datetime
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation

from .errors import ParseError, UnknownNamespaceError

_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")

_COMPARISON_OPS = ("<=", ">=", "==", "!=", "<", ">")


@dataclass(frozen=True)
class Verdict:
    kind: str  # allow | deny | deny_by_error
    reason: str | None = None

    @property
    def allowed(self) -> bool:
        return self.kind == "allow"


ALLOW = Verdict("allow")
DENY = Verdict("deny")


def deny_by_error(reason: str) -> Verdict:
    return Verdict("deny_by_error", reason)


@dataclass(frozen=True)
class ConditionProgram:
    name: str
    source: str
    ast: tuple

    def evaluate(self, params, args) -> Verdict:
        return evaluate(self, params, args)


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Token:
    kind: str
    value: object
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    n = len(source)
    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and source[i + 1].isdigit()):
            j = i + 1
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            text = source[i:j]
            try:
                value = Decimal(text)
            except InvalidOperation:
                raise ParseError(f"bad number literal {text!r}", i)
            tokens.append(_Token("number", value, i))
            i = j
            continue
        if ch in "'\"":
            quote = ch
            j = i + 1
            buf = []
            while j < n and source[j] != quote:
                if source[j] == "\\" and j + 1 < n:
                    buf.append(source[j + 1])
                    j += 2
                else:
                    buf.append(source[j])
                    j += 1
            if j >= n:
                raise ParseError("unterminated string literal", i)
            tokens.append(_Token("string", "".join(buf), i))
            i = j + 1
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            word = source[i:j]
            if word == "true":
                tokens.append(_Token("bool", True, i))
            elif word == "false":
                tokens.append(_Token("bool", False, i))
            elif word == "in":
                tokens.append(_Token("op", "in", i))
            else:
                tokens.append(_Token("ident", word, i))
            i = j
            continue
        two = source[i:i + 2]
        if two in ("&&", "||", "<=", ">=", "==", "!="):
            tokens.append(_Token("op", two, i))
            i += 2
            continue
        if ch in "<>!().":
            tokens.append(_Token("op", ch, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    tokens.append(_Token("end", None, n))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.index = 0

    def peek(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        tok = self.tokens[self.index]
        self.index += 1
        return tok

    def expect_op(self, op: str) -> None:
        tok = self.peek()
        if tok.kind != "op" or tok.value != op:
            raise ParseError(f"expected {op!r}", tok.pos)
        self.advance()

    def parse(self) -> tuple:
        node = self.parse_or()
        tail = self.peek()
        if tail.kind != "end":
            raise ParseError(f"unexpected trailing input {tail.value!r}", tail.pos)
        return node

    def parse_or(self) -> tuple:
        node = self.parse_and()
        while self.peek().kind == "op" and self.peek().value == "||":
            self.advance()
            node = ("or", node, self.parse_and())
        return node

    def parse_and(self) -> tuple:
        node = self.parse_cmp()
        while self.peek().kind == "op" and self.peek().value == "&&":
            self.advance()
            node = ("and", node, self.parse_cmp())
        return node

    def parse_cmp(self) -> tuple:
        left = self.parse_unary()
        tok = self.peek()
        if tok.kind == "op" and (tok.value in _COMPARISON_OPS or tok.value == "in"):
            self.advance()
            right = self.parse_unary()
            return ("cmp", tok.value, left, right)
        return left

    def parse_unary(self) -> tuple:
        tok = self.peek()
        if tok.kind == "op" and tok.value == "!":
            self.advance()
            return ("not", self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> tuple:
        tok = self.advance()
        if tok.kind == "number":
            return ("lit", ("num", _to_hundredths(tok.value)))
        if tok.kind == "string":
            return ("lit", ("str", tok.value))
        if tok.kind == "bool":
            return ("lit", ("bool", tok.value))
        if tok.kind == "op" and tok.value == "(":
            node = self.parse_or()
            self.expect_op(")")
            return node
        if tok.kind == "ident":
            if tok.value not in ("params", "args"):
                raise UnknownNamespaceError(
                    f"identifier {tok.value!r} must be namespaced under params or args", tok.pos
                )
            self.expect_op(".")
            name_tok = self.advance()
            if name_tok.kind != "ident":
                raise ParseError("expected a name after '.'", name_tok.pos)
            return ("var", tok.value, name_tok.value)
        if tok.kind == "end":
            raise ParseError("unexpected end of input", tok.pos)
        raise ParseError(f"unexpected token {tok.value!r}", tok.pos)


def parse_condition(source: str, name: str = "") -> ConditionProgram:
    """Parse expression source into a program; raises ParseError on bad input."""
    if not source or not source.strip():
        raise ParseError("empty condition source", 0)
    ast = _Parser(_tokenize(source)).parse()
    return ConditionProgram(name=name, source=source, ast=ast)


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------

class _EvalError(Exception):
    pass


def _to_hundredths(value) -> int:
    if isinstance(value, Decimal):
        d = value
    else:
        d = Decimal(str(value))
    d = d.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return int(d.scaleb(2))


def _ingest(value, where: str) -> tuple:
    """Convert an environment value into a tagged runtime value."""
    if isinstance(value, bool):
        return ("bool", value)
    if isinstance(value, (int, float, Decimal)):
        try:
            return ("num", _to_hundredths(value))
        except (InvalidOperation, ValueError, OverflowError) as exc:
            raise _EvalError(f"{where}: bad numeric value") from exc
    if isinstance(value, str):
        return ("str", value)
    if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
        return ("list", tuple(value))
    raise _EvalError(f"{where}: unsupported value type {type(value).__name__}")


def _is_date(text: str) -> bool:
    if not _DATE_RE.match(text):
        return False
    try:
        datetime.date.fromisoformat(text)
    except ValueError:
        return False
    return True


def _require_bool(value: tuple, context: str) -> bool:
    if value[0] != "bool":
        raise _EvalError(f"{context} requires a boolean, got {value[0]}")
    return value[1]


def _compare(op: str, left: tuple, right: tuple) -> bool:
    lt, lv = left
    rt, rv = right
    if op == "in":
        if lt != "str" or rt != "list":
            raise _EvalError(f"'in' requires string in string_list, got {lt} in {rt}")
        return lv in rv
    if op in ("==", "!="):
        if lt != rt or lt == "list":
            raise _EvalError(f"cannot compare {lt} and {rt} for equality")
        return (lv == rv) if op == "==" else (lv != rv)
    # ordering
    if lt == "num" and rt == "num":
        pass
    elif lt == "str" and rt == "str" and _is_date(lv) and _is_date(rv):
        pass  # zero-padded ISO dates order lexicographically
    else:
        raise _EvalError(f"cannot order {lt} and {rt}")
    if op == "<":
        return lv < rv
    if op == "<=":
        return lv <= rv
    if op == ">":
        return lv > rv
    if op == ">=":
        return lv >= rv
    raise _EvalError(f"unknown operator {op!r}")


def _eval(node: tuple, params, args) -> tuple:
    kind = node[0]
    if kind == "lit":
        return node[1]
    if kind == "var":
        _, ns, name = node
        scope = params if ns == "params" else args
        if name not in scope:
            raise _EvalError(f"missing {ns}.{name}")
        return _ingest(scope[name], f"{ns}.{name}")
    if kind == "not":
        return ("bool", not _require_bool(_eval(node[1], params, args), "'!'"))
    if kind == "and":
        if not _require_bool(_eval(node[1], params, args), "'&&'"):
            return ("bool", False)
        return ("bool", _require_bool(_eval(node[2], params, args), "'&&'"))
    if kind == "or":
        if _require_bool(_eval(node[1], params, args), "'||'"):
            return ("bool", True)
        return ("bool", _require_bool(_eval(node[2], params, args), "'||'"))
    if kind == "cmp":
        _, op, l, r = node
        return ("bool", _compare(op, _eval(l, params, args), _eval(r, params, args)))
    raise _EvalError(f"unknown node {kind!r}")


def evaluate(program: ConditionProgram, params, args) -> Verdict:
    """Run a program to a Verdict; every failure folds into deny_by_error."""
    try:
        result = _eval(program.ast, params or {}, args or {})
    except _EvalError as exc:
        return deny_by_error(str(exc))
    except RecursionError:
        return deny_by_error("expression too deeply nested")
    if result[0] != "bool":
        return deny_by_error(f"condition result is {result[0]}, not boolean")
    return ALLOW if result[1] else DENY
