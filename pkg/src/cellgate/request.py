"""Request-side data model: the view of one intercepted HTTP request.

Bodies are parsed into a nested structure when the content type permits
(JSON, or form-encoded with Rails-style bracket keys normalized to nested
maps). Parse failures leave ``parsed_body`` as None; enforcement treats a
non-empty unparseable body on a body-matched entry as deny, never allow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from urllib.parse import parse_qsl, urlsplit

# Bodies above this size are never parsed (still forwarded verbatim).
BODY_PARSE_CAP = 1 * 1024 * 1024


def parse_json_body(raw: bytes):
    """Parse a JSON body, keeping fractional numbers exact via Decimal."""
    return json.loads(raw.decode("utf-8"), parse_float=Decimal)


def _split_form_key(raw_key: str) -> tuple[list[str], bool]:
    """Decompose ``a[b][c][]`` into (['a','b','c'], is_list)."""
    is_list = raw_key.endswith("[]")
    if is_list:
        raw_key = raw_key[:-2]
    head, _, rest = raw_key.partition("[")
    segments = [head] if head else []
    while rest:
        seg, _, rest = rest.partition("]")
        if seg:
            segments.append(seg)
        rest = rest.lstrip("[")
    return segments, is_list


def parse_form_body(raw: bytes) -> dict:
    """Parse a form-encoded body into a nested dict.

    Bracketed keys nest; a trailing ``[]`` or a repeated key accumulates a
    list. Values stay strings; coercion happens per declared argument type.
    """
    out: dict = {}
    for raw_key, value in parse_qsl(raw.decode("utf-8"), keep_blank_values=True):
        segments, is_list = _split_form_key(raw_key)
        if not segments:
            continue
        node = out
        for seg in segments[:-1]:
            nxt = node.get(seg)
            if not isinstance(nxt, dict):
                nxt = {}
                node[seg] = nxt
            node = nxt
        leaf = segments[-1]
        if leaf not in node:
            node[leaf] = [value] if is_list else value
        else:
            existing = node[leaf]
            if isinstance(existing, list):
                existing.append(value)
            else:
                node[leaf] = [existing, value]
    return out


def walk_body_path(parsed, dotted_path: str) -> tuple[bool, object]:
    """Resolve a dotted path against a parsed body.

    Returns (found, value). List nodes accept numeric segments.
    """
    node = parsed
    for seg in dotted_path.split("."):
        if isinstance(node, dict):
            if seg not in node:
                return False, None
            node = node[seg]
        elif isinstance(node, list):
            if not seg.isdigit() or int(seg) >= len(node):
                return False, None
            node = node[int(seg)]
        else:
            return False, None
    return True, node


def coerce_value(value, value_type: str):
    """Coerce a raw extracted value to its declared type.

    Raises ValueError when the value cannot represent the type; callers
    treat that as "not extracted" and the enforcement path fails closed.
    """
    if value_type == "number":
        if isinstance(value, bool):
            raise ValueError("boolean is not a number")
        if isinstance(value, Decimal):
            return value
        if isinstance(value, (int, float)):
            return Decimal(str(value))
        if isinstance(value, str):
            try:
                return Decimal(value.strip())
            except InvalidOperation as exc:
                raise ValueError(f"not numeric: {value!r}") from exc
        raise ValueError(f"not numeric: {value!r}")
    if value_type == "string":
        if isinstance(value, str):
            return value
        raise ValueError(f"not a string: {value!r}")
    if value_type == "boolean":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ValueError(f"not a boolean: {value!r}")
    if value_type == "string_list":
        if isinstance(value, str):
            return [value]
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
        raise ValueError(f"not a list of strings: {value!r}")
    raise ValueError(f"unknown value type {value_type!r}")


@dataclass
class HttpRequestView:
    """One intercepted request, as seen by the decision path."""

    method: str
    url: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    session_id: str = "default"

    def __post_init__(self):
        self.method = self.method.upper()
        self._parsed_body = None
        self._parse_attempted = False

    @property
    def host(self) -> str:
        return (urlsplit(self.url).hostname or "").lower()

    @property
    def path(self) -> str:
        return urlsplit(self.url).path or "/"

    @property
    def query(self) -> str:
        return urlsplit(self.url).query

    def query_params(self) -> dict[str, list[str]]:
        params: dict[str, list[str]] = {}
        for key, value in parse_qsl(self.query, keep_blank_values=True):
            params.setdefault(key, []).append(value)
        return params

    def _content_type(self) -> str:
        for name, value in self.headers.items():
            if name.lower() == "content-type":
                return value.split(";")[0].strip().lower()
        return ""

    @property
    def parsed_body(self):
        """Nested body view, or None when absent/unparseable/oversized."""
        if self._parse_attempted:
            return self._parsed_body
        self._parse_attempted = True
        if not self.body or len(self.body) > BODY_PARSE_CAP:
            return None
        ctype = self._content_type()
        try:
            if ctype == "application/json" or ctype.endswith("+json"):
                self._parsed_body = parse_json_body(self.body)
            elif ctype == "application/x-www-form-urlencoded":
                self._parsed_body = parse_form_body(self.body)
            else:
                # Missing or foreign content types stay unparsed: a matched
                # entry that needs body fields then denies rather than lets
                # an ambiguous body through.
                self._parsed_body = None
        except (ValueError, UnicodeDecodeError):
            self._parsed_body = None
        return self._parsed_body

    @property
    def has_body(self) -> bool:
        return bool(self.body)
