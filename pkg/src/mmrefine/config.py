"""JSON configuration helpers with line-anchored error messages."""

from __future__ import annotations

import json
import re

import numpy as np

from .errors import InvalidConfig


def key_line(text: str | None, path: tuple) -> int | None:
    """1-based line of the last key in ``path``, searching after each parent key."""
    if text is None:
        return None
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


class Reader:
    def __init__(self, data: dict, text: str | None):
        self.data = data
        self.text = text

    def fail(self, path: tuple, msg: str):
        raise InvalidConfig(f"{'.'.join(str(p) for p in path)}: {msg}", key_line(self.text, path))

    def get(self, path: tuple):
        node = self.data
        for p in path:
            node = node[p]
        return node

    def number(self, path, lo=None, hi=None, integer=False, lo_open=False):
        v = self.get(path)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
            self.fail(path, f"expected {'an integer' if integer else 'a number'}, got {json.dumps(v)}")
        if lo is not None and (v <= lo if lo_open else v < lo):
            self.fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and v > hi:
            self.fail(path, f"must be <= {hi}, got {v}")
        return v

    def vector(self, path, n=3):
        v = self.get(path)
        if not isinstance(v, list) or len(v) != n or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
            self.fail(path, f"expected a list of {n} numbers")
        return np.array(v, dtype=float)


def parse_json(text: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"malformed JSON: {exc.msg}", exc.lineno) from exc
    if not isinstance(data, dict):
        raise InvalidConfig("top level must be a JSON object", 1)
    return data


def merge(defaults: dict, user: dict, text: str | None, path: tuple = ()) -> dict:
    """Overlay ``user`` on ``defaults``; unknown keys are rejected, nested sections merge."""
    out = dict(defaults)
    for k, v in user.items():
        if k not in defaults:
            raise InvalidConfig(f"unknown key {'.'.join(map(str, path + (k,)))!r}", key_line(text, path + (k,)))
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                raise InvalidConfig(f"{'.'.join(map(str, path + (k,)))}: expected an object", key_line(text, path + (k,)))
            out[k] = merge(defaults[k], v, text, path + (k,))
        else:
            out[k] = v
    return out
