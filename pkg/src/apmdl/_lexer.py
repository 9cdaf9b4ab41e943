"""Small regex tokenizer shared by the Datalog parser and the APM text parser."""

from __future__ import annotations

import re
from dataclasses import dataclass


class SyntaxErr(ValueError):
    def __init__(self, msg, line=0, col=0, source="<input>"):
        super().__init__(f"{source}:{line}:{col}: {msg}")
        self.line, self.col = line, col


@dataclass(frozen=True)
class Tok:
    kind: str  # NAME NUM STR OP EOF
    text: str
    line: int
    col: int


_TOKEN_RULES = [
    ("WS", r"[ \t\r]+"),
    ("NL", r"\n"),
    ("COMMENT", r"//[^\n]*|/\*.*?\*/"),
    ("NUM", r"\d+\.\d+(?:[eE][-+]?\d+)?|\d+[eE][-+]?\d+|\d+|inf\b|nan\b"),
    ("STR", r'"(?:[^"\\\n]|\\.)*"'),
    ("NAME", r"[A-Za-z_][A-Za-z0-9_]*(?:#\d+)?"),
    ("OP", r"<-|:-|::|==|!=|<=|>=|&&|\|\||[←⟨⟩λ⊕⊗()\[\]{}<>,.:;=+\-*/!@#?]"),
]
_RX = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_RULES), re.S)
_CANON = {"←": "<-", "⟨": "<", "⟩": ">", "&&": "and", "||": "or"}


def tokenize(text: str, source: str = "<input>", hash_comments: bool = False) -> list[Tok]:
    toks = []
    pos, line, lstart = 0, 1, 0
    n = len(text)
    while pos < n:
        if hash_comments and text[pos] == "#" and (pos == lstart or text[lstart:pos].strip() == ""):
            end = text.find("\n", pos)
            pos = n if end < 0 else end
            continue
        m = _RX.match(text, pos)
        if not m:
            raise SyntaxErr(f"unexpected character {text[pos]!r}", line, pos - lstart + 1, source)
        kind = m.lastgroup
        s = m.group()
        if kind == "NL":
            line += 1
            lstart = m.end()
        elif kind == "COMMENT":
            line += s.count("\n")
            if "\n" in s:
                lstart = pos + s.rfind("\n") + 1
        elif kind != "WS":
            if kind == "OP":
                s = _CANON.get(s, s)
            toks.append(Tok(kind, s, line, pos - lstart + 1))
        pos = m.end()
    toks.append(Tok("EOF", "", line, pos - lstart + 1))
    return toks


class Cursor:
    def __init__(self, toks, source="<input>"):
        self.toks = toks
        self.i = 0
        self.source = source

    @property
    def cur(self) -> Tok:
        return self.toks[self.i]

    def peek(self, k=1) -> Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, *texts) -> bool:
        t = self.cur
        return t.kind in ("OP", "NAME") and t.text in texts

    def advance(self) -> Tok:
        t = self.cur
        if t.kind != "EOF":
            self.i += 1
        return t

    def accept(self, *texts):
        if self.at(*texts):
            return self.advance()
        return None

    def expect(self, text) -> Tok:
        if not self.at(text):
            self.error(f"expected {text!r}, found {self.cur.text or 'end of input'!r}")
        return self.advance()

    def expect_kind(self, kind) -> Tok:
        if self.cur.kind != kind:
            self.error(f"expected {kind.lower()}, found {self.cur.text or 'end of input'!r}")
        return self.advance()

    def error(self, msg, tok=None):
        t = tok or self.cur
        raise SyntaxErr(msg, t.line, t.col, self.source)
