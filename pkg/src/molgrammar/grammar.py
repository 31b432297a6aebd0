"""Context-free grammar for SMILES: loading, serialization and terminal distances.

Grammar files hold one production per line::

    lhs -> sym sym ...

Single-quoted symbols are terminals, bare symbols are nonterminals.  Blank
lines and lines starting with ``#`` are ignored.  The left-hand side of the
first rule is the root token, and file order fixes rule indices.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

INF = math.inf


class GrammarError(ValueError):
    """Raised for malformed or inconsistent grammar sources."""


class UnproductiveTokenError(GrammarError):
    """A reachable nonterminal can never be rewritten into terminals."""


@dataclass(frozen=True)
class Token:
    text: str
    is_terminal: bool

    def __str__(self) -> str:
        return f"'{self.text}'" if self.is_terminal else self.text


@dataclass
class Rule:
    id: int
    lhs: Token
    rhs: tuple[Token, ...]
    delta_td: int | None = None

    def __str__(self) -> str:
        return f"{self.lhs} -> " + " ".join(str(t) for t in self.rhs)


@dataclass
class Grammar:
    tokens: dict[str, Token]
    rules: list[Rule]
    root: Token
    td_table: dict[Token, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._by_lhs: dict[Token, list[Rule]] = {}
        for rule in self.rules:
            self._by_lhs.setdefault(rule.lhs, []).append(rule)

    @property
    def terminals(self) -> list[Token]:
        return [t for t in self.tokens.values() if t.is_terminal]

    @property
    def nonterminals(self) -> list[Token]:
        return [t for t in self.tokens.values() if not t.is_terminal]

    def token(self, text: str) -> Token:
        try:
            return self.tokens[text]
        except KeyError:
            raise GrammarError(f"unknown token {text!r}") from None

    def rules_for(self, t: Token | str) -> list[Rule]:
        if isinstance(t, str):
            t = self.token(t)
        if t.is_terminal:
            raise GrammarError(f"terminal {t} has no rules")
        if t not in self._by_lhs:
            raise GrammarError(f"unknown nonterminal {t}")
        return self._by_lhs[t]

    def td(self, t: Token) -> float:
        return self.td_table[t]

    def sequence_td(self, seq: Iterable[Token]) -> float:
        return sequence_td(self, seq)

    def reachable(self) -> list[Token]:
        """Tokens reachable from the root, in discovery order."""
        seen = {self.root: None}
        queue = [self.root]
        while queue:
            t = queue.pop(0)
            if t.is_terminal:
                continue
            for rule in self._by_lhs[t]:
                for s in rule.rhs:
                    if s not in seen:
                        seen[s] = None
                        queue.append(s)
        return list(seen)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(dump_grammar(self).encode("utf-8")).hexdigest()


def _parse_symbol(sym: str, lineno: int) -> tuple[str, bool]:
    if len(sym) >= 2 and sym[0] == "'" and sym[-1] == "'":
        return sym[1:-1], True
    if "'" in sym:
        raise GrammarError(f"line {lineno}: bad quoting in symbol {sym!r}")
    return sym, False


def parse_rule_line(line: str, lineno: int = 0) -> tuple[str, list[tuple[str, bool]]]:
    """Split ``lhs -> rhs...`` into the lhs name and (text, is_terminal) pairs."""
    if "->" not in line:
        raise GrammarError(f"line {lineno}: missing '->' in {line!r}")
    lhs, _, rhs = line.partition("->")
    lhs = lhs.strip()
    if not lhs or " " in lhs or "'" in lhs:
        raise GrammarError(f"line {lineno}: bad left-hand side {lhs!r}")
    syms = [_parse_symbol(s, lineno) for s in rhs.split()]
    if not syms:
        raise GrammarError(f"line {lineno}: empty right-hand side for {lhs}")
    return lhs, syms


def load_grammar(source: str | Iterable[str], compute_td: bool = True) -> Grammar:
    """Build a grammar from rule text.

    `source` is either the whole file as a string or an iterable of lines.
    Identical duplicate rules are dropped with a warning.  Unless
    `compute_td` is false, terminal distances are filled in before returning.
    """
    lines = source.splitlines() if isinstance(source, str) else list(source)
    parsed: list[tuple[str, list[tuple[str, bool]]]] = []
    seen: set[tuple] = set()
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        lhs, syms = parse_rule_line(line, lineno)
        key = (lhs, tuple(syms))
        if key in seen:
            logger.warning("line %d: duplicate rule %s dropped", lineno, line)
            continue
        seen.add(key)
        parsed.append((lhs, syms))
    if not parsed:
        raise GrammarError("grammar has no rules, so no root token")

    lhs_names = {lhs for lhs, _ in parsed}
    quoted = {text for _, syms in parsed for text, term in syms if term}
    clash = lhs_names & quoted
    if clash:
        raise GrammarError(f"symbols used both as terminal and nonterminal: {sorted(clash)}")
    for _, syms in parsed:
        for text, term in syms:
            if not term and text not in lhs_names:
                raise GrammarError(
                    f"suspicious terminal {text!r}: unquoted but never on a left-hand side"
                )

    tokens: dict[str, Token] = {}

    def intern(text: str, terminal: bool) -> Token:
        if text not in tokens:
            tokens[text] = Token(text, terminal)
        return tokens[text]

    rules = []
    for i, (lhs, syms) in enumerate(parsed):
        lhs_tok = intern(lhs, False)
        rhs = tuple(intern(text, term) for text, term in syms)
        rules.append(Rule(i, lhs_tok, rhs))
    g = Grammar(tokens=tokens, rules=rules, root=tokens[parsed[0][0]])
    if compute_td:
        compute_terminal_distances(g)
    return g


def load_grammar_file(path: str | Path, compute_td: bool = True) -> Grammar:
    with open(path, encoding="utf-8") as fh:
        return load_grammar(fh.read(), compute_td=compute_td)


def default_grammar_path() -> Path:
    return Path(str(resources.files("molgrammar") / "data" / "smiles_grammar.txt"))


@lru_cache(maxsize=None)
def default_grammar() -> Grammar:
    return load_grammar_file(default_grammar_path())


def dump_grammar(g: Grammar) -> str:
    return "".join(str(rule) + "\n" for rule in g.rules)


def compute_terminal_distances(g: Grammar) -> Grammar:
    """Fill `g.td_table` and every rule's `delta_td` by fixpoint iteration.

    Terminals start at 0 and nonterminals at infinity; each sweep sets a
    token's distance to one plus the cheapest right-hand side among its
    rules, and sweeps repeat until nothing changes.  Raises
    UnproductiveTokenError if a token reachable from the root stays infinite.
    """
    td: dict[Token, float] = {t: (0 if t.is_terminal else INF) for t in g.tokens.values()}
    changed = True
    while changed:
        changed = False
        for t in g.nonterminals:
            best = min(sum(td[s] for s in r.rhs) for r in g.rules_for(t))
            if best + 1 < td[t]:
                td[t] = best + 1
                changed = True
    stuck = [t.text for t in g.reachable() if td[t] == INF]
    if stuck:
        raise UnproductiveTokenError(f"unproductive tokens: {stuck}")
    g.td_table = {t: (int(v) if v != INF else INF) for t, v in td.items()}
    for rule in g.rules:
        lhs_td = g.td_table[rule.lhs]
        rhs_td = sum(g.td_table[s] for s in rule.rhs)
        rule.delta_td = int(rhs_td - lhs_td) if lhs_td != INF and rhs_td != INF else None
    return g


def check_min_delta(g: Grammar) -> list[Token]:
    """Reachable nonterminals lacking a rule with delta_td == -1 (should be none)."""
    bad = []
    for t in g.reachable():
        if t.is_terminal:
            continue
        if min(r.delta_td for r in g.rules_for(t)) != -1:
            bad.append(t)
    return bad


def sequence_td(g: Grammar, seq: Sequence[Token] | Iterable[Token]) -> float:
    total = 0
    for t in seq:
        if t not in g.td_table:
            raise GrammarError(f"unknown token {t}")
        total += g.td_table[t]
    return total


def rules_for(g: Grammar, t: Token | str) -> list[Rule]:
    return g.rules_for(t)
