"""Tokenizing and parsing SMILES strings with the plain grammar.

Parsing ignores the attribute layer entirely: any numeral pairing the plain
grammar accepts is accepted here, and semantic checks happen elsewhere.  The
grammar is ambiguous, so a string may have several leftmost derivations.  We
return the canonical one: the derivation with the fewest rules, and among
those the lexicographically smallest sequence of rule ids, i.e. the one that
prefers the lowest rule index at the first choice point where they differ.
Taking the shortest parse first means a string produced by the sampler
always re-parses within the sampler's own step budget.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .grammar import Grammar, GrammarError, Token


class TokenizeError(ValueError):
    def __init__(self, smiles: str, position: int):
        super().__init__(f"cannot tokenize {smiles!r} at position {position}")
        self.smiles = smiles
        self.position = position


class NotRepresentableError(ValueError):
    """The string is tokenizable but has no parse under the grammar."""


class IncompleteDerivationError(ValueError):
    """A rule sequence does not expand the root into terminals only."""


@dataclass
class Derivation:
    rule_ids: list[int]
    source: str | None = None


# element symbols that count as atoms outside brackets; inside brackets only
# the first token after '[' is the atom
_ATOM_TERMINALS = frozenset("B C N O P S F Cl Br I b c n o p s".split())


def _first_sets(g: Grammar) -> dict[Token, frozenset[str]]:
    first: dict[Token, set[str]] = {t: set() for t in g.nonterminals}
    changed = True
    while changed:
        changed = False
        for rule in g.rules:
            head = rule.rhs[0]
            add = {head.text} if head.is_terminal else first[head]
            if not add <= first[rule.lhs]:
                first[rule.lhs] |= add
                changed = True
    return {t: frozenset(s) for t, s in first.items()}


class Parser:
    """Earley recognizer plus canonical derivation extraction for one grammar."""

    def __init__(self, grammar: Grammar):
        self.grammar = grammar
        self._terminals = sorted({t.text for t in grammar.terminals}, key=len, reverse=True)
        self._max_len = max(len(t) for t in self._terminals)
        self._terminal_set = frozenset(self._terminals)
        first = _first_sets(grammar)
        # predict[(nonterminal, next terminal)] -> rules that can start with it
        self._predict: dict[tuple[Token, str], list[int]] = {}
        for rule in grammar.rules:
            head = rule.rhs[0]
            starts = {head.text} if head.is_terminal else first[head]
            for text in starts:
                self._predict.setdefault((rule.lhs, text), []).append(rule.id)

    # -- tokens -------------------------------------------------------------
    def tokenize(self, smiles: str) -> list[str]:
        """Greedy longest match against the grammar's terminals."""
        if not smiles:
            raise TokenizeError(smiles, 0)
        out = []
        i = 0
        while i < len(smiles):
            for width in range(min(self._max_len, len(smiles) - i), 0, -1):
                piece = smiles[i:i + width]
                if piece in self._terminal_set:
                    out.append(piece)
                    i += width
                    break
            else:
                raise TokenizeError(smiles, i)
        return out

    # -- recognition ----------------------------------------------------------
    def _chart(self, toks: list[str]) -> dict[tuple[Token, int], set[int]]:
        """Completed spans: (nonterminal, start) -> set of end positions."""
        rules = self.grammar.rules
        n = len(toks)
        sets: list[list[tuple[int, int, int]]] = [[] for _ in range(n + 1)]
        seen: list[set[tuple[int, int, int]]] = [set() for _ in range(n + 1)]
        waiting: list[dict[Token, list[tuple[int, int, int]]]] = [{} for _ in range(n + 1)]
        predicted: list[set[Token]] = [set() for _ in range(n + 1)]
        spans: dict[tuple[Token, int], set[int]] = {}

        def add(k: int, item: tuple[int, int, int]) -> None:
            if item not in seen[k]:
                seen[k].add(item)
                sets[k].append(item)

        def predict(k: int, sym: Token) -> None:
            if k >= n or sym in predicted[k]:
                return
            predicted[k].add(sym)
            for rid in self._predict.get((sym, toks[k]), ()):
                add(k, (rid, 0, k))

        predict(0, self.grammar.root)
        for k in range(n + 1):
            items = sets[k]
            idx = 0
            while idx < len(items):
                rid, dot, origin = items[idx]
                idx += 1
                rhs = rules[rid].rhs
                if dot == len(rhs):
                    lhs = rules[rid].lhs
                    ends = spans.setdefault((lhs, origin), set())
                    if k in ends:
                        continue
                    ends.add(k)
                    for w_rid, w_dot, w_origin in waiting[origin].get(lhs, ()):
                        add(k, (w_rid, w_dot + 1, w_origin))
                    continue
                sym = rhs[dot]
                if sym.is_terminal:
                    if k < n and toks[k] == sym.text:
                        add(k + 1, (rid, dot + 1, origin))
                    continue
                # no rule is empty, so nothing completes at its own origin and
                # items waiting here only need later completions
                waiting[k].setdefault(sym, []).append((rid, dot, origin))
                predict(k, sym)
        return spans

    def recognizes(self, smiles: str) -> bool:
        toks = self.tokenize(smiles)
        return len(toks) in self._chart(toks).get((self.grammar.root, 0), set())

    # -- extraction ---------------------------------------------------------
    def parse(self, smiles: str) -> Derivation:
        toks = self.tokenize(smiles)
        spans = self._chart(toks)
        n = len(toks)
        root = self.grammar.root
        if n not in spans.get((root, 0), set()):
            raise NotRepresentableError(f"no parse for {smiles!r}")
        memo: dict[tuple[Token, int, int], list[int]] = {}

        def ends_of(sym: Token, i: int) -> Iterable[int]:
            if sym.is_terminal:
                return (i + 1,) if i < n and toks[i] == sym.text else ()
            return spans.get((sym, i), ())

        suffix_memo: dict[tuple[int, int, int, int], list[int] | None] = {}

        def best(sym: Token, i: int, j: int) -> list[int]:
            key = (sym, i, j)
            if key in memo:
                return memo[key]
            choice: list[int] | None = None
            for rule in self.grammar.rules_for(sym):
                rest = suffix(rule.id, 0, i, j)
                if rest is None:
                    continue
                cand = [rule.id] + rest
                if choice is None or (len(cand), cand) < (len(choice), choice):
                    choice = cand
            if choice is None:
                raise AssertionError(f"span ({sym}, {i}, {j}) recorded but not derivable")
            memo[key] = choice
            return choice

        def suffix(rid: int, m: int, p: int, j: int) -> list[int] | None:
            """Best derivation of ``rhs[m:]`` of rule `rid` over tokens ``p:j``."""
            key = (rid, m, p, j)
            if key in suffix_memo:
                return suffix_memo[key]
            rhs = self.grammar.rules[rid].rhs
            out: list[int] | None = None
            if m == len(rhs):
                out = [] if p == j else None
            elif p < j:
                sym = rhs[m]
                if sym.is_terminal:
                    if toks[p] == sym.text:
                        out = suffix(rid, m + 1, p + 1, j)
                else:
                    for end in ends_of(sym, p):
                        if end > j:
                            continue
                        rest = suffix(rid, m + 1, end, j)
                        if rest is None:
                            continue
                        cand = best(sym, p, end) + rest
                        if out is None or (len(cand), cand) < (len(out), out):
                            out = cand
            suffix_memo[key] = out
            return out

        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 20 * n + 1000))
        try:
            ids = best(root, 0, n)
        finally:
            sys.setrecursionlimit(limit)
        return Derivation(ids, smiles)


def replay_plain(g: Grammar, rule_ids: Iterable[int]) -> list[Token]:
    """Leftmost expansion without attribute checks; returns the final token list."""
    pending = [g.root]
    out: list[Token] = []
    for step, rid in enumerate(rule_ids):
        while pending and pending[-1].is_terminal:
            out.append(pending.pop())
        if not pending:
            raise IncompleteDerivationError(f"rule at step {step} applied to a finished derivation")
        if not 0 <= rid < len(g.rules):
            raise IncompleteDerivationError(f"unknown rule id {rid} at step {step}")
        rule = g.rules[rid]
        if rule.lhs != pending[-1]:
            raise IncompleteDerivationError(
                f"step {step}: rule {rule} cannot expand {pending[-1]}"
            )
        pending.pop()
        pending.extend(reversed(rule.rhs))
    while pending and pending[-1].is_terminal:
        out.append(pending.pop())
    if pending:
        raise IncompleteDerivationError(
            f"derivation leaves nonterminals: {' '.join(str(t) for t in reversed(pending))}"
        )
    return out


def render(g: Grammar, d: Derivation | Iterable[int]) -> str:
    ids = d.rule_ids if isinstance(d, Derivation) else list(d)
    if not ids:
        raise IncompleteDerivationError("empty derivation")
    return "".join(t.text for t in replay_plain(g, ids))


def count_atoms(tokens: Iterable[str]) -> int:
    atoms = 0
    in_bracket = False
    after_open = False
    for tok in tokens:
        if tok == "[":
            in_bracket, after_open = True, True
            continue
        if tok == "]":
            in_bracket = False
            continue
        if in_bracket:
            if after_open and tok.isalpha():
                atoms += 1
            after_open = False
        elif tok in _ATOM_TERMINALS:
            atoms += 1
    return atoms


@dataclass
class IngestStats:
    lines: int = 0
    parsed: int = 0
    unparseable: int = 0
    tokenize_failed: int = 0
    total_rules: int = 0
    total_atoms: int = 0
    failures: list[str] = field(default_factory=list, repr=False)

    @property
    def parse_fraction(self) -> float:
        return self.parsed / self.lines if self.lines else 0.0

    @property
    def rules_per_molecule(self) -> float:
        return self.total_rules / self.parsed if self.parsed else 0.0

    @property
    def rules_per_atom(self) -> float:
        return self.total_rules / self.total_atoms if self.total_atoms else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("failures")
        d.update(
            parse_fraction=self.parse_fraction,
            rules_per_molecule=self.rules_per_molecule,
            rules_per_atom=self.rules_per_atom,
        )
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def iter_corpus(parser: Parser, lines: Iterable[str], stats: IngestStats) -> Iterator[Derivation]:
    """Parse one SMILES per line, counting failures in `stats` as it goes."""
    for raw in lines:
        fields = raw.split()
        if not fields:
            continue
        smiles = fields[0]
        stats.lines += 1
        try:
            toks = parser.tokenize(smiles)
            d = parser.parse(smiles)
        except TokenizeError:
            stats.tokenize_failed += 1
            stats.failures.append(smiles)
            continue
        except NotRepresentableError:
            stats.unparseable += 1
            stats.failures.append(smiles)
            continue
        stats.parsed += 1
        stats.total_rules += len(d.rule_ids)
        stats.total_atoms += count_atoms(toks)
        yield d


def ingest_corpus(g: Grammar, path: str | Path) -> tuple[list[Derivation], IngestStats]:
    stats = IngestStats()
    with open(path, encoding="utf-8") as fh:
        derivations = list(iter_corpus(parser_for(g), fh, stats))
    return derivations, stats


_PARSERS: dict[str, Parser] = {}


def parser_for(g: Grammar) -> Parser:
    """Cached parser keyed by grammar fingerprint."""
    key = g.fingerprint
    if key not in _PARSERS:
        _PARSERS[key] = Parser(g)
    return _PARSERS[key]


def tokenize(g: Grammar, smiles: str) -> list[str]:
    return parser_for(g).tokenize(smiles)


def parse(g: Grammar, smiles: str) -> Derivation:
    return parser_for(g).parse(smiles)


__all__ = [
    "Derivation", "GrammarError", "IncompleteDerivationError", "IngestStats",
    "NotRepresentableError", "Parser", "TokenizeError", "count_atoms", "ingest_corpus",
    "iter_corpus", "parse", "parser_for", "render", "replay_plain", "tokenize",
]
