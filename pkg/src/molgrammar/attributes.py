"""Attribute propagation and rule masking on top of the plain SMILES grammar.

Some nonterminals carry extra attributes while a derivation is built:

* a cycle id, shared by the two tokens that will eventually emit the two
  numerals of one ring closure;
* a ring size on ring-path tokens (names containing ``cycle``), counting the
  atoms the ring would have if it were closed right now.

At every step the leftmost nonterminal is expanded with a rule that passes
four filters: its lhs matches, numerals pair up correctly, ring sizes stay
inside ``[min_ring_size, max_ring_size]``, and the terminal distance of the
sequence never exceeds the number of steps left.  The last filter uses
terminal distances over (token, ring size) pairs, because ring-size masking
removes rules that the plain grammar would allow.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .grammar import Grammar, GrammarError, Rule, Token, default_grammar, parse_rule_line

INF = math.inf


class AttributeTableError(GrammarError):
    """Grammar and attribute tables disagree."""


class MaskInvariantError(RuntimeError):
    """No rule survives masking; carries a dump of the derivation state."""


class MaskInconsistencyError(ValueError):
    """A replayed rule is forbidden by the mask at its step."""


class NumeralExhaustedError(RuntimeError):
    pass


def is_ring_path(t: Token) -> bool:
    return not t.is_terminal and "cycle" in t.text


def carries_cycle_id(t: Token) -> bool:
    return not t.is_terminal and ("num" in t.text or "cycle" in t.text)


def starts_cycle(t: Token) -> bool:
    return not t.is_terminal and "ring" in t.text


def id_class(t: Token) -> str:
    # 'num1' tokens close a second, independent ring inside fused ring rules
    return "num1" if "num1" in t.text else "num"


@dataclass(frozen=True)
class ExtendedToken:
    base: Token
    cycle_id: int | None = None
    ring_size: int | None = None

    @property
    def is_terminal(self) -> bool:
        return self.base.is_terminal

    def __str__(self) -> str:
        attrs = []
        if self.cycle_id is not None:
            attrs.append(f"id={self.cycle_id}")
        if self.ring_size is not None:
            attrs.append(f"size={self.ring_size}")
        return str(self.base) + (f"[{','.join(attrs)}]" if attrs else "")


@dataclass
class NumeralCache:
    open: dict[int, str] = field(default_factory=dict)
    in_use: set[str] = field(default_factory=set)

    def copy(self) -> NumeralCache:
        return NumeralCache(dict(self.open), set(self.in_use))


@dataclass(frozen=True)
class MaskConfig:
    max_ring_size: int = 8
    min_ring_size: int = 3
    max_steps: int = 277

    def __post_init__(self) -> None:
        if self.min_ring_size < 3:
            raise ValueError("min_ring_size must be at least 3")
        if self.max_ring_size < self.min_ring_size:
            raise ValueError("max_ring_size must be >= min_ring_size")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass(frozen=True)
class RingEffect:
    kind: str  # 'open', 'extend' or 'close'
    amount: int


def load_ring_table(g: Grammar, source: str) -> dict[int, RingEffect]:
    """Parse a ring-size table (kind, amount, rule; tab separated) against `g`."""
    index = {(r.lhs.text, tuple((t.text, t.is_terminal) for t in r.rhs)): r.id for r in g.rules}
    table: dict[int, RingEffect] = {}
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise AttributeTableError(f"ring table line {lineno}: expected 3 tab-separated fields")
        kind, amount, rule_text = parts[0].strip(), parts[1].strip(), parts[2].strip()
        if kind not in ("open", "extend", "close"):
            raise AttributeTableError(f"ring table line {lineno}: unknown kind {kind!r}")
        lhs, syms = parse_rule_line(rule_text, lineno)
        key = (lhs, tuple(syms))
        if key not in index:
            raise AttributeTableError(f"ring table line {lineno}: rule not in grammar: {rule_text}")
        table[index[key]] = RingEffect(kind, int(amount))
    return table


def default_ring_table_path() -> Path:
    return Path(str(resources.files("molgrammar") / "data" / "ring_sizes.tsv"))


def _static_kind(rule: Rule) -> str | None:
    """Ring role of a rule as implied by token names alone."""
    rhs_path = [t for t in rule.rhs if is_ring_path(t)]
    if len(rhs_path) > 1:
        raise AttributeTableError(f"rule has more than one ring-path token: {rule}")
    if is_ring_path(rule.lhs):
        if rhs_path:
            return "extend"
        if any("num" in t.text for t in rule.rhs if not t.is_terminal):
            return "close"
        raise AttributeTableError(f"ring-path rule neither extends nor closes: {rule}")
    return "open" if rhs_path else None


class DerivationState:
    """Leftmost derivation in progress.

    Terminals left of the cursor are kept in `emitted`; the remaining tokens
    are in `pending`, reversed, so ``pending[-1]`` is the leftmost one and is
    always a nonterminal unless the derivation is finished.
    """

    __slots__ = ("emitted", "pending", "steps_used", "rule_history", "numerals", "td", "_ids")

    def __init__(self, root: ExtendedToken, td: int):
        self.emitted: list[Token] = []
        self.pending: list[ExtendedToken] = [root]
        self.steps_used = 0
        self.rule_history: list[int] = []
        self.numerals = NumeralCache()
        self.td = td
        self._ids = 0

    def new_cycle_id(self) -> int:
        self._ids += 1
        return self._ids

    @property
    def current(self) -> ExtendedToken | None:
        return self.pending[-1] if self.pending else None

    @property
    def done(self) -> bool:
        return not self.pending

    @property
    def tokens(self) -> list[ExtendedToken]:
        return [ExtendedToken(t) for t in self.emitted] + self.pending[::-1]

    @property
    def cursor(self) -> int | None:
        return None if not self.pending else len(self.emitted)

    def text(self) -> str:
        return "".join(t.text for t in self.emitted)

    def copy(self) -> DerivationState:
        new = DerivationState.__new__(DerivationState)
        new.emitted = list(self.emitted)
        new.pending = list(self.pending)
        new.steps_used = self.steps_used
        new.rule_history = list(self.rule_history)
        new.numerals = self.numerals.copy()
        new.td = self.td
        new._ids = self._ids
        return new

    def dump(self) -> str:
        return (
            f"steps_used={self.steps_used} td={self.td}\n"
            f"emitted={self.text()!r}\n"
            f"pending={' '.join(str(t) for t in reversed(self.pending))}\n"
            f"numerals={self.numerals.open} in_use={sorted(self.numerals.in_use)}\n"
            f"rules={self.rule_history}"
        )


def budget_mask(deltas: Sequence[int], seq_td: int, steps_left: int) -> list[bool]:
    """Rules whose terminal-distance change keeps ``td <= steps left`` after the step."""
    return [d + seq_td <= steps_left - 1 for d in deltas]


class AttributeEngine:
    """Masks and expansions for one grammar, ring table and mask config.

    The engine is immutable after construction and can be shared between
    any number of derivations.
    """

    def __init__(
        self,
        grammar: Grammar,
        ring_table: dict[int, RingEffect] | None = None,
        config: MaskConfig | None = None,
    ):
        self.grammar = grammar
        self.config = config or MaskConfig()
        self.rules = grammar.rules
        self.n_rules = len(grammar.rules)
        self.effects = dict(ring_table or {})
        self._check_effects()
        self._setup_numerals()
        self._compute_extended_td()

    # -- static tables -------------------------------------------------
    def _check_effects(self) -> None:
        for rule in self.rules:
            kind = _static_kind(rule)
            eff = self.effects.get(rule.id)
            if kind is None:
                if eff is not None:
                    raise AttributeTableError(f"ring table entry for rule without ring tokens: {rule}")
                continue
            if eff is None:
                raise AttributeTableError(f"ring table has no entry for {rule}")
            if eff.kind != kind:
                raise AttributeTableError(f"ring table says {eff.kind} but rule looks like {kind}: {rule}")
            if kind == "close" and eff.amount != 0:
                raise AttributeTableError(f"closing rule must add 0 atoms: {rule}")
            if kind == "extend" and eff.amount < 1:
                raise AttributeTableError(f"extending rule must add atoms: {rule}")

    def _setup_numerals(self) -> None:
        self.numeral_tokens: set[Token] = set()
        for t in self.grammar.nonterminals:
            rules = self.grammar.rules_for(t)
            if "num" in t.text and all(len(r.rhs) == 1 and r.rhs[0].is_terminal for r in rules):
                self.numeral_tokens.add(t)
        # numeral preference order: first appearance in the file
        order: list[str] = []
        for rule in self.rules:
            if rule.lhs in self.numeral_tokens and rule.rhs[0].text not in order:
                order.append(rule.rhs[0].text)
        self.numeral_order = order
        self.numeral_rule: dict[tuple[Token, str], int] = {}
        for rule in self.rules:
            if rule.lhs in self.numeral_tokens:
                self.numeral_rule[(rule.lhs, rule.rhs[0].text)] = rule.id

    def _child_size(self, rule: Rule, ring_size: int | None) -> tuple[bool, int | None]:
        """Whether cycle-size masking allows `rule` and the ring size it hands down."""
        eff = self.effects.get(rule.id)
        if eff is None:
            return True, None
        cfg = self.config
        if eff.kind == "open":
            return eff.amount <= cfg.max_ring_size, eff.amount
        if eff.kind == "extend":
            new = ring_size + eff.amount
            return new <= cfg.max_ring_size, new
        return ring_size >= cfg.min_ring_size, None

    def _ext_keys(self) -> list[tuple[Token, int | None]]:
        keys = []
        for t in self.grammar.nonterminals:
            if is_ring_path(t):
                keys.extend((t, r) for r in range(self.config.max_ring_size + 1))
            else:
                keys.append((t, None))
        return keys

    def _rhs_keys(self, rule: Rule, child_size: int | None) -> list[tuple[Token, int | None]]:
        return [
            (s, child_size if is_ring_path(s) else None) for s in rule.rhs if not s.is_terminal
        ]

    def _compute_extended_td(self) -> None:
        keys = self._ext_keys()
        candidates: dict[tuple, list[tuple[Rule, list]]] = {}
        for key in keys:
            t, size = key
            opts = []
            for rule in self.grammar.rules_for(t):
                ok, child = self._child_size(rule, size)
                if ok:
                    opts.append((rule, self._rhs_keys(rule, child)))
            candidates[key] = opts

        td: dict[tuple, float] = {k: INF for k in keys}
        changed = True
        while changed:
            changed = False
            for key in keys:
                best = min((sum(td[c] for c in kids) for _, kids in candidates[key]), default=INF)
                if best + 1 < td[key]:
                    td[key] = best + 1
                    changed = True

        root = (self.grammar.root, None)
        seen = {root}
        stack = [root]
        while stack:
            key = stack.pop()
            for _, kids in candidates[key]:
                for c in kids:
                    if c not in seen:
                        seen.add(c)
                        stack.append(c)
        stuck = [f"{t.text}/{s}" for t, s in seen if td[(t, s)] == INF]
        if stuck:
            raise AttributeTableError(f"extended tokens that cannot terminate: {stuck}")
        self.reachable_ext = seen
        self.ext_td = {k: int(v) for k, v in td.items() if v != INF}

        # options[(token, size)] -> [(rule_id, delta_td, child_size)], rule order
        self.options: dict[tuple, list[tuple[int, int, int | None]]] = {}
        for key in keys:
            if td[key] == INF:
                continue
            t, size = key
            opts = []
            for rule in self.grammar.rules_for(t):
                ok, child = self._child_size(rule, size)
                if not ok:
                    continue
                rhs_td = sum(td[c] for c in self._rhs_keys(rule, child))
                if rhs_td == INF:
                    continue
                opts.append((rule.id, int(rhs_td - td[key]), child))
            self.options[key] = opts
            if key in seen and min(d for _, d, _ in opts) != -1:
                raise AttributeTableError(f"no rule with delta -1 for {t.text}/{size}")

    # -- per-token quantities -------------------------------------------
    def token_td(self, tok: ExtendedToken) -> int:
        if tok.base.is_terminal:
            return 0
        return self.ext_td[(tok.base, tok.ring_size)]

    def sequence_td(self, toks: Iterable[ExtendedToken]) -> int:
        return sum(self.token_td(t) for t in toks)

    def delta(self, rule_id: int, ring_size: int | None = None) -> int:
        rule = self.rules[rule_id]
        for rid, d, _ in self.options[(rule.lhs, ring_size)]:
            if rid == rule_id:
                return d
        raise KeyError(f"rule {rule_id} not applicable at ring size {ring_size}")

    def initial_state(self) -> DerivationState:
        root = ExtendedToken(self.grammar.root)
        if self.token_td(root) > self.config.max_steps:
            raise ValueError(
                f"max_steps={self.config.max_steps} is below the root terminal distance "
                f"{self.token_td(root)}"
            )
        return DerivationState(root, self.token_td(root))

    # -- masks --------------------------------------------------------------
    def propagate(
        self, rule: Rule, parent: ExtendedToken, fresh_id: Callable[[], int]
    ) -> list[ExtendedToken]:
        """Right-hand side of `rule` as extended tokens."""
        if parent.base != rule.lhs:
            raise ValueError(f"rule {rule} does not expand {parent}")
        _, child_size = self._child_size(rule, parent.ring_size)
        fresh: dict[str, int] = {}
        out = []
        received = False
        for s in rule.rhs:
            cid = None
            if carries_cycle_id(s):
                if starts_cycle(parent.base):
                    cls = id_class(s)
                    if cls not in fresh:
                        fresh[cls] = fresh_id()
                    cid = fresh[cls]
                else:
                    cid = parent.cycle_id
                    received = received or cid is not None
            out.append(ExtendedToken(s, cid, child_size if is_ring_path(s) else None))
        if parent.cycle_id is not None and not received and parent.base not in self.numeral_tokens:
            raise AttributeTableError(f"cycle id of {parent} lost by rule {rule}")
        return out

    def numeral_choice(self, state: DerivationState, tok: ExtendedToken) -> str:
        """The one numeral `tok` may emit in `state`."""
        if tok.cycle_id is None:
            raise AttributeTableError(f"numeral token without cycle id: {tok}\n{state.dump()}")
        cached = state.numerals.open.get(tok.cycle_id)
        if cached is not None:
            return cached
        for numeral in self.numeral_order:
            if numeral not in state.numerals.in_use and (tok.base, numeral) in self.numeral_rule:
                return numeral
        raise NumeralExhaustedError(f"all ring numerals in use\n{state.dump()}")

    def numeral_mask(self, state: DerivationState, tok: ExtendedToken) -> list[bool]:
        """Mask over ``rules_for(tok.base)`` allowing exactly one numeral."""
        numeral = self.numeral_choice(state, tok)
        return [r.rhs[0].text == numeral for r in self.grammar.rules_for(tok.base)]

    def cycle_size_mask(self, tok: ExtendedToken, rules: Sequence[Rule]) -> list[bool]:
        mask = [self._child_size(r, tok.ring_size)[0] for r in rules]
        if rules and not any(mask):
            raise MaskInvariantError(f"cycle-size mask empty for {tok}")
        return mask

    def budget_mask(self, tok: ExtendedToken, seq_td: int, steps_left: int) -> list[bool]:
        """Mask over ``rules_for(tok.base)``; rules removed by ring size are False."""
        deltas = {rid: d for rid, d, _ in self.options[(tok.base, tok.ring_size)]}
        rules = self.grammar.rules_for(tok.base)
        return [r.id in deltas and deltas[r.id] + seq_td <= steps_left - 1 for r in rules]

    def allowed(self, state: DerivationState) -> list[int]:
        """Rule ids passing every filter for the leftmost nonterminal, in rule order."""
        tok = state.current
        if tok is None:
            return []
        slack = self.config.max_steps - state.steps_used - 1 - state.td
        opts = self.options[(tok.base, tok.ring_size)]
        if tok.base in self.numeral_tokens:
            want = self.numeral_rule[(tok.base, self.numeral_choice(state, tok))]
            out = [rid for rid, d, _ in opts if rid == want and d <= slack]
        else:
            out = [rid for rid, d, _ in opts if d <= slack]
        if not out:
            raise MaskInvariantError(f"no rule allowed for {tok}\n{state.dump()}")
        return out

    def combined_mask(self, state: DerivationState) -> np.ndarray:
        mask = np.zeros(self.n_rules, dtype=bool)
        mask[self.allowed(state)] = True
        return mask

    # -- expansion ----------------------------------------------------------
    def apply(self, state: DerivationState, rule_id: int, check: bool = True) -> DerivationState:
        """Expand the leftmost nonterminal of `state` in place with `rule_id`."""
        tok = state.current
        if tok is None:
            raise ValueError("derivation already complete")
        rule = self.rules[rule_id]
        if check:
            if rule_id not in self.allowed(state):
                raise MaskInconsistencyError(
                    f"rule {rule_id} ({rule}) is masked out\n{state.dump()}"
                )
        elif rule.lhs != tok.base:
            raise MaskInconsistencyError(f"rule {rule} does not expand {tok}")
        delta = None
        for rid, d, _ in self.options[(tok.base, tok.ring_size)]:
            if rid == rule_id:
                delta = d
                break
        if delta is None:
            raise MaskInconsistencyError(f"rule {rule} removed by ring-size limits for {tok}")

        if tok.base in self.numeral_tokens:
            numeral = rule.rhs[0].text
            cache = state.numerals
            if tok.cycle_id in cache.open:
                if cache.open[tok.cycle_id] != numeral:
                    raise MaskInconsistencyError(f"wrong closing numeral {numeral} for {tok}")
                del cache.open[tok.cycle_id]
                cache.in_use.discard(numeral)
            else:
                if numeral in cache.in_use:
                    raise MaskInconsistencyError(f"numeral {numeral} already open")
                cache.open[tok.cycle_id] = numeral
                cache.in_use.add(numeral)

        children = self.propagate(rule, tok, state.new_cycle_id)
        state.pending.pop()
        state.pending.extend(reversed(children))
        while state.pending and state.pending[-1].base.is_terminal:
            state.emitted.append(state.pending.pop().base)
        state.td += delta
        state.steps_used += 1
        state.rule_history.append(rule_id)
        if state.td > self.config.max_steps - state.steps_used:
            raise MaskInvariantError(f"terminal distance exceeds steps left\n{state.dump()}")
        return state

    def replay(self, rule_ids: Iterable[int], check: bool = True) -> DerivationState:
        state = self.initial_state()
        for rid in rule_ids:
            self.apply(state, rid, check=check)
        return state


def default_ring_table(g: Grammar | None = None) -> dict[int, RingEffect]:
    g = g or default_grammar()
    return load_ring_table(g, default_ring_table_path().read_text(encoding="utf-8"))


@lru_cache(maxsize=16)
def default_engine(config: MaskConfig | None = None) -> AttributeEngine:
    g = default_grammar()
    return AttributeEngine(g, default_ring_table(g), config or MaskConfig())


def engine_for(g: Grammar, config: MaskConfig | None = None,
               ring_table: dict[int, RingEffect] | None = None) -> AttributeEngine:
    """Engine for `g`; the shipped ring table is used when `g` is the shipped grammar."""
    config = config or MaskConfig()
    if ring_table is None and g.fingerprint == default_grammar().fingerprint:
        if g is default_grammar():
            return default_engine(config)
        ring_table = default_ring_table(g)
    return AttributeEngine(g, ring_table, config)


def fresh_ids(start: int = 1) -> Callable[[], int]:
    counter = itertools.count(start)
    return lambda: next(counter)
