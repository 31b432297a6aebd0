import math

import pytest
from hypothesis import given, settings, strategies as st

from molgrammar.grammar import (
    GrammarError, UnproductiveTokenError, check_min_delta, compute_terminal_distances,
    default_grammar, dump_grammar, load_grammar, load_grammar_file,
)

from conftest import FIXTURES


def test_default_grammar_shape(grammar):
    assert len(grammar.rules) == 321
    assert grammar.root.text == "smiles"
    assert grammar.td(grammar.root) == 2
    assert [r.id for r in grammar.rules] == list(range(len(grammar.rules)))


def test_terminal_td_is_zero(grammar):
    assert all(grammar.td(t) == 0 for t in grammar.terminals)


def test_rule_delta_matches_definition(grammar):
    for r in grammar.rules:
        expect = sum(grammar.td(t) for t in r.rhs) - grammar.td(r.lhs)
        assert r.delta_td == expect
        assert r.delta_td >= -1


def test_toy_grammar():
    g = load_grammar_file(FIXTURES / "toy_grammar.txt")
    s = g.token("s")
    assert g.td(s) == 1
    assert [r.delta_td for r in g.rules_for(s)] == [0, -1, -1]
    assert check_min_delta(g) == []


def test_unproductive_token_is_named():
    with pytest.raises(UnproductiveTokenError, match="loop"):
        load_grammar_file(FIXTURES / "broken_grammar.txt")


def test_unproductive_can_be_deferred():
    g = load_grammar_file(FIXTURES / "broken_grammar.txt", compute_td=False)
    assert len(g.rules) == 4
    with pytest.raises(UnproductiveTokenError):
        compute_terminal_distances(g)


@pytest.mark.parametrize("text, message", [
    ("", "no rules"),
    ("s 'C'", "missing '->'"),
    ("s -> ", "empty right-hand side"),
    ("s -> 'C' x", "suspicious terminal"),
    ("s -> 'C\nt -> 'O'", "bad quoting"),
    ("s -> 's'", "both as terminal and nonterminal"),
])
def test_malformed_grammars(text, message):
    with pytest.raises(GrammarError, match=message):
        load_grammar(text)


def test_duplicates_dropped_with_warning(caplog):
    g = load_grammar("s -> 'C'\ns -> 'C'\ns -> 'O'\n")
    assert len(g.rules) == 2
    assert "duplicate" in caplog.text


def test_dump_round_trip(grammar):
    again = load_grammar(dump_grammar(grammar))
    assert again.fingerprint == grammar.fingerprint
    assert [str(r) for r in again.rules] == [str(r) for r in grammar.rules]


def test_fingerprint_depends_on_order():
    a = load_grammar("s -> 'C'\ns -> 'O'")
    b = load_grammar("s -> 'O'\ns -> 'C'")
    assert a.fingerprint != b.fingerprint


def test_default_grammar_is_cached():
    assert default_grammar() is default_grammar()


def test_rules_for_errors(grammar):
    with pytest.raises(GrammarError):
        grammar.rules_for(grammar.token("C"))
    with pytest.raises(GrammarError):
        grammar.rules_for("no_such_token")


# random small grammars: the fixpoint must satisfy its defining equation

@st.composite
def small_grammars(draw):
    n_nt = draw(st.integers(1, 5))
    names = [f"n{i}" for i in range(n_nt)]
    lines = []
    for name in names:
        for _ in range(draw(st.integers(1, 4))):
            rhs = draw(st.lists(st.sampled_from(names + ["'a'", "'b'"]), min_size=1, max_size=4))
            lines.append(f"{name} -> {' '.join(rhs)}")
    return "\n".join(lines)


@settings(max_examples=200, deadline=None)
@given(small_grammars())
def test_fixpoint_property(text):
    g = load_grammar(text, compute_td=False)
    try:
        compute_terminal_distances(g)
    except UnproductiveTokenError:
        # confirm by brute force: some nonterminal never derives a terminal string
        productive = set()
        changed = True
        while changed:
            changed = False
            for r in g.rules:
                if r.lhs not in productive and all(t.is_terminal or t in productive for t in r.rhs):
                    productive.add(r.lhs)
                    changed = True
        reachable = {t for t in g.reachable() if not t.is_terminal}
        assert reachable - productive
        return
    reachable = [t for t in g.reachable() if not t.is_terminal]
    for t in g.nonterminals:
        best = min(sum(g.td(s) for s in r.rhs) for r in g.rules_for(t))
        assert g.td(t) == 1 + best
        # unreachable junk may stay unproductive; everything reachable may not
        assert math.isfinite(g.td(t)) or t not in reachable
    before = dict(g.td_table)
    compute_terminal_distances(g)
    assert g.td_table == before
    assert check_min_delta(g) == []
