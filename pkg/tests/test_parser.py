import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from molgrammar.attributes import MaskConfig, engine_for
from molgrammar.grammar import default_grammar
from molgrammar.parser import (
    IncompleteDerivationError, IngestStats, NotRepresentableError, TokenizeError, count_atoms,
    ingest_corpus, iter_corpus, parse, parser_for, render, replay_plain, tokenize,
)
from molgrammar.policy import UniformPolicy
from molgrammar.sampler import rollout

from conftest import FIXTURES


def test_tokenize_longest_match(grammar):
    assert tokenize(grammar, "ClCBr") == ["Cl", "C", "Br"]
    assert tokenize(grammar, "C%12CC%12") == ["C", "%12", "C", "C", "%12"]
    assert tokenize(grammar, "[NH3+]") == ["[", "N", "H", "3", "+", "]"]


def test_tokenize_error_position(grammar):
    with pytest.raises(TokenizeError) as info:
        tokenize(grammar, "CCX")
    assert info.value.position == 2
    with pytest.raises(TokenizeError):
        tokenize(grammar, "")


def test_carbon_dioxide_rule_sequence(grammar):
    assert parse(grammar, "O=C=O").rule_ids == [3, 11, 25, 29, 22, 39]


def test_not_representable(grammar):
    with pytest.raises(NotRepresentableError):
        parse(grammar, "c1ccc2ccccc2c1")
    with pytest.raises(NotRepresentableError):
        parse(grammar, "C(")


def test_known_molecules():
    parser = parser_for(default_grammar())
    for line in (FIXTURES / "known.smi").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        smiles, name, expect = line.split("\t")
        assert parser.recognizes(smiles) == (expect == "1"), name


def test_chain_parse_length(grammar):
    # each extra carbon in a plain chain costs four rules
    lengths = [len(parse(grammar, "C" * n).rule_ids) for n in range(1, 8)]
    assert lengths == [4 * n + 1 for n in range(1, 8)]


def test_render_errors(grammar):
    with pytest.raises(IncompleteDerivationError):
        render(grammar, [])
    with pytest.raises(IncompleteDerivationError):
        render(grammar, parse(grammar, "O=C=O").rule_ids[:-1])


def test_replay_plain(grammar):
    toks = replay_plain(grammar, parse(grammar, "O=C=O").rule_ids)
    assert [t.text for t in toks] == ["O", "=", "C", "=", "O"]
    with pytest.raises(IncompleteDerivationError, match="cannot expand"):
        replay_plain(grammar, [3, 3])


def test_count_atoms():
    assert count_atoms(["C", "C", "O"]) == 3
    assert count_atoms(["[", "N", "H", "3", "+", "]"]) == 1
    assert count_atoms(["c", "1", "c", "c", "(", "Cl", ")", "c", "1"]) == 5


def test_iter_corpus_counts(grammar):
    lines = ["CCO ethanol", "", "C(", "CCX", "c1ccccc1\tbenzene"]
    stats = IngestStats()
    out = list(iter_corpus(parser_for(grammar), lines, stats))
    assert [d.source for d in out] == ["CCO", "c1ccccc1"]
    assert (stats.lines, stats.parsed, stats.unparseable, stats.tokenize_failed) == (4, 2, 1, 1)
    assert stats.parse_fraction == 0.5
    assert json.loads(stats.to_json())["parsed"] == 2


def test_ingest_fixture(grammar):
    derivs, stats = ingest_corpus(grammar, FIXTURES / "druglike.smi")
    assert stats.parsed == len(derivs) == 1200
    assert stats.rules_per_molecule == pytest.approx(stats.total_rules / 1200)


def test_parser_cache(grammar):
    assert parser_for(grammar) is parser_for(grammar)


_engine = engine_for(default_grammar(), MaskConfig(max_steps=120))


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**32 - 1))
def test_sampled_strings_round_trip(seed):
    r = rollout(UniformPolicy(_engine.n_rules), np.random.default_rng(seed), _engine)
    g = _engine.grammar
    d = parser_for(g).parse(r.smiles)
    assert render(g, d) == r.smiles
    # the canonical parse is never longer than the sampled derivation
    assert len(d.rule_ids) <= r.steps


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="CNOc1()=#[]+-H2%", max_size=20))
def test_parser_total_on_noise(text):
    g = default_grammar()
    try:
        d = parse(g, text)
    except (TokenizeError, NotRepresentableError):
        return
    assert render(g, d) == text
