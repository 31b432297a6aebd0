import pytest
from hypothesis import given, settings, strategies as st

from molgrammar.validity import check, count_aromatic_rings, is_valid

from conftest import FIXTURES


def _pairs():
    for line in (FIXTURES / "validity_pairs.tsv").read_text().splitlines():
        if line.startswith("#"):
            continue
        smiles, valid, reason = line.split("\t")
        yield pytest.param(smiles, valid == "1", id=reason)


@pytest.mark.parametrize("smiles, expected", list(_pairs()))
def test_validity_pairs(smiles, expected):
    assert check(smiles).valid is expected


def test_report_fields():
    rep = check("c1ccccc1CC(=O)[O-]")
    assert rep.valid
    assert rep.atom_count == 10
    assert rep.ring_sizes == [6]
    assert rep.aromatic_ring_count == 1
    assert rep.largest_ring == 6
    oxy = [a for a in rep.atoms if a.bracket]
    assert len(oxy) == 1 and oxy[0].charge == -1 and oxy[0].symbol == "O"


def test_ring_basis_sizes():
    assert sorted(check("c1ccc2ccccc2c1").ring_sizes) == [6, 6]
    assert check("C12C3C4C1C5C2C3C45").ring_sizes == [4] * 5
    assert check("c1ccc2cc3ccccc3cc2c1").aromatic_ring_count == 3


def test_ring_limit_is_configurable():
    assert not check("C1CCCCCCCC1").valid
    assert check("C1CCCCCCCC1", max_ring_size=9).valid


def test_violation_positions():
    rep = check("CC(=O)(=O)=O")
    assert not rep.valid
    assert rep.violations[0].kind == "valence"


def test_helpers():
    assert count_aromatic_rings("c1ccccc1Cc1ccccc1") == 2
    assert is_valid("CCO") and not is_valid("C1CC")


@settings(max_examples=500, deadline=None)
@given(st.text(max_size=30))
def test_never_raises_on_arbitrary_text(text):
    rep = check(text)
    assert isinstance(rep.valid, bool)
    assert rep.valid or rep.violations


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="CNOScno1234()=#[]+-H@%", max_size=25))
def test_never_raises_on_smiles_like_text(text):
    rep = check(text)
    assert rep.valid or rep.violations
    if rep.valid:
        assert all(3 <= n <= 8 for n in rep.ring_sizes)
