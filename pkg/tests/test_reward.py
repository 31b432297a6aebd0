import math
import sys

import pytest

from molgrammar.reward import (
    TSV_COLUMNS, DeskScorer, RewardConfig, RewardConfigError, ScorerError, Stat,
    SubprocessScorer, combine, corpus_normalization, cycle_penalty, default_normalization,
    denormalize, get_scorer, invalid_score, load_normalization, normalize, save_normalization,
    score, score_many, tsv_row,
)

from conftest import read_smiles

# a scorer that answers with the string length as logP and -1 as SA, and
# refuses molecules containing 'Br'
FAKE = """
import sys
for line in sys.stdin:
    s = line.rstrip("\\n")
    print("oops" if "Br" in s else f"{len(s)}\\t-1.0")
"""


def test_benzene_desk_values():
    b = score("c1ccccc1", RewardConfig())
    assert b.valid
    assert b.logp_raw == pytest.approx(1.8)
    assert b.sa_raw == pytest.approx(-1.1)
    assert b.cycle_raw == 0.0
    assert b.aromatic_cycles == 1
    assert b.total == pytest.approx(0.7)


def test_cycle_penalty():
    assert cycle_penalty("CCO") == 0.0
    assert cycle_penalty("C1CCCCC1") == 0.0
    assert cycle_penalty("C1CCCCCC1") == -1.0
    assert cycle_penalty("C1CCCCCCC1") == -2.0
    assert math.copysign(1.0, cycle_penalty("CC")) == 1.0


def test_penalty_terms():
    assert combine(1.0, -2.0, 0.5, 0, 3.0, 0.0) == 1.0 - 2.0 + 0.5 - 6.0
    assert combine(0.0, 0.0, 0.0, 8, 0.0, 0.5) == -1.5
    assert combine(0.0, 0.0, 0.0, 5, 0.0, 100.0) == 0.0


def test_invalid_molecules_get_sentinel():
    b = score("C1CC", RewardConfig())
    assert not b.valid and b.total == -math.inf and "never closed" in b.error
    assert invalid_score("x").total == -math.inf


def test_normalize_round_trip():
    assert denormalize(normalize(3.0, 1.0, 2.0), 1.0, 2.0) == 3.0
    with pytest.raises(RewardConfigError):
        normalize(1.0, 0.0, 0.0)


def test_normalization_files(tmp_path):
    norm = default_normalization()
    assert set(norm) == {"logp", "sa", "cycle"}
    path = tmp_path / "n.json"
    save_normalization(norm, path)
    assert load_normalization(path) == norm
    path.write_text('{"logp": {"mean": 0, "std": 1}, "sa": {"mean": 0, "std": 0}, "cycle": {}}')
    with pytest.raises(RewardConfigError):
        load_normalization(path)


def test_corpus_normalization_matches_shipped_file():
    norm = corpus_normalization(read_smiles("druglike.smi"))
    shipped = default_normalization()
    for c in norm:
        assert norm[c].mean == pytest.approx(shipped[c].mean, abs=1e-4)
        assert norm[c].std == pytest.approx(shipped[c].std, abs=1e-4)


def test_corpus_normalization_errors():
    with pytest.raises(RewardConfigError):
        corpus_normalization(["CCO"])
    with pytest.raises(RewardConfigError, match="constant"):
        corpus_normalization(["CCO", "OCC"])


def test_reward_config():
    cfg = RewardConfig.from_dict({"w_sa": 1.5, "normalization": {c: {"mean": 0, "std": 2}
                                                                 for c in ("logp", "sa", "cycle")}})
    assert cfg.w_sa == 1.5 and cfg.normalization["sa"] == Stat(0.0, 2.0)
    assert RewardConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(RewardConfigError):
        RewardConfig(w_sa=-1)
    with pytest.raises(RewardConfigError):
        RewardConfig.from_dict({"w_x": 1})


def test_desk_scorer_rejects_invalid():
    with pytest.raises(ScorerError):
        DeskScorer().evaluate("C(")
    assert DeskScorer().evaluate_batch(["CCO", "C("])[1] is None


def test_subprocess_scorer(tmp_path):
    script = tmp_path / "fake.py"
    script.write_text(FAKE)
    scorer = get_scorer(f"{sys.executable} {script}")
    assert isinstance(scorer, SubprocessScorer)
    assert scorer.evaluate("CCO") == (3.0, -1.0)
    out = score_many(["CCO", "BrCC", "C1CC"], RewardConfig(), scorer)
    assert [b.valid for b in out] == [True, False, False]
    assert out[0].logp_raw == 3.0


def test_subprocess_scorer_failures(tmp_path):
    bad = SubprocessScorer([sys.executable, "-c", "import sys; sys.exit(3)"])
    with pytest.raises(ScorerError, match="exited with 3"):
        bad.evaluate_batch(["CCO"])
    short = SubprocessScorer([sys.executable, "-c", "print('1\\t2')"])
    with pytest.raises(ScorerError, match="lines"):
        short.evaluate_batch(["CCO", "CC"])
    # a failed batch marks every molecule as unscored rather than raising
    out = score_many(["CCO"], RewardConfig(), bad)
    assert not out[0].valid and "exited" in out[0].error
    missing = SubprocessScorer(["/no/such/binary"])
    with pytest.raises(ScorerError):
        missing.evaluate_batch(["CCO"])


def test_tsv_row():
    b = score("CCO", RewardConfig())
    cells = tsv_row("CCO", b).split("\t")
    assert len(cells) == len(TSV_COLUMNS)
    assert cells[0] == "CCO" and cells[-2] == "1" and cells[-1] == ""
    assert float(cells[TSV_COLUMNS.index("total")]) == b.total
