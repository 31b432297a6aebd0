"""Molecule scores: normalized logP, synthetic accessibility and a ring penalty.

The total is::

    R = logP_norm + SA_norm + C_norm + w_sa * min(SA_norm, 0) - w_ac * max(n_arom - 5, 0)

where each ``*_norm`` is a z-score against corpus statistics and ``n_arom`` is
the number of all-aromatic rings.  With ``w_sa = w_ac = 0`` it reduces to the
plain sum of the three z-scores.

Raw logP and SA values come from a scorer.  The built-in ``desk`` scorer is a
cheap additive surrogate; `SubprocessScorer` talks to any external program
that speaks the batch protocol described on that class.
"""

from __future__ import annotations

import json
import math
import shlex
import statistics
import subprocess
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from . import validity

COMPONENTS = ("logp", "sa", "cycle")
AROMATIC_FREE = 5


class ScorerError(RuntimeError):
    pass


class RewardConfigError(ValueError):
    pass


# per-atom logP increments for the desk scorer, keyed by element as written
# (lowercase for aromatic atoms)
DESK_LOGP = {
    "C": 0.14, "c": 0.30, "N": -0.60, "n": -0.50, "O": -0.50, "o": -0.10,
    "S": 0.25, "s": 0.35, "P": 0.10, "p": 0.10, "B": -0.20, "b": -0.20,
    "F": 0.40, "Cl": 0.65, "Br": 0.85, "I": 1.05,
}
DESK_SA_RING = 0.5
DESK_SA_ATOM = 0.1
DESK_SA_BRACKET = 1.0


class Scorer(Protocol):
    name: str

    def evaluate(self, smiles: str) -> tuple[float, float]: ...

    def evaluate_batch(self, smiles: Sequence[str]) -> list[tuple[float, float] | None]: ...


class DeskScorer:
    """Additive surrogate for logP and SA.

    logP is a sum of per-atom increments from `DESK_LOGP`.  SA is
    ``-(0.5 * rings + 0.1 * atoms + 1.0 * distinct bracket atoms)``, so
    bigger, more cyclic and more decorated molecules look harder to make.
    Values are only meant to give the optimizer the right kind of pressure;
    they do not track any real logP or SA implementation.
    """

    name = "desk"

    def evaluate(self, smiles: str) -> tuple[float, float]:
        report = validity.check(smiles)
        if not report.valid:
            raise ScorerError(f"invalid SMILES: {smiles!r}")
        logp = sum(DESK_LOGP.get(a.symbol, 0.0) for a in report.atoms)
        brackets = {a.bracket for a in report.atoms if a.bracket}
        sa = -(DESK_SA_RING * len(report.ring_sizes) + DESK_SA_ATOM * report.atom_count
               + DESK_SA_BRACKET * len(brackets))
        return logp, sa

    def evaluate_batch(self, smiles):
        out = []
        for s in smiles:
            try:
                out.append(self.evaluate(s))
            except ScorerError:
                out.append(None)
        return out


class SubprocessScorer:
    """Batch scoring through an external command.

    The command reads UTF-8 SMILES from stdin, one per line terminated by
    ``\\n``, and writes exactly one line per input to stdout: ``logp\\tsa\\n``.
    A line that does not hold two finite floats marks that molecule as
    failed.  A non-zero exit status or a wrong number of lines fails the
    whole batch.
    """

    def __init__(self, command: Sequence[str], name: str = "external", timeout: float | None = 600):
        self.command = list(command)
        self.name = name
        self.timeout = timeout

    def evaluate_batch(self, smiles):
        if not smiles:
            return []
        payload = "".join(s + "\n" for s in smiles).encode("utf-8")
        try:
            proc = subprocess.run(self.command, input=payload, capture_output=True,
                                  timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ScorerError(f"scorer command failed: {exc}") from exc
        if proc.returncode != 0:
            raise ScorerError(
                f"scorer exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[:500]}"
            )
        lines = proc.stdout.decode("utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) != len(smiles):
            raise ScorerError(f"scorer returned {len(lines)} lines for {len(smiles)} molecules")
        out: list[tuple[float, float] | None] = []
        for line in lines:
            parts = line.split("\t")
            try:
                logp, sa = float(parts[0]), float(parts[1])
            except (IndexError, ValueError):
                out.append(None)
                continue
            out.append((logp, sa) if len(parts) == 2 and math.isfinite(logp) and math.isfinite(sa) else None)
        return out

    def evaluate(self, smiles: str) -> tuple[float, float]:
        res = self.evaluate_batch([smiles])[0]
        if res is None:
            raise ScorerError(f"scorer failed on {smiles!r}")
        return res


def get_scorer(spec: str | Sequence[str]) -> Scorer:
    """``"desk"`` or a command line (string or argv list) for `SubprocessScorer`."""
    if spec == "desk":
        return DeskScorer()
    if isinstance(spec, str):
        return SubprocessScorer(shlex.split(spec))
    return SubprocessScorer(spec)


# -- normalization ------------------------------------------------------------

@dataclass(frozen=True)
class Stat:
    mean: float
    std: float


def normalize(raw: float, mean: float, std: float) -> float:
    if not std > 0:
        raise RewardConfigError(f"standard deviation must be positive, got {std}")
    return (raw - mean) / std


def denormalize(z: float, mean: float, std: float) -> float:
    if not std > 0:
        raise RewardConfigError(f"standard deviation must be positive, got {std}")
    return z * std + mean


def unit_normalization() -> dict[str, Stat]:
    return {c: Stat(0.0, 1.0) for c in COMPONENTS}


def load_normalization(path: str | Path) -> dict[str, Stat]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return _parse_normalization(data, str(path))


def _parse_normalization(data: dict, where: str = "normalization") -> dict[str, Stat]:
    out = {}
    for c in COMPONENTS:
        if c not in data:
            raise RewardConfigError(f"{where}: missing component {c!r}")
        try:
            stat = Stat(float(data[c]["mean"]), float(data[c]["std"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise RewardConfigError(f"{where}: bad entry for {c!r}") from exc
        if not stat.std > 0:
            raise RewardConfigError(f"{where}: std for {c!r} must be positive")
        out[c] = stat
    return out


def save_normalization(norm: dict[str, Stat], path: str | Path) -> None:
    data = {c: {"mean": norm[c].mean, "std": norm[c].std} for c in COMPONENTS}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def default_normalization_path() -> Path:
    return Path(str(resources.files("molgrammar") / "data" / "desk_normalization.json"))


def default_normalization() -> dict[str, Stat]:
    return load_normalization(default_normalization_path())


# -- scoring --------------------------------------------------------------------

@dataclass
class RewardConfig:
    w_sa: float = 0.0
    w_ac: float = 0.0
    normalization: dict[str, Stat] = field(default_factory=unit_normalization)
    scorer: str = "desk"

    def __post_init__(self) -> None:
        if self.w_sa < 0 or self.w_ac < 0:
            raise RewardConfigError("w_sa and w_ac must be non-negative")
        if isinstance(self.normalization, dict):
            self.normalization = {
                k: (v if isinstance(v, Stat) else Stat(float(v["mean"]), float(v["std"])))
                for k, v in self.normalization.items()
            }
        for c in COMPONENTS:
            if c not in self.normalization:
                raise RewardConfigError(f"normalization lacks component {c!r}")
            if not self.normalization[c].std > 0:
                raise RewardConfigError(f"normalization std for {c!r} must be positive")

    def to_dict(self) -> dict:
        return {
            "w_sa": self.w_sa, "w_ac": self.w_ac, "scorer": self.scorer,
            "normalization": {c: asdict(s) for c, s in self.normalization.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> RewardConfig:
        d = dict(d)
        norm = d.pop("normalization", None)
        if isinstance(norm, str):
            norm = load_normalization(norm)
        elif isinstance(norm, dict):
            norm = _parse_normalization(norm)
        else:
            norm = unit_normalization()
        unknown = set(d) - {"w_sa", "w_ac", "scorer"}
        if unknown:
            raise RewardConfigError(f"unknown reward fields: {sorted(unknown)}")
        return cls(normalization=norm, **d)


@dataclass
class ScoreBreakdown:
    logp_raw: float
    sa_raw: float
    cycle_raw: float
    logp_norm: float
    sa_norm: float
    cycle_norm: float
    aromatic_cycles: int
    total: float
    valid: bool = True
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def invalid_score(error: str) -> ScoreBreakdown:
    """Sentinel for molecules that could not be scored; never selected as best."""
    nan = float("nan")
    return ScoreBreakdown(nan, nan, nan, nan, nan, nan, 0, -math.inf, valid=False, error=error)


def cycle_penalty(smiles: str, max_ring_size: int = 8) -> float:
    """``-max(0, largest ring - 6)``."""
    return _cycle_raw(validity.check(smiles, max_ring_size=max_ring_size))


def _cycle_raw(report: validity.ValidityReport) -> float:
    return float(min(0, 6 - report.largest_ring))


def combine(logp_norm: float, sa_norm: float, cycle_norm: float, aromatic_cycles: int,
            w_sa: float, w_ac: float) -> float:
    return (logp_norm + sa_norm + cycle_norm + w_sa * min(sa_norm, 0.0)
            - w_ac * max(aromatic_cycles - AROMATIC_FREE, 0))


def breakdown(logp_raw: float, sa_raw: float, cycle_raw: float, aromatic_cycles: int,
              cfg: RewardConfig) -> ScoreBreakdown:
    n = cfg.normalization
    lz = normalize(logp_raw, n["logp"].mean, n["logp"].std)
    sz = normalize(sa_raw, n["sa"].mean, n["sa"].std)
    cz = normalize(cycle_raw, n["cycle"].mean, n["cycle"].std)
    total = combine(lz, sz, cz, aromatic_cycles, cfg.w_sa, cfg.w_ac)
    return ScoreBreakdown(logp_raw, sa_raw, cycle_raw, lz, sz, cz, aromatic_cycles, total)


def score_many(smiles: Sequence[str], cfg: RewardConfig, scorer: Scorer | None = None) -> list[ScoreBreakdown]:
    scorer = scorer or get_scorer(cfg.scorer)
    reports = [validity.check(s) for s in smiles]
    todo = [i for i, r in enumerate(reports) if r.valid]
    try:
        raw = scorer.evaluate_batch([smiles[i] for i in todo])
    except ScorerError as exc:
        raw = [None] * len(todo)
        batch_error = str(exc)
    else:
        batch_error = "scorer failed"
    out: list[ScoreBreakdown] = []
    by_index = dict(zip(todo, raw))
    for i, report in enumerate(reports):
        if not report.valid:
            out.append(invalid_score("; ".join(v.message for v in report.violations)))
            continue
        res = by_index[i]
        if res is None:
            out.append(invalid_score(batch_error))
            continue
        out.append(breakdown(res[0], res[1], _cycle_raw(report), report.aromatic_ring_count, cfg))
    return out


def score(smiles: str, cfg: RewardConfig, scorer: Scorer | None = None) -> ScoreBreakdown:
    return score_many([smiles], cfg, scorer)[0]


def corpus_normalization(corpus: Iterable[str], scorer: Scorer | None = None) -> dict[str, Stat]:
    """Sample mean and standard deviation of each raw component over a corpus."""
    scorer = scorer or DeskScorer()
    smiles = [s for s in corpus if s]
    if len(smiles) < 2:
        raise RewardConfigError("need at least two molecules to normalize")
    values: dict[str, list[float]] = {c: [] for c in COMPONENTS}
    for s, res in zip(smiles, scorer.evaluate_batch(smiles)):
        if res is None:
            continue
        values["logp"].append(res[0])
        values["sa"].append(res[1])
        values["cycle"].append(cycle_penalty(s))
    if len(values["logp"]) < 2:
        raise RewardConfigError("fewer than two molecules could be scored")
    out = {}
    for c in COMPONENTS:
        std = statistics.stdev(values[c])
        if not std > 0:
            raise RewardConfigError(f"component {c!r} is constant over the corpus")
        out[c] = Stat(statistics.fmean(values[c]), std)
    return out


TSV_COLUMNS = ("smiles", "logp_raw", "sa_raw", "cycle_raw", "logp_norm", "sa_norm",
               "cycle_norm", "aromatic_cycles", "total", "valid", "error")


def tsv_row(smiles: str, b: ScoreBreakdown) -> str:
    vals = [smiles] + [getattr(b, c) for c in TSV_COLUMNS[1:]]
    cells = []
    for v in vals:
        if isinstance(v, bool):
            cells.append("1" if v else "0")
        elif isinstance(v, float):
            cells.append(repr(v))
        elif v is None:
            cells.append("")
        else:
            cells.append(str(v).replace("\t", " "))
    return "\t".join(cells)
