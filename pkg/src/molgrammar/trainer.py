"""Training: off-policy pretraining on parsed molecules, then best-of-batch optimization.

Pretraining minimizes the summed negative log-probability of corpus
derivations under the masked policy.  Optimization samples a batch, scores
it, and takes one Adam step on the log-likelihood of the best molecule plus
an anchor term ``w_a * |p - p_base|^2``.  The reward only decides which
molecule is best; its value never enters the loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attributes import AttributeEngine, MaskInconsistencyError
from .policy import (
    Policy, TransformerPolicy, anchor_distance, anchored_best_loss, read_checkpoint,
    save_checkpoint,
)
from .reward import RewardConfig, ScoreBreakdown, get_scorer, score_many
from .sampler import Rollout, derivation_masks, rollout_batch
from .validity import check

logger = logging.getLogger(__name__)

ScoreFn = Callable[[Sequence[str]], list[ScoreBreakdown]]


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    batch_size: int = 40
    max_steps: int = 277
    lr: float = 1e-4
    w_a: float = 0.0
    reward: RewardConfig = field(default_factory=RewardConfig)
    iterations: int = 300
    epochs: int = 1
    minibatch: int = 8
    eval_batch: int = 8
    seed: int = 0
    mode: str = "exclude"
    abort_streak: int = 10
    checkpoint_every: int = 50
    keep_best: int = 100

    def __post_init__(self) -> None:
        if isinstance(self.reward, dict):
            self.reward = RewardConfig.from_dict(self.reward)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.w_a < 0:
            raise ValueError("w_a must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.minibatch < 1:
            raise ValueError("minibatch must be at least 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["reward"] = self.reward.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam on a flat parameter vector (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if grad.shape != params.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        return {"adam.m": self.m, "adam.v": self.v}, {"adam_t": self.t}

    def restore(self, blocks: dict[str, np.ndarray], meta: dict) -> None:
        self.m = np.array(blocks["adam.m"], dtype=np.float64)
        self.v = np.array(blocks["adam.v"], dtype=np.float64)
        self.t = int(meta["adam_t"])


# -- run directory ------------------------------------------------------------------

class RunDir:
    """config.json, diagnostics.jsonl, checkpoints/ and best_molecules.jsonl."""

    def __init__(self, path: str | Path, fingerprint: str):
        self.path = Path(path)
        self.fingerprint = fingerprint
        (self.path / "checkpoints").mkdir(parents=True, exist_ok=True)

    def write_config(self, config: dict) -> None:
        (self.path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    def log(self, record: dict) -> None:
        with open(self.path / "diagnostics.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint(self, policy: TransformerPolicy, adam: Adam, meta: dict, tag: str) -> Path:
        blocks, adam_meta = adam.state()
        meta = {**meta, **adam_meta}
        target = self.path / "checkpoints" / f"{tag}.bin"
        save_checkpoint(policy, target, self.fingerprint, extra=blocks, meta=meta)
        save_checkpoint(policy, self.path / "checkpoints" / "latest.bin", self.fingerprint,
                        extra=blocks, meta=meta)
        return target

    def save_base(self, policy: TransformerPolicy) -> None:
        save_checkpoint(policy, self.path / "base.bin", self.fingerprint)

    def write_best(self, best: list[dict]) -> None:
        with open(self.path / "best_molecules.jsonl", "w", encoding="utf-8") as fh:
            for rec in sorted(best, key=lambda r: (-r["total"], r["smiles"])):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def read_best(self) -> list[dict]:
        path = self.path / "best_molecules.jsonl"
        if not path.exists():
            return []
        return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l]

    def truncate_log(self, keep_below: int, key: str) -> None:
        """Drop diagnostics at or after `keep_below` (used when resuming)."""
        log = self.path / "diagnostics.jsonl"
        if not log.exists():
            return
        lines = [l for l in log.read_text().splitlines() if l and json.loads(l)[key] < keep_below]
        log.write_text("".join(l + "\n" for l in lines))


def resume_state(run_dir: str | Path, fingerprint: str) -> tuple[TransformerPolicy, Adam, dict]:
    ck = read_checkpoint(Path(run_dir) / "checkpoints" / "latest.bin", fingerprint)
    adam = Adam(ck.policy.params.size, lr=float(ck.meta.get("lr", 0.0)))
    adam.restore(ck.extra, ck.meta)
    return ck.policy, adam, ck.meta


# -- helpers ------------------------------------------------------------------------

def select_best(scores: Sequence[float | ScoreBreakdown]) -> int | None:
    """Index of the highest finite score; ties go to the lowest index.

    Returns None when no molecule has a usable score, which callers treat as
    a signal to skip the iteration.
    """
    best, best_val = None, -math.inf
    for i, s in enumerate(scores):
        if isinstance(s, ScoreBreakdown):
            val = s.total if s.valid else -math.inf
        else:
            val = float(s)
        if math.isfinite(val) and val > best_val:
            best, best_val = i, val
    return best


def _seed_for(seed: int, phase: int, it: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), phase, int(it)])


def _scored_summary(scores: Sequence[ScoreBreakdown]) -> dict:
    vals = [s.total for s in scores if s.valid]
    return {
        "mean_reward": float(np.mean(vals)) if vals else None,
        "max_reward": float(np.max(vals)) if vals else None,
        "scored_fraction": len(vals) / len(scores) if scores else 0.0,
    }


def _validity_fraction(rollouts: Sequence[Rollout]) -> float:
    if not rollouts:
        return 0.0
    ok = 0
    for r in rollouts:
        r.valid = check(r.smiles).valid
        ok += r.valid
    return ok / len(rollouts)


def _default_score_fn(cfg: TrainConfig) -> ScoreFn:
    scorer = get_scorer(cfg.reward.scorer)
    return lambda smiles: score_many(list(smiles), cfg.reward, scorer)


def _mean_loss_and_grad(policy: Policy, items: Sequence[tuple[list[int], list]], mode: str):
    total, grad = 0.0, None
    for ids, masks in items:
        loss, g = policy.loss_and_grad(ids, masks, mode)
        total += loss
        grad = g if grad is None else grad + g
    n = len(items)
    return total / n, grad / n


# -- phases ---------------------------------------------------------------------------

def prepare_corpus(engine: AttributeEngine, derivations: Iterable[Sequence[int]]
                   ) -> tuple[list[tuple[list[int], list]], int]:
    """Pair each derivation with its per-step masks; mask-inconsistent ones are skipped."""
    items, skipped = [], 0
    for ids in derivations:
        ids = list(ids)
        if len(ids) > engine.config.max_steps:
            skipped += 1
            continue
        try:
            items.append((ids, derivation_masks(engine, ids)))
        except MaskInconsistencyError:
            skipped += 1
    return items, skipped


def pretrain(policy: TransformerPolicy, derivations: Iterable[Sequence[int]], cfg: TrainConfig,
             engine: AttributeEngine, run: RunDir | None = None,
             score_fn: ScoreFn | None = None, adam: Adam | None = None,
             start_step: int = 0) -> tuple[TransformerPolicy, list[dict]]:
    """Adam on the mean pretraining loss over shuffled minibatches.

    After every update one on-policy batch of `cfg.eval_batch` molecules is
    sampled without touching the parameters and summarized in the
    diagnostics.  Returns the policy (updated in place) and the per-update
    diagnostics.
    """
    items, skipped = prepare_corpus(engine, derivations)
    if not items:
        raise ValueError("no usable derivations to pretrain on")
    if skipped:
        logger.warning("skipped %d mask-inconsistent derivations", skipped)
    adam = adam or Adam(policy.params.size, cfg.lr)
    score_fn = score_fn or _default_score_fn(cfg)
    rng = np.random.default_rng(_seed_for(cfg.seed, 0, 0))
    per_epoch = math.ceil(len(items) / cfg.minibatch)
    diags: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        for b in range(per_epoch):
            if step < start_step:
                step += 1
                continue
            batch = [items[i] for i in order[b * cfg.minibatch:(b + 1) * cfg.minibatch]]
            loss, grad = _mean_loss_and_grad(policy, batch, cfg.mode)
            adam.step(policy.params.flat, grad)
            rec = {"phase": "pretrain", "step": step, "epoch": epoch, "loss": loss,
                   "skipped": skipped}
            if cfg.eval_batch:
                evals = rollout_batch(policy, _seed_for(cfg.seed, 1, step), cfg.eval_batch,
                                      engine, cfg.mode)
                rec["validity_fraction"] = _validity_fraction(evals)
                rec.update(_scored_summary(score_fn([r.smiles for r in evals])))
                rec["mean_log_prob"] = float(np.mean([r.log_prob for r in evals]))
            diags.append(rec)
            if run is not None:
                run.log(rec)
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    run.checkpoint(policy, adam, {"phase": "pretrain", "next_step": step + 1,
                                                  "lr": cfg.lr}, f"pretrain_{step + 1:06d}")
            step += 1
    if run is not None:
        run.checkpoint(policy, adam, {"phase": "pretrain", "next_step": step, "lr": cfg.lr},
                       f"pretrain_{step:06d}")
    return policy, diags


def optimize(policy: TransformerPolicy, p_base: np.ndarray, cfg: TrainConfig,
             engine: AttributeEngine, run: RunDir | None = None,
             score_fn: ScoreFn | None = None, adam: Adam | None = None,
             start_iteration: int = 0) -> tuple[TransformerPolicy, list[dict]]:
    """Best-of-batch policy gradient with anchoring to `p_base`.

    Each iteration samples `cfg.batch_size` molecules, scores them, picks
    the best (ties to the lowest index) and takes one Adam step on
    `anchored_best_loss` for that molecule.  Iterations where nothing could
    be scored leave the parameters untouched; more than `cfg.abort_streak`
    of them in a row raises TrainingAborted.
    """
    p_base = np.asarray(p_base, dtype=np.float64)
    if p_base.shape != policy.params.flat.shape:
        raise ValueError(f"p_base shape {p_base.shape} != parameter shape {policy.params.flat.shape}")
    adam = adam or Adam(policy.params.size, cfg.lr)
    score_fn = score_fn or _default_score_fn(cfg)
    diags: list[dict] = []
    best_pool: dict[str, dict] = {}
    if run is not None and start_iteration:
        best_pool = {d["smiles"]: d for d in run.read_best() if d["iteration"] < start_iteration}
    streak = 0
    for it in range(start_iteration, cfg.iterations):
        rollouts = rollout_batch(policy, _seed_for(cfg.seed, 2, it), cfg.batch_size, engine, cfg.mode)
        validity = _validity_fraction(rollouts)
        scores = score_fn([r.smiles for r in rollouts])
        best = select_best(scores)
        rec = {"phase": "optimize", "iteration": it, "validity_fraction": validity,
               **_scored_summary(scores)}
        if best is None:
            streak += 1
            rec.update(skipped=True, loss=None, best_smiles=None,
                       anchor_distance=anchor_distance(policy.params.flat, p_base))
            diags.append(rec)
            if run is not None:
                run.log(rec)
            logger.warning("iteration %d: no scorable molecule, skipping", it)
            if streak > cfg.abort_streak:
                raise TrainingAborted(f"{streak} consecutive iterations without a scorable molecule",
                                      diags)
            continue
        streak = 0
        chosen = rollouts[best]
        masks = derivation_masks(engine, chosen.rule_ids)
        loss, grad = anchored_best_loss(policy, chosen.rule_ids, masks, p_base, cfg.w_a, cfg.mode)
        adam.step(policy.params.flat, grad)
        rec.update(skipped=False, loss=loss, best_index=best, best_smiles=chosen.smiles,
                   best_reward=scores[best].total,
                   anchor_distance=anchor_distance(policy.params.flat, p_base))
        diags.append(rec)
        for r, s in zip(rollouts, scores):
            if s.valid and r.smiles not in best_pool:
                best_pool[r.smiles] = {"smiles": r.smiles, "iteration": it, **s.to_dict()}
        if len(best_pool) > 4 * cfg.keep_best:
            kept = sorted(best_pool.values(), key=lambda d: -d["total"])[:cfg.keep_best]
            best_pool = {d["smiles"]: d for d in kept}
        if run is not None:
            run.log(rec)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                run.checkpoint(policy, adam, {"phase": "optimize", "next_iteration": it + 1,
                                              "lr": cfg.lr}, f"optimize_{it + 1:06d}")
                run.write_best(sorted(best_pool.values(), key=lambda d: -d["total"])[:cfg.keep_best])
    if run is not None:
        run.checkpoint(policy, adam, {"phase": "optimize", "next_iteration": cfg.iterations,
                                      "lr": cfg.lr}, f"optimize_{cfg.iterations:06d}")
        run.write_best(sorted(best_pool.values(), key=lambda d: -d["total"])[:cfg.keep_best])
    return policy, diags


def running_max(values: Iterable[float | None]) -> list[float]:
    out, cur = [], -math.inf
    for v in values:
        if v is not None and v > cur:
            cur = v
        out.append(cur)
    return out


# -- convergence -------------------------------------------------------------------

REPORT_COMPONENTS = ("log_prob", "logp", "sa", "aromatic_cycles")


def _component_values(smiles: Sequence[str], log_probs: Sequence[float],
                      score_fn: ScoreFn) -> dict[str, list[float]]:
    scores = score_fn(smiles)
    out: dict[str, list[float]] = {c: [] for c in REPORT_COMPONENTS}
    for s, lp in zip(scores, log_probs):
        out["log_prob"].append(float(lp))
        if s.valid:
            out["logp"].append(s.logp_raw)
            out["sa"].append(s.sa_raw)
            out["aromatic_cycles"].append(float(s.aromatic_cycles))
    return out


def convergence_report(policy: Policy, corpus_sample: Sequence[tuple[str, Sequence[int]]],
                       n_rollouts: int, engine: AttributeEngine, seed: int = 0,
                       score_fn: ScoreFn | None = None, bins: int = 10,
                       mode: str = "exclude") -> dict:
    """Compare sampled molecules against a corpus sample.

    `corpus_sample` holds (smiles, rule_ids) pairs.  For every component
    (policy log-probability, logP, SA, aromatic ring count) the report gives
    both means, the absolute difference of the means, and histograms on
    shared bin edges.
    """
    score_fn = score_fn or _default_score_fn(TrainConfig())
    rollouts = rollout_batch(policy, _seed_for(seed, 3, 0), n_rollouts, engine, mode)
    sampled = _component_values([r.smiles for r in rollouts], [r.log_prob for r in rollouts],
                                score_fn)
    corpus_lp = []
    for _, ids in corpus_sample:
        loss, _ = policy.loss_and_grad(list(ids), derivation_masks(engine, ids), mode)
        corpus_lp.append(-loss)
    corpus = _component_values([s for s, _ in corpus_sample], corpus_lp, score_fn)
    report: dict = {"n_sampled": len(rollouts), "n_corpus": len(corpus_sample), "components": {}}
    for c in REPORT_COMPONENTS:
        a, b = np.asarray(sampled[c]), np.asarray(corpus[c])
        entry: dict = {
            "sampled_mean": float(a.mean()) if a.size else None,
            "corpus_mean": float(b.mean()) if b.size else None,
        }
        entry["distance"] = (abs(entry["sampled_mean"] - entry["corpus_mean"])
                             if a.size and b.size else None)
        both = np.concatenate([a, b])
        if both.size:
            lo, hi = float(both.min()), float(both.max())
            edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
            entry["bin_edges"] = edges.tolist()
            entry["sampled_hist"] = np.histogram(a, edges)[0].tolist()
            entry["corpus_hist"] = np.histogram(b, edges)[0].tolist()
        report["components"][c] = entry
    dists = [e["distance"] for e in report["components"].values() if e["distance"] is not None]
    report["total_distance"] = float(sum(dists))
    return report
