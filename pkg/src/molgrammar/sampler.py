"""Rolling out derivations under a policy and the attribute masks.

Every step expands the leftmost nonterminal.  The engine supplies the rules
that survive masking; the policy's logits are restricted to those rules and
one is drawn from the renormalized distribution.  Steps where the mask
leaves a single rule consume no randomness.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attributes import AttributeEngine, DerivationState, MaskInconsistencyError, default_engine
from .parser import Derivation
from .policy import MASK_MODES, MASK_PENALTY, Policy, masked_log_softmax


@dataclass
class StepRecord:
    chosen_rule: int
    log_prob: float
    n_allowed: int
    logits: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class Rollout:
    derivation: Derivation
    records: list[StepRecord]
    smiles: str
    log_prob: float
    steps: int
    valid: bool | None = None
    score: dict | None = field(default=None)

    @property
    def rule_ids(self) -> list[int]:
        return self.derivation.rule_ids

    def to_record(self) -> dict:
        rec = {
            "smiles": self.smiles,
            "rule_ids": self.rule_ids,
            "log_probs": [r.log_prob for r in self.records],
            "valid": self.valid,
        }
        if self.score is not None:
            rec.update(self.score)
        return rec


def _choose(logits: np.ndarray, allowed: Sequence[int], u: float, mode: str) -> tuple[int, float]:
    """Inverse-CDF draw from the masked softmax; returns (rule id, log prob)."""
    z = np.asarray(logits, dtype=np.float64)[list(allowed)]
    if mode == "subtract":
        # forbidden entries sit MASK_PENALTY below; their mass underflows to 0
        full = np.asarray(logits, dtype=np.float64) - MASK_PENALTY
        full[list(allowed)] = z
        top = full.max()
        lse = top + math.log(np.exp(full - top).sum())
    elif mode == "exclude":
        top = z.max()
        lse = top + math.log(np.exp(z - top).sum())
    else:
        raise ValueError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")
    logp = z - lse
    cdf = np.cumsum(np.exp(logp))
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    k = min(k, len(allowed) - 1)
    return int(allowed[k]), float(logp[k])


def _run(policy: Policy, rngs: Sequence[np.random.Generator], engine: AttributeEngine,
         mode: str, keep_logits: bool, forced: Sequence[Sequence[int]] | None) -> list[Rollout]:
    n = len(rngs)
    states = [engine.initial_state() for _ in range(n)]
    records: list[list[StepRecord]] = [[] for _ in range(n)]
    ctx = policy.batch_context(n)
    active = list(range(n))
    max_steps = engine.config.max_steps
    while active:
        logits = ctx.logits(active)
        chosen = []
        for row, b in enumerate(active):
            state = states[b]
            allowed = engine.allowed(state)
            if forced is not None:
                step = state.steps_used
                if step >= len(forced[b]):
                    raise MaskInconsistencyError(f"forced derivation {b} ended early\n{state.dump()}")
                rid = int(forced[b][step])
                if rid not in allowed:
                    raise MaskInconsistencyError(
                        f"forced rule {rid} is masked out at step {step}\n{state.dump()}"
                    )
                mask = np.zeros(engine.n_rules, dtype=bool)
                mask[allowed] = True
                lp = float(masked_log_softmax(logits[row], mask, mode)[rid]) if len(allowed) > 1 else 0.0
            elif len(allowed) == 1:
                rid, lp = allowed[0], 0.0
            else:
                rid, lp = _choose(logits[row], allowed, float(rngs[b].random()), mode)
            rec = StepRecord(rid, lp, len(allowed))
            if keep_logits:
                rec.logits = np.array(logits[row])
                rec.mask = np.zeros(engine.n_rules, dtype=bool)
                rec.mask[allowed] = True
            records[b].append(rec)
            engine.apply(state, rid, check=False)
            if state.steps_used > max_steps:
                raise AssertionError(f"derivation exceeded {max_steps} steps\n{state.dump()}")
            chosen.append(rid)
        still = [b for b in active if not states[b].done]
        keep = [i for i, b in enumerate(active) if not states[b].done]
        ctx.push(still, [chosen[i] for i in keep])
        active = still

    out = []
    for b in range(n):
        if forced is not None and states[b].steps_used != len(forced[b]):
            raise MaskInconsistencyError(f"forced derivation {b} has rules left over")
        smiles = states[b].text()
        ids = list(states[b].rule_history)
        out.append(Rollout(
            derivation=Derivation(ids, smiles),
            records=records[b],
            smiles=smiles,
            log_prob=float(sum(r.log_prob for r in records[b])),
            steps=len(ids),
        ))
    return out


def step(state: DerivationState, policy: Policy, rng: np.random.Generator,
         engine: AttributeEngine | None = None, mode: str = "exclude") -> tuple[DerivationState, StepRecord]:
    """Expand the leftmost nonterminal of a copy of `state` with a sampled rule."""
    engine = engine or default_engine()
    if state.done:
        raise ValueError("derivation already complete")
    if state.steps_used >= engine.config.max_steps:
        raise AssertionError("no steps left")
    logits = policy.logits(state.rule_history)
    allowed = engine.allowed(state)
    mask = np.zeros(engine.n_rules, dtype=bool)
    mask[allowed] = True
    if len(allowed) == 1:
        rid, lp = allowed[0], 0.0
    else:
        rid, lp = _choose(logits, allowed, float(rng.random()), mode)
    new = engine.apply(state.copy(), rid, check=False)
    return new, StepRecord(rid, lp, len(allowed), np.asarray(logits), mask)


def rollout(policy: Policy, rng: np.random.Generator, engine: AttributeEngine | None = None,
            mode: str = "exclude", keep_logits: bool = False,
            forced: Sequence[int] | None = None) -> Rollout:
    """One complete derivation.  With `forced`, replays that rule sequence instead of sampling."""
    engine = engine or default_engine()
    return _run(policy, [rng], engine, mode, keep_logits,
                None if forced is None else [list(forced)])[0]


def spawn_rngs(seed: int | np.random.Generator | np.random.SeedSequence, n: int) -> list[np.random.Generator]:
    """Independent per-rollout generators derived from one batch seed."""
    if isinstance(seed, np.random.Generator):
        seed = np.random.SeedSequence(seed.integers(0, 2**63 - 1))
    elif not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in seed.spawn(n)]


def rollout_batch(policy: Policy, seed, batch_size: int, engine: AttributeEngine | None = None,
                  mode: str = "exclude", keep_logits: bool = False) -> list[Rollout]:
    """`batch_size` rollouts decoded in lockstep, one generator per rollout."""
    if batch_size < 0:
        raise ValueError("batch_size must be non-negative")
    if batch_size == 0:
        return []
    engine = engine or default_engine()
    return _run(policy, spawn_rngs(seed, batch_size), engine, mode, keep_logits, None)


def derivation_masks(engine: AttributeEngine, rule_ids: Iterable[int]) -> list[np.ndarray]:
    """Allowed-rule index arrays for every step of a derivation.

    Raises MaskInconsistencyError if some rule is forbidden at its step or
    the sequence does not finish the derivation.
    """
    state = engine.initial_state()
    masks = []
    for rid in rule_ids:
        if state.done:
            raise MaskInconsistencyError("derivation continues after completion")
        allowed = engine.allowed(state)
        if rid not in allowed:
            raise MaskInconsistencyError(
                f"rule {rid} is masked out at step {state.steps_used}\n{state.dump()}"
            )
        masks.append(np.asarray(allowed, dtype=np.int64))
        engine.apply(state, rid, check=False)
    if not state.done:
        raise MaskInconsistencyError("derivation leaves nonterminals")
    return masks


def write_jsonl(rollouts: Iterable[Rollout], fh) -> int:
    n = 0
    for r in rollouts:
        fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
        n += 1
    return n
