"""Command-line interface: ``molgrammar <subcommand> ...``.

Exit status is 0 on success, 1 for user errors (bad flags, missing or
malformed input files, bad configs) and 2 when an internal invariant breaks
(unproductive grammar, empty mask, an invalid molecule from the sampler).

The grammar defaults to the shipped file; the ``MOLGRAMMAR_GRAMMAR``
environment variable or ``--grammar`` override it.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .attributes import (
    AttributeEngine, AttributeTableError, MaskConfig, MaskInvariantError, engine_for,
    is_ring_path, load_ring_table,
)
from .grammar import (
    Grammar, GrammarError, UnproductiveTokenError, check_min_delta, default_grammar,
    default_grammar_path, load_grammar_file,
)
from .parser import IngestStats, iter_corpus, parser_for
from .policy import (
    CheckpointError, PolicyConfig, TransformerPolicy, UniformPolicy, read_checkpoint,
)
from .reward import (
    TSV_COLUMNS, RewardConfig, RewardConfigError, ScorerError, default_normalization,
    get_scorer, load_normalization, score_many, tsv_row, unit_normalization,
)
from .sampler import rollout_batch, write_jsonl
from .trainer import (
    RunDir, TrainConfig, TrainingAborted, optimize, pretrain, resume_state,
)
from .validity import check

ENV_GRAMMAR = "MOLGRAMMAR_GRAMMAR"
logger = logging.getLogger("molgrammar")


class UserError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UserError(f"{self.prog}: {message}")


# -- shared loading -------------------------------------------------------------------

def _grammar_path(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(ENV_GRAMMAR)
    return Path(env) if env else default_grammar_path()


def _load_grammar(arg: str | None) -> Grammar:
    path = _grammar_path(arg)
    if not path.is_file():
        raise UserError(f"grammar file not found: {path}")
    if path.resolve() == default_grammar_path().resolve():
        return default_grammar()
    return load_grammar_file(path)


def _engine(g: Grammar, max_steps: int = 277, max_ring_size: int = 8,
            ring_table: str | None = None) -> AttributeEngine:
    cfg = MaskConfig(max_ring_size=max_ring_size, max_steps=max_steps)
    if ring_table:
        try:
            text = Path(ring_table).read_text(encoding="utf-8")
        except OSError as exc:
            raise UserError(f"cannot read ring table: {exc}") from None
        return engine_for(g, cfg, load_ring_table(g, text))
    if g.fingerprint != default_grammar().fingerprint and any(
            is_ring_path(t) for r in g.rules for t in (r.lhs, *r.rhs)):
        raise UserError("grammar has ring rules but no ring table; pass --ring-table")
    return engine_for(g, cfg)


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UserError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UserError(f"{path}: expected a JSON object")
    return data


def _open_out(path: str | None):
    if path is None or path == "-":
        return contextlib.nullcontext(sys.stdout)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


# -- subcommands ------------------------------------------------------------------------

def cmd_grammar_check(args) -> int:
    path = _grammar_path(args.grammar)
    if not path.is_file():
        raise UserError(f"grammar file not found: {path}")
    try:
        g = load_grammar_file(path)
    except UnproductiveTokenError as exc:
        print(f"FAIL: {exc}")
        return 2
    reachable = [t for t in g.reachable() if not t.is_terminal]
    tds = [g.td(t) for t in reachable]
    print(f"grammar: {path}")
    print(f"tokens: {len(g.tokens)} ({len(g.terminals)} terminals, {len(g.nonterminals)} nonterminals)")
    print(f"rules: {len(g.rules)}")
    print(f"root: {g.root.text}  TD(root) = {g.td(g.root)}")
    print(f"reachable nonterminals: {len(reachable)}  TD range {min(tds)}..{max(tds)}")
    bad = check_min_delta(g)
    if bad:
        print("FAIL: no rule with delta TD = -1 for: " + ", ".join(t.text for t in bad))
        return 2
    print("every reachable nonterminal has a rule with delta TD = -1")
    try:
        eng = _engine(g, ring_table=args.ring_table)
    except UserError as exc:
        print(f"attribute layer: skipped ({exc})")
        return 0
    except AttributeTableError as exc:
        print(f"FAIL: attribute layer: {exc}")
        return 2
    print(f"attribute layer: {len(eng.ext_td)} extended tokens, "
          f"TD(root) = {eng.token_td(eng.initial_state().current)}")
    print(f"fingerprint: {g.fingerprint}")
    return 0


def cmd_parse(args) -> int:
    g = _load_grammar(args.grammar)
    parser = parser_for(g)
    stats = IngestStats()
    try:
        fh_in = open(args.input, encoding="utf-8")
    except OSError as exc:
        raise UserError(f"cannot read corpus: {exc}") from None
    with fh_in, _open_out(args.out) as fh:
        for d in iter_corpus(parser, fh_in, stats):
            fh.write(json.dumps({"smiles": d.source, "rule_ids": d.rule_ids}) + "\n")
    stats_text = json.dumps(stats.to_dict(), indent=2, sort_keys=True)
    stats_path = args.stats or (None if args.out in (None, "-") else args.out + ".stats.json")
    if stats_path:
        Path(stats_path).write_text(stats_text + "\n", encoding="utf-8")
    print(stats_text, file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return 0


def _reward_config(args) -> RewardConfig:
    norm = unit_normalization()
    if getattr(args, "norm", None):
        try:
            norm = load_normalization(args.norm)
        except FileNotFoundError:
            raise UserError(f"normalization file not found: {args.norm}") from None
    elif getattr(args, "desk_norm", False):
        norm = default_normalization()
    return RewardConfig(w_sa=args.w_sa, w_ac=args.w_ac, normalization=norm,
                        scorer=args.scorer)


def cmd_sample(args) -> int:
    if args.n < 0:
        raise UserError("--n must be non-negative")
    g = _load_grammar(args.grammar)
    eng = _engine(g, max_steps=args.max_steps)
    if args.uniform:
        policy = UniformPolicy(len(g.rules))
    else:
        policy = read_checkpoint(args.checkpoint, g.fingerprint).policy
        if policy.vocab != len(g.rules):
            raise UserError("checkpoint vocabulary does not match the grammar")
    rollouts = rollout_batch(policy, args.seed, args.n, eng, mode=args.mask_mode)
    for r in rollouts:
        r.valid = check(r.smiles).valid
    if args.score:
        cfg = _reward_config(args)
        for r, s in zip(rollouts, score_many([r.smiles for r in rollouts], cfg, get_scorer(cfg.scorer))):
            r.score = s.to_dict()
    with _open_out(args.out) as fh:
        write_jsonl(rollouts, fh)
    invalid = [r.smiles for r in rollouts if not r.valid]
    if invalid:
        raise InvariantError(f"{len(invalid)} of {len(rollouts)} sampled molecules are invalid, "
                             f"first: {invalid[0]}")
    return 0


def cmd_score(args) -> int:
    cfg = _reward_config(args)
    try:
        lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UserError(f"cannot read {args.input}: {exc}") from None
    smiles = [l.split()[0] for l in lines if l.split()]
    scores = score_many(smiles, cfg, get_scorer(cfg.scorer))
    with _open_out(args.out) as fh:
        fh.write("\t".join(TSV_COLUMNS) + "\n")
        for s, b in zip(smiles, scores):
            fh.write(tsv_row(s, b) + "\n")
    return 0


_RUN_KEYS = {"run_dir", "grammar", "ring_table", "corpus", "policy", "train", "init_checkpoint",
             "base_checkpoint", "max_ring_size", "policy_seed"}


def _run_setup(args):
    conf = _read_json(args.config)
    unknown = set(conf) - _RUN_KEYS
    if unknown:
        raise UserError(f"{args.config}: unknown keys {sorted(unknown)}")
    if "run_dir" not in conf:
        raise UserError(f"{args.config}: 'run_dir' is required")
    try:
        train = TrainConfig.from_dict(conf.get("train", {}))
    except (TypeError, ValueError, RewardConfigError) as exc:
        raise UserError(f"{args.config}: bad training config ({exc})") from None
    g = _load_grammar(conf.get("grammar"))
    eng = _engine(g, max_steps=train.max_steps, max_ring_size=conf.get("max_ring_size", 8),
                  ring_table=conf.get("ring_table"))
    return conf, train, g, eng


def _new_policy(conf: dict, g: Grammar, train: TrainConfig) -> TransformerPolicy:
    spec = conf.get("policy", "small")
    try:
        if spec == "small":
            pcfg = PolicyConfig.small(len(g.rules), max_len=train.max_steps)
        elif isinstance(spec, dict):
            pcfg = PolicyConfig.from_dict({"vocab": len(g.rules), "max_len": train.max_steps, **spec})
        else:
            raise ValueError(f"policy must be 'small' or an object, got {spec!r}")
    except (TypeError, ValueError) as exc:
        raise UserError(f"bad policy config ({exc})") from None
    return TransformerPolicy(pcfg, seed=int(conf.get("policy_seed", train.seed)))


def _checkpoint_policy(path: str, g: Grammar) -> TransformerPolicy:
    policy = read_checkpoint(path, g.fingerprint).policy
    if policy.vocab != len(g.rules):
        raise UserError("checkpoint vocabulary does not match the grammar")
    return policy


def cmd_pretrain(args) -> int:
    conf, train, g, eng = _run_setup(args)
    if "corpus" not in conf:
        raise UserError(f"{args.config}: 'corpus' is required for pretraining")
    stats = IngestStats()
    try:
        with open(conf["corpus"], encoding="utf-8") as fh:
            derivations = [d.rule_ids for d in iter_corpus(parser_for(g), fh, stats)]
    except OSError as exc:
        raise UserError(f"cannot read corpus: {exc}") from None
    run = RunDir(conf["run_dir"], g.fingerprint)
    start, adam = 0, None
    if args.resume:
        policy, adam, meta = resume_state(run.path, g.fingerprint)
        if meta.get("phase") != "pretrain":
            raise UserError("latest checkpoint is not from pretraining")
        start = int(meta["next_step"])
        run.truncate_log(start, "step")
    elif conf.get("init_checkpoint"):
        policy = _checkpoint_policy(conf["init_checkpoint"], g)
    else:
        policy = _new_policy(conf, g, train)
    run.write_config({"command": "pretrain", **conf, "train": train.to_dict(),
                      "policy_config": policy.config.to_dict(), "corpus_stats": stats.to_dict()})
    _, diags = pretrain(policy, derivations, train, eng, run=run, adam=adam, start_step=start)
    if diags:
        print(f"pretrain: {len(diags)} updates, loss {diags[0]['loss']:.4f} -> {diags[-1]['loss']:.4f}")
    print(f"run directory: {run.path}")
    return 0


def cmd_optimize(args) -> int:
    conf, train, g, eng = _run_setup(args)
    run = RunDir(conf["run_dir"], g.fingerprint)
    start, adam = 0, None
    if args.resume:
        policy, adam, meta = resume_state(run.path, g.fingerprint)
        if meta.get("phase") != "optimize":
            raise UserError("latest checkpoint is not from optimization")
        start = int(meta["next_iteration"])
        base = read_checkpoint(run.path / "base.bin", g.fingerprint).policy
        run.truncate_log(start, "iteration")
    else:
        if conf.get("base_checkpoint"):
            policy = _checkpoint_policy(conf["base_checkpoint"], g)
        else:
            policy = _new_policy(conf, g, train)
        base = TransformerPolicy(policy.config, policy.params.copy(), seed=policy.seed)
        run.save_base(base)
    run.write_config({"command": "optimize", **conf, "train": train.to_dict(),
                      "policy_config": policy.config.to_dict()})
    try:
        _, diags = optimize(policy, base.params.flat, train, eng, run=run, adam=adam,
                            start_iteration=start)
    except TrainingAborted as exc:
        print(f"optimization aborted: {exc}", file=sys.stderr)
        return 1
    done = [d for d in diags if not d["skipped"]]
    if done:
        print(f"optimize: {len(diags)} iterations, best reward "
              f"{max(d['best_reward'] for d in done):.4f}")
    print(f"run directory: {run.path}")
    return 0


# -- argument parsing -----------------------------------------------------------------

def _add_reward_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--norm", help="normalization JSON {component: {mean, std}}")
    p.add_argument("--desk-norm", action="store_true",
                   help="use the shipped normalization for the desk scorer")
    p.add_argument("--w-sa", type=float, default=0.0, help="weight of the low-SA penalty")
    p.add_argument("--w-ac", type=float, default=0.0, help="weight of the aromatic ring penalty")
    p.add_argument("--scorer", default="desk",
                   help="'desk' or a command speaking the SMILES-in, TSV-out protocol")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="molgrammar", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("grammar-check", help="load a grammar and verify terminal distances")
    p.add_argument("--grammar")
    p.add_argument("--ring-table", help="ring-size table for a non-default grammar")
    p.set_defaults(func=cmd_grammar_check)

    p = sub.add_parser("parse", help="parse a SMILES corpus into rule sequences")
    p.add_argument("--grammar")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", help="JSONL output (default stdout)")
    p.add_argument("--stats", help="where to write the statistics JSON")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("sample", help="sample molecules from a policy")
    p.add_argument("--grammar")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--uniform", action="store_true")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=277)
    p.add_argument("--mask-mode", choices=["exclude", "subtract"], default="exclude")
    p.add_argument("--score", action="store_true", help="attach score fields")
    p.add_argument("--out")
    _add_reward_flags(p)
    p.set_defaults(func=cmd_sample)

    for name, func, text in (("pretrain", cmd_pretrain, "off-policy pretraining on a corpus"),
                             ("optimize", cmd_optimize, "best-of-batch optimization")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--resume", action="store_true",
                       help="continue from the run directory's latest checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("score", help="score SMILES into a TSV table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    _add_reward_flags(p)
    p.set_defaults(func=cmd_score)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, GrammarError, CheckpointError, RewardConfigError, ScorerError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvariantError, MaskInvariantError, AssertionError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
