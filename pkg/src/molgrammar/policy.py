"""Policies over production rules.

A policy maps the rules chosen so far to a vector of logits over every rule
in the grammar.  Two policies are provided: `UniformPolicy`, whose logits are
always zero, and `TransformerPolicy`, a decoder-only attention stack written
directly in numpy (float64) with a hand-derived backward pass.

The training losses take the masked distribution, renormalized over the
allowed rules, so forbidden rules never receive probability mass and never
receive gradient.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MASK_PENALTY = 1e6
MASK_MODES = ("exclude", "subtract")


class CheckpointError(ValueError):
    """Unreadable, truncated or corrupted checkpoint."""


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was written for a different grammar."""


class CheckpointVersionError(CheckpointError):
    pass


# -- masked softmax -------------------------------------------------------------

def masked_log_softmax(logits: np.ndarray, mask: np.ndarray, mode: str = "exclude") -> np.ndarray:
    """Log-probabilities under the masked distribution.

    ``mode="exclude"`` drops forbidden entries before normalizing (they get
    ``-inf``); ``mode="subtract"`` lowers them by `MASK_PENALTY` and takes an
    ordinary log-softmax, which gives the same distribution to within
    ``exp(-1e6)``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask allows no rule")
    z = np.asarray(logits, dtype=np.float64)
    if mode == "exclude":
        allowed = z[mask]
        top = allowed.max()
        lse = top + math.log(np.exp(allowed - top).sum())
        out = np.full(z.shape, -np.inf)
        out[mask] = allowed - lse
        return out
    if mode == "subtract":
        z = z - MASK_PENALTY * (~mask)
        top = z.max()
        return z - (top + math.log(np.exp(z - top).sum()))
    raise ValueError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")


def _as_bool_mask(mask, vocab: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (vocab,):
            raise ValueError(f"mask shape {mask.shape} != ({vocab},)")
        return mask
    out = np.zeros(vocab, dtype=bool)
    out[mask.astype(np.int64)] = True
    return out


# -- parameter storage ----------------------------------------------------------

class Params:
    """A flat float64 vector with named, shaped views into it."""

    def __init__(self, manifest: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        self.manifest = [(name, tuple(int(d) for d in shape)) for name, shape in manifest]
        size = sum(int(np.prod(s)) for _, s in self.manifest)
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ValueError(f"flat vector has shape {flat.shape}, manifest needs ({size},)")
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        self.slices: dict[str, slice] = {}
        offset = 0
        for name, shape in self.manifest:
            n = int(np.prod(shape))
            self.slices[name] = slice(offset, offset + n)
            self.views[name] = self.flat[offset:offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> Params:
        return Params(self.manifest, self.flat.copy())

    def zeros_like(self) -> Params:
        return Params(self.manifest)


# -- policies ---------------------------------------------------------------------

class Policy:
    """Interface shared by all policies.

    Subclasses provide `logits` for a single prefix and `batch_context` for
    lockstep decoding of several derivations.  Policies with parameters also
    provide `params` and `loss_and_grad`.
    """

    vocab: int
    params: Params | None = None

    def logits(self, prefix: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def batch_context(self, batch: int) -> "_BatchContext":
        return _PrefixContext(self, batch)

    def loss_and_grad(self, rule_ids: Sequence[int], masks: Sequence, mode: str = "exclude"):
        loss = 0.0
        for t, rid in enumerate(rule_ids):
            mask = _as_bool_mask(masks[t], self.vocab)
            if not mask[rid]:
                raise ValueError(f"rule {rid} at step {t} is masked out")
            loss -= masked_log_softmax(self.logits(rule_ids[:t]), mask, mode)[rid]
        return loss, np.zeros(0)


class _BatchContext:
    def logits(self, rows: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def push(self, rows: Sequence[int], rule_ids: Sequence[int]) -> None:
        raise NotImplementedError


class _PrefixContext(_BatchContext):
    """Fallback context that recomputes logits from each full prefix."""

    def __init__(self, policy: Policy, batch: int):
        self.policy = policy
        self.prefixes: list[list[int]] = [[] for _ in range(batch)]

    def logits(self, rows):
        return np.stack([self.policy.logits(self.prefixes[r]) for r in rows])

    def push(self, rows, rule_ids):
        for r, rid in zip(rows, rule_ids):
            self.prefixes[r].append(int(rid))


class UniformPolicy(Policy):
    """All-zero logits: uniform over whatever the mask allows."""

    def __init__(self, vocab: int):
        self.vocab = vocab

    def logits(self, prefix):
        return np.zeros(self.vocab)

    def batch_context(self, batch):
        return _ZeroContext(self.vocab)

    def loss_and_grad(self, rule_ids, masks, mode="exclude"):
        loss = 0.0
        for t, rid in enumerate(rule_ids):
            mask = _as_bool_mask(masks[t], self.vocab)
            if not mask[rid]:
                raise ValueError(f"rule {rid} at step {t} is masked out")
            loss += math.log(int(mask.sum()))
        return loss, np.zeros(0)


class _ZeroContext(_BatchContext):
    def __init__(self, vocab: int):
        self.vocab = vocab

    def logits(self, rows):
        return np.zeros((len(rows), self.vocab))

    def push(self, rows, rule_ids):
        pass


class CallablePolicy(Policy):
    """Wraps ``fn(prefix) -> logits``; handy for adversarial tests."""

    def __init__(self, vocab: int, fn: Callable[[Sequence[int]], np.ndarray]):
        self.vocab = vocab
        self.fn = fn

    def logits(self, prefix):
        out = np.asarray(self.fn(list(prefix)), dtype=np.float64)
        if out.shape != (self.vocab,):
            raise ValueError(f"policy returned shape {out.shape}, expected ({self.vocab},)")
        return out


@dataclass(frozen=True)
class PolicyConfig:
    vocab: int
    layers: int = 6
    heads: int = 6
    d_k: int = 16
    d_v: int = 16
    d_model: int = 128
    d_inner: int = 256
    max_len: int = 277
    zero_output: bool = True

    def __post_init__(self) -> None:
        for name in ("vocab", "layers", "heads", "d_k", "d_v", "d_model", "d_inner", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"PolicyConfig.{name} must be positive")

    @classmethod
    def small(cls, vocab: int, max_len: int = 277) -> PolicyConfig:
        """Reduced stack for tests and desk-scale runs."""
        return cls(vocab=vocab, layers=2, heads=2, d_k=8, d_v=8, d_model=32, d_inner=64,
                   max_len=max_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PolicyConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PolicyConfig fields: {sorted(unknown)}")
        return cls(**d)


def param_manifest(cfg: PolicyConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, hk, hv = cfg.d_model, cfg.heads * cfg.d_k, cfg.heads * cfg.d_v
    m: list[tuple[str, tuple[int, ...]]] = [("embed", (cfg.vocab + 1, d))]
    for l in range(cfg.layers):
        p = f"layer{l}."
        m += [
            (p + "wq", (d, hk)), (p + "wk", (d, hk)), (p + "wv", (d, hv)),
            (p + "wo", (hv, d)), (p + "bo", (d,)),
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "w1", (d, cfg.d_inner)), (p + "b1", (cfg.d_inner,)),
            (p + "w2", (cfg.d_inner, d)), (p + "b2", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
        ]
    m += [("out.w", (d, cfg.vocab)), ("out.b", (cfg.vocab,))]
    return m


def init_params(cfg: PolicyConfig, seed: int) -> Params:
    """Uniform initialization scaled by fan-in and fan-out, from a recorded seed."""
    rng = np.random.default_rng(seed)
    p = Params(param_manifest(cfg))
    for name, shape in p.manifest:
        view = p[name]
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed":
            a = 1.0 / math.sqrt(cfg.d_model)
            view[...] = rng.uniform(-a, a, shape)
        elif leaf == "g":
            view[...] = 1.0
        elif name.startswith("out.") and cfg.zero_output:
            continue
        elif len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            view[...] = rng.uniform(-a, a, shape)
    return p


def sinusoid_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


_GELU_K = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximated GELU and its derivative."""
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return y, dy


_LN_EPS = 1e-5


def _layer_norm(u: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = u.mean(axis=-1, keepdims=True)
    var = u.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (u - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy: np.ndarray, g: np.ndarray, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    du = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return du, dg, db


class TransformerPolicy(Policy):
    """Decoder-only transformer over rule ids.

    Position 0 holds a start token (embedding row ``vocab``); position t>0
    holds the rule chosen at step t-1.  The output at position t gives the
    logits for step t.  Sublayers use post-norm residual connections.
    """

    def __init__(self, config: PolicyConfig, params: Params | None = None, seed: int = 0):
        self.config = config
        self.vocab = config.vocab
        self.seed = seed
        self.params = params if params is not None else init_params(config, seed)
        if self.params.manifest != param_manifest(config):
            raise ValueError("parameter manifest does not match the policy config")
        self._pos = sinusoid_table(config.max_len + 1, config.d_model)

    @property
    def bos(self) -> int:
        return self.vocab

    def _inputs(self, prefix: Sequence[int]) -> np.ndarray:
        ids = np.empty(len(prefix) + 1, dtype=np.int64)
        ids[0] = self.bos
        ids[1:] = prefix
        if ids[1:].size and (ids[1:].min() < 0 or ids[1:].max() >= self.vocab):
            raise ValueError("rule id out of range")
        return ids

    def _check_len(self, n: int) -> None:
        if n >= self.config.max_len:
            raise ValueError(f"prefix length {n} must be below max_len={self.config.max_len}")

    # -- full-sequence pass with caches for backprop --------------------------
    def _forward(self, ids: np.ndarray):
        cfg, P = self.config, self.params
        T, H, dk, dv = len(ids), cfg.heads, cfg.d_k, cfg.d_v
        x = P["embed"][ids] + self._pos[:T]
        causal = np.triu(np.ones((T, T), dtype=bool), 1)
        caches = []
        for l in range(cfg.layers):
            p = f"layer{l}."
            q = (x @ P[p + "wq"]).reshape(T, H, dk).transpose(1, 0, 2)
            k = (x @ P[p + "wk"]).reshape(T, H, dk).transpose(1, 0, 2)
            v = (x @ P[p + "wv"]).reshape(T, H, dv).transpose(1, 0, 2)
            s = q @ k.transpose(0, 2, 1) / math.sqrt(dk)
            s[:, causal] = -np.inf
            s -= s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            o = (a @ v).transpose(1, 0, 2).reshape(T, H * dv)
            u = x + o @ P[p + "wo"] + P[p + "bo"]
            x1, ln1 = _layer_norm(u, P[p + "ln1.g"], P[p + "ln1.b"])
            hpre = x1 @ P[p + "w1"] + P[p + "b1"]
            hact, dgelu = _gelu(hpre)
            y = x1 + hact @ P[p + "w2"] + P[p + "b2"]
            x2, ln2 = _layer_norm(y, P[p + "ln2.g"], P[p + "ln2.b"])
            caches.append((x, q, k, v, a, o, x1, ln1, hact, dgelu, ln2))
            x = x2
        logits = x @ P["out.w"] + P["out.b"]
        return logits, x, caches

    def _backward(self, ids: np.ndarray, dlogits: np.ndarray, xf: np.ndarray, caches) -> np.ndarray:
        cfg, P = self.config, self.params
        G = P.zeros_like()
        T, H, dk, dv = len(ids), cfg.heads, cfg.d_k, cfg.d_v
        G["out.w"][...] = xf.T @ dlogits
        G["out.b"][...] = dlogits.sum(axis=0)
        dx = dlogits @ P["out.w"].T
        for l in reversed(range(cfg.layers)):
            p = f"layer{l}."
            x, q, k, v, a, o, x1, ln1, hact, dgelu, ln2 = caches[l]
            dy, G[p + "ln2.g"][...], G[p + "ln2.b"][...] = _layer_norm_back(dx, P[p + "ln2.g"], ln2)
            G[p + "w2"][...] = hact.T @ dy
            G[p + "b2"][...] = dy.sum(axis=0)
            dh = (dy @ P[p + "w2"].T) * dgelu
            G[p + "w1"][...] = x1.T @ dh
            G[p + "b1"][...] = dh.sum(axis=0)
            dx1 = dy + dh @ P[p + "w1"].T
            du, G[p + "ln1.g"][...], G[p + "ln1.b"][...] = _layer_norm_back(dx1, P[p + "ln1.g"], ln1)
            G[p + "wo"][...] = o.T @ du
            G[p + "bo"][...] = du.sum(axis=0)
            do = (du @ P[p + "wo"].T).reshape(T, H, dv).transpose(1, 0, 2)
            da = do @ v.transpose(0, 2, 1)
            dvv = a.transpose(0, 2, 1) @ do
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(dk)
            dq = ds @ k
            dkk = ds.transpose(0, 2, 1) @ q
            dq = dq.transpose(1, 0, 2).reshape(T, H * dk)
            dkk = dkk.transpose(1, 0, 2).reshape(T, H * dk)
            dvv = dvv.transpose(1, 0, 2).reshape(T, H * dv)
            G[p + "wq"][...] = x.T @ dq
            G[p + "wk"][...] = x.T @ dkk
            G[p + "wv"][...] = x.T @ dvv
            dx = du + dq @ P[p + "wq"].T + dkk @ P[p + "wk"].T + dvv @ P[p + "wv"].T
        np.add.at(G["embed"], ids, dx)
        return G.flat

    # -- public API ----------------------------------------------------------
    def logits(self, prefix):
        self._check_len(len(prefix))
        out, _, _ = self._forward(self._inputs(prefix))
        return out[-1]

    def all_logits(self, rule_ids: Sequence[int]) -> np.ndarray:
        """Logits for every step of a derivation, shape ``(len(rule_ids), vocab)``."""
        self._check_len(len(rule_ids) - 1)
        out, _, _ = self._forward(self._inputs(rule_ids[:-1]))
        return out

    def loss_and_grad(self, rule_ids, masks, mode="exclude"):
        """Negative log-likelihood of `rule_ids` under the masked policy, with gradient."""
        T = len(rule_ids)
        if T == 0:
            return 0.0, np.zeros(self.params.size)
        if len(masks) != T:
            raise ValueError(f"{len(masks)} masks for {T} steps")
        self._check_len(T - 1)
        ids = self._inputs(rule_ids[:-1])
        logits, xf, caches = self._forward(ids)
        dlogits = np.zeros_like(logits)
        loss = 0.0
        for t, rid in enumerate(rule_ids):
            mask = _as_bool_mask(masks[t], self.vocab)
            if not mask[rid]:
                raise ValueError(f"rule {rid} at step {t} is masked out")
            if mask.sum() == 1 and mode == "exclude":
                continue
            lp = masked_log_softmax(logits[t], mask, mode)
            loss -= lp[rid]
            prob = np.exp(lp)
            dlogits[t] = prob
            dlogits[t, rid] -= 1.0
        return loss, self._backward(ids, dlogits, xf, caches)

    def batch_context(self, batch):
        return _KVContext(self, batch)


class _KVContext(_BatchContext):
    """Incremental decoding with cached keys and values.

    All rows advance in lockstep, so every active row sits at the same
    position; finished rows simply stop being passed in.
    """

    def __init__(self, policy: TransformerPolicy, batch: int):
        cfg = policy.config
        self.policy = policy
        self.k = np.zeros((cfg.layers, batch, cfg.heads, cfg.max_len, cfg.d_k))
        self.v = np.zeros((cfg.layers, batch, cfg.heads, cfg.max_len, cfg.d_v))
        self.pos = np.zeros(batch, dtype=np.int64)
        self.out = np.zeros((batch, cfg.d_model))
        self._feed(np.arange(batch), np.full(batch, policy.bos))

    def _feed(self, rows: np.ndarray, ids: np.ndarray) -> None:
        pol, cfg, P = self.policy, self.policy.config, self.policy.params
        H, dk, dv = cfg.heads, cfg.d_k, cfg.d_v
        pos = self.pos[rows]
        if pos.size and pos.max() >= cfg.max_len:
            raise ValueError(f"sequence longer than max_len={cfg.max_len}")
        t = int(pos[0])
        if np.any(pos != t):
            raise RuntimeError("rows out of lockstep")
        B = len(rows)
        x = P["embed"][ids] + pol._pos[t]
        for l in range(cfg.layers):
            p = f"layer{l}."
            q = (x @ P[p + "wq"]).reshape(B, H, dk)
            self.k[l, rows, :, t] = (x @ P[p + "wk"]).reshape(B, H, dk)
            self.v[l, rows, :, t] = (x @ P[p + "wv"]).reshape(B, H, dv)
            keys = self.k[l][rows, :, :t + 1]
            vals = self.v[l][rows, :, :t + 1]
            s = np.einsum("bhd,bhtd->bht", q, keys) / math.sqrt(dk)
            s -= s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            o = np.einsum("bht,bhtd->bhd", a, vals).reshape(B, H * dv)
            u = x + o @ P[p + "wo"] + P[p + "bo"]
            x1, _ = _layer_norm(u, P[p + "ln1.g"], P[p + "ln1.b"])
            h, _ = _gelu(x1 @ P[p + "w1"] + P[p + "b1"])
            x, _ = _layer_norm(x1 + h @ P[p + "w2"] + P[p + "b2"], P[p + "ln2.g"], P[p + "ln2.b"])
        self.out[rows] = x
        self.pos[rows] += 1

    def logits(self, rows):
        P = self.policy.params
        return self.out[np.asarray(rows)] @ P["out.w"] + P["out.b"]

    def push(self, rows, rule_ids):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size:
            self._feed(rows, np.asarray(rule_ids, dtype=np.int64))


# -- losses -------------------------------------------------------------------

def pretrain_loss(policy: Policy, rule_ids: Sequence[int], masks: Sequence,
                  mode: str = "exclude") -> tuple[float, np.ndarray]:
    """``-sum_s log pi_s(r_s)`` over one derivation, and its gradient."""
    return policy.loss_and_grad(list(rule_ids), masks, mode)


def anchor_distance(p: np.ndarray, p_base: np.ndarray) -> float:
    if p.shape != p_base.shape:
        raise ValueError(f"parameter shapes differ: {p.shape} vs {p_base.shape}")
    d = p - p_base
    return float(d @ d)


def anchored_best_loss(policy: Policy, rule_ids: Sequence[int], masks: Sequence,
                       p_base: np.ndarray, w_a: float,
                       mode: str = "exclude") -> tuple[float, np.ndarray]:
    """Pretraining loss on the chosen derivation plus ``w_a * |p - p_base|^2``."""
    p = policy.params.flat if policy.params is not None else np.zeros(0)
    p_base = np.asarray(p_base, dtype=np.float64)
    dist = anchor_distance(p, p_base)
    loss, grad = policy.loss_and_grad(list(rule_ids), masks, mode)
    return loss + w_a * dist, grad + 2.0 * w_a * (p - p_base)


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"MGRULEPOL"
VERSION = 1
_DIGEST = 32


def save_checkpoint(policy: TransformerPolicy, path: str | Path, fingerprint: str,
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write parameters, config and grammar fingerprint to `path`.

    Layout (little-endian): magic, u32 version, 64 ascii bytes of grammar
    fingerprint, u32 length + JSON header, u32 block count, then per block a
    u16 name length, utf-8 name, u8 rank, u32 dims and float64 data.  A
    sha256 of everything before it closes the file.
    """
    header = json.dumps({"config": policy.config.to_dict(), "seed": policy.seed,
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    fp = fingerprint.encode("ascii")
    if len(fp) != 64:
        raise ValueError("fingerprint must be a 64-character hex digest")
    blocks = [(name, policy.params[name]) for name, _ in policy.params.manifest]
    blocks += [(f"extra/{k}", np.asarray(v, dtype=np.float64)) for k, v in (extra or {}).items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(fp)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


@dataclass
class Checkpoint:
    policy: TransformerPolicy
    fingerprint: str
    extra: dict[str, np.ndarray]
    meta: dict


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path, fingerprint: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _DIGEST or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a policy checkpoint")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    fp = r.take(64).decode("ascii")
    if fingerprint is not None and fp != fingerprint:
        raise FingerprintMismatchError(
            f"{path}: written for grammar {fp[:12]}..., current grammar is {fingerprint[:12]}..."
        )
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode("utf-8"))
    config = PolicyConfig.from_dict(header["config"])
    (nblocks,) = r.unpack("<I")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(nblocks):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        blocks[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    manifest = param_manifest(config)
    missing = [name for name, _ in manifest if name not in blocks]
    if missing:
        raise CheckpointError(f"{path}: missing parameter blocks {missing}")
    params = Params(manifest)
    for name, shape in manifest:
        if blocks[name].shape != shape:
            raise CheckpointError(f"{path}: block {name} has shape {blocks[name].shape}, expected {shape}")
        params[name][...] = blocks[name]
    extra = {k[len("extra/"):]: v for k, v in blocks.items() if k.startswith("extra/")}
    policy = TransformerPolicy(config, params, seed=header.get("seed", 0))
    return Checkpoint(policy, fp, extra, header.get("meta", {}))


def load_checkpoint(path: str | Path, fingerprint: str | None = None) -> TransformerPolicy:
    return read_checkpoint(path, fingerprint).policy
