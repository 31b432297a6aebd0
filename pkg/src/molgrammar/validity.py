"""Grammar-free SMILES checker.

Walks a SMILES string, builds the atom graph and reports valence overflow,
ring-closure mistakes, ring sizes outside ``[3, max_ring_size]`` and aromatic
atoms that do not sit in a closed aromatic ring.  Aromaticity is judged on
structure only: lowercase atoms must form 5- or 6-membered rings, ``o``/``s``
only appear in 5-membered ones, and every aromatic 5-ring has a lone-pair
donor (``o``, ``s``, ``[nH]`` or a three-connected ``n``).

This module deliberately shares no code with the grammar side of the package.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC = ("b", "c", "n", "o", "p", "s")

# maximum bond-order sum for atoms written without brackets; aromatic bonds count 1
DEFAULT_VALENCE = {
    "B": 3, "C": 4, "N": 3, "O": 2, "P": 5, "S": 2, "F": 1, "Cl": 1, "Br": 1, "I": 1,
    "b": 2, "c": 3, "n": 3, "o": 2, "p": 3, "s": 2,
}
SULFONYL_VALENCE = 6

# neutral valence per element inside brackets
BRACKET_VALENCE = {
    "H": 1, "B": 3, "C": 4, "N": 3, "O": 2, "F": 1, "Si": 4, "P": 5, "S": 6,
    "Cl": 1, "Se": 2, "Br": 1, "I": 1,
    "b": 2, "c": 3, "n": 3, "o": 2, "p": 3, "s": 2, "se": 2,
}
# elements whose valence goes up with positive charge (extra bond via lone pair)
_CHARGE_RAISES = {"N", "O", "P", "S", "Se", "n", "o", "p", "s", "se"}

_BRACKET = re.compile(
    r"\[(?P<iso>\d+)?(?P<sym>Cl|Br|Si|Se|se|[BCNOPSFIHbcnops])"
    r"(?P<chiral>@@|@)?(?P<h>H\d?)?(?P<charge>\+\+|--|[+-]\d?)?(?::\d+)?\]"
)

BOND_ORDER = {"-": 1, "=": 2, "#": 3, "$": 4, ":": 1, "/": 1, "\\": 1}


@dataclass
class Atom:
    symbol: str
    aromatic: bool
    position: int
    bracket: str | None = None
    hydrogens: int = 0
    charge: int = 0


@dataclass
class Violation:
    kind: str
    position: int
    message: str


@dataclass
class ValidityReport:
    valid: bool
    violations: list[Violation]
    atom_count: int = 0
    aromatic_ring_count: int = 0
    ring_sizes: list[int] = field(default_factory=list)
    atoms: list[Atom] = field(default_factory=list)

    @property
    def largest_ring(self) -> int:
        return max(self.ring_sizes, default=0)


class _Graph:
    def __init__(self) -> None:
        self.atoms: list[Atom] = []
        self.adj: list[dict[int, int]] = []
        self.aromatic_bond: set[frozenset] = set()
        self.closures: list[tuple[int, int]] = []

    def add_atom(self, atom: Atom) -> int:
        self.atoms.append(atom)
        self.adj.append({})
        return len(self.atoms) - 1

    def bond(self, a: int, b: int, order: int, aromatic: bool) -> None:
        self.adj[a][b] = order
        self.adj[b][a] = order
        if aromatic:
            self.aromatic_bond.add(frozenset((a, b)))


def _charge(text: str | None) -> int:
    if not text:
        return 0
    if text in ("++", "--"):
        return 2 if text == "++" else -2
    sign = 1 if text[0] == "+" else -1
    return sign * (int(text[1:]) if len(text) > 1 else 1)


def _bracket_valence(symbol: str, charge: int) -> int:
    base = BRACKET_VALENCE[symbol]
    if symbol in _CHARGE_RAISES:
        return max(base + charge, 0)
    if symbol in ("B", "b"):
        return max(base - charge, 0)
    return max(base - abs(charge), 0)


def _tokenize(smiles: str, g: _Graph, out: list[Violation]) -> None:
    i = 0
    n = len(smiles)
    prev: int | None = None
    pending_bond: tuple[str, int] | None = None
    branches: list[int | None] = []
    rings: dict[str, tuple[int, str | None, int]] = {}

    def attach(idx: int, pos: int) -> None:
        nonlocal pending_bond
        if prev is not None:
            sym = pending_bond[0] if pending_bond else None
            both_arom = g.atoms[prev].aromatic and g.atoms[idx].aromatic
            order = BOND_ORDER[sym] if sym else 1
            aromatic = sym == ":" or (sym is None and both_arom)
            g.bond(prev, idx, order, aromatic)
        elif pending_bond is not None:
            out.append(Violation("syntax", pending_bond[1], "bond with no preceding atom"))
        pending_bond = None

    while i < n:
        ch = smiles[i]
        if ch == "[":
            m = _BRACKET.match(smiles, i)
            if not m:
                out.append(Violation("syntax", i, "unrecognised bracket atom"))
                return
            sym = m.group("sym")
            h = m.group("h")
            atom = Atom(
                symbol=sym, aromatic=sym.islower(), position=i, bracket=m.group(0),
                hydrogens=(int(h[1:]) if h and len(h) > 1 else (1 if h else 0)),
                charge=_charge(m.group("charge")),
            )
            idx = g.add_atom(atom)
            attach(idx, i)
            prev = idx
            i = m.end()
            continue
        two = smiles[i:i + 2]
        if two in ("Cl", "Br"):
            sym, width = two, 2
        elif ch in ORGANIC or ch in AROMATIC:
            sym, width = ch, 1
        else:
            sym, width = None, 0
        if sym is not None:
            idx = g.add_atom(Atom(sym, sym in AROMATIC, i))
            attach(idx, i)
            prev = idx
            i += width
            continue
        if ch in BOND_ORDER:
            if pending_bond is not None:
                out.append(Violation("syntax", i, "two bond symbols in a row"))
            pending_bond = (ch, i)
            i += 1
            continue
        if ch.isdigit() or ch == "%":
            if ch == "%":
                label = smiles[i + 1:i + 3]
                if len(label) != 2 or not label.isdigit():
                    out.append(Violation("syntax", i, "bad two-digit ring label"))
                    return
                width = 3
            else:
                label, width = ch, 1
            if prev is None:
                out.append(Violation("syntax", i, "ring label before any atom"))
                return
            bond_sym = pending_bond[0] if pending_bond else None
            pending_bond = None
            if label in rings:
                other, other_bond, _ = rings.pop(label)
                if bond_sym and other_bond and bond_sym != other_bond:
                    out.append(Violation("ring_closure", i, f"ring {label} bond types disagree"))
                sym = bond_sym or other_bond
                if other == prev:
                    out.append(Violation("ring_closure", i, f"ring {label} closes on its own atom"))
                elif other in g.adj[prev]:
                    out.append(Violation(
                        "ring_size", i, f"ring {label} joins atoms already bonded (2-atom ring)"))
                else:
                    both_arom = g.atoms[prev].aromatic and g.atoms[other].aromatic
                    order = BOND_ORDER[sym] if sym else 1
                    g.bond(other, prev, order, sym == ":" or (sym is None and both_arom))
                    g.closures.append((other, prev))
            else:
                rings[label] = (prev, bond_sym, i)
            i += width
            continue
        if ch == "(":
            if prev is None:
                out.append(Violation("syntax", i, "branch before any atom"))
                return
            if pending_bond is not None:
                out.append(Violation("syntax", i, "bond symbol before branch"))
                pending_bond = None
            branches.append(prev)
            i += 1
            continue
        if ch == ")":
            if not branches:
                out.append(Violation("syntax", i, "unbalanced ')'"))
                return
            if pending_bond is not None:
                out.append(Violation("syntax", i, "dangling bond at branch end"))
                pending_bond = None
            if smiles[i - 1] == "(":
                out.append(Violation("syntax", i, "empty branch"))
            prev = branches.pop()
            i += 1
            continue
        if ch == ".":
            if pending_bond is not None:
                out.append(Violation("syntax", i, "bond before '.'"))
                pending_bond = None
            prev = None
            i += 1
            continue
        out.append(Violation("syntax", i, f"unexpected character {ch!r}"))
        return
    if pending_bond is not None:
        out.append(Violation("syntax", pending_bond[1], "dangling bond at end"))
    if branches:
        out.append(Violation("syntax", n, "unclosed branch"))
    for label, (_, _, pos) in sorted(rings.items(), key=lambda kv: kv[1][2]):
        out.append(Violation("ring_closure", pos, f"ring {label} never closed"))


def _check_valence(g: _Graph, out: list[Violation]) -> None:
    for idx, atom in enumerate(g.atoms):
        used = sum(g.adj[idx].values())
        if atom.bracket:
            if atom.symbol not in BRACKET_VALENCE:
                out.append(Violation("valence", atom.position, f"unsupported element {atom.symbol}"))
                continue
            cap = _bracket_valence(atom.symbol, atom.charge)
            used += atom.hydrogens
        else:
            cap = DEFAULT_VALENCE[atom.symbol]
            if atom.symbol == "S":
                doubly_bonded_o = sum(
                    1 for nb, order in g.adj[idx].items()
                    if order == 2 and g.atoms[nb].symbol == "O"
                )
                if doubly_bonded_o >= 2:
                    cap = SULFONYL_VALENCE
        if used > cap:
            out.append(Violation(
                "valence", atom.position,
                f"{atom.bracket or atom.symbol} has {used} bonds, at most {cap} allowed",
            ))


def _ring_through(g: _Graph, a: int, b: int) -> list[int]:
    """Smallest ring containing bond a-b, as an atom list (BFS without that bond)."""
    parent = {a: None}
    queue = deque([a])
    while queue:
        u = queue.popleft()
        if u == b:
            break
        for v in g.adj[u]:
            if v in parent or (u == a and v == b):
                continue
            parent[v] = u
            queue.append(v)
    if b not in parent:
        return []
    path = []
    node = b
    while node is not None:
        path.append(node)
        node = parent[node]
    return path


def _ring_bonds(g: _Graph) -> set[frozenset]:
    """Bonds that are not bridges, found with an iterative lowlink DFS."""
    n = len(g.atoms)
    disc = [-1] * n
    low = [0] * n
    bridges: set[frozenset] = set()
    clock = 0
    for start in range(n):
        if disc[start] >= 0:
            continue
        disc[start] = low[start] = clock
        clock += 1
        stack = [(start, -1, iter(g.adj[start]))]
        while stack:
            u, par, it = stack[-1]
            advanced = False
            for v in it:
                if v == par:
                    continue
                if disc[v] < 0:
                    disc[v] = low[v] = clock
                    clock += 1
                    stack.append((v, u, iter(g.adj[v])))
                    advanced = True
                    break
                low[u] = min(low[u], disc[v])
            if advanced:
                continue
            stack.pop()
            if par >= 0:
                low[par] = min(low[par], low[u])
                if low[u] > disc[par]:
                    bridges.add(frozenset((u, par)))
    return {
        frozenset((a, b)) for a in range(n) for b in g.adj[a]
        if a < b and frozenset((a, b)) not in bridges
    }


def _ring_basis(g: _Graph) -> list[list[int]]:
    """Minimum cycle basis (the SSSR for molecules), smallest rings first.

    Candidates are Horton cycles on the ring-bond subgraph; a GF(2)
    elimination over edge sets keeps the independent ones.
    """
    if not g.closures:
        return []
    edges = _ring_bonds(g)
    if not edges:
        return []
    pairs = sorted(tuple(sorted(e)) for e in edges)
    bit: dict[tuple[int, int], int] = {}
    adj: dict[int, list[int]] = {}
    for k, (u, v) in enumerate(pairs):
        bit[u, v] = bit[v, u] = 1 << k
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    for nbrs in adj.values():
        nbrs.sort()

    seen_bits: set[int] = set()
    candidates: list[tuple[int, int, list[int]]] = []
    for root in sorted(adj):
        parent = {root: None}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in parent:
                    parent[v] = u
                    queue.append(v)

        def path(node: int) -> list[int]:
            out = []
            while node is not None:
                out.append(node)
                node = parent[node]
            return out

        for u, v in pairs:
            if u not in parent or parent[u] == v or parent[v] == u:
                continue
            pu, pv = path(u), path(v)
            if set(pu) & set(pv) != {root}:
                continue
            ring = pu[:-1] + [root] + pv[-2::-1]
            mask = 0
            for i in range(len(ring)):
                mask |= bit[ring[i], ring[i - 1]]
            if mask not in seen_bits:
                seen_bits.add(mask)
                candidates.append((len(ring), mask, ring))
    candidates.sort(key=lambda c: (c[0], c[1]))

    basis: list[list[int]] = []
    pivots: dict[int, int] = {}
    for _, mask, ring in candidates:
        vec = mask
        while vec:
            top = vec.bit_length() - 1
            if top not in pivots:
                pivots[top] = vec
                basis.append(ring)
                break
            vec ^= pivots[top]
        if len(basis) == len(g.closures):
            break
    return basis


def _is_donor(g: _Graph, idx: int) -> bool:
    atom = g.atoms[idx]
    if atom.symbol in ("o", "s", "se"):
        return True
    if atom.symbol == "n":
        return atom.hydrogens > 0 or len(g.adj[idx]) == 3
    return False


def check(smiles: str, max_ring_size: int = 8) -> ValidityReport:
    """Validate `smiles`; never raises for malformed input."""
    out: list[Violation] = []
    if not isinstance(smiles, str) or not smiles:
        return ValidityReport(False, [Violation("syntax", 0, "empty input")])
    g = _Graph()
    _tokenize(smiles, g, out)
    syntax_failed = any(v.kind == "syntax" for v in out)
    ring_sizes: list[int] = []
    aromatic_rings = 0
    if not syntax_failed:
        _check_valence(g, out)
        in_aromatic_ring: set[int] = set()
        for ring in _ring_basis(g):
            size = len(ring)
            ring_sizes.append(size)
            pos = max(g.atoms[i].position for i in ring)
            if size > max_ring_size:
                out.append(Violation("ring_size", pos, f"{size}-membered ring exceeds {max_ring_size}"))
            if all(g.atoms[i].aromatic for i in ring):
                aromatic_rings += 1
                if size not in (5, 6):
                    out.append(Violation("aromaticity", pos, f"aromatic ring of size {size}"))
                    continue
                if size == 6 and any(g.atoms[i].symbol in ("o", "s") for i in ring):
                    out.append(Violation("aromaticity", pos, "o/s in a six-membered aromatic ring"))
                    continue
                if size == 5 and not any(_is_donor(g, i) for i in ring):
                    out.append(Violation("aromaticity", pos, "five-membered aromatic ring lacks a donor atom"))
                    continue
                in_aromatic_ring.update(ring)
        for idx, atom in enumerate(g.atoms):
            if atom.aromatic and idx not in in_aromatic_ring:
                out.append(Violation(
                    "aromaticity", atom.position, f"aromatic atom {atom.symbol} outside an aromatic ring"))
    out.sort(key=lambda v: v.position)
    return ValidityReport(
        valid=not out,
        violations=out,
        atom_count=len(g.atoms),
        aromatic_ring_count=aromatic_rings,
        ring_sizes=ring_sizes,
        atoms=g.atoms,
    )


def count_aromatic_rings(smiles: str) -> int:
    report = check(smiles)
    if not report.valid:
        raise ValueError(f"invalid SMILES {smiles!r}: {report.violations[0].message}")
    return report.aromatic_ring_count


def is_valid(smiles: str, max_ring_size: int = 8) -> bool:
    return check(smiles, max_ring_size).valid
