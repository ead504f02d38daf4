"""SMILES-subset parsing and ligand featurization.

The parser covers organic-subset atoms (B, C, N, O, P, S, F, Cl, Br, I),
bracket atoms with charge and explicit H count, branches, ring closures
(digits and %nn), the bond symbols - = # :, and aromatic lowercase atoms.
Stereochemistry, isotopes, wildcards, and dot-separated fragments are
rejected with explicit errors. Every parse error carries the character
offset where it was detected.

Features are an ECFP-style hashed count fingerprint concatenated with a
small fixed descriptor vector. The fingerprint hash is FNV-1a (64-bit)
over a documented byte encoding, so vectors are reproducible across
implementations; see docs/FORMATS.md for the exact layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ShapeError

__all__ = [
    "Atom",
    "Bond",
    "MolGraph",
    "LigandFeatures",
    "FeaturizerConfig",
    "SmilesError",
    "UnbalancedParenthesis",
    "UnmatchedRingClosure",
    "UnknownElement",
    "ValenceOverflow",
    "UnsupportedFeature",
    "SmilesSyntaxError",
    "parse_smiles",
    "morgan_fingerprint",
    "basic_descriptors",
    "featurize_ligand",
    "DESCRIPTOR_NAMES",
    "read_smiles_file",
    "read_feature_file",
]


class SmilesError(DataFormatError):
    """Base for parse failures; ``offset`` is the 0-based character index."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnbalancedParenthesis(SmilesError):
    pass


class UnmatchedRingClosure(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class ValenceOverflow(SmilesError):
    pass


class UnsupportedFeature(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    pass


@dataclass
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    h_count: int = 0


@dataclass
class Bond:
    a: int
    b: int
    order: str  # single | double | triple | aromatic


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)

    def neighbors(self) -> list[list[tuple[int, str]]]:
        adj: list[list[tuple[int, str]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.a].append((bond.b, bond.order))
            adj[bond.b].append((bond.a, bond.order))
        return adj


_ORGANIC_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}
_AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}
_BOND_ORDER_VALUE = {"single": 1.0, "double": 2.0, "triple": 3.0, "aromatic": 1.5}

_ATOMIC_MASS = {
    "H": 1.008, "B": 10.81, "C": 12.011, "N": 14.007, "O": 15.999,
    "F": 18.998, "P": 30.974, "S": 32.06, "Cl": 35.45, "Br": 79.904,
    "I": 126.904,
}


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    """Parse a bracket atom beginning at ``text[start] == '['``."""
    end = text.find("]", start)
    if end < 0:
        raise SmilesSyntaxError("unterminated bracket atom", start)
    body = text[start + 1 : end]
    pos = 0
    if pos < len(body) and body[pos].isdigit():
        raise UnsupportedFeature("isotope labels are not supported", start + 1 + pos)
    # element: one upper + optional lower, or a lone aromatic lowercase
    element = ""
    aromatic = False
    if pos < len(body) and body[pos].isupper():
        element = body[pos]
        pos += 1
        if pos < len(body) and body[pos].islower() and element + body[pos] in _ORGANIC_VALENCES:
            element += body[pos]
            pos += 1
    elif pos < len(body) and body[pos] in _AROMATIC_ORGANIC:
        element = body[pos].upper()
        aromatic = True
        pos += 1
    if not element:
        raise SmilesSyntaxError("bracket atom lacks an element symbol", start + 1 + pos)
    if element not in _ORGANIC_VALENCES:
        raise UnknownElement(f"unknown element {element!r}", start + 1)
    if pos < len(body) and body[pos] == "@":
        raise UnsupportedFeature("stereochemistry is not supported", start + 1 + pos)
    h_count = 0
    if pos < len(body) and body[pos] == "H":
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        h_count = int(digits) if digits else 1
    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        symbol = body[pos]
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        if digits:
            charge = sign * int(digits)
        else:
            charge = sign
            while pos < len(body) and body[pos] == symbol:
                charge += sign
                pos += 1
    if pos != len(body):
        raise SmilesSyntaxError(f"unexpected {body[pos]!r} in bracket atom", start + 1 + pos)
    return Atom(element, charge, aromatic, h_count), end + 1


def parse_smiles(text: str) -> MolGraph:
    """Parse a SMILES string into a molecular graph with implicit hydrogens."""
    if not text:
        raise SmilesSyntaxError("empty SMILES string", 0)
    if not text.isascii():
        raise SmilesSyntaxError("SMILES must be ASCII", 0)

    mol = MolGraph()
    explicit_h = []  # True where the H count came from a bracket atom
    atom_offsets = []
    anchor: int | None = None
    pending_bond: str | None = None
    pending_offset = 0
    branch_stack: list[tuple[int | None, int]] = []
    ring_open: dict[int, tuple[int, str | None, int]] = {}
    bond_pairs: set[tuple[int, int]] = set()

    def add_bond(a: int, b: int, order: str, offset: int) -> None:
        if a == b:
            raise SmilesSyntaxError("ring closure bonds an atom to itself", offset)
        key = (min(a, b), max(a, b))
        if key in bond_pairs:
            raise SmilesSyntaxError(f"duplicate bond between atoms {a} and {b}", offset)
        bond_pairs.add(key)
        mol.bonds.append(Bond(a, b, order))

    def attach(atom: Atom, from_bracket: bool, offset: int) -> None:
        nonlocal anchor, pending_bond
        idx = len(mol.atoms)
        mol.atoms.append(atom)
        explicit_h.append(from_bracket)
        atom_offsets.append(offset)
        if anchor is not None:
            if pending_bond is not None:
                order = pending_bond
            elif atom.aromatic and mol.atoms[anchor].aromatic:
                order = "aromatic"
            else:
                order = "single"
            add_bond(anchor, idx, order, offset)
        pending_bond = None
        anchor = idx

    def close_ring(num: int, offset: int) -> None:
        nonlocal pending_bond
        if anchor is None:
            raise SmilesSyntaxError("ring closure before any atom", offset)
        if num in ring_open:
            other, opened_bond, _ = ring_open.pop(num)
            if opened_bond is not None and pending_bond is not None and opened_bond != pending_bond:
                raise SmilesSyntaxError(f"conflicting bond orders on ring closure {num}", offset)
            order = pending_bond or opened_bond
            if order is None:
                if mol.atoms[anchor].aromatic and mol.atoms[other].aromatic:
                    order = "aromatic"
                else:
                    order = "single"
            add_bond(other, anchor, order, offset)
            pending_bond = None
        else:
            ring_open[num] = (anchor, pending_bond, offset)
            pending_bond = None

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "(":
            if anchor is None:
                raise SmilesSyntaxError("branch before any atom", i)
            branch_stack.append((anchor, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise UnbalancedParenthesis("unmatched ')'", i)
            anchor, _ = branch_stack.pop()
            i += 1
        elif ch in _BOND_SYMBOLS:
            if pending_bond is not None:
                raise SmilesSyntaxError("two consecutive bond symbols", i)
            pending_bond = _BOND_SYMBOLS[ch]
            pending_offset = i
            i += 1
        elif ch == "%":
            if i + 2 >= n or not (text[i + 1].isdigit() and text[i + 2].isdigit()):
                raise SmilesSyntaxError("%% ring closure needs two digits", i)
            close_ring(int(text[i + 1 : i + 3]), i)
            i += 3
        elif ch.isdigit():
            close_ring(int(ch), i)
            i += 1
        elif ch == "[":
            atom, i = _parse_bracket(text, i)
            attach(atom, True, i - 1)
        elif ch == ".":
            raise UnsupportedFeature("multi-fragment dot notation is not supported", i)
        elif ch in "/\\@":
            raise UnsupportedFeature("stereochemistry is not supported", i)
        elif ch == "*":
            raise UnknownElement("wildcard atom '*' is not supported", i)
        else:
            two = text[i : i + 2]
            if two in ("Cl", "Br"):
                attach(Atom(two), False, i)
                i += 2
            elif ch in "BCNOPSFI":
                attach(Atom(ch), False, i)
                i += 1
            elif ch in _AROMATIC_ORGANIC:
                attach(Atom(ch.upper(), aromatic=True), False, i)
                i += 1
            elif ch.isalpha():
                raise UnknownElement(f"unknown element {ch!r}", i)
            else:
                raise SmilesSyntaxError(f"unexpected character {ch!r}", i)

    if pending_bond is not None:
        raise SmilesSyntaxError("dangling bond symbol at end of input", pending_offset)
    if branch_stack:
        raise UnbalancedParenthesis("unmatched '('", branch_stack[-1][1])
    if ring_open:
        num, (_, _, offset) = min(ring_open.items(), key=lambda kv: kv[1][2])
        raise UnmatchedRingClosure(f"ring closure {num} never closed", offset)
    if not mol.atoms:
        raise SmilesSyntaxError("no atoms in SMILES string", 0)

    _fill_implicit_hydrogens(mol, explicit_h, atom_offsets)
    return mol


def _fill_implicit_hydrogens(mol: MolGraph, explicit_h: list[bool], offsets: list[int]) -> None:
    used = [0.0] * len(mol.atoms)
    for bond in mol.bonds:
        value = _BOND_ORDER_VALUE[bond.order]
        used[bond.a] += value
        used[bond.b] += value
    for idx, atom in enumerate(mol.atoms):
        if explicit_h[idx]:
            continue
        occupied = int(used[idx])  # aromatic halves truncate: 3 ring bonds -> 4.5 -> 4
        valences = _ORGANIC_VALENCES[atom.element]
        target = next((v for v in valences if v >= occupied), None)
        if target is None:
            raise ValenceOverflow(
                f"{atom.element} with {occupied} bonds exceeds valence {max(valences)}",
                offsets[idx],
            )
        atom.h_count = target - occupied


# -- fingerprint -------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_BOND_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _atom_invariant(atom: Atom, degree: int) -> int:
    payload = (
        b"ATOM"
        + atom.element.encode("ascii")
        + b"\x00"
        + struct.pack("<bBBB", atom.charge, degree, atom.h_count, int(atom.aromatic))
    )
    return _fnv1a64(payload)


def morgan_fingerprint(mol: MolGraph, radius: int = 2, width: int = 2048) -> np.ndarray:
    """ECFP-style hashed count fingerprint.

    Atom invariants (element, degree, charge, H count, aromaticity) seed
    64-bit identifiers; each round rehashes an atom's identifier with its
    sorted neighbor identifiers. Environments covering a bond set already
    claimed by an earlier feature are dropped (the surviving duplicate is
    the one with the smallest identifier, which keeps the result invariant
    to input atom order). Identifiers fold modulo ``width`` into counts.
    """
    if radius < 0:
        raise ShapeError("radius must be >= 0")
    if width <= 0 or width & (width - 1):
        raise ShapeError("width must be a power of two")

    adjacency: list[list[tuple[int, str]]] = mol.neighbors()
    incident: list[set[int]] = [set() for _ in mol.atoms]
    for bond_idx, bond in enumerate(mol.bonds):
        incident[bond.a].add(bond_idx)
        incident[bond.b].add(bond_idx)

    ids = [_atom_invariant(atom, len(adjacency[i])) for i, atom in enumerate(mol.atoms)]
    env_bonds: list[frozenset[int]] = [frozenset() for _ in mol.atoms]
    kept: list[int] = list(ids)
    seen_envs: set[frozenset[int]] = {frozenset()}

    for round_no in range(1, radius + 1):
        new_ids: list[int] = []
        new_envs: list[frozenset[int]] = []
        candidates: dict[frozenset[int], int] = {}
        for i in range(len(mol.atoms)):
            pairs = sorted((_BOND_CODE[order], ids[j]) for j, order in adjacency[i])
            payload = b"ENV" + struct.pack("<IQ", round_no, ids[i])
            for code, nid in pairs:
                payload += struct.pack("<BQ", code, nid)
            new_id = _fnv1a64(payload)
            env = frozenset().union(env_bonds[i], incident[i], *(env_bonds[j] for j, _ in adjacency[i]))
            new_ids.append(new_id)
            new_envs.append(env)
            if env not in seen_envs:
                prev = candidates.get(env)
                if prev is None or new_id < prev:
                    candidates[env] = new_id
        for env, identifier in candidates.items():
            seen_envs.add(env)
            kept.append(identifier)
        ids = new_ids
        env_bonds = new_envs

    counts = np.zeros(width, dtype=np.int64)
    for identifier in kept:
        counts[identifier % width] += 1
    return counts


# -- descriptors ---------------------------------------------------------------------

DESCRIPTOR_NAMES = (
    "heavy_atoms",
    "bond_count",
    "ring_closures",
    "heteroatoms",
    "aromatic_atoms",
    "formal_charge",
    "molecular_weight",
    "hbond_donors",
    "hbond_acceptors",
    "rotatable_bonds",
)


def _bridge_bonds(mol: MolGraph) -> set[int]:
    """Indices of cut edges, found by iterative DFS lowlink."""
    adj: list[list[tuple[int, int]]] = [[] for _ in mol.atoms]
    for idx, bond in enumerate(mol.bonds):
        adj[bond.a].append((bond.b, idx))
        adj[bond.b].append((bond.a, idx))
    n = len(mol.atoms)
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    counter = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        stack = [(root, -1, iter(adj[root]))]
        disc[root] = low[root] = counter
        counter += 1
        while stack:
            node, in_edge, it = stack[-1]
            advanced = False
            for child, edge_idx in it:
                if edge_idx == in_edge:
                    continue
                if disc[child] == -1:
                    disc[child] = low[child] = counter
                    counter += 1
                    stack.append((child, edge_idx, iter(adj[child])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[child])
            if not advanced:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[node])
                    if low[node] > disc[parent]:
                        bridges.add(in_edge)
        # restart loop handles remaining components
    return bridges


def _component_count(mol: MolGraph) -> int:
    parent = list(range(len(mol.atoms)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for bond in mol.bonds:
        ra, rb = find(bond.a), find(bond.b)
        if ra != rb:
            parent[ra] = rb
    return len({find(i) for i in range(len(mol.atoms))})


def basic_descriptors(mol: MolGraph) -> np.ndarray:
    """Fixed-order small descriptor vector; see DESCRIPTOR_NAMES."""
    heavy = len(mol.atoms)
    bonds = len(mol.bonds)
    rings = bonds - heavy + _component_count(mol)
    hetero = sum(1 for a in mol.atoms if a.element != "C")
    aromatic = sum(1 for a in mol.atoms if a.aromatic)
    charge = sum(a.charge for a in mol.atoms)
    weight = sum(_ATOMIC_MASS[a.element] + a.h_count * _ATOMIC_MASS["H"] for a in mol.atoms)
    donors = sum(1 for a in mol.atoms if a.element in ("N", "O") and a.h_count >= 1)
    acceptors = sum(1 for a in mol.atoms if a.element in ("N", "O"))
    degree = [0] * heavy
    for bond in mol.bonds:
        degree[bond.a] += 1
        degree[bond.b] += 1
    bridges = _bridge_bonds(mol)
    rotatable = sum(
        1
        for idx, bond in enumerate(mol.bonds)
        if idx in bridges
        and bond.order == "single"
        and degree[bond.a] >= 2
        and degree[bond.b] >= 2
    )
    return np.array(
        [heavy, bonds, rings, hetero, aromatic, charge, weight, donors, acceptors, rotatable],
        dtype=np.float64,
    )


# -- featurization -------------------------------------------------------------------


@dataclass
class FeaturizerConfig:
    radius: int = 2
    width: int = 2048
    descriptor_means: np.ndarray = field(
        default_factory=lambda: np.zeros(len(DESCRIPTOR_NAMES))
    )
    descriptor_scales: np.ndarray = field(
        default_factory=lambda: np.ones(len(DESCRIPTOR_NAMES))
    )

    @property
    def total_width(self) -> int:
        return self.width + len(DESCRIPTOR_NAMES)


@dataclass
class LigandFeatures:
    fingerprint: np.ndarray  # int counts, length = config width
    descriptors: np.ndarray  # standardized, fixed order

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.fingerprint.astype(np.float64), self.descriptors])


def featurize_ligand(mol: MolGraph, cfg: FeaturizerConfig | None = None) -> LigandFeatures:
    cfg = cfg or FeaturizerConfig()
    counts = morgan_fingerprint(mol, cfg.radius, cfg.width)
    desc = (basic_descriptors(mol) - cfg.descriptor_means) / cfg.descriptor_scales
    return LigandFeatures(counts, desc)


# -- ligand files --------------------------------------------------------------------


def read_smiles_file(path) -> list[tuple[str, str]]:
    """Tab-separated (ligand_id, SMILES), one per line; blank lines skipped."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise DataFormatError(f"{path}:{lineno}: expected 'id<TAB>smiles'")
            records.append((parts[0], parts[1]))
    return records


def read_feature_file(path, expected_width: int | None = None) -> list[tuple[str, np.ndarray]]:
    """Whitespace-separated ligand_id followed by precomputed feature reals."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                values = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad feature value: {exc}") from exc
            if expected_width is not None and values.size != expected_width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {expected_width} features, got {values.size}"
                )
            records.append((parts[0], values))
    return records
