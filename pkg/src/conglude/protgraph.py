"""Residue-level protein graphs, binding-site supervision, virtual-node
initialization, and the synthetic planted-pocket dataset generator.

Residue features are opaque vectors (loaded from file or synthesized);
coordinates are in Angstrom. All radius comparisons use <= so results are
deterministic at boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataFormatError

__all__ = [
    "ProteinGraph",
    "BindingSiteAnnotation",
    "VirtualNodeInit",
    "NoContactResidues",
    "build_knn_edges",
    "compute_site_center",
    "fibonacci_sphere",
    "init_virtual_nodes",
    "SynthDataset",
    "synth_dataset",
    "load_proteins",
    "save_proteins",
    "build_protein",
]


class NoContactResidues(ContractError):
    """No residue lies within the contact cutoff of any ligand atom."""


@dataclass
class BindingSiteAnnotation:
    ligand_id: str
    ligand_atoms: np.ndarray      # (A, 3)
    center: np.ndarray            # (3,) mean of contact residue coordinates
    residue_labels: np.ndarray    # (S,) 1 for contact residues


@dataclass
class ProteinGraph:
    id: str
    coords: np.ndarray            # (S, 3)
    feats: np.ndarray             # (S, E_in)
    edges: np.ndarray             # (M, 2) directed, row = (node, neighbor)
    sites: list[BindingSiteAnnotation] = field(default_factory=list)

    @property
    def n_residues(self) -> int:
        return self.coords.shape[0]


@dataclass
class VirtualNodeInit:
    pocket_coords: np.ndarray     # (N, 3) on the enclosing sphere
    pocket_feats: np.ndarray      # (N, E) identical rows = residue feature mean
    protein_feat: np.ndarray      # (E,) same mean
    count: int


def build_knn_edges(coords: np.ndarray, k: int = 10, radius: float = 10.0) -> np.ndarray:
    """Directed edges to each residue's nearest neighbors within ``radius``.

    Per residue at most ``k`` out-edges; distance ties break toward the lower
    neighbor index. Isolated residues simply have no out-edges.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 1:
        raise ContractError("graph needs at least one residue")
    edges = []
    diffs = coords[:, None, :] - coords[None, :, :]
    dists = np.sqrt((diffs * diffs).sum(axis=-1))
    for i in range(n):
        order = sorted(
            (j for j in range(n) if j != i and dists[i, j] <= radius),
            key=lambda j: (dists[i, j], j),
        )
        for j in order[:k]:
            edges.append((i, j))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def compute_site_center(
    ligand_atoms: np.ndarray, coords: np.ndarray, cutoff: float = 4.0
) -> tuple[np.ndarray, np.ndarray]:
    """Contact labels and geometric center of residues within ``cutoff``
    (inclusive) of any ligand atom.
    """
    ligand_atoms = np.atleast_2d(np.asarray(ligand_atoms, dtype=np.float64))
    if ligand_atoms.shape[0] < 1:
        raise ContractError("need at least one ligand atom")
    coords = np.asarray(coords, dtype=np.float64)
    dists = np.linalg.norm(coords[:, None, :] - ligand_atoms[None, :, :], axis=-1)
    labels = (dists.min(axis=1) <= cutoff).astype(np.int8)
    if labels.sum() == 0:
        raise NoContactResidues(f"no residue within {cutoff} A of any ligand atom")
    center = coords[labels == 1].mean(axis=0)
    return center, labels


def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic lattice of ``n`` points on the unit sphere."""
    if n < 1:
        raise ContractError("need at least one point")
    i = np.arange(n, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    theta = golden * i
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def init_virtual_nodes(
    graph: ProteinGraph, count: int = 8, margin: float = 5.0,
    feats: np.ndarray | None = None,
) -> VirtualNodeInit:
    """Place ``count`` pocket nodes on the sphere enclosing all residues
    (radius = max centroid distance + margin) and initialize every virtual
    feature, including the coordinate-free protein node, to the residue
    feature mean. ``feats`` overrides the graph's own features so callers
    can pass projected ones.
    """
    if count < 1:
        raise ContractError("need at least one virtual node")
    coords = graph.coords
    centroid = coords.mean(axis=0)
    radius = float(np.linalg.norm(coords - centroid, axis=1).max()) + margin
    points = centroid + radius * fibonacci_sphere(count)
    base = graph.feats if feats is None else np.asarray(feats, dtype=np.float64)
    mean = base.mean(axis=0)
    return VirtualNodeInit(
        pocket_coords=points,
        pocket_feats=np.tile(mean, (count, 1)),
        protein_feat=mean.copy(),
        count=count,
    )


def build_protein(
    protein_id: str,
    coords: np.ndarray,
    feats: np.ndarray,
    site_specs: list[tuple[str, np.ndarray]] | None = None,
    k: int = 10,
    radius: float = 10.0,
    contact_cutoff: float = 4.0,
) -> ProteinGraph:
    """Assemble a graph: kNN edges plus derived site annotations."""
    coords = np.asarray(coords, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    if coords.shape[0] != feats.shape[0]:
        raise ContractError("coords and feats disagree on residue count")
    graph = ProteinGraph(
        id=protein_id,
        coords=coords,
        feats=feats,
        edges=build_knn_edges(coords, k=k, radius=radius),
    )
    for ligand_id, atoms in site_specs or []:
        center, labels = compute_site_center(atoms, coords, cutoff=contact_cutoff)
        graph.sites.append(
            BindingSiteAnnotation(
                ligand_id=ligand_id,
                ligand_atoms=np.atleast_2d(np.asarray(atoms, dtype=np.float64)),
                center=center,
                residue_labels=labels,
            )
        )
    return graph


# -- protein JSON files ----------------------------------------------------------------


def save_proteins(path, proteins: list[ProteinGraph]) -> None:
    """Write the protein list as a JSON array of objects."""
    payload = []
    for g in proteins:
        payload.append(
            {
                "id": g.id,
                "residues": [
                    {"xyz": list(map(float, xyz)), "feat": list(map(float, feat))}
                    for xyz, feat in zip(g.coords, g.feats)
                ],
                "sites": [
                    {
                        "ligand_id": site.ligand_id,
                        "ligand_atoms": [list(map(float, a)) for a in site.ligand_atoms],
                    }
                    for site in g.sites
                ],
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_proteins(path, k: int = 10, radius: float = 10.0, contact_cutoff: float = 4.0) -> list[ProteinGraph]:
    """Read a JSON array (or JSON-lines) of protein objects."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    try:
        if stripped.startswith("["):
            objects = json.loads(text)
        else:
            objects = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc
    proteins = []
    for obj in objects:
        try:
            coords = np.array([r["xyz"] for r in obj["residues"]], dtype=np.float64)
            feats = np.array([r["feat"] for r in obj["residues"]], dtype=np.float64)
            specs = [
                (s["ligand_id"], np.array(s["ligand_atoms"], dtype=np.float64))
                for s in obj.get("sites", [])
            ]
            proteins.append(
                build_protein(obj["id"], coords, feats, specs, k=k, radius=radius,
                              contact_cutoff=contact_cutoff)
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: malformed protein object: {exc}") from exc
    return proteins


# -- synthetic planted-pocket data -------------------------------------------------------


@dataclass
class SynthDataset:
    proteins: list[ProteinGraph]
    ligand_ids: list[str]
    ligand_features: np.ndarray              # (L, W)
    sb_samples: list[tuple[int, int, int]]   # (protein idx, site idx, ligand idx)
    activities: list[tuple[str, str, int]]   # (protein id, ligand id, label)

    def ligand_index(self) -> dict[str, int]:
        return {lid: i for i, lid in enumerate(self.ligand_ids)}


def synth_dataset(
    seed: int,
    n_proteins: int = 16,
    residues_per_protein: int = 48,
    n_sites: int = 2,
    n_ligands: int = 64,
    feature_dim: int = 64,
    ligand_dim: int = 128,
) -> SynthDataset:
    """Random residue clouds with planted cavity geometry and ligands whose
    features correlate with a per-site signature. Fully deterministic per seed.

    Ligands are assigned round-robin to the n_proteins * n_sites planted
    sites. The first ligand of each site becomes its structure-based complex
    (so every protein carries exactly n_sites annotations); later rounds are
    cognate actives that only appear in the activity records.
    """
    rng = np.random.default_rng(seed)
    total_sites = n_proteins * n_sites
    if n_ligands < total_sites:
        raise ContractError("need at least one ligand per planted site")

    site_signatures = rng.normal(size=(total_sites, ligand_dim))
    site_signatures /= np.linalg.norm(site_signatures, axis=1, keepdims=True)

    ligand_ids = [f"lig{i:04d}" for i in range(n_ligands)]
    ligand_features = np.empty((n_ligands, ligand_dim))
    ligand_site = np.empty(n_ligands, dtype=np.int64)
    for i in range(n_ligands):
        site = i % total_sites
        ligand_site[i] = site
        ligand_features[i] = 3.0 * site_signatures[site] + 0.3 * rng.normal(size=ligand_dim)

    proteins: list[ProteinGraph] = []
    sb_samples: list[tuple[int, int, int]] = []
    activities: list[tuple[str, str, int]] = []
    protein_codes = rng.normal(size=(n_proteins, feature_dim))
    site_dir_template = fibonacci_sphere(n_sites)

    for p in range(n_proteins):
        cloud_radius = 9.0
        n_core = residues_per_protein - 5 * n_sites
        if n_core < 1:
            raise ContractError("residues_per_protein too small for the planted sites")
        core = rng.normal(size=(n_core, 3))
        core *= cloud_radius * rng.random((n_core, 1)) ** (1 / 3) / np.linalg.norm(
            core, axis=1, keepdims=True
        )

        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        site_dirs = site_dir_template @ (q * np.sign(np.diag(r)))
        site_centers = 1.1 * cloud_radius * site_dirs
        shells = []
        for center in site_centers:
            offsets = rng.normal(size=(5, 3))
            offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
            shells.append(center + 2.5 * offsets)
        coords = np.concatenate([core] + shells, axis=0)

        feats = 0.5 * rng.normal(size=(residues_per_protein, feature_dim))
        feats += protein_codes[p]
        site_specs = []
        for s in range(n_sites):
            shell_start = n_core + 5 * s
            feats[shell_start : shell_start + 5] += rng.normal(size=feature_dim)
            global_site = p * n_sites + s
            atoms = np.concatenate(
                [site_centers[s][None, :], site_centers[s] + 0.5 * rng.normal(size=(3, 3))]
            )
            site_specs.append((ligand_ids[global_site], atoms))

        graph = build_protein(f"prot{p:03d}", coords, feats, site_specs)
        proteins.append(graph)

        for site_idx in range(n_sites):
            sb_samples.append((p, site_idx, p * n_sites + site_idx))
        cognate = {lig for lig in range(n_ligands) if ligand_site[lig] // n_sites == p}
        for lig in range(n_ligands):
            activities.append((graph.id, ligand_ids[lig], int(lig in cognate)))

    return SynthDataset(proteins, ligand_ids, ligand_features, sb_samples, activities)
