import numpy as np
import pytest

from conglude.protgraph import (
    NoContactResidues,
    build_knn_edges,
    build_protein,
    compute_site_center,
    fibonacci_sphere,
    init_virtual_nodes,
    load_proteins,
    save_proteins,
    synth_dataset,
)
from helpers import random_rigid_motion


def test_knn_collinear_radius_filter():
    coords = np.array([[0.0, 0, 0], [5.0, 0, 0], [20.0, 0, 0]])
    edges = build_knn_edges(coords, k=10, radius=10.0)
    assert {tuple(e) for e in edges} == {(0, 1), (1, 0)}


def test_knn_single_residue_empty():
    edges = build_knn_edges(np.zeros((1, 3)))
    assert edges.shape == (0, 2)


def test_knn_k_cap_in_dense_cluster():
    rng = np.random.default_rng(0)
    coords = rng.random((12, 3))  # all within ~1 A
    edges = build_knn_edges(coords, k=10, radius=10.0)
    counts = np.bincount(edges[:, 0], minlength=12)
    assert np.all(counts == 10)


def test_knn_tie_break_lower_index():
    coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [2.0, 0, 0]])
    edges = build_knn_edges(coords, k=2, radius=10.0)
    out0 = [j for i, j in edges if i == 0]
    assert out0 == [1, 2]  # both at distance 1; lower index first


def test_knn_rigid_motion_invariance():
    rng = np.random.default_rng(1)
    coords = rng.normal(scale=6.0, size=(25, 3))
    base = build_knn_edges(coords)
    for _ in range(5):
        rot, shift = random_rigid_motion(rng)
        moved = build_knn_edges(coords @ rot.T + shift)
        assert np.array_equal(base, moved)


def test_site_center_example():
    coords = np.array([[1.0, 0, 0], [3.0, 0, 0], [10.0, 0, 0]])
    center, labels = compute_site_center(np.zeros((1, 3)), coords, cutoff=4.0)
    np.testing.assert_array_equal(labels, [1, 1, 0])
    np.testing.assert_allclose(center, [2.0, 0, 0])


def test_site_center_boundary_inclusive():
    coords = np.array([[4.0, 0, 0]])
    center, labels = compute_site_center(np.zeros((1, 3)), coords)
    assert labels[0] == 1


def test_site_center_no_contacts():
    with pytest.raises(NoContactResidues):
        compute_site_center(np.zeros((1, 3)), np.array([[10.0, 0, 0]]))


def test_site_center_commutes_with_rigid_motion():
    rng = np.random.default_rng(2)
    coords = rng.normal(scale=5.0, size=(30, 3))
    atoms = coords[3] + 0.5 * rng.normal(size=(4, 3))
    center, labels = compute_site_center(atoms, coords)
    rot, shift = random_rigid_motion(rng)
    center2, labels2 = compute_site_center(atoms @ rot.T + shift, coords @ rot.T + shift)
    np.testing.assert_array_equal(labels, labels2)
    np.testing.assert_allclose(center2, center @ rot.T + shift, atol=1e-9)


def test_fibonacci_points_distinct_on_unit_sphere():
    pts = fibonacci_sphere(8)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-9)
    dists = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    assert dists[np.triu_indices(8, 1)].min() > 1e-3


def test_virtual_node_feature_mean():
    graph = build_protein(
        "p", np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    )
    init = init_virtual_nodes(graph, count=4, margin=5.0)
    np.testing.assert_allclose(init.protein_feat, [0.5, 0.5])
    np.testing.assert_allclose(init.pocket_feats, np.full((4, 2), 0.5))


def test_virtual_nodes_on_margin_sphere():
    graph = build_protein("p", np.zeros((1, 3)), np.zeros((1, 4)))
    init = init_virtual_nodes(graph, count=8, margin=5.0)
    np.testing.assert_allclose(np.linalg.norm(init.pocket_coords, axis=1), 5.0, atol=1e-9)


def test_virtual_node_features_permutation_invariant():
    rng = np.random.default_rng(3)
    coords = rng.normal(size=(10, 3))
    feats = rng.normal(size=(10, 6))
    g1 = build_protein("a", coords, feats)
    perm = rng.permutation(10)
    g2 = build_protein("b", coords[perm], feats[perm])
    i1 = init_virtual_nodes(g1, 4, 2.0)
    i2 = init_virtual_nodes(g2, 4, 2.0)
    np.testing.assert_allclose(i1.protein_feat, i2.protein_feat, atol=1e-12)
    np.testing.assert_allclose(i1.pocket_coords, i2.pocket_coords, atol=1e-12)


# -- synthetic dataset -------------------------------------------------------------


def _dataset_bytes(ds):
    chunks = [ds.ligand_features.tobytes()]
    for g in ds.proteins:
        chunks += [g.coords.tobytes(), g.feats.tobytes(), g.edges.tobytes()]
        for s in g.sites:
            chunks += [s.ligand_atoms.tobytes(), s.center.tobytes(), s.residue_labels.tobytes()]
    chunks.append(repr(ds.sb_samples).encode())
    chunks.append(repr(ds.activities).encode())
    return b"".join(chunks)


def test_synth_deterministic_per_seed():
    a = synth_dataset(seed=7, n_proteins=3, residues_per_protein=30, n_ligands=12)
    b = synth_dataset(seed=7, n_proteins=3, residues_per_protein=30, n_ligands=12)
    assert _dataset_bytes(a) == _dataset_bytes(b)
    c = synth_dataset(seed=8, n_proteins=3, residues_per_protein=30, n_ligands=12)
    assert _dataset_bytes(a) != _dataset_bytes(c)


def test_synth_two_sites_per_protein():
    ds = synth_dataset(seed=1, n_proteins=4, n_sites=2, n_ligands=16)
    assert all(len(g.sites) == 2 for g in ds.proteins)
    assert len(ds.sb_samples) == 8


def test_synth_linear_probe_separates_actives():
    # planted correlation: a per-protein least-squares probe on ligand
    # features should separate actives from inactives nearly perfectly
    from helpers import auroc_pairwise_oracle

    ds = synth_dataset(seed=5, n_proteins=4, n_sites=2, n_ligands=24, ligand_dim=64)
    lig_index = ds.ligand_index()
    aucs = []
    for g in ds.proteins:
        rows = [(lig_index[lid], y) for pid, lid, y in ds.activities if pid == g.id]
        x = ds.ligand_features[[r for r, _ in rows]]
        y = np.array([lab for _, lab in rows], dtype=float)
        w, *_ = np.linalg.lstsq(
            np.concatenate([x, np.ones((len(x), 1))], axis=1), y, rcond=None
        )
        scores = np.concatenate([x, np.ones((len(x), 1))], axis=1) @ w
        aucs.append(auroc_pairwise_oracle(scores, y.astype(int)))
    assert np.mean(aucs) > 0.9


def test_synth_sites_have_contacts_and_separation():
    ds = synth_dataset(seed=11, n_proteins=6, n_sites=2, n_ligands=12)
    for g in ds.proteins:
        assert all(s.residue_labels.sum() >= 1 for s in g.sites)
        gap = np.linalg.norm(g.sites[0].center - g.sites[1].center)
        assert gap > 8.0  # planted sites stay well apart


def test_protein_json_round_trip(tmp_path):
    ds = synth_dataset(seed=3, n_proteins=2, residues_per_protein=25, n_ligands=8)
    path = tmp_path / "proteins.json"
    save_proteins(path, ds.proteins)
    loaded = load_proteins(path)
    assert [g.id for g in loaded] == [g.id for g in ds.proteins]
    for a, b in zip(loaded, ds.proteins):
        np.testing.assert_allclose(a.coords, b.coords)
        np.testing.assert_allclose(a.feats, b.feats)
        assert np.array_equal(a.edges, b.edges)
        assert len(a.sites) == len(b.sites)
        for sa, sb in zip(a.sites, b.sites):
            assert sa.ligand_id == sb.ligand_id
            np.testing.assert_allclose(sa.center, sb.center)
            np.testing.assert_array_equal(sa.residue_labels, sb.residue_labels)


def test_load_proteins_rejects_garbage(tmp_path):
    from conglude.errors import DataFormatError

    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(DataFormatError):
        load_proteins(path)
