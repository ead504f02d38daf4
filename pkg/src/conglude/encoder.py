"""Geometric protein encoder with virtual nodes, plus the ligand encoder.

Each layer runs five message-passing steps: residue-residue exchange with
coordinate updates, residue-to-pocket (moving the pocket nodes), pocket-
to-residue, residue-to-protein-node mean aggregation, and protein-node-
to-residue. Coordinates only ever enter through pairwise distances and
normalized difference vectors, so coordinate outputs are rigid-motion
equivariant and feature outputs invariant by construction. The protein
node carries no coordinates; steps four and five touch none.

Pocket virtual nodes that converge to the same spot are merged by
density clustering (min_pts=1, which degenerates to connected components
of the eps-neighborhood graph) and cluster means are taken over
coordinates, features, and confidences. Pocket and protein features are
then projected into the shared contrastive space where ligand embeddings
live.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .numcore import (
    MlpParams,
    Tensor,
    concat,
    mlp_forward,
    mlp_init,
    mlp_named,
    row_norms,
    segment_mean,
)
from .protgraph import ProteinGraph, VirtualNodeInit, init_virtual_nodes

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "EncoderOutput",
    "PocketSet",
    "LigandEmbedding",
    "init_encoder_params",
    "vnegnn_forward",
    "confidence_head",
    "cluster_pockets",
    "project",
    "encode_protein",
    "encode_ligand",
]


@dataclass
class EncoderConfig:
    feature_dim_in: int = 64       # width of the opaque residue feature vectors
    feature_dim: int = 32          # message-passing feature width
    embed_dim: int = 256           # contrastive space width
    n_layers: int = 5
    mlp_hidden: int = 32
    head_hidden: int = 32
    n_virtual: int = 8
    sphere_margin: float = 5.0
    cluster_eps: float = 4.0
    coord_eps: float = 1e-8
    knn_k: int = 10
    knn_radius: float = 10.0
    ligand_dim: int = 2058
    ligand_hidden: int = 512
    ligand_dropout: tuple[float, float] = (0.1, 0.5)


@dataclass
class LayerParams:
    """The thirteen per-layer MLPs: message/coord/update for the three
    geometric steps, message/update for the two protein-node steps."""

    rr_e: MlpParams
    rr_x: MlpParams
    rr_h: MlpParams
    rb_e: MlpParams
    rb_x: MlpParams
    rb_h: MlpParams
    br_e: MlpParams
    br_x: MlpParams
    br_h: MlpParams
    rp_e: MlpParams
    rp_h: MlpParams
    pr_e: MlpParams
    pr_h: MlpParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key in ("rr_e", "rr_x", "rr_h", "rb_e", "rb_x", "rb_h",
                    "br_e", "br_x", "br_h", "rp_e", "rp_h", "pr_e", "pr_h"):
            out.update(mlp_named(f"{prefix}.{key}", getattr(self, key)))
        return out


@dataclass
class EncoderParams:
    config: EncoderConfig
    input_w: Tensor
    input_b: Tensor
    layers: list[LayerParams]
    seg_head: MlpParams
    conf_head: MlpParams
    pocket_proj_w: Tensor
    pocket_proj_b: Tensor
    protein_proj_w: Tensor
    protein_proj_b: Tensor
    ligand_mlp: MlpParams

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"input_proj.w": self.input_w, "input_proj.b": self.input_b}
        for l, layer in enumerate(self.layers):
            named.update(layer.named(f"layer{l}"))
        named.update(mlp_named("seg_head", self.seg_head))
        named.update(mlp_named("conf_head", self.conf_head))
        named.update(
            {
                "pocket_proj.w": self.pocket_proj_w,
                "pocket_proj.b": self.pocket_proj_b,
                "protein_proj.w": self.protein_proj_w,
                "protein_proj.b": self.protein_proj_b,
            }
        )
        named.update(mlp_named("ligand_mlp", self.ligand_mlp))
        return named

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise ShapeError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
        for name, tensor in named.items():
            if state[name].shape != tensor.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: checkpoint shape {state[name].shape} "
                    f"!= model shape {tensor.data.shape}"
                )
            tensor.data = state[name].astype(np.float64).copy()


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    e, hid = cfg.feature_dim, cfg.mlp_hidden

    def edge_mlp(in_dim):
        return mlp_init([in_dim, hid, e], rng, out_activation="silu")

    def coord_mlp():
        return mlp_init([e, hid, 1], rng)

    def update_mlp():
        return mlp_init([2 * e, hid, e], rng)

    layers = [
        LayerParams(
            rr_e=edge_mlp(2 * e + 1), rr_x=coord_mlp(), rr_h=update_mlp(),
            rb_e=edge_mlp(2 * e + 1), rb_x=coord_mlp(), rb_h=update_mlp(),
            br_e=edge_mlp(2 * e + 1), br_x=coord_mlp(), br_h=update_mlp(),
            rp_e=edge_mlp(2 * e), rp_h=update_mlp(),
            pr_e=edge_mlp(2 * e), pr_h=update_mlp(),
        )
        for _ in range(cfg.n_layers)
    ]
    std_in = np.sqrt(2.0 / (cfg.feature_dim_in + e))
    std_proj = np.sqrt(2.0 / (e + cfg.embed_dim))
    return EncoderParams(
        config=cfg,
        input_w=Tensor(rng.normal(0, std_in, (cfg.feature_dim_in, e)), requires_grad=True),
        input_b=Tensor(np.zeros(e), requires_grad=True),
        layers=layers,
        seg_head=mlp_init([e, cfg.head_hidden, 1], rng, out_activation="sigmoid"),
        conf_head=mlp_init([e, cfg.head_hidden, 1], rng, out_activation="sigmoid"),
        pocket_proj_w=Tensor(rng.normal(0, std_proj, (e, cfg.embed_dim)), requires_grad=True),
        pocket_proj_b=Tensor(np.zeros(cfg.embed_dim), requires_grad=True),
        protein_proj_w=Tensor(rng.normal(0, std_proj, (e, cfg.embed_dim)), requires_grad=True),
        protein_proj_b=Tensor(np.zeros(cfg.embed_dim), requires_grad=True),
        ligand_mlp=mlp_init(
            [cfg.ligand_dim, cfg.ligand_hidden, 2 * cfg.embed_dim],
            rng,
            activation="gelu",
            dropout=cfg.ligand_dropout,
        ),
    )


@dataclass
class EncoderOutput:
    coords: Tensor          # (S, 3) updated residue coordinates
    residue_feats: Tensor   # (S, E)
    pocket_coords: Tensor   # (N, 3)
    pocket_feats: Tensor    # (N, E)
    protein_feat: Tensor    # (1, E)
    seg_scores: Tensor      # (S,) residue binding-site scores in (0, 1)
    confidences: Tensor     # (N,) raw per-virtual-node confidences in (0, 1)


@dataclass
class PocketSet:
    centers: Tensor             # (K, 3) cluster mean coordinates
    embeddings: Tensor          # (K, E) before projection, (K, D) after
    confidences: Tensor         # (K,)
    protein_embedding: Tensor | None  # (1, D) after projection
    members: list[list[int]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.centers.shape[0]


@dataclass
class LigandEmbedding:
    joint: Tensor         # (B, 2D)
    protein_part: Tensor  # (B, D)
    pocket_part: Tensor   # (B, D)


def _check_finite(layer: int, step: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values after layer {layer}, step {step}")


def vnegnn_forward(
    params: EncoderParams,
    graph: ProteinGraph,
    init: VirtualNodeInit | None = None,
) -> EncoderOutput:
    """Run all layers over one protein graph.

    Virtual pocket coordinates come from ``init``; every virtual feature row
    starts as the mean of the projected residue features (projection is
    affine, so this equals projecting the initializer's raw-feature mean).
    """
    cfg = params.config
    if graph.feats.shape[1] != cfg.feature_dim_in:
        raise ShapeError(
            f"residue feature width {graph.feats.shape[1]} != configured {cfg.feature_dim_in}"
        )
    if init is None:
        init = init_virtual_nodes(graph, cfg.n_virtual, cfg.sphere_margin)
    eps = cfg.coord_eps
    n_res = graph.n_residues
    n_virt = init.count

    h = Tensor(graph.feats) @ params.input_w + params.input_b      # (S, E)
    x = Tensor(graph.coords)
    z = Tensor(init.pocket_coords)
    mean_feat = h.mean(axis=0, keepdims=True)                       # (1, E)
    b = mean_feat[np.zeros(n_virt, dtype=np.int64)]                 # (N, E)
    p = mean_feat

    edges = graph.edges
    res_of_edge = edges[:, 0] if len(edges) else np.zeros(0, dtype=np.int64)
    nbr_of_edge = edges[:, 1] if len(edges) else np.zeros(0, dtype=np.int64)
    virt_rows = np.repeat(np.arange(n_virt), n_res)
    res_rows = np.tile(np.arange(n_res), n_virt)
    res_rows_br = np.repeat(np.arange(n_res), n_virt)
    virt_rows_br = np.tile(np.arange(n_virt), n_res)
    all_res = np.zeros(n_res, dtype=np.int64)

    for l, layer in enumerate(params.layers):
        # step 1: residue -> residue
        hi, hj = h[res_of_edge], h[nbr_of_edge]
        diff = x[res_of_edge] - x[nbr_of_edge]
        dist = row_norms(diff, eps)
        msg = mlp_forward(layer.rr_e, concat([hi, hj, dist], axis=1))
        coef = mlp_forward(layer.rr_x, msg)
        x = x + segment_mean((diff / dist) * coef, res_of_edge, n_res)
        agg = segment_mean(msg, res_of_edge, n_res)
        h = h + mlp_forward(layer.rr_h, concat([h, agg], axis=1))
        _check_finite(l, "residue-residue", x, h)

        # step 2: residue -> pocket node (moves pocket coordinates)
        diff = z[virt_rows] - x[res_rows]
        dist = row_norms(diff, eps)
        msg = mlp_forward(layer.rb_e, concat([b[virt_rows], h[res_rows], dist], axis=1))
        coef = mlp_forward(layer.rb_x, msg)
        z = z + segment_mean((diff / dist) * coef, virt_rows, n_virt)
        agg = segment_mean(msg, virt_rows, n_virt)
        b = b + mlp_forward(layer.rb_h, concat([b, agg], axis=1))
        _check_finite(l, "residue-pocket", z, b)

        # step 3: pocket node -> residue
        diff = x[res_rows_br] - z[virt_rows_br]
        dist = row_norms(diff, eps)
        msg = mlp_forward(layer.br_e, concat([h[res_rows_br], b[virt_rows_br], dist], axis=1))
        coef = mlp_forward(layer.br_x, msg)
        x = x + segment_mean((diff / dist) * coef, res_rows_br, n_res)
        agg = segment_mean(msg, res_rows_br, n_res)
        h = h + mlp_forward(layer.br_h, concat([h, agg], axis=1))
        _check_finite(l, "pocket-residue", x, h)

        # step 4: residue -> protein node (mean over all residues, no coords)
        msg = mlp_forward(layer.rp_e, concat([p[all_res], h], axis=1))
        p = p + mlp_forward(layer.rp_h, concat([p, msg.mean(axis=0, keepdims=True)], axis=1))
        _check_finite(l, "residue-protein", p)

        # step 5: protein node -> residues
        msg = mlp_forward(layer.pr_e, concat([h, p[all_res]], axis=1))
        h = h + mlp_forward(layer.pr_h, concat([h, msg], axis=1))
        _check_finite(l, "protein-residue", h)

    seg = mlp_forward(params.seg_head, h).ravel()
    conf = confidence_head(params, b)
    return EncoderOutput(
        coords=x,
        residue_feats=h,
        pocket_coords=z,
        pocket_feats=b,
        protein_feat=p,
        seg_scores=seg,
        confidences=conf,
    )


def confidence_head(params: EncoderParams, pocket_feats: Tensor) -> Tensor:
    """Sigmoid-squashed scalar per virtual node."""
    return mlp_forward(params.conf_head, pocket_feats).ravel()


def _eps_components(points: np.ndarray, eps: float) -> list[list[int]]:
    """Connected components of the <=eps neighborhood graph, ordered by
    smallest member index; members sorted ascending."""
    n = len(points)
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(points[i] - points[j]) <= eps:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[ra] = rb
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def cluster_pockets(
    pocket_coords: Tensor,
    pocket_feats: Tensor,
    confidences: Tensor,
    eps: float = 4.0,
    min_pts: int = 1,
) -> PocketSet:
    """Merge virtual nodes by spatial density clustering and average
    coordinates, features, and confidences per cluster.

    With min_pts=1 every point is core, so DBSCAN reduces exactly to the
    connected components of the eps-neighborhood graph; that degenerate
    case is the only one implemented. Cluster ids are assigned by smallest
    member index, which keeps downstream tie-breaks deterministic.
    """
    if min_pts != 1:
        raise ContractError("only min_pts=1 is supported (no noise points)")
    members = _eps_components(pocket_coords.data, eps)
    labels = np.empty(pocket_coords.shape[0], dtype=np.int64)
    for cluster_id, group in enumerate(members):
        labels[group] = cluster_id
    k = len(members)
    return PocketSet(
        centers=segment_mean(pocket_coords, labels, k),
        embeddings=segment_mean(pocket_feats, labels, k),
        confidences=segment_mean(confidences.reshape(-1, 1), labels, k).ravel(),
        protein_embedding=None,
        members=members,
    )


def project(pockets: PocketSet, protein_feat: Tensor, params: EncoderParams) -> PocketSet:
    """Affine-map pocket rows and the protein feature into the contrastive space."""
    return PocketSet(
        centers=pockets.centers,
        embeddings=pockets.embeddings @ params.pocket_proj_w + params.pocket_proj_b,
        confidences=pockets.confidences,
        protein_embedding=protein_feat @ params.protein_proj_w + params.protein_proj_b,
        members=pockets.members,
    )


def encode_protein(
    params: EncoderParams,
    graph: ProteinGraph,
    init: VirtualNodeInit | None = None,
) -> tuple[EncoderOutput, PocketSet]:
    """Forward pass, clustering, and projection in one call."""
    output = vnegnn_forward(params, graph, init)
    pre = cluster_pockets(
        output.pocket_coords,
        output.pocket_feats,
        output.confidences,
        eps=params.config.cluster_eps,
    )
    return output, project(pre, output.protein_feat, params)


def encode_ligand(
    params: EncoderParams,
    features: np.ndarray | Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> LigandEmbedding:
    """Map ligand feature rows to joint embeddings split down the middle
    into protein-matching and pocket-matching halves."""
    feats = features if isinstance(features, Tensor) else Tensor(np.atleast_2d(features))
    if feats.data.ndim == 1:
        feats = feats.reshape(1, -1)
    joint = mlp_forward(params.ligand_mlp, feats, train_mode=train_mode, rng=rng)
    d = params.config.embed_dim
    return LigandEmbedding(
        joint=joint,
        protein_part=joint[:, :d],
        pocket_part=joint[:, d:],
    )
