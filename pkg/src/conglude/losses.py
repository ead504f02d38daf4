"""Training objectives: geometric supervision (site center, residue
segmentation, confidence regression), the three-axis structure-based
contrastive loss, and the sigmoid contrastive loss for activity data.

All similarity is cosine; temperatures default to the inverse square root
of the corresponding embedding width. Every loss returns a scalar Tensor
on the gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .numcore import Tensor, concat, stack

__all__ = [
    "LossConfig",
    "ComplexEmbedding",
    "cosine_similarity",
    "info_nce",
    "closest_pocket_index",
    "loss_contrastive_sb",
    "loss_bsc",
    "loss_dice",
    "confidence_target",
    "confidence_targets",
    "loss_confidence",
    "loss_geometric",
    "loss_lb",
]


@dataclass
class LossConfig:
    tau_p2m: float
    tau_m2p: float
    tau_m2b: float
    dice_eps: float = 1e-6
    conf_gamma: float = 4.0
    conf_c0: float = 0.001
    lb_scale: float = 6.0
    enable_geometric: bool = True
    enable_bsc: bool = True
    enable_seg: bool = True
    enable_confidence: bool = True
    enable_p2m: bool = True
    enable_m2p: bool = True
    enable_m2b: bool = True
    enable_lb: bool = True
    weight_bsc: float = 1.0
    weight_seg: float = 1.0
    weight_confidence: float = 1.0
    weight_p2m: float = 1.0
    weight_m2p: float = 1.0
    weight_m2b: float = 1.0

    def __post_init__(self):
        if min(self.tau_p2m, self.tau_m2p, self.tau_m2b) <= 0:
            raise ContractError("temperatures must be positive")

    @classmethod
    def for_dim(cls, embed_dim: int, **overrides) -> "LossConfig":
        """Temperatures 1/sqrt(2D) for the joint axis, 1/sqrt(D) otherwise."""
        defaults = dict(
            tau_p2m=1.0 / np.sqrt(2.0 * embed_dim),
            tau_m2p=1.0 / np.sqrt(embed_dim),
            tau_m2b=1.0 / np.sqrt(embed_dim),
        )
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class ComplexEmbedding:
    """Everything one protein-ligand complex contributes to the batch loss."""

    protein: Tensor         # (D,)
    pockets: Tensor         # (K, D)
    selected: int           # pocket closest to the true site center
    ligand_joint: Tensor    # (2D,)
    ligand_protein: Tensor  # (D,)
    ligand_pocket: Tensor   # (D,)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-D tensors; zero-norm vectors are an error."""
    a = a.ravel()
    b = b.ravel()
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity undefined for a zero-norm vector")
    dot = (a * b).sum()
    return dot / (((a * a).sum().sqrt()) * ((b * b).sum().sqrt()))


def info_nce(query: Tensor, positive: Tensor, candidates: list[Tensor], tau: float) -> Tensor:
    """Softmax contrastive loss over cosine similarities.

    The positive must be one of the candidates (matched by identity, value
    as a fallback). Log-sum-exp uses max subtraction for stability.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if not candidates:
        raise ContractError("candidate list is empty")
    pos_index = next(
        (i for i, c in enumerate(candidates) if c is positive),
        None,
    )
    if pos_index is None:
        pos_index = next(
            (i for i, c in enumerate(candidates) if np.array_equal(c.data, positive.data)),
            None,
        )
    if pos_index is None:
        raise ContractError("positive key is not among the candidates")
    logits = stack([cosine_similarity(query, c) for c in candidates]).ravel() * (1.0 / tau)
    shift = float(logits.data.max())
    lse = (logits - shift).exp().sum().log() + shift
    return lse - logits[pos_index]


def closest_pocket_index(site_center: np.ndarray, pocket_centers: np.ndarray) -> int:
    """Index of the nearest predicted center; ties go to the lower index."""
    d = np.linalg.norm(pocket_centers - np.asarray(site_center), axis=1)
    return int(np.argmin(d))


def loss_contrastive_sb(batch: list[ComplexEmbedding], cfg: LossConfig) -> Tensor:
    """Mean over the batch of the three contrastive axes.

    Per complex: the concatenated protein+selected-pocket vector against all
    batch ligands; the ligand's protein half against all batch proteins; the
    ligand's pocket half against the same protein's own pockets.
    """
    if not batch:
        raise ContractError("empty structure-based batch")
    all_ligands = [s.ligand_joint for s in batch]
    all_proteins = [s.protein for s in batch]
    terms: list[Tensor] = []
    for s in batch:
        parts: list[Tensor] = []
        if cfg.enable_p2m:
            anchor = concat([s.protein, s.pockets[s.selected]], axis=0)
            parts.append(
                cfg.weight_p2m * info_nce(anchor, s.ligand_joint, all_ligands, cfg.tau_p2m)
            )
        if cfg.enable_m2p:
            parts.append(
                cfg.weight_m2p * info_nce(s.ligand_protein, s.protein, all_proteins, cfg.tau_m2p)
            )
        if cfg.enable_m2b:
            own_pockets = [s.pockets[k] for k in range(s.pockets.shape[0])]
            parts.append(
                cfg.weight_m2b
                * info_nce(s.ligand_pocket, own_pockets[s.selected], own_pockets, cfg.tau_m2b)
            )
        total = parts[0] if parts else Tensor(0.0)
        for part in parts[1:]:
            total = total + part
        terms.append(total)
    return stack(terms).mean()


def loss_bsc(pocket_centers: Tensor, site_center: np.ndarray) -> Tensor:
    """Squared distance from the true center to the closest predicted one.

    The gradient flows only through the selected center (sub-gradient at
    ties routes to the first minimum).
    """
    delta = pocket_centers - Tensor(np.asarray(site_center, dtype=np.float64))
    sq = (delta * delta).sum(axis=1)
    return sq[int(np.argmin(sq.data))]


def loss_dice(seg_scores: Tensor, labels: np.ndarray, eps: float = 1e-6) -> Tensor:
    """1 - (2*overlap + eps) / (sum(labels) + sum(scores) + eps)."""
    labels = np.asarray(labels, dtype=np.float64)
    overlap = (seg_scores * Tensor(labels)).sum()
    denom = float(labels.sum()) + seg_scores.sum() + eps
    return 1.0 - (2.0 * overlap + eps) / denom


def confidence_target(
    site_center: np.ndarray, pred_center: np.ndarray, gamma: float = 4.0, c0: float = 0.001
) -> float:
    """1 - d/(2*gamma) within the tolerance radius, the floor value outside."""
    d = float(np.linalg.norm(np.asarray(site_center) - np.asarray(pred_center)))
    return 1.0 - d / (2.0 * gamma) if d <= gamma else c0


def confidence_targets(
    pred_centers: np.ndarray,
    site_centers: list[np.ndarray],
    gamma: float = 4.0,
    c0: float = 0.001,
) -> np.ndarray:
    """Per predicted center, the target against its nearest true site."""
    if not site_centers:
        raise ContractError("need at least one true site center")
    sites = np.stack([np.asarray(c, dtype=np.float64) for c in site_centers])
    out = np.empty(len(pred_centers))
    for i, center in enumerate(pred_centers):
        nearest = sites[np.argmin(np.linalg.norm(sites - center, axis=1))]
        out[i] = confidence_target(nearest, center, gamma, c0)
    return out


def loss_confidence(confidences: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error between predicted and target confidences."""
    delta = confidences - Tensor(np.asarray(targets, dtype=np.float64))
    return (delta * delta).mean()


def loss_geometric(
    pocket_centers: Tensor,
    confidences: Tensor,
    seg_scores: Tensor,
    site_center: np.ndarray,
    residue_labels: np.ndarray,
    all_site_centers: list[np.ndarray],
    cfg: LossConfig,
) -> Tensor:
    """Center + segmentation + confidence terms, each flag-gated.

    Confidence targets are computed against the nearest annotated site when
    the protein has several.
    """
    total = Tensor(0.0)
    if not cfg.enable_geometric:
        return total
    if cfg.enable_bsc:
        total = total + cfg.weight_bsc * loss_bsc(pocket_centers, site_center)
    if cfg.enable_seg:
        total = total + cfg.weight_seg * loss_dice(seg_scores, residue_labels, cfg.dice_eps)
    if cfg.enable_confidence:
        targets = confidence_targets(
            pocket_centers.data, all_site_centers, cfg.conf_gamma, cfg.conf_c0
        )
        total = total + cfg.weight_confidence * loss_confidence(confidences, targets)
    return total


def loss_lb(
    protein_embedding: Tensor,
    ligand_protein_parts: list[Tensor],
    labels: np.ndarray,
) -> Tensor:
    """Sigmoid contrastive loss on activity labels.

    Per ligand, the match probability is sigmoid(cosine(protein, ligand));
    the loss is mean binary cross-entropy against the labels.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if len(ligand_protein_parts) != labels.size:
        raise ContractError("one label per ligand embedding required")
    if labels.size == 0:
        raise ContractError("empty activity batch")
    terms: list[Tensor] = []
    for part, label in zip(ligand_protein_parts, labels):
        q = cosine_similarity(protein_embedding, part).sigmoid()
        terms.append(-(label * q.log() + (1.0 - label) * (1.0 - q).log()))
    return stack(terms).mean()
