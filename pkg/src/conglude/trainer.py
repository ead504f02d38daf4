"""Alternating optimization on structure-based and ligand-based batches.

Structure-based steps update the full parameter set with the geometric plus
contrastive objective. Ligand-based steps optimize only the protein
projection and the ligand encoder; the message-passing stack and pocket
heads stay frozen (their embeddings are computed without gradient and their
parameters are never handed to the optimizer, so they stay bit-identical).

A batch never repeats a protein: in-batch negatives are then always other
proteins' ligands, matching the one-complex-per-protein negative scheme the
contrastive terms assume.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode_ligand, encode_protein
from .errors import ContractError, NumericError
from .losses import (
    ComplexEmbedding,
    LossConfig,
    closest_pocket_index,
    loss_contrastive_sb,
    loss_geometric,
    loss_lb,
)
from .numcore import OptimState, Tensor, adamw_step, hash_parameters, stack
from .protgraph import ProteinGraph, SynthDataset

__all__ = [
    "TrainConfig",
    "TrainData",
    "SbSample",
    "LbTarget",
    "BatchSB",
    "BatchLB",
    "TrainResult",
    "from_synth",
    "sample_sb_batches",
    "sample_lb_batch",
    "train_step_sb",
    "train_step_lb",
    "fit",
    "frozen_parameter_names",
    "frozen_parameter_hash",
    "lb_trainable_names",
    "evaluate_retrieval_top1",
    "evaluate_pocket_dcc",
    "evaluate_site_selection",
]


@dataclass
class TrainConfig:
    sb_batch_size: int = 64
    lb_proteins_per_batch: int = 16
    lb_actives_per_protein: int = 4
    lb_ratio: tuple[int, int] = (1, 3)       # active : inactive
    lb_active_cap: int = 10_000
    lb_loss_scale: float = 6.0
    lr: float = 1e-3
    weight_decay: float = 0.0
    plateau_factor: float = 0.1
    plateau_patience: int = 30
    min_lr: float = 1e-6
    early_stop_patience: int = 100
    max_epochs: int = 200
    seed: int = 0
    enable_geometric: bool = True
    enable_p2m: bool = True
    enable_m2p: bool = True
    enable_m2b: bool = True
    enable_lb: bool = True

    def loss_config(self, embed_dim: int) -> LossConfig:
        return LossConfig.for_dim(
            embed_dim,
            lb_scale=self.lb_loss_scale,
            enable_geometric=self.enable_geometric,
            enable_p2m=self.enable_p2m,
            enable_m2p=self.enable_m2p,
            enable_m2b=self.enable_m2b,
            enable_lb=self.enable_lb,
        )


@dataclass
class SbSample:
    graph: ProteinGraph
    site_index: int
    ligand_id: str
    ligand_features: np.ndarray


@dataclass
class LbTarget:
    graph: ProteinGraph
    active_ids: list[str]
    inactive_ids: list[str]


@dataclass
class BatchSB:
    samples: list[SbSample]


@dataclass
class BatchLB:
    entries: list[tuple[LbTarget, list[str], np.ndarray]]  # (target, ligand ids, labels)


@dataclass
class TrainData:
    sb: list[SbSample]
    lb: list[LbTarget]
    ligand_features: dict[str, np.ndarray]
    sb_val: list[SbSample] = field(default_factory=list)
    lb_val: list[LbTarget] = field(default_factory=list)


def from_synth(dataset: SynthDataset, n_val_sb: int = 0) -> TrainData:
    """Adapt the synthetic dataset; the last ``n_val_sb`` complexes (after a
    fixed interleave) double as the validation split."""
    features = {lid: dataset.ligand_features[i] for i, lid in enumerate(dataset.ligand_ids)}
    sb = [
        SbSample(
            graph=dataset.proteins[p],
            site_index=s,
            ligand_id=dataset.proteins[p].sites[s].ligand_id,
            ligand_features=features[dataset.proteins[p].sites[s].ligand_id],
        )
        for p, s, _ in dataset.sb_samples
    ]
    by_protein: dict[str, tuple[list[str], list[str]]] = {}
    for pid, lid, label in dataset.activities:
        actives, inactives = by_protein.setdefault(pid, ([], []))
        (actives if label else inactives).append(lid)
    lb = [
        LbTarget(graph=g, active_ids=by_protein[g.id][0], inactive_ids=by_protein[g.id][1])
        for g in dataset.proteins
        if g.id in by_protein
    ]
    val = sb[-n_val_sb:] if n_val_sb else []
    return TrainData(sb=sb, lb=lb, ligand_features=features, sb_val=val)


def sample_sb_batches(samples: list[SbSample], rng: np.random.Generator, batch_size: int) -> list[BatchSB]:
    """One epoch of batches: uniform without replacement, and no protein
    repeated within a batch (leftovers roll into later batches)."""
    if not samples:
        return []
    pending = deque(np.array(samples, dtype=object)[rng.permutation(len(samples))])
    batches = []
    while pending:
        batch: list[SbSample] = []
        seen: set[str] = set()
        skipped: list[SbSample] = []
        while pending and len(batch) < batch_size:
            sample = pending.popleft()
            if sample.graph.id in seen:
                skipped.append(sample)
            else:
                seen.add(sample.graph.id)
                batch.append(sample)
        pending.extendleft(reversed(skipped))
        batches.append(BatchSB(batch))
    return batches


def sample_lb_batch(
    targets: list[LbTarget],
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> BatchLB:
    """Draw proteins uniformly, then actives and inactives at the configured
    ratio; the active pool is capped per protein."""
    if not targets:
        raise ContractError("no ligand-based targets to sample")
    n = min(cfg.lb_proteins_per_batch, len(targets))
    chosen = rng.choice(len(targets), size=n, replace=False)
    entries = []
    for t_idx in chosen:
        target = targets[int(t_idx)]
        pool = target.active_ids[: cfg.lb_active_cap]
        n_active = min(cfg.lb_actives_per_protein, len(pool))
        if n_active == 0:
            continue
        actives = [pool[i] for i in rng.choice(len(pool), size=n_active, replace=False)]
        n_inactive = min(
            n_active * cfg.lb_ratio[1] // cfg.lb_ratio[0], len(target.inactive_ids)
        )
        inactives = [
            target.inactive_ids[i]
            for i in rng.choice(len(target.inactive_ids), size=n_inactive, replace=False)
        ]
        ids = actives + inactives
        labels = np.array([1] * len(actives) + [0] * len(inactives))
        entries.append((target, ids, labels))
    if not entries:
        raise ContractError("ligand-based batch came out empty (no actives anywhere)")
    return BatchLB(entries)


# -- steps -----------------------------------------------------------------------------


def _sb_embeddings(
    params: EncoderParams,
    sample: SbSample,
    loss_cfg: LossConfig,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> tuple[ComplexEmbedding, Tensor]:
    output, pockets = encode_protein(params, sample.graph)
    site = sample.graph.sites[sample.site_index]
    selected = closest_pocket_index(site.center, pockets.centers.data)
    emb = encode_ligand(params, sample.ligand_features, train_mode=train_mode, rng=rng)
    d = params.config.embed_dim
    complex_emb = ComplexEmbedding(
        protein=pockets.protein_embedding.ravel(),
        pockets=pockets.embeddings,
        selected=selected,
        ligand_joint=emb.joint.ravel(),
        ligand_protein=emb.joint.ravel()[:d],
        ligand_pocket=emb.joint.ravel()[d:],
    )
    geometric = loss_geometric(
        pockets.centers,
        pockets.confidences,
        output.seg_scores,
        site.center,
        site.residue_labels,
        [s.center for s in sample.graph.sites],
        loss_cfg,
    )
    return complex_emb, geometric


def sb_batch_loss(
    params: EncoderParams,
    batch: BatchSB,
    loss_cfg: LossConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    if not batch.samples:
        raise ContractError("empty structure-based batch")
    complexes = []
    geo_terms = []
    for sample in batch.samples:
        emb, geo = _sb_embeddings(params, sample, loss_cfg, train_mode, rng)
        complexes.append(emb)
        geo_terms.append(geo)
    geometric = stack(geo_terms).mean()
    contrastive = loss_contrastive_sb(complexes, loss_cfg)
    total = geometric + contrastive
    return total, {
        "sb_loss": total.item(),
        "geometric": geometric.item(),
        "contrastive": contrastive.item(),
    }


def train_step_sb(
    params: EncoderParams,
    batch: BatchSB,
    optim: OptimState,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Full-parameter update on one structure-based batch."""
    params.zero_grad()
    total, scalars = sb_batch_loss(params, batch, loss_cfg, train_mode=True, rng=rng)
    if not math.isfinite(scalars["sb_loss"]):
        raise NumericError("non-finite structure-based loss")
    total.backward()
    adamw_step(params.named_parameters(), None, optim)
    return scalars


def lb_trainable_names(params: EncoderParams) -> list[str]:
    return [
        name
        for name in params.named_parameters()
        if name.startswith("protein_proj.") or name.startswith("ligand_mlp.")
    ]


def frozen_parameter_names(params: EncoderParams) -> list[str]:
    trainable = set(lb_trainable_names(params))
    return [name for name in params.named_parameters() if name not in trainable]


def frozen_parameter_hash(params: EncoderParams) -> str:
    named = params.named_parameters()
    return hash_parameters({name: named[name] for name in frozen_parameter_names(params)})


def lb_batch_loss(
    params: EncoderParams,
    batch: BatchLB,
    loss_cfg: LossConfig,
    ligand_features: dict[str, np.ndarray],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Scaled mean activity loss; encoder features enter detached so only
    the protein projection and ligand encoder carry gradients."""
    terms = []
    for target, ligand_ids, labels in batch.entries:
        output, _ = encode_protein(params, target.graph)
        protein_feat = Tensor(output.protein_feat.data.copy())  # frozen backbone
        projected = (protein_feat @ params.protein_proj_w + params.protein_proj_b).ravel()
        feats = np.stack([ligand_features[lid] for lid in ligand_ids])
        emb = encode_ligand(params, feats, train_mode=train_mode, rng=rng)
        parts = [emb.protein_part[i] for i in range(len(ligand_ids))]
        terms.append(loss_lb(projected, parts, labels))
    mean_bce = stack(terms).mean()
    total = loss_cfg.lb_scale * mean_bce
    return total, {"lb_loss": total.item(), "lb_bce": mean_bce.item()}


def train_step_lb(
    params: EncoderParams,
    batch: BatchLB,
    optim: OptimState,
    loss_cfg: LossConfig,
    ligand_features: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> dict[str, float]:
    """Update restricted to the protein projection and ligand encoder."""
    params.zero_grad()
    total, scalars = lb_batch_loss(
        params, batch, loss_cfg, ligand_features, train_mode=True, rng=rng
    )
    if not math.isfinite(scalars["lb_loss"]):
        raise NumericError("non-finite ligand-based loss")
    total.backward()
    named = params.named_parameters()
    adamw_step({name: named[name] for name in lb_trainable_names(params)}, None, optim)
    return scalars


# -- fit ------------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: EncoderParams
    log: list[dict]
    best_metric: float
    best_state: dict[str, np.ndarray]
    aborted: bool = False
    abort_reason: str = ""


def validation_metric(params: EncoderParams, data: TrainData, loss_cfg: LossConfig) -> float:
    """Mean normalized in-batch retrieval rank on the held-out complexes,
    plus mean activity BCE on held-out targets when present. Lower is better.
    """
    metric = 0.0
    if data.sb_val:
        _, anchors, joints = _retrieval_scores(params, data.sb_val)
        sims = _cosine_matrix(anchors, joints)
        n = len(data.sb_val)
        ranks = []
        for j in range(n):
            rank = int((sims[j] > sims[j, j]).sum())
            ranks.append(rank / max(n - 1, 1))
        metric += float(np.mean(ranks))
    if data.lb_val:
        entries = []
        for target in data.lb_val:
            ids = target.active_ids + target.inactive_ids
            labels = np.array([1] * len(target.active_ids) + [0] * len(target.inactive_ids))
            entries.append((target, ids, labels))
        _, scalars = lb_batch_loss(
            params, BatchLB(entries), loss_cfg, data.ligand_features, train_mode=False
        )
        metric += scalars["lb_bce"]
    return metric


def fit(
    params: EncoderParams,
    data: TrainData,
    cfg: TrainConfig,
    max_steps: int | None = None,
    step_callback=None,
) -> TrainResult:
    """Run the alternating loop until early stopping, the epoch limit, or
    ``max_steps`` optimizer steps. Keeps the best-validation parameters.

    When both data kinds are present every step flips a fair coin; an epoch
    ends when the structure-based queue for that epoch is exhausted.
    """
    if not data.sb and not (cfg.enable_lb and data.lb):
        raise ContractError("no training data")
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = cfg.loss_config(params.config.embed_dim)
    optim = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    lr = cfg.lr

    best_metric = math.inf
    best_state = {k: v.data.copy() for k, v in params.named_parameters().items()}
    epochs_since_best = 0
    epochs_since_lr_drop = 0
    log: list[dict] = []
    steps_done = 0
    aborted = False
    abort_reason = ""

    use_lb = cfg.enable_lb and bool(data.lb)
    lb_steps_per_epoch = max(1, math.ceil(len(data.lb) / max(cfg.lb_proteins_per_batch, 1)))

    for epoch in range(cfg.max_epochs):
        epoch_scalars: dict[str, list[float]] = {}
        try:
            if data.sb:
                queue = deque(sample_sb_batches(data.sb, rng, cfg.sb_batch_size))
                while queue:
                    if use_lb and rng.random() < 0.5:
                        batch = sample_lb_batch(data.lb, rng, cfg)
                        scalars = train_step_lb(params, batch, optim, loss_cfg, data.ligand_features, rng)
                    else:
                        scalars = train_step_sb(params, queue.popleft(), optim, loss_cfg, rng)
                    steps_done += 1
                    for key, value in scalars.items():
                        epoch_scalars.setdefault(key, []).append(value)
                    if step_callback:
                        step_callback(steps_done, scalars)
                    if max_steps is not None and steps_done >= max_steps:
                        break
            else:
                for _ in range(lb_steps_per_epoch):
                    batch = sample_lb_batch(data.lb, rng, cfg)
                    scalars = train_step_lb(params, batch, optim, loss_cfg, data.ligand_features, rng)
                    steps_done += 1
                    for key, value in scalars.items():
                        epoch_scalars.setdefault(key, []).append(value)
                    if step_callback:
                        step_callback(steps_done, scalars)
                    if max_steps is not None and steps_done >= max_steps:
                        break
        except NumericError as exc:
            aborted = True
            abort_reason = str(exc)

        if data.sb_val or data.lb_val:
            try:
                metric = validation_metric(params, data, loss_cfg)
            except NumericError:
                metric = math.inf
        else:
            # no held-out split: fall back to the epoch's mean training loss
            losses = epoch_scalars.get("sb_loss", []) + epoch_scalars.get("lb_loss", [])
            metric = float(np.mean(losses)) if losses else math.inf
        entry = {
            "epoch": epoch,
            "steps": steps_done,
            "lr": lr,
            "metric": metric,
        }
        for key, values in epoch_scalars.items():
            entry[key] = float(np.mean(values))
        log.append(entry)

        if not aborted and math.isfinite(metric) and metric < best_metric - 1e-12:
            best_metric = metric
            best_state = {k: v.data.copy() for k, v in params.named_parameters().items()}
            epochs_since_best = 0
            epochs_since_lr_drop = 0
        else:
            epochs_since_best += 1
            epochs_since_lr_drop += 1

        if aborted:
            break
        if max_steps is not None and steps_done >= max_steps:
            break
        if epochs_since_best >= cfg.early_stop_patience:
            break
        if epochs_since_lr_drop >= cfg.plateau_patience and lr > cfg.min_lr:
            lr = max(lr * cfg.plateau_factor, cfg.min_lr)
            optim.lr = lr
            epochs_since_lr_drop = 0

    # leave the best parameters in place (on abort: the last good state)
    named = params.named_parameters()
    for name, values in best_state.items():
        named[name].data = values.copy()
    return TrainResult(
        params=params,
        log=log,
        best_metric=best_metric,
        best_state=best_state,
        aborted=aborted,
        abort_reason=abort_reason,
    )


# -- evaluation helpers ------------------------------------------------------------------


def _cosine_matrix(rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
    a = rows_a / np.linalg.norm(rows_a, axis=1, keepdims=True)
    b = rows_b / np.linalg.norm(rows_b, axis=1, keepdims=True)
    return a @ b.T


def _retrieval_scores(params, samples: list[SbSample]):
    anchors = []
    joints = []
    infos = []
    for sample in samples:
        output, pockets = encode_protein(params, sample.graph)
        site = sample.graph.sites[sample.site_index]
        selected = closest_pocket_index(site.center, pockets.centers.data)
        anchor = np.concatenate(
            [pockets.protein_embedding.data.ravel(), pockets.embeddings.data[selected]]
        )
        emb = encode_ligand(params, sample.ligand_features)
        anchors.append(anchor)
        joints.append(emb.joint.data.ravel())
        infos.append((sample, pockets, selected))
    return infos, np.stack(anchors), np.stack(joints)


def evaluate_retrieval_top1(params: EncoderParams, samples: list[SbSample]) -> float:
    """Fraction of complexes whose own ligand wins the joint-similarity
    ranking over all complexes' ligands."""
    _, anchors, joints = _retrieval_scores(params, samples)
    sims = _cosine_matrix(anchors, joints)
    hits = sum(int(np.argmax(sims[j]) == j) for j in range(len(samples)))
    return hits / len(samples)


def evaluate_pocket_dcc(params: EncoderParams, proteins: list[ProteinGraph], threshold: float = 4.0) -> float:
    """Per protein with k sites, take the k most confident predicted pockets;
    a site counts as found if one of them lies within the threshold."""
    found = 0
    total = 0
    for graph in proteins:
        _, pockets = encode_protein(params, graph)
        order = np.lexsort((np.arange(pockets.count), -pockets.confidences.data))
        top = pockets.centers.data[order[: len(graph.sites)]]
        for site in graph.sites:
            total += 1
            if np.linalg.norm(top - site.center, axis=1).min() <= threshold:
                found += 1
    return found / total if total else 0.0


def evaluate_site_selection(params: EncoderParams, samples: list[SbSample], threshold: float = 4.0) -> float:
    """Fraction of complexes whose ligand-conditioned top pocket (by cosine
    to the ligand's pocket half) lies within the threshold of the true site."""
    hits = 0
    for sample in samples:
        _, pockets = encode_protein(params, sample.graph)
        emb = encode_ligand(params, sample.ligand_features)
        pocket_half = emb.pocket_part.data.ravel()
        sims = _cosine_matrix(pockets.embeddings.data, pocket_half[None, :]).ravel()
        best = int(np.lexsort((np.arange(pockets.count), -sims))[0])
        site = sample.graph.sites[sample.site_index]
        if np.linalg.norm(pockets.centers.data[best] - site.center) <= threshold:
            hits += 1
    return hits / len(samples)
