"""
Training objectives of both stages.

Conventions:
- s(a, b) is the inner product of l2-normalised embeddings.
- Batch losses are means over the batch; masked samples contribute 0 but
  still count in the denominator.
- Probabilities are floored at EPS_PROB before any log.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F

from app.core.encoders import EPS_PROB
from app.core.errors import ConfigurationError, ContractError, NumericError
from app.utils.logger import get_logger

logger = get_logger(__name__)

Scalar = Union[torch.Tensor, float]

# Norms below this are treated as zero vectors
ZERO_NORM = 1e-12


@dataclass
class LossReport:
    """A composite loss and the terms it was summed from."""

    name: str
    value: torch.Tensor
    terms: Dict[str, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> Dict[str, float]:
        return {k: float(v.detach()) for k, v in self.terms.items()}


def _as_tensor(x: Scalar) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=torch.float64)


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise s(a_i, b_j) of normalised rows, [len(a), len(b)]."""
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).t()


def i2t_contrastive(
    image_features: torch.Tensor,
    class_text: torch.Tensor,
    labels: torch.Tensor,
    tau: float = 1.0,
) -> torch.Tensor:
    """
    Image-to-text contrastive loss.

    Candidates are the distinct labels present in the batch, so duplicate
    identities never place a positive in the denominator.

    Args:
        image_features: V [B, d]
        class_text: per-class text embeddings [C, d]
        labels: [B] in [0, C)
        tau: temperature

    Returns:
        Mean over the batch of -log softmax(s(V_i, T_{y_i}) / tau)
    """
    _check_tau(tau)
    candidates, target = torch.unique(labels, sorted=True, return_inverse=True)
    logits = similarity(image_features, class_text[candidates]) / tau
    return F.cross_entropy(logits, target)


def t2i_supervised_contrastive(
    image_features: torch.Tensor,
    text_features: torch.Tensor,
    labels: torch.Tensor,
    tau: float = 1.0,
) -> torch.Tensor:
    """
    Text-to-image supervised contrastive loss with multiple positives.

    Args:
        image_features: V [B, d]
        text_features: T [B, d], text of sample i's label
        labels: [B]
        tau: temperature

    Returns:
        Mean over anchor texts of the mean -log softmax over all B images,
        taken on the anchor's positives
    """
    _check_tau(tau)
    logits = similarity(text_features, image_features) / tau
    log_prob = F.log_softmax(logits, dim=1)
    positives = (labels.unsqueeze(1) == labels.unsqueeze(0)).to(log_prob.dtype)
    per_anchor = -(positives * log_prob).sum(dim=1) / positives.sum(dim=1)
    return per_anchor.mean()


def guide_loss(
    identity_features: torch.Tensor,
    clothing_features: Optional[torch.Tensor],
    identity_text: torch.Tensor,
    clothing_text: Optional[torch.Tensor],
    identity_labels: torch.Tensor,
    clothing_labels: Optional[torch.Tensor],
) -> torch.Tensor:
    """
    Image-to-text cross-entropy against frozen prompt embeddings, untempered.

    The clothing term is skipped when clothing_features is None (CIS without
    clothing prompts).

    Returns:
        Identity term + clothing term, each a batch mean
    """
    for labels, bank in ((identity_labels, identity_text), (clothing_labels, clothing_text)):
        if labels is not None and labels.numel() and (labels.min() < 0 or labels.max() >= bank.shape[0]):
            raise ContractError(f"label outside [0, {bank.shape[0]})")
    loss = F.cross_entropy(similarity(identity_features, identity_text), identity_labels)
    if clothing_features is not None:
        loss = loss + F.cross_entropy(similarity(clothing_features, clothing_text), clothing_labels)
    return loss


def _masked_mean(values: torch.Tensor, valid: Optional[torch.Tensor]) -> torch.Tensor:
    if valid is not None:
        values = values * valid.to(values.dtype)
    return values.sum() / values.shape[0]


def spatial_consistency(
    mapped: torch.Tensor,
    clothing: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Mean squared l2 distance between clothing-mapping and clothing features.

    The clothing feature is an alignment target and is detached here.

    Args:
        mapped: F_img2clo [B, d]
        clothing: F_clo [B, d]
        valid: optional [B] mask; masked samples contribute 0
    """
    if mapped.shape != clothing.shape:
        raise ContractError(f"shape mismatch {tuple(mapped.shape)} vs {tuple(clothing.shape)}")
    return _masked_mean((mapped - clothing.detach()).pow(2).sum(dim=-1), valid)


def _checked_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if (na < ZERO_NORM).any() or (nb < ZERO_NORM).any():
        raise NumericError("cosine of a zero-norm vector")
    return (a * b).sum(dim=-1) / (na * nb)


def decoupling_loss(
    original: torch.Tensor,
    mapped: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Mean hinge max(0, cos(F_ori, F_img2clo)).

    Raises:
        NumericError: a row has zero norm
    """
    if original.shape != mapped.shape:
        raise ContractError(f"shape mismatch {tuple(original.shape)} vs {tuple(mapped.shape)}")
    return _masked_mean(F.relu(_checked_cosine(original, mapped)), valid)


def clothing_stripping_loss(guide: Scalar, sc: Scalar, de: Scalar) -> LossReport:
    """Sum of the guide, spatial-consistency and decoupling terms."""
    terms = {"guide": _as_tensor(guide), "sc": _as_tensor(sc), "de": _as_tensor(de)}
    return LossReport(name="cs", value=terms["guide"] + terms["sc"] + terms["de"], terms=terms)


def _check_distribution(p: torch.Tensor, name: str) -> None:
    if (p < 0).any():
        raise ContractError(f"{name} has negative entries")
    if not torch.allclose(p.sum(dim=-1), torch.ones_like(p[..., 0]), atol=1e-6):
        raise ContractError(f"{name} rows do not sum to 1")


def bio_guided_loss(
    p_img: torch.Tensor,
    p_bio: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Symmetric KL divergence D(p_img||p_bio) + D(p_bio||p_img).

    Summed over classes, averaged over the batch. Gradient flows through both
    arguments.

    Raises:
        ContractError: rows are not distributions
    """
    _check_distribution(p_img, "p_img")
    _check_distribution(p_bio, "p_bio")
    p = p_img.clamp_min(EPS_PROB)
    q = p_bio.clamp_min(EPS_PROB)
    log_ratio = p.log() - q.log()
    per_sample = ((p - q) * log_ratio).sum(dim=-1)
    if per_sample.dim() == 0:
        return per_sample
    return _masked_mean(per_sample, valid)


def cross_entropy(
    inputs: torch.Tensor,
    labels: torch.Tensor,
    from_probs: bool = False,
    label_smoothing: float = 0.0,
) -> torch.Tensor:
    """
    Mean negative log probability of the ground-truth class.

    Args:
        inputs: logits [B, C], or probabilities when from_probs
        labels: [B]
        from_probs: interpret inputs as probabilities (floored at EPS_PROB)
        label_smoothing: epsilon of uniform label smoothing; 0 disables
    """
    if from_probs:
        log_p = inputs.clamp_min(EPS_PROB).log()
    else:
        log_p = F.log_softmax(inputs, dim=-1)
    nll = -log_p.gather(1, labels.unsqueeze(1)).squeeze(1)
    if label_smoothing > 0:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * log_p.mean(dim=-1)
    return nll.mean()


def euclidean_distances(features: torch.Tensor) -> torch.Tensor:
    """Pairwise Euclidean distances [B, B]; zero distances stay differentiable."""
    diff = features.unsqueeze(1) - features.unsqueeze(0)
    return diff.pow(2).sum(dim=-1).clamp_min(1e-12).sqrt()


def triplet_loss_from_distances(
    dist: torch.Tensor,
    labels: torch.Tensor,
    margin: float = 0.3,
) -> torch.Tensor:
    """
    Batch-hard triplet loss on a precomputed distance matrix.

    Each anchor uses its farthest positive (excluding itself) and nearest
    negative. Anchors without a positive or a negative are skipped.
    """
    n = dist.shape[0]
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(n, dtype=torch.bool, device=dist.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    usable = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    if not usable.any():
        logger.warning("triplet_all_anchors_skipped", batch_size=n)
        return dist.sum() * 0.0

    d_p = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    d_n = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    losses = F.relu(d_p[usable] - d_n[usable] + margin)
    return losses.mean()


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss with Euclidean distance on un-normalised features."""
    return triplet_loss_from_distances(euclidean_distances(features), labels, margin)


def stage1_loss(
    image_features: torch.Tensor,
    clothing_features: Optional[torch.Tensor],
    identity_text: torch.Tensor,
    clothing_text: Optional[torch.Tensor],
    identity_labels: torch.Tensor,
    clothing_labels: Optional[torch.Tensor],
    tau: float = 1.0,
) -> LossReport:
    """
    Prompt-learning objective: both contrastive directions for identity and
    clothing prompts.

    Args:
        image_features: V of original images [B, d]
        clothing_features: V of clothing images [B, d]; None skips clothing terms
        identity_text: identity prompt embeddings [N_i, d]
        clothing_text: clothing prompt embeddings [N_c, d]
        identity_labels: [B]
        clothing_labels: [B]
        tau: temperature

    Returns:
        LossReport with terms i2t_id, t2i_id (and i2t_clo, t2i_clo)
    """
    terms = {
        "i2t_id": i2t_contrastive(image_features, identity_text, identity_labels, tau),
        "t2i_id": t2i_supervised_contrastive(
            image_features, identity_text[identity_labels], identity_labels, tau
        ),
    }
    if clothing_features is not None:
        terms["i2t_clo"] = i2t_contrastive(clothing_features, clothing_text, clothing_labels, tau)
        terms["t2i_clo"] = t2i_supervised_contrastive(
            clothing_features, clothing_text[clothing_labels], clothing_labels, tau
        )
    return LossReport(name="stage1", value=sum(terms.values()), terms=terms)


def stage2_loss(ce: Scalar, tri: Scalar, cs: Scalar, bg: Scalar) -> LossReport:
    """Unweighted sum of classification, triplet, stripping and bio-guided terms."""
    terms = {"ce": _as_tensor(ce), "tri": _as_tensor(tri), "cs": _as_tensor(cs), "bg": _as_tensor(bg)}
    return LossReport(name="stage2", value=terms["ce"] + terms["tri"] + terms["cs"] + terms["bg"], terms=terms)
