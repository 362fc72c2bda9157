"""Losses and scores for knowledge-guided contrastive training.

Five building blocks: symmetric InfoNCE over image/text embeddings, patch-KE
alignment scores (best and worst aligned KE per category, plus per-patch
variants), a multi-label BCE over those scores, a BCE that ties the image
tower's CLS attention to per-patch alignment, and per-sample weights that
downweight pairs whose patches align with no KE set. A mode table combines
them into the six trainable objectives. In the weighted modes the sample
weights gate every knowledge-derived term, not just the contrastive one:
a pair whose image does not support its caption must not be allowed to
reshape the alignment evidence it is judged by.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

MODES = (
    "cl",
    "cl_ke",
    "cl_attention",
    "weighted_cl_attention",
    "weighted_cl_ke",
    "weighted_cl_attention_ke",
)

# mode -> (contrastive component, extra components scaled by mu2)
_MODE_TABLE = {
    "cl": ("cl", ()),
    "cl_ke": ("cl", ("ke",)),
    "cl_attention": ("cl", ("attention",)),
    "weighted_cl_attention": ("weighted_cl", ("attention",)),
    "weighted_cl_ke": ("weighted_cl", ("ke",)),
    "weighted_cl_attention_ke": ("weighted_cl", ("attention", "ke")),
}


@dataclass(frozen=True)
class LossConfig:
    """Objective selection and its scalar knobs."""

    temperature: float = 0.07
    mu1: float = 1.0
    mu2: float = 1.0
    mode: str = "cl"
    regime: str = "category"  # per_pair treats each caption's KE set as a class
    alpha_target: str = "patch"  # attention targets: per-patch scores or the sample's scalar omega

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.regime not in ("category", "per_pair"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.alpha_target not in ("patch", "scalar"):
            raise ValueError(f"unknown alpha_target {self.alpha_target!r}")


@dataclass
class OmegaScores:
    """Patch-KE alignment: per-category extremes and per-patch extremes."""

    omega: torch.Tensor  # N×C, best-aligned KE per category (patch-mean)
    omega_hat: torch.Tensor  # N×C, worst-aligned KE per category
    patch_alignment: torch.Tensor  # N×n, each patch's best own-KE score
    patch_alignment_min: torch.Tensor  # N×n, each patch's worst own-KE score

    def check(self, atol=1e-4):
        for t in (self.omega, self.omega_hat, self.patch_alignment,
                  self.patch_alignment_min):
            if t.detach().abs().max() > 1 + atol:
                raise AssertionError("alignment scores exceed [-1, 1]")
        if (self.omega < self.omega_hat - atol).any():
            raise AssertionError("omega < omega_hat somewhere")
        return self


def similarity_matrix(patches, kes):
    """S[p, q] = patch_p · ke_q for unit-norm rows."""
    if patches.shape[-1] != kes.shape[-1]:
        raise ValueError(
            f"dimension mismatch: patches d={patches.shape[-1]}, kes d={kes.shape[-1]}"
        )
    return patches @ kes.transpose(-1, -2)


def omega_scores(patch_emb, ke_emb, ke_mask, own_category):
    """Alignment extremes for every (sample, category) pair.

    patch_emb: N×n×d. ke_emb: C×m×d padded, ke_mask: C×m marking real KEs.
    own_category: length-N index of each sample's own class (in the per-pair
    regime the KE sets are the batch's captions and this is arange(N)).
    """
    if (~ke_mask).all(dim=-1).any():
        raise ValueError("a category has an empty KE set")
    sims = torch.einsum("ipd,cqd->icpq", patch_emb, ke_emb)  # N×C×n×m
    col_means = sims.mean(dim=2)  # N×C×m, patch-mean per KE
    pad = ~ke_mask[None, :, :]
    omega = col_means.masked_fill(pad, float("-inf")).amax(dim=-1)
    omega_hat = col_means.masked_fill(pad, float("inf")).amin(dim=-1)

    n = patch_emb.shape[0]
    own = sims[torch.arange(n), own_category]  # N×n×m
    own_pad = ~ke_mask[own_category][:, None, :]
    w = own.masked_fill(own_pad, float("-inf")).amax(dim=-1)
    w_hat = own.masked_fill(own_pad, float("inf")).amin(dim=-1)
    return OmegaScores(omega, omega_hat, w, w_hat)


def _infonce_terms(image_emb, text_emb, temperature):
    """Per-sample image→text and text→image cross-entropy terms."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = similarity_matrix(image_emb, text_emb) / temperature
    targets = torch.arange(len(image_emb), device=logits.device)
    i2t = F.cross_entropy(logits, targets, reduction="none")
    t2i = F.cross_entropy(logits.t(), targets, reduction="none")
    return i2t, t2i


def contrastive_loss(image_emb, text_emb, temperature):
    """Symmetric InfoNCE: matched pairs attract, in-batch pairs repel."""
    i2t, t2i = _infonce_terms(image_emb, text_emb, temperature)
    return (i2t + t2i).sum() / (2 * len(i2t))


def weighted_contrastive_loss(image_emb, text_emb, temperature, weights):
    """Per-sample InfoNCE terms scaled by precomputed weights.

    Callers pass weights detached from the graph; scaling a sample's loss
    must not create gradient pressure on the weight itself.
    """
    if len(weights) != len(image_emb):
        raise ValueError("need one weight per sample")
    i2t, t2i = _infonce_terms(image_emb, text_emb, temperature)
    return (weights * (i2t + t2i)).sum() / (2 * len(i2t))


def ke_loss(omega, omega_hat, y):
    """Multi-label BCE: present categories push omega up, absent ones push omega_hat down."""
    if omega.shape != omega_hat.shape or omega.shape != y.shape:
        raise ValueError("omega, omega_hat and y must share a shape")
    if not ((y == 0) | (y == 1)).all():
        raise ValueError("y must be a {0,1} multi-label matrix")
    # log sigmoid(x) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)
    terms = y * F.softplus(-omega) + (1 - y) * F.softplus(omega_hat)
    return terms.sum() / (2 * len(omega))


def attention_loss(attention, w, w_hat):
    """BCE steering attention toward patches whose alignment supports it.

    Per patch the loss asks the attention to be high where the best-case
    alignment ``w`` is positive and low where the worst-case alignment
    ``w_hat`` is negative. Both alignment scores enter as frozen evidence
    (detached), and the attention also supplies a detached soft target, so
    gradients move the attention only: the loss can never raise a patch's
    alignment to justify attention that is already parked on it.
    """
    if attention.shape != w.shape or attention.shape != w_hat.shape:
        raise ValueError("attention, w and w_hat must share a shape")
    target = attention.detach()
    best, worst = w.detach(), w_hat.detach()
    terms = target * F.softplus(-attention * best) \
        + (1 - target) * F.softplus(-attention * worst)
    return terms.sum() / (2 * len(attention))


def sample_weights(omega, label_mask=None):
    """λ_i = sigmoid(max_c omega_i^c): low patch-KE support, low weight.

    The max runs over the caption's own categories when label_mask (N×C,
    nonzero = category appears in caption i) is given, so a pair whose
    image does not support its caption's KEs is downweighted even if the
    image matches some other category well. Without a mask it runs over
    every column. The logistic keeps weights positive and order-preserving
    even when raw similarities are negative early in training.
    """
    if label_mask is not None:
        omega = omega.masked_fill(label_mask == 0, float("-inf"))
    return torch.sigmoid(omega.amax(dim=-1))


def total_loss(components, config):
    """Combine computed components per the mode table."""
    base, extras = _MODE_TABLE[config.mode]
    needed = (base,) + extras
    missing = [k for k in needed if k not in components]
    if missing:
        raise ValueError(f"mode {config.mode!r} needs missing components {missing}")
    total = config.mu1 * components[base]
    for key in extras:
        total = total + config.mu2 * components[key]
    return total


def compute_losses(image_emb, text_emb, patch_emb, attention,
                   ke_emb, ke_mask, own_category, y, config):
    """All loss components for one batch, plus λ and the alignment scores.

    ke_emb/ke_mask may be None for plain contrastive training; modes that
    need them then fail in total_loss.
    """
    components = {"cl": contrastive_loss(image_emb, text_emb, config.temperature)}
    lam = None
    scores = None
    if ke_emb is not None:
        scores = omega_scores(patch_emb, ke_emb, ke_mask, own_category)
        components["ke"] = ke_loss(scores.omega, scores.omega_hat, y)
        if config.alpha_target == "patch":
            w, w_hat = scores.patch_alignment, scores.patch_alignment_min
        else:
            idx = torch.arange(len(own_category))
            w = scores.omega[idx, own_category][:, None].expand_as(attention)
            w_hat = scores.omega_hat[idx, own_category][:, None].expand_as(attention)
        components["attention"] = attention_loss(attention, w, w_hat)
        lam = sample_weights(scores.omega.detach(), y)
        components["weighted_cl"] = weighted_contrastive_loss(
            image_emb, text_emb, config.temperature, lam
        )
    return total_loss(components, config), components, lam, scores
