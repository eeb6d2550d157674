"""Scalar adaptation objectives.

Inner objective: entropy of the composite distribution over the optimized
view branch plus the feature discrepancy between the original image and the
mean view feature. Outer objective: cross-entropy consistency between the
two branches' composite distributions plus the distance between their mean
features. Confidence selection keeps the max(1, floor(rho*N)) lowest-entropy
views; the selection mask and the consistency target are treated as
constants under differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import FrozenModel, PromptState, class_matrix, encode_batch, probs_from_features
from .warp import warp_image

LOG_FLOOR = ad.LOG_FLOOR


@dataclass(frozen=True)
class LossFlags:
    """Component toggles and distance kinds for the ablation studies."""

    inner_entropy: bool = True
    inner_dis: bool = True
    outer_ce: bool = True
    outer_dis: bool = True
    ce_kind: str = "ce"  # "ce" | "kl"
    dis_kind: str = "l2"  # "l2" | "cos"
    detach_ce_target: bool = True

    def __post_init__(self) -> None:
        if self.ce_kind not in ("ce", "kl"):
            raise ValueError(f"ce_kind must be 'ce' or 'kl', got {self.ce_kind!r}")
        if self.dis_kind not in ("l2", "cos"):
            raise ValueError(f"dis_kind must be 'l2' or 'cos', got {self.dis_kind!r}")


@dataclass
class ProbBundle:
    """Per-view probabilities with the selection and composite byproducts."""

    probs: Tensor  # (N, N_c)
    entropies: np.ndarray  # (N,), computed on detached values
    mask: np.ndarray  # (N,) bool, exactly max(1, floor(rho*N)) True
    selected_mean: Tensor  # (N_c,)
    composite: Tensor  # (N_c,)
    threshold: float


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy -sum p log p of a probability vector, in nats."""
    p = ad.as_tensor(p)
    if np.any(p.data < 0):
        raise ValueError("entropy: negative probability component")
    total = float(p.data.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"entropy: probabilities sum to {total}, not 1")
    return ad.scale(ad.sum_(ad.multiply(p, ad.log(p))), -1.0)


def entropy_values(probs: np.ndarray) -> np.ndarray:
    """Row entropies of an (N, N_c) array, no recording (used for ranking)."""
    clipped = np.maximum(probs, LOG_FLOOR)
    return -(probs * np.log(clipped)).sum(axis=-1)


def select_confident(p_views: Tensor, rho: float) -> tuple[np.ndarray, Tensor, float]:
    """Keep the k = max(1, floor(rho*N)) lowest-entropy views.

    Returns (mask, mean of selected rows, entropy threshold). Ties break
    toward the lower view index; the mask is a constant for differentiation,
    so gradients flow only through the selected rows.
    """
    p_views = ad.as_tensor(p_views)
    n = p_views.shape[0]
    if n == 0:
        raise ValueError("select_confident: empty view batch")
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    k = max(1, int(math.floor(rho * n)))
    ents = entropy_values(p_views.data)
    order = np.argsort(ents, kind="stable")
    chosen = order[:k]
    delta = float(ents[order[k - 1]])
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    sel_weights = Tensor((mask / k).reshape(1, n))
    p_tilde = ad.reshape(ad.matmul(sel_weights, p_views), (p_views.shape[1],))
    return mask, p_tilde, delta


def selected_mean_from_mask(p_views: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the rows picked by a precomputed mask (frozen-selection path)."""
    k = int(mask.sum())
    sel_weights = Tensor((mask.astype(np.float64) / k).reshape(1, -1))
    return ad.reshape(ad.matmul(sel_weights, ad.as_tensor(p_views)), (p_views.shape[1],))


def composite_prob(p_x: Tensor, p_tilde: Tensor) -> Tensor:
    """Half the sum of the two distributions (renormalized composite)."""
    return ad.scale(ad.add(ad.as_tensor(p_x), ad.as_tensor(p_tilde)), 0.5)


def prob_bundle(p_x: Tensor, p_views: Tensor, rho: float, mask: np.ndarray | None = None) -> ProbBundle:
    p_views = ad.as_tensor(p_views)
    ents = entropy_values(p_views.data)
    if mask is None:
        mask, p_tilde, delta = select_confident(p_views, rho)
    else:
        p_tilde = selected_mean_from_mask(p_views, mask)
        delta = float(ents[mask].max())
    return ProbBundle(
        probs=p_views,
        entropies=ents,
        mask=mask,
        selected_mean=p_tilde,
        composite=composite_prob(p_x, p_tilde),
        threshold=delta,
    )


def feature_discrepancy_inner(x_feature: Tensor, view_features: Tensor, kind: str = "l2") -> Tensor:
    """Distance between f(x) and the mean feature over ALL views."""
    mean_feat = ad.mean(ad.as_tensor(view_features), axis=0)
    return _feature_distance(ad.as_tensor(x_feature), mean_feat, kind)


def feature_discrepancy_outer(k_features: Tensor, v_features: Tensor, kind: str = "l2") -> Tensor:
    """Distance between the two branches' mean features."""
    mean_k = ad.mean(ad.as_tensor(k_features), axis=0)
    mean_v = ad.mean(ad.as_tensor(v_features), axis=0)
    return _feature_distance(mean_k, mean_v, kind)


def _feature_distance(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "l2":
        return ad.norm(ad.subtract(a, b))
    if kind == "cos":
        return cosine_distance(a, b)
    raise ValueError(f"unknown feature distance kind {kind!r}")


def ce_consistency(target: Tensor, prediction: Tensor, detach_target: bool = True) -> Tensor:
    """-sum target * log prediction; the target side defaults to detached."""
    t = ad.as_tensor(target)
    if detach_target:
        t = t.detach()
    return ad.scale(ad.sum_(ad.multiply(t, ad.log(ad.as_tensor(prediction)))), -1.0)


def kl_divergence(p: Tensor, q: Tensor, detach_target: bool = True) -> Tensor:
    """KL(p || q) = CE(p, q) - H(p), with the same clamped log."""
    pt = ad.as_tensor(p)
    if detach_target:
        pt = pt.detach()
    log_ratio = ad.subtract(ad.log(pt), ad.log(ad.as_tensor(q)))
    return ad.sum_(ad.multiply(pt, log_ratio))


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    return ad.subtract(Tensor(1.0), ad.cosine_similarity(a, b))


def _branch(x_t: Tensor, phi, theta_txt, theta_vis, frozen: FrozenModel):
    """Warp, encode, classify one branch. Returns (view feats, view probs,
    x feat, x probs) sharing the class-feature computation."""
    cfg = frozen.cfg
    w = frozen.tensors()
    views = warp_image(x_t, phi)
    both = ad.concat([ad.reshape(x_t, (1,) + x_t.shape), views], axis=0)
    feats = encode_batch(both, ad.as_tensor(theta_vis), cfg, w)
    cf = class_matrix(ad.as_tensor(theta_txt), cfg, w)
    probs = probs_from_features(feats, cf, cfg.tau)
    x_feat = ad.reshape(feats[0:1], (feats.shape[1],))
    x_probs = ad.reshape(probs[0:1], (probs.shape[1],))
    view_feats = feats[1:]
    view_probs = probs[1:]
    return view_feats, view_probs, x_feat, x_probs


@dataclass
class InnerEval:
    loss: Tensor
    entropy_term: float
    dis_term: float
    bundle: ProbBundle


def _prompt_pair(prompts) -> tuple[Tensor, Tensor]:
    if isinstance(prompts, PromptState):
        return Tensor(prompts.theta_txt), Tensor(prompts.theta_vis)
    txt, vis = prompts
    return ad.as_tensor(txt), ad.as_tensor(vis)


def inner_loss(
    x,
    phi_K,
    prompts,
    frozen: FrozenModel,
    rho: float = 0.1,
    flags: LossFlags = LossFlags(),
    frozen_mask: np.ndarray | None = None,
) -> InnerEval:
    """Composite entropy over the K branch plus inner feature discrepancy.

    phi_K may be a grad-enabled Tensor; `prompts` is a PromptState (treated
    as constants, the dual-loop case) or a (txt, vis) Tensor pair (the
    one-stage ablation feeds grad-enabled prompts). `frozen_mask` pins the
    confidence selection, used by the finite-difference checks to match the
    stop-gradient reading.
    """
    x_t = ad.as_tensor(x)
    txt_t, vis_t = _prompt_pair(prompts)
    view_feats, view_probs, x_feat, x_probs = _branch(x_t, phi_K, txt_t, vis_t, frozen)
    bundle = prob_bundle(x_probs, view_probs, rho, mask=frozen_mask)
    terms = []
    h_value = dis_value = 0.0
    if flags.inner_entropy:
        h = entropy(bundle.composite)
        h_value = h.item()
        terms.append(h)
    if flags.inner_dis:
        dis = feature_discrepancy_inner(x_feat, view_feats, flags.dis_kind)
        dis_value = dis.item()
        terms.append(dis)
    loss = _total(terms)
    return InnerEval(loss, h_value, dis_value, bundle)


@dataclass
class OuterEval:
    loss: Tensor
    ce_term: float
    dis_term: float
    bundle_k: ProbBundle
    bundle_v: ProbBundle


def outer_loss(
    x,
    phi_K,
    phi_V,
    prompts_txt,
    prompts_vis,
    frozen: FrozenModel,
    rho: float = 0.1,
    flags: LossFlags = LossFlags(),
    frozen_masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> OuterEval:
    """Cross-branch consistency: CE between composite distributions (K branch
    as detached target) plus the distance between mean branch features. The
    prompt tensors may be grad-enabled; both phi batches are constants.
    """
    x_t = ad.as_tensor(x)
    mask_k, mask_v = frozen_masks if frozen_masks is not None else (None, None)
    k_feats, k_probs, _, x_probs_k = _branch(x_t, phi_K, prompts_txt, prompts_vis, frozen)
    v_feats, v_probs, _, x_probs_v = _branch(x_t, phi_V, prompts_txt, prompts_vis, frozen)
    bundle_k = prob_bundle(x_probs_k, k_probs, rho, mask=mask_k)
    bundle_v = prob_bundle(x_probs_v, v_probs, rho, mask=mask_v)
    terms = []
    ce_value = dis_value = 0.0
    if flags.outer_ce:
        if flags.ce_kind == "ce":
            ce = ce_consistency(bundle_k.composite, bundle_v.composite, flags.detach_ce_target)
        else:
            ce = kl_divergence(bundle_k.composite, bundle_v.composite, flags.detach_ce_target)
        ce_value = ce.item()
        terms.append(ce)
    if flags.outer_dis:
        dis = feature_discrepancy_outer(k_feats, v_feats, flags.dis_kind)
        dis_value = dis.item()
        terms.append(dis)
    loss = _total(terms)
    return OuterEval(loss, ce_value, dis_value, bundle_k, bundle_v)


def _total(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
