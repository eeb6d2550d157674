"""Per-sample dual-loop adaptation, its baselines, and the final prediction.

Each test sample is adapted episodically: prompts reset to their pretrained
values, fresh view parameters, fresh optimizer state. The inner loop updates
only the K-branch affine matrices (the V branch follows by EMA); the outer
loop updates only the prompts. Counters and optional hygiene checksums make
the loop accounting observable.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .losses import (
    LossFlags,
    entropy,
    entropy_values,
    inner_loss,
    outer_loss,
    select_confident,
)
from .model import (
    FrozenModel,
    PromptState,
    class_matrix,
    encode_batch,
    predict,
    predict_batch,
    probs_from_features,
)
from .optim import make_optimizer
from .warp import (
    DEFAULT_GAMMA_RANGE,
    DEFAULT_RATIO_RANGE,
    DEFAULT_SCALE_RANGE,
    AffineBatch,
    ema_update,
    init_phi_K,
    init_phi_V,
    warp_image,
)

METHODS = ("zero_shot", "tpt", "metatpt", "one_stage", "offline")
_OFFLINE_STREAM = 0x0FF1  # seed-sequence tag for the shared offline phi pair


@dataclass(frozen=True)
class AdaptConfig:
    n_views: int = 64
    inner_steps: int = 1  # T
    outer_steps: int = 1  # M
    inner_lr: float = 1e-4
    outer_lr: float = 1e-3
    ema_momentum: float = 0.9
    rho: float = 0.1
    lambda_k: float = 1.0
    lambda_v: float = 1.0
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    seed: int = 0
    gamma_range: tuple[float, float] = DEFAULT_GAMMA_RANGE
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE
    ratio_range: tuple[float, float] = DEFAULT_RATIO_RANGE
    flags: LossFlags = LossFlags()
    offline_steps: int = 5
    record_trajectories: bool = False
    record_hygiene: bool = False

    def __post_init__(self) -> None:
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.inner_steps < 1 or self.outer_steps < 1:
            raise ValueError("loop counts M and T must be >= 1")
        if min(self.inner_lr, self.outer_lr) < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("EMA momentum must be in [0, 1]")
        if min(self.lambda_k, self.lambda_v) < 0:
            raise ValueError("aggregation weights must be nonnegative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.offline_steps < 0:
            raise ValueError("offline_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_range"] = list(self.gamma_range)
        d["scale_range"] = list(self.scale_range)
        d["ratio_range"] = list(self.ratio_range)
        return d


@dataclass
class AdaptOutcome:
    method: str
    seed: int
    zero_shot_label: int
    adapted_label: int
    scores: np.ndarray
    inner_losses: list[float] = field(default_factory=list)
    outer_losses: list[float] = field(default_factory=list)
    inner_loss_final: float | None = None
    entropy_before: float = 0.0
    entropy_after: float = 0.0
    selected_entropy_before: float | None = None
    selected_entropy_after: float | None = None
    counters: dict[str, int] = field(default_factory=dict)
    true_label: int | None = None
    degenerate: bool = False
    degenerate_step: str | None = None
    wall_time_s: float = 0.0
    phi_k_track: list[np.ndarray] | None = None
    hygiene: dict[str, str] | None = None


def derive_sample_seed(global_seed: int, index: int) -> int:
    """Stable per-sample seed so serial and parallel execution agree."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1)[0])


def selected_average(x, phi, prompts: PromptState, frozen: FrozenModel, rho: float) -> np.ndarray:
    """Confidence-selected mean probability over the views of one branch."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    views = warp_image(arr, phi).data
    probs = predict_batch(views, prompts, frozen)
    _, p_tilde, _ = select_confident(Tensor(probs), rho)
    return p_tilde.data


def final_predict(
    x,
    prompts: PromptState,
    phi_K: AffineBatch,
    phi_V: AffineBatch,
    lambda_k: float,
    lambda_v: float,
    frozen: FrozenModel,
    rho: float = 0.1,
) -> tuple[int, np.ndarray]:
    """Aggregate the original input with both branches' selected averages.

    score = P(x) + lambda_K * selected_avg(K views) + lambda_V * selected_avg(V views);
    the label is the argmax of the unnormalized score.
    """
    if min(lambda_k, lambda_v) < 0:
        raise ValueError("aggregation weights must be nonnegative")
    score = predict(x, prompts, frozen).copy()
    for lam, phi in ((lambda_k, phi_K), (lambda_v, phi_V)):
        if lam == 0.0:
            continue
        score += lam * selected_average(x, phi, prompts, frozen, rho)
    return int(score.argmax()), score


def _zero_shot_pass(x, prompts: PromptState, frozen: FrozenModel) -> tuple[int, np.ndarray, float]:
    p = predict(x, prompts, frozen)
    return int(p.argmax()), p, float(entropy_values(p[None])[0])


def zero_shot_outcome(x, theta0: PromptState, frozen: FrozenModel, seed: int = 0) -> AdaptOutcome:
    t0 = time.perf_counter()
    label, probs, ent = _zero_shot_pass(x, theta0, frozen)
    return AdaptOutcome(
        method="zero_shot",
        seed=seed,
        zero_shot_label=label,
        adapted_label=label,
        scores=probs,
        entropy_before=ent,
        entropy_after=ent,
        counters={"inner": 0, "ema": 0, "outer": 0},
        wall_time_s=time.perf_counter() - t0,
    )


def adapt_sample(
    x,
    theta0: PromptState,
    frozen: FrozenModel,
    cfg: AdaptConfig,
    sample_seed: int | None = None,
) -> AdaptOutcome:
    """One episodic dual-loop adaptation.

    For m in 1..M: T inner steps (K-branch update + EMA onto V), then one
    outer prompt step. A non-finite loss marks the outcome degenerate,
    restores the pretrained prompts and initial views, and still predicts.

    Zero learning rates make the whole episode a strict no-op (prediction
    equals final_predict with the initial phis and prompts); the EMA blend
    is skipped when the inner step cannot move phi_K, so the V branch also
    stays at its initialization.
    """
    seed = cfg.seed if sample_seed is None else sample_seed
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    s = frozen.cfg.image_size
    phi_K = init_phi_K(rng, cfg.n_views, cfg.scale_range, cfg.ratio_range, s, s)
    phi_V = init_phi_V(rng, cfg.n_views, cfg.gamma_range)
    phi_K0, phi_V0 = phi_K.copy(), phi_V.copy()
    theta = theta0.copy()
    opt_phi = make_optimizer(cfg.optimizer, [phi_K.params], cfg.inner_lr, cfg.weight_decay)
    opt_theta = make_optimizer(
        cfg.optimizer, [theta.theta_txt, theta.theta_vis], cfg.outer_lr, cfg.weight_decay
    )

    zero_label, zero_probs, ent_before = _zero_shot_pass(x, theta0, frozen)
    counters = {"inner": 0, "ema": 0, "outer": 0}
    inner_vals: list[float] = []
    outer_vals: list[float] = []
    inner_final: float | None = None
    track: list[np.ndarray] | None = [] if cfg.record_trajectories else None
    hygiene: dict[str, str] | None = {} if cfg.record_hygiene else None
    if hygiene is not None:
        hygiene["frozen_before"] = frozen.checksum()
    degenerate = False
    degen_step: str | None = None

    try:
        for m in range(cfg.outer_steps):
            for t in range(cfg.inner_steps):
                degen_step = f"inner m={m} t={t}"
                leaf = Tensor(phi_K.params, requires_grad=True)
                with Tape() as tape:
                    ev = inner_loss(x, leaf, theta, frozen, cfg.rho, cfg.flags)
                ad.backward(tape, ev.loss)
                inner_vals.append(ev.loss.item())
                opt_phi.step([leaf.grad])
                counters["inner"] += 1
                if cfg.inner_lr != 0.0:
                    ema_update(phi_V, phi_K, cfg.ema_momentum)
                    counters["ema"] += 1
                if track is not None:
                    track.append(phi_K.params.copy())
            if m == cfg.outer_steps - 1:
                degen_step = f"inner-final m={m}"
                inner_final = inner_loss(
                    x, Tensor(phi_K.params), theta, frozen, cfg.rho, cfg.flags
                ).loss.item()
            if hygiene is not None and m == 0:
                hygiene["theta_after_inner"] = theta.checksum()
                hygiene["theta_initial"] = theta0.checksum()
            degen_step = f"outer m={m}"
            if hygiene is not None:
                phi_before = _phi_checksum(phi_K, phi_V)
            txt_leaf = Tensor(theta.theta_txt, requires_grad=True)
            vis_leaf = Tensor(theta.theta_vis, requires_grad=True)
            with Tape() as tape:
                oev = outer_loss(
                    x, phi_K.params, phi_V.params, txt_leaf, vis_leaf, frozen, cfg.rho, cfg.flags
                )
            ad.backward(tape, oev.loss)
            outer_vals.append(oev.loss.item())
            opt_theta.step([txt_leaf.grad, vis_leaf.grad])
            counters["outer"] += 1
            if hygiene is not None:
                hygiene[f"phi_before_outer_{m}"] = phi_before
                hygiene[f"phi_after_outer_{m}"] = _phi_checksum(phi_K, phi_V)
        degen_step = None
    except ad.DiffError:
        degenerate = True
        theta = theta0.copy()
        phi_K, phi_V = phi_K0, phi_V0

    if hygiene is not None:
        hygiene["frozen_after"] = frozen.checksum()
    adapted_label, scores = final_predict(
        x, theta, phi_K, phi_V, cfg.lambda_k, cfg.lambda_v, frozen, cfg.rho
    )
    p_after = predict(x, theta, frozen)
    return AdaptOutcome(
        method="metatpt",
        seed=seed,
        zero_shot_label=zero_label,
        adapted_label=adapted_label,
        scores=scores,
        inner_losses=inner_vals,
        outer_losses=outer_vals,
        inner_loss_final=inner_final,
        entropy_before=ent_before,
        entropy_after=float(entropy_values(p_after[None])[0]),
        counters=counters,
        degenerate=degenerate,
        degenerate_step=degen_step if degenerate else None,
        wall_time_s=time.perf_counter() - t0,
        phi_k_track=track,
        hygiene=hygiene,
    )


def tpt_baseline(
    x,
    theta0: PromptState,
    frozen: FrozenModel,
    cfg: AdaptConfig,
    sample_seed: int | None = None,
) -> AdaptOutcome:
    """Entropy minimization over fixed views: no inner loop, no EMA.

    Views are drawn once from the resize-crop-flip sampler and never
    updated; the prompts take `outer_steps` steps on the entropy of the
    confidence-selected average prediction.
    """
    seed = cfg.seed if sample_seed is None else sample_seed
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    s = frozen.cfg.image_size
    phi = init_phi_K(rng, cfg.n_views, cfg.scale_range, cfg.ratio_range, s, s)
    theta = theta0.copy()
    opt_theta = make_optimizer(
        cfg.optimizer, [theta.theta_txt, theta.theta_vis], cfg.outer_lr, cfg.weight_decay
    )
    zero_label, zero_probs, ent_before = _zero_shot_pass(x, theta0, frozen)
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    views = warp_image(arr, phi).data  # fixed for the whole episode

    sel_before: float | None = None
    outer_vals: list[float] = []
    counters = {"inner": 0, "ema": 0, "outer": 0}
    degenerate = False
    degen_step: str | None = None
    try:
        for m in range(cfg.outer_steps):
            degen_step = f"outer m={m}"
            txt_leaf = Tensor(theta.theta_txt, requires_grad=True)
            vis_leaf = Tensor(theta.theta_vis, requires_grad=True)
            with Tape() as tape:
                feats = encode_batch(Tensor(views), vis_leaf, frozen.cfg, frozen.tensors())
                cf = class_matrix(txt_leaf, frozen.cfg, frozen.tensors())
                probs = probs_from_features(feats, cf, frozen.cfg.tau)
                _, p_tilde, _ = select_confident(probs, cfg.rho)
                loss = entropy(p_tilde)
            if sel_before is None:
                sel_before = loss.item()
            ad.backward(tape, loss)
            outer_vals.append(loss.item())
            opt_theta.step([txt_leaf.grad, vis_leaf.grad])
            counters["outer"] += 1
        degen_step = None
    except ad.DiffError:
        degenerate = True
        theta = theta0.copy()

    probs_after = predict_batch(views, theta, frozen)
    _, p_tilde_after, _ = select_confident(Tensor(probs_after), cfg.rho)
    sel_after = float(entropy_values(p_tilde_after.data[None])[0])
    p_after = predict(x, theta, frozen)
    score = p_after + cfg.lambda_k * p_tilde_after.data
    return AdaptOutcome(
        method="tpt",
        seed=seed,
        zero_shot_label=zero_label,
        adapted_label=int(score.argmax()),
        scores=score,
        outer_losses=outer_vals,
        entropy_before=ent_before,
        entropy_after=float(entropy_values(p_after[None])[0]),
        selected_entropy_before=sel_before,
        selected_entropy_after=sel_after,
        counters=counters,
        degenerate=degenerate,
        degenerate_step=degen_step if degenerate else None,
        wall_time_s=time.perf_counter() - t0,
    )


def one_stage_ablation(
    x,
    theta0: PromptState,
    frozen: FrozenModel,
    cfg: AdaptConfig,
    sample_seed: int | None = None,
) -> AdaptOutcome:
    """Joint update of view parameters and prompts on L_inner + L_outer.

    One optimizer step per m updates both groups simultaneously (each at its
    own learning rate); the EMA onto the V branch still runs after each step.
    """
    seed = cfg.seed if sample_seed is None else sample_seed
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    s = frozen.cfg.image_size
    phi_K = init_phi_K(rng, cfg.n_views, cfg.scale_range, cfg.ratio_range, s, s)
    phi_V = init_phi_V(rng, cfg.n_views, cfg.gamma_range)
    phi_K0, phi_V0 = phi_K.copy(), phi_V.copy()
    theta = theta0.copy()
    opt_phi = make_optimizer(cfg.optimizer, [phi_K.params], cfg.inner_lr, cfg.weight_decay)
    opt_theta = make_optimizer(
        cfg.optimizer, [theta.theta_txt, theta.theta_vis], cfg.outer_lr, cfg.weight_decay
    )
    zero_label, zero_probs, ent_before = _zero_shot_pass(x, theta0, frozen)
    counters = {"joint": 0, "ema": 0}
    inner_vals: list[float] = []
    outer_vals: list[float] = []
    degenerate = False
    degen_step: str | None = None
    try:
        for m in range(cfg.outer_steps):
            degen_step = f"joint m={m}"
            phi_leaf = Tensor(phi_K.params, requires_grad=True)
            txt_leaf = Tensor(theta.theta_txt, requires_grad=True)
            vis_leaf = Tensor(theta.theta_vis, requires_grad=True)
            with Tape() as tape:
                iev = inner_loss(x, phi_leaf, (txt_leaf, vis_leaf), frozen, cfg.rho, cfg.flags)
                oev = outer_loss(
                    x, phi_leaf, phi_V.params, txt_leaf, vis_leaf, frozen, cfg.rho, cfg.flags
                )
                total = ad.add(iev.loss, oev.loss)
            ad.backward(tape, total)
            inner_vals.append(iev.loss.item())
            outer_vals.append(oev.loss.item())
            opt_phi.step([phi_leaf.grad])
            opt_theta.step([txt_leaf.grad, vis_leaf.grad])
            counters["joint"] += 1
            if cfg.inner_lr != 0.0:
                ema_update(phi_V, phi_K, cfg.ema_momentum)
                counters["ema"] += 1
        degen_step = None
    except ad.DiffError:
        degenerate = True
        theta = theta0.copy()
        phi_K, phi_V = phi_K0, phi_V0

    adapted_label, scores = final_predict(
        x, theta, phi_K, phi_V, cfg.lambda_k, cfg.lambda_v, frozen, cfg.rho
    )
    p_after = predict(x, theta, frozen)
    return AdaptOutcome(
        method="one_stage",
        seed=seed,
        zero_shot_label=zero_label,
        adapted_label=adapted_label,
        scores=scores,
        inner_losses=inner_vals,
        outer_losses=outer_vals,
        entropy_before=ent_before,
        entropy_after=float(entropy_values(p_after[None])[0]),
        counters=counters,
        degenerate=degenerate,
        degenerate_step=degen_step if degenerate else None,
        wall_time_s=time.perf_counter() - t0,
    )


def offline_ablation(
    images: np.ndarray,
    theta0: PromptState,
    frozen: FrozenModel,
    cfg: AdaptConfig,
    sample_seeds: list[int] | None = None,
) -> list[AdaptOutcome]:
    """Two-phase variant: meta-train one shared phi pair on the whole split,
    then per-sample prompt tuning with the views frozen.

    Phase 1 takes `offline_steps` optimizer steps on the inner objective
    summed over the split (gradient accumulation, identical gradient). Phase
    2 mirrors adapt_sample's outer loop with the shared, frozen views.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    seeds = sample_seeds or [derive_sample_seed(cfg.seed, i) for i in range(n)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _OFFLINE_STREAM]))
    s = frozen.cfg.image_size
    phi_K = init_phi_K(rng, cfg.n_views, cfg.scale_range, cfg.ratio_range, s, s)
    phi_V = init_phi_V(rng, cfg.n_views, cfg.gamma_range)
    opt_phi = make_optimizer(cfg.optimizer, [phi_K.params], cfg.inner_lr, cfg.weight_decay)

    for _ in range(cfg.offline_steps):
        grad_acc = np.zeros_like(phi_K.params)
        for i in range(n):
            leaf = Tensor(phi_K.params, requires_grad=True)
            with Tape() as tape:
                ev = inner_loss(images[i], leaf, theta0, frozen, cfg.rho, cfg.flags)
            ad.backward(tape, ev.loss)
            if leaf.grad is not None:
                grad_acc += leaf.grad
        opt_phi.step([grad_acc])
        if cfg.inner_lr != 0.0:
            ema_update(phi_V, phi_K, cfg.ema_momentum)

    phi_checksum = _phi_checksum(phi_K, phi_V)
    outcomes: list[AdaptOutcome] = []
    for i in range(n):
        t0 = time.perf_counter()
        x = images[i]
        theta = theta0.copy()
        opt_theta = make_optimizer(
            cfg.optimizer, [theta.theta_txt, theta.theta_vis], cfg.outer_lr, cfg.weight_decay
        )
        zero_label, zero_probs, ent_before = _zero_shot_pass(x, theta0, frozen)
        outer_vals: list[float] = []
        degenerate = False
        degen_step: str | None = None
        try:
            for m in range(cfg.outer_steps):
                degen_step = f"outer m={m}"
                txt_leaf = Tensor(theta.theta_txt, requires_grad=True)
                vis_leaf = Tensor(theta.theta_vis, requires_grad=True)
                with Tape() as tape:
                    oev = outer_loss(
                        x, phi_K.params, phi_V.params, txt_leaf, vis_leaf, frozen, cfg.rho, cfg.flags
                    )
                ad.backward(tape, oev.loss)
                outer_vals.append(oev.loss.item())
                opt_theta.step([txt_leaf.grad, vis_leaf.grad])
            degen_step = None
        except ad.DiffError:
            degenerate = True
            theta = theta0.copy()
        adapted_label, scores = final_predict(
            x, theta, phi_K, phi_V, cfg.lambda_k, cfg.lambda_v, frozen, cfg.rho
        )
        p_after = predict(x, theta, frozen)
        outcomes.append(
            AdaptOutcome(
                method="offline",
                seed=seeds[i],
                zero_shot_label=zero_label,
                adapted_label=adapted_label,
                scores=scores,
                outer_losses=outer_vals,
                entropy_before=ent_before,
                entropy_after=float(entropy_values(p_after[None])[0]),
                counters={
                    "inner": 0,
                    "ema": 0,
                    "outer": len(outer_vals),
                    "offline_inner": cfg.offline_steps,
                },
                degenerate=degenerate,
                degenerate_step=degen_step if degenerate else None,
                wall_time_s=time.perf_counter() - t0,
                hygiene={"shared_phi": phi_checksum},
            )
        )
    return outcomes


def run_method(
    method: str,
    x,
    theta0: PromptState,
    frozen: FrozenModel,
    cfg: AdaptConfig,
    sample_seed: int,
) -> AdaptOutcome:
    """Dispatch for the per-sample methods (offline is split-level)."""
    if method == "zero_shot":
        return zero_shot_outcome(x, theta0, frozen, seed=sample_seed)
    if method == "tpt":
        return tpt_baseline(x, theta0, frozen, cfg, sample_seed)
    if method == "metatpt":
        return adapt_sample(x, theta0, frozen, cfg, sample_seed)
    if method == "one_stage":
        return one_stage_ablation(x, theta0, frozen, cfg, sample_seed)
    raise ValueError(f"unknown per-sample method {method!r}")


def _phi_checksum(phi_K: AffineBatch, phi_V: AffineBatch) -> str:
    h = hashlib.sha256()
    h.update(phi_K.params.tobytes())
    h.update(phi_V.params.tobytes())
    return h.hexdigest()
