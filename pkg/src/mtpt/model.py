"""Small dual-encoder classifier: frozen encoders plus learnable prompts.

The image side is a patch embedding followed by two single-head
self-attention blocks with learnable visual prompt tokens prepended; the
text side is approximated by a frozen two-layer perceptron fusing a shared
learnable context vector with per-class base embeddings. Image and class
features are L2-normalized and compared by cosine similarity at a fixed
temperature. After source pretraining everything is frozen except the two
prompt tensors, which are the only parameters test-time adaptation may move.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 8
    channels: int = 3
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 32
    n_blocks: int = 2
    n_ctx: int = 4
    n_vp: int = 2
    fusion_hidden: int = 64
    tau: float = 0.07

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def weight_keys(cfg: ModelConfig) -> list[str]:
    keys = ["patch.weight", "patch.bias", "patch.pos"]
    for i in range(cfg.n_blocks):
        keys += [f"block{i}.wq", f"block{i}.wk", f"block{i}.wv", f"block{i}.wo"]
    keys += ["proj", "class_embed", "fusion.w1", "fusion.b1", "fusion.w2", "fusion.b2"]
    return keys


def init_weights(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.d_model
    w: dict[str, np.ndarray] = {}
    w["patch.weight"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.patch_dim), (cfg.patch_dim, d))
    w["patch.bias"] = np.zeros(d)
    w["patch.pos"] = rng.normal(0.0, 0.02, (cfg.n_patches, d))
    for i in range(cfg.n_blocks):
        for name in ("wq", "wk", "wv", "wo"):
            w[f"block{i}.{name}"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
    w["proj"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
    w["class_embed"] = rng.normal(0.0, 0.5, (cfg.n_classes, d))
    w["fusion.w1"] = rng.normal(0.0, 1.0 / math.sqrt(2 * d), (2 * d, cfg.fusion_hidden))
    w["fusion.b1"] = np.zeros(cfg.fusion_hidden)
    w["fusion.w2"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.fusion_hidden), (cfg.fusion_hidden, d))
    w["fusion.b2"] = np.zeros(d)
    return {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in w.items()}


@dataclass
class PromptState:
    """The only tensors the outer loop updates: text context + visual tokens."""

    theta_txt: np.ndarray
    theta_vis: np.ndarray

    def __post_init__(self) -> None:
        self.theta_txt = np.ascontiguousarray(self.theta_txt, dtype=np.float64)
        self.theta_vis = np.ascontiguousarray(self.theta_vis, dtype=np.float64)

    def copy(self) -> "PromptState":
        return PromptState(self.theta_txt.copy(), self.theta_vis.copy())

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.theta_txt.tobytes())
        h.update(self.theta_vis.tobytes())
        return h.hexdigest()

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "PromptState":
        return cls(
            rng.normal(0.0, 0.02, (cfg.n_ctx, cfg.d_model)),
            rng.normal(0.0, 0.02, (cfg.n_vp, cfg.d_model)),
        )


class FrozenModel:
    """Immutable encoder weights; arrays are marked read-only on construction."""

    def __init__(self, cfg: ModelConfig, weights: dict[str, np.ndarray]) -> None:
        missing = set(weight_keys(cfg)) - set(weights)
        if missing:
            raise ValueError(f"missing weights: {sorted(missing)}")
        self.cfg = cfg
        self.weights: dict[str, np.ndarray] = {}
        for k in weight_keys(cfg):
            arr = np.ascontiguousarray(weights[k], dtype=np.float64).copy()
            arr.setflags(write=False)
            self.weights[k] = arr
        # constant Tensor views are safe to share across evaluations
        self._tensors = {k: Tensor(v) for k, v in self.weights.items()}

    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    def named_tensors(self) -> dict[str, np.ndarray]:
        return dict(self.weights)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in weight_keys(self.cfg):
            h.update(k.encode())
            h.update(self.weights[k].tobytes())
        return h.hexdigest()


def _rows_normalized(m: Tensor) -> Tensor:
    sq = ad.power(m, 2.0)
    ssum = ad.sum_(sq, axis=-1, keepdims=True)
    n = ad.power(ssum, 0.5)
    return ad.divide(m, ad.broadcast_to(n, m.shape))


def _attention(x: Tensor, w: dict[str, Tensor], i: int, d: int) -> Tensor:
    q = ad.matmul(x, w[f"block{i}.wq"])
    k = ad.matmul(x, w[f"block{i}.wk"])
    v = ad.matmul(x, w[f"block{i}.wv"])
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    attn = ad.softmax(scores)
    o = ad.matmul(attn, v)
    return ad.add(x, ad.matmul(o, w[f"block{i}.wo"]))


def encode_batch(images: Tensor, theta_vis: Tensor, cfg: ModelConfig, w: dict[str, Tensor]) -> Tensor:
    """Encode a (B, C, S, S) batch into L2-normalized (B, d) features."""
    b = images.shape[0]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.shape[1:] != expected:
        raise ad.ShapeMismatch("encode", images.shape, (b,) + expected)
    side = cfg.image_size // cfg.patch_size
    p = cfg.patch_size
    x = ad.reshape(images, (b, cfg.channels, side, p, side, p))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    patches = ad.reshape(x, (b, cfg.n_patches, cfg.patch_dim))

    tok = ad.matmul(patches, w["patch.weight"])
    bias = ad.broadcast_to(ad.reshape(w["patch.bias"], (1, 1, cfg.d_model)), tok.shape)
    pos = ad.broadcast_to(ad.reshape(w["patch.pos"], (1, cfg.n_patches, cfg.d_model)), tok.shape)
    tok = ad.add(ad.add(tok, bias), pos)

    vis = ad.broadcast_to(
        ad.reshape(theta_vis, (1, cfg.n_vp, cfg.d_model)), (b, cfg.n_vp, cfg.d_model)
    )
    x = ad.concat([vis, tok], axis=1)
    for i in range(cfg.n_blocks):
        x = _attention(x, w, i, cfg.d_model)
    pooled = ad.mean(x, axis=1)
    feat = ad.matmul(pooled, w["proj"])
    return _rows_normalized(feat)


def class_matrix(theta_txt: Tensor, cfg: ModelConfig, w: dict[str, Tensor]) -> Tensor:
    """L2-normalized class feature matrix (N_c, d) from the shared context."""
    ctx = ad.mean(theta_txt, axis=0)
    ctxm = ad.broadcast_to(ad.reshape(ctx, (1, cfg.d_model)), (cfg.n_classes, cfg.d_model))
    z = ad.concat([ctxm, w["class_embed"]], axis=1)
    h1 = ad.add(
        ad.matmul(z, w["fusion.w1"]),
        ad.broadcast_to(ad.reshape(w["fusion.b1"], (1, cfg.fusion_hidden)), (cfg.n_classes, cfg.fusion_hidden)),
    )
    h = ad.tanh(h1)
    out = ad.add(
        ad.matmul(h, w["fusion.w2"]),
        ad.broadcast_to(ad.reshape(w["fusion.b2"], (1, cfg.d_model)), (cfg.n_classes, cfg.d_model)),
    )
    return _rows_normalized(out)


def probs_from_features(feats: Tensor, class_feats: Tensor, tau: float) -> Tensor:
    logits = ad.scale(ad.matmul(feats, ad.transpose(class_feats, (1, 0))), 1.0 / tau)
    return ad.softmax(logits)


def encode_image(image, theta_vis, frozen: FrozenModel) -> Tensor:
    """Single-image convenience wrapper returning a (d,) feature Tensor."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    batch = ad.reshape(img, (1,) + img.shape)
    feats = encode_batch(batch, _maybe_tensor(theta_vis), frozen.cfg, frozen.tensors())
    return ad.reshape(feats, (feats.shape[1],))


def class_features(theta_txt, frozen: FrozenModel) -> Tensor:
    return class_matrix(_maybe_tensor(theta_txt), frozen.cfg, frozen.tensors())


def predict_batch(images, prompts: PromptState, frozen: FrozenModel) -> np.ndarray:
    """Class probabilities for a (B, C, S, S) array, no recording."""
    imgs = images if isinstance(images, Tensor) else Tensor(images)
    feats = encode_batch(imgs, Tensor(prompts.theta_vis), frozen.cfg, frozen.tensors())
    cf = class_features(Tensor(prompts.theta_txt), frozen)
    return probs_from_features(feats, cf, frozen.cfg.tau).data


def predict(image, prompts: PromptState, frozen: FrozenModel) -> np.ndarray:
    """Class probabilities for one C x S x S image."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    return predict_batch(arr[None], prompts, frozen)[0]


def _maybe_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class PretrainDivergence(RuntimeError):
    def __init__(self, step: int) -> None:
        self.step = step
        super().__init__(f"pretraining diverged at step {step}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.15

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_source(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    train_cfg: PretrainConfig | None = None,
    seed: int = 0,
) -> tuple[FrozenModel, PromptState, dict]:
    """Train all parameters on the labeled source split, then freeze encoders.

    Cross-entropy on the cosine-similarity probabilities, AdamW with
    decoupled weight decay, stratified holdout for the recorded source
    accuracy. Deterministic given (data, configs, seed); a non-finite loss
    aborts with the offending step index.
    """
    train_cfg = train_cfg or PretrainConfig()
    images = np.ascontiguousarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))

    holdout_parts: list[np.ndarray] = []
    train_parts: list[np.ndarray] = []
    for c in range(cfg.n_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(idx.size * train_cfg.holdout_fraction))
        holdout_parts.append(idx[:k])
        train_parts.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_parts))
    holdout_idx = np.sort(np.concatenate(holdout_parts))

    weights = init_weights(cfg, rng)
    prompts = PromptState.init(cfg, rng)
    keys = weight_keys(cfg)
    params = [weights[k] for k in keys] + [prompts.theta_txt, prompts.theta_vis]
    opt = AdamW(params, lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)

    x_train = images[train_idx]
    onehot_all = np.eye(cfg.n_classes)[labels[train_idx]]
    n_train = len(train_idx)

    step = 0
    initial_loss = None
    final_loss = None
    for _ in range(train_cfg.epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            leaves = [Tensor(p, requires_grad=True) for p in params]
            w_t = {k: leaves[i] for i, k in enumerate(keys)}
            txt_t, vis_t = leaves[-2], leaves[-1]
            try:
                with ad.Tape() as tape:
                    feats = encode_batch(Tensor(x_train[batch]), vis_t, cfg, w_t)
                    cf = class_matrix(txt_t, cfg, w_t)
                    probs = probs_from_features(feats, cf, cfg.tau)
                    picked = ad.multiply(Tensor(onehot_all[batch]), ad.log(probs))
                    loss = ad.scale(ad.sum_(picked), -1.0 / len(batch))
                ad.backward(tape, loss)
            except ad.DiffError as err:
                raise PretrainDivergence(step) from err
            value = loss.item()
            if not np.isfinite(value):
                raise PretrainDivergence(step)
            if initial_loss is None:
                initial_loss = value
            final_loss = value
            opt.step([leaf.grad for leaf in leaves])
            step += 1

    frozen = FrozenModel(cfg, weights)
    acc = None
    if len(holdout_idx):
        probs = predict_batch(images[holdout_idx], prompts, frozen)
        acc = float((probs.argmax(axis=1) == labels[holdout_idx]).mean())
    metadata = {
        "seed": seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "pretrain": train_cfg.to_dict(),
        "steps": step,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "holdout_accuracy": acc,
        "n_train": int(n_train),
        "n_holdout": int(len(holdout_idx)),
    }
    return frozen, prompts, metadata
