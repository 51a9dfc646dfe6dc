"""The eight semi-supervised objectives.

Every method consumes a labeled batch (images in [0,1] plus integer labels)
and an unlabeled batch, and returns a :class:`LossBreakdown` whose
``total_tensor`` is differentiable w.r.t. the student parameters.

Each loss is split into two phases:

* ``prepare``: everything the gradient must NOT flow through (augmented
  views, pseudo-labels, confidence masks, teacher predictions, adversarial
  perturbations, mixed examples). Pure numpy, computed under ``no_grad``.
* ``finish``: the differentiable graph built from those frozen artifacts.

The public ``*_loss`` functions run both phases. Tests exercise the phases
separately: finite differences over ``finish`` with artifacts held fixed is
exactly the derivative the training step uses.

Setting ``lambda_u == 0`` short-circuits every method to the plain
supervised path (same labeled-branch augmentation seeds), so a zero-weight
run is bit-identical to supervised-only training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ValidationError
from .augment import IDENTITY, STRONG, WEAK, AugmentPolicy, derive_seeds
from .data import PixelStats
from .model import ModelParams, forward

METHODS = (
    "supervised-only",
    "pi-model",
    "mean-teacher",
    "vat",
    "uda",
    "pseudo-label",
    "mixmatch",
    "remixmatch",
    "fixmatch",
)

DIVERGENCES = ("mse-probs", "kl")

# methods whose unlabeled weight ramps linearly from 0 over the first
# 1/16 of training; the rest use the full weight from step 0
RAMP_METHODS = frozenset({"pi-model", "mean-teacher", "mixmatch"})
RAMP_FRACTION = 1.0 / 16.0

_RAW_STATS = PixelStats(0.0, 1.0)

# branch tags for deterministic per-step seed derivation; labeled must stay
# method-independent so lambda_u == 0 reduces bitwise to supervised-only
_LABELED, _U1, _U2, _USTRONG, _UPERT, _POOL_PERM, _MIX_ALPHA = range(7)


@dataclass(frozen=True)
class AugmentPolicies:
    weak: AugmentPolicy = WEAK
    strong: AugmentPolicy = STRONG

    def to_dict(self):
        return {"weak": self.weak.to_dict(), "strong": self.strong.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(AugmentPolicy.from_dict(d["weak"]), AugmentPolicy.from_dict(d["strong"]))


DEFAULT_POLICIES = AugmentPolicies()
IDENTITY_POLICIES = AugmentPolicies(weak=IDENTITY, strong=IDENTITY)


@dataclass(frozen=True)
class MethodConfig:
    method: str = "fixmatch"
    lambda_u: float = 1.0
    ema_m: float | None = None  # None -> trainer default (0.999)
    temperature: float = 0.5
    p_cutoff: float = 0.95
    k: int = 2  # MixMatch augment count
    n_strong: int = 2  # ReMixMatch anchors
    vat_epsilon: float = 6.0
    vat_xi: float = 1e-6
    mixup_alpha: float = 0.75  # Beta concentration for MixMatch
    divergence: str = "kl"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lambda_u < 0:
            raise ValidationError("lambda_u must be >= 0")
        if self.ema_m is not None and not 0.0 <= self.ema_m <= 1.0:
            raise ValidationError("ema_m must be in [0, 1]")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if not 0.0 <= self.p_cutoff <= 1.0:
            raise ValidationError("p_cutoff must be in [0, 1]")
        if self.k < 1 or self.n_strong < 1:
            raise ValidationError("k and n_strong must be >= 1")
        if self.vat_epsilon < 0 or self.vat_xi <= 0:
            raise ValidationError("vat_epsilon must be >= 0 and vat_xi > 0")
        if self.mixup_alpha <= 0:
            raise ValidationError("mixup_alpha must be > 0")
        if self.divergence not in DIVERGENCES:
            raise ValidationError(f"divergence must be one of {DIVERGENCES}")

    def to_dict(self):
        return {
            "method": self.method,
            "lambda_u": self.lambda_u,
            "ema_m": self.ema_m,
            "temperature": self.temperature,
            "p_cutoff": self.p_cutoff,
            "k": self.k,
            "n_strong": self.n_strong,
            "vat_epsilon": self.vat_epsilon,
            "vat_xi": self.vat_xi,
            "mixup_alpha": self.mixup_alpha,
            "divergence": self.divergence,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# per-method defaults where this differs from the dataclass defaults;
# divergences follow each method's original formulation
_METHOD_DEFAULTS = {
    "supervised-only": {"lambda_u": 0.0},
    "pi-model": {"lambda_u": 10.0, "divergence": "mse-probs"},
    "mean-teacher": {"lambda_u": 10.0, "divergence": "mse-probs"},
    "vat": {"lambda_u": 1.0, "divergence": "kl"},
    "uda": {"lambda_u": 1.0, "divergence": "kl"},
    "pseudo-label": {"lambda_u": 1.0},
    "mixmatch": {"lambda_u": 100.0},
    "remixmatch": {"lambda_u": 1.0},
    "fixmatch": {"lambda_u": 1.0},
}


def default_config(method: str, **overrides) -> MethodConfig:
    """MethodConfig with this method's defaults, then explicit overrides."""
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    kwargs = dict(_METHOD_DEFAULTS.get(method, {}))
    kwargs.update(overrides)
    return MethodConfig(method=method, **kwargs)


def ramp_scale(method: str, k: int, total: int) -> float:
    """Linear unlabeled-weight ramp for the methods that need one."""
    if method not in RAMP_METHODS:
        return 1.0
    ramp_steps = max(1, int(total * RAMP_FRACTION))
    return min(1.0, k / ramp_steps)


@dataclass
class LossBreakdown:
    supervised: float
    unsupervised: float
    total: float
    mask_rate: float
    lambda_u: float
    total_tensor: Tensor
    unlabeled_pred_mean: np.ndarray | None = None


# ---------------------------------------------------------------------------
# small numpy ops shared by the methods


def sharpen(p, temperature: float):
    """p_c^(1/T) / sum_j p_j^(1/T), row-wise; argmax is preserved."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    p = np.asarray(p)
    if temperature == 1.0:
        return p.copy()
    powered = np.power(np.maximum(p, 0.0), 1.0 / temperature)
    return powered / powered.sum(axis=-1, keepdims=True)


def confidence_mask(probs, cutoff: float) -> np.ndarray:
    """mask[b] is True iff max_c probs[b, c] >= cutoff."""
    return np.asarray(probs).max(axis=-1) >= cutoff


def average_and_sharpen(predictions, temperature: float):
    """Mean of a stack of prediction rows, then sharpen. The MixMatch
    pseudo-label rule for one image's k augmented views."""
    stack = np.stack([np.asarray(p) for p in predictions])
    return sharpen(stack.mean(axis=0), temperature)


@dataclass
class RunningClassDistribution:
    """EMA of model predictions on unlabeled data plus the labeled prior."""

    running_avg: np.ndarray
    prior: np.ndarray
    decay: float = 0.999

    @classmethod
    def uniform(cls, num_classes: int, decay: float = 0.999) -> "RunningClassDistribution":
        u = np.full(num_classes, 1.0 / num_classes, dtype=np.float64)
        return cls(u.copy(), u.copy(), decay)

    @classmethod
    def from_labels(cls, labels, num_classes: int, decay: float = 0.999) -> "RunningClassDistribution":
        counts = np.bincount(np.asarray(labels), minlength=num_classes).astype(np.float64)
        prior = counts / counts.sum()
        return cls(np.full(num_classes, 1.0 / num_classes, dtype=np.float64), prior, decay)

    def update(self, batch_mean) -> None:
        mean = np.asarray(batch_mean, dtype=np.float64)
        self.running_avg = self.decay * self.running_avg + (1.0 - self.decay) * mean
        self.running_avg = self.running_avg / self.running_avg.sum()


def distribution_align(q, running: RunningClassDistribution):
    """Rescale prediction rows by prior / running average and renormalize."""
    q = np.asarray(q)
    ratio = running.prior / np.maximum(running.running_avg, 1e-6)
    scaled = q * ratio
    return (scaled / scaled.sum(axis=-1, keepdims=True)).astype(q.dtype)


def _onehot(labels, num_classes, dtype=np.float32):
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), np.asarray(labels)] = 1.0
    return out


def _branch_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


def _augment_batch(images, policy: AugmentPolicy, seed: int, tag: int):
    seeds = derive_seeds(_branch_seed(seed, tag), len(images))
    return np.stack([policy.apply(img, s) for img, s in zip(images, seeds)])


def _divergence(kind: str, target: Tensor, pred: Tensor, row_weights=None) -> Tensor:
    if kind == "kl":
        return ad.kl_divergence(target, pred, row_weights=row_weights)
    return ad.l2_prob_distance(target, pred, row_weights=row_weights)


def _model_dtype(params: ModelParams):
    return next(iter(params.tensors.values())).dtype


# ---------------------------------------------------------------------------
# supervised branch (shared by every method)


def _prepare_supervised(labeled, cfg, seed, stats, policies, num_classes):
    x, y = labeled
    if len(x) == 0:
        raise ValidationError("labeled batch is empty")
    xa = _augment_batch(x, policies.weak, seed, _LABELED)
    return {"labeled_x": stats.standardize(xa), "labeled_y": _onehot(y, num_classes)}


def _supervised_term(params, art):
    logits = forward(params, Tensor(art["labeled_x"].astype(_model_dtype(params))))
    return ad.cross_entropy(logits, art["labeled_y"])


def _finish_supervised(params, art, cfg):
    sup = _supervised_term(params, art)
    return _breakdown(sup, None, cfg, mask_rate=0.0)


def _breakdown(sup_t, unsup_t, cfg, mask_rate, pred_mean=None) -> LossBreakdown:
    lam = float(cfg.lambda_u)
    sup = float(sup_t.data)
    if unsup_t is None:
        return LossBreakdown(sup, 0.0, sup, mask_rate, lam, sup_t, pred_mean)
    unsup = float(unsup_t.data)
    total_t = ad.add(sup_t, ad.mul(unsup_t, lam))
    return LossBreakdown(sup, unsup, sup + lam * unsup, mask_rate, lam, total_t, pred_mean)


def supervised_loss(params, labeled, cfg, *, seed, stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    num_classes = params.config.num_classes
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, num_classes)
    return _finish_supervised(params, art, cfg)


# ---------------------------------------------------------------------------
# pi-model


def _prepare_pi_model(params, labeled, unlabeled, cfg, seed, stats, policies):
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, params.config.num_classes)
    art["u1"] = stats.standardize(_augment_batch(unlabeled, policies.weak, seed, _U1))
    art["u2"] = stats.standardize(_augment_batch(unlabeled, policies.weak, seed, _U2))
    return art


def _finish_pi_model(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    p1 = ad.softmax(forward(params, Tensor(art["u1"].astype(dt))))
    p2 = ad.softmax(forward(params, Tensor(art["u2"].astype(dt))))
    unsup = _divergence(cfg.divergence, p1, p2)
    return _breakdown(sup, unsup, cfg, mask_rate=1.0)


def pi_model_loss(params, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_pi_model(params, labeled, unlabeled, cfg, seed, stats, policies)
    return _finish_pi_model(params, art, cfg)


# ---------------------------------------------------------------------------
# mean teacher


def _prepare_mean_teacher(params, ema, labeled, unlabeled, cfg, seed, stats, policies):
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, params.config.num_classes)
    art["u_student"] = stats.standardize(_augment_batch(unlabeled, policies.weak, seed, _U1))
    u_teacher = stats.standardize(_augment_batch(unlabeled, policies.weak, seed, _U2))
    with ad.no_grad():
        art["teacher_probs"] = ad.softmax(forward(ema.as_model_params(), u_teacher)).data.copy()
    return art


def _finish_mean_teacher(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    p_student = ad.softmax(forward(params, Tensor(art["u_student"].astype(dt))))
    target = Tensor(art["teacher_probs"].astype(dt))
    unsup = _divergence(cfg.divergence, target, p_student)
    return _breakdown(sup, unsup, cfg, mask_rate=1.0)


def mean_teacher_loss(params, ema, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_mean_teacher(params, ema, labeled, unlabeled, cfg, seed, stats, policies)
    return _finish_mean_teacher(params, art, cfg)


# ---------------------------------------------------------------------------
# VAT


def _l2_normalize_per_example(d):
    flat = d.reshape(len(d), -1)
    norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return (flat / safe).reshape(d.shape), norms.ravel()


def vat_perturbation(params, x, epsilon: float, xi: float, rng_seed: int, clean_probs=None):
    """One power-iteration step toward the locally most KL-sensitive
    direction; the returned perturbation has L2 norm epsilon per example.

    ``x`` is the standardized model input. When the KL gradient vanishes
    for an example, its initial random unit direction is used instead.
    """
    dtype = _model_dtype(params)
    x = np.asarray(x, dtype=dtype)
    if epsilon == 0:
        return np.zeros_like(x)
    rng = np.random.default_rng(rng_seed)
    d0, _ = _l2_normalize_per_example(rng.standard_normal(x.shape).astype(dtype))

    if clean_probs is None:
        with ad.no_grad():
            clean_probs = ad.softmax(forward(params, x)).data
    with params.frozen():
        xt = Tensor((x + xi * d0).astype(dtype), requires_grad=True)
        p_pert = ad.softmax(forward(params, xt))
        kl = ad.kl_divergence(Tensor(clean_probs.astype(dtype)), p_pert)
        ad.backward(kl)
        grad = xt.grad

    direction, norms = _l2_normalize_per_example(grad.astype(dtype))
    degenerate = norms <= 0
    if degenerate.any():
        direction[degenerate] = d0[degenerate]
    return (epsilon * direction).astype(dtype)


def _prepare_vat(params, labeled, unlabeled, cfg, seed, stats, policies):
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, params.config.num_classes)
    x_std = stats.standardize(np.asarray(unlabeled))
    with ad.no_grad():
        clean = ad.softmax(forward(params, x_std)).data.copy()
    r_adv = vat_perturbation(
        params, x_std, cfg.vat_epsilon, cfg.vat_xi, _branch_seed(seed, _UPERT), clean_probs=clean
    )
    art["u_clean_probs"] = clean
    art["u_perturbed"] = (x_std + r_adv).astype(x_std.dtype)
    return art


def _finish_vat(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    q = ad.softmax(forward(params, Tensor(art["u_perturbed"].astype(dt))))
    unsup = _divergence(cfg.divergence, Tensor(art["u_clean_probs"].astype(dt)), q)
    return _breakdown(sup, unsup, cfg, mask_rate=1.0)


def vat_loss(params, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_vat(params, labeled, unlabeled, cfg, seed, stats, policies)
    return _finish_vat(params, art, cfg)


# ---------------------------------------------------------------------------
# UDA


def _prepare_uda(params, labeled, unlabeled, cfg, seed, stats, policies):
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, params.config.num_classes)
    x_clean = stats.standardize(np.asarray(unlabeled))
    with ad.no_grad():
        p_clean = ad.softmax(forward(params, x_clean)).data
    target = sharpen(p_clean, cfg.temperature)
    art["u_target"] = target
    art["u_mask"] = confidence_mask(target, cfg.p_cutoff).astype(np.float32)
    art["u_strong"] = stats.standardize(_augment_batch(unlabeled, policies.strong, seed, _USTRONG))
    return art


def _finish_uda(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    q = ad.softmax(forward(params, Tensor(art["u_strong"].astype(dt))))
    unsup = _divergence(cfg.divergence, Tensor(art["u_target"].astype(dt)), q, row_weights=art["u_mask"])
    return _breakdown(sup, unsup, cfg, mask_rate=float(art["u_mask"].mean()))


def uda_loss(params, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_uda(params, labeled, unlabeled, cfg, seed, stats, policies)
    return _finish_uda(params, art, cfg)


# ---------------------------------------------------------------------------
# pseudo-label


def _prepare_pseudo_label(params, labeled, unlabeled, cfg, seed, stats, policies):
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, params.config.num_classes)
    x_clean = stats.standardize(np.asarray(unlabeled))
    with ad.no_grad():
        probs = ad.softmax(forward(params, x_clean)).data
    art["u_clean"] = x_clean
    art["u_pseudo"] = _onehot(probs.argmax(axis=1), params.config.num_classes)
    art["u_mask"] = confidence_mask(probs, cfg.p_cutoff).astype(np.float32)
    return art


def _finish_pseudo_label(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    logits = forward(params, Tensor(art["u_clean"].astype(dt)))
    unsup = ad.cross_entropy(logits, art["u_pseudo"], row_weights=art["u_mask"])
    return _breakdown(sup, unsup, cfg, mask_rate=float(art["u_mask"].mean()))


def pseudo_label_loss(params, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_pseudo_label(params, labeled, unlabeled, cfg, seed, stats, policies)
    return _finish_pseudo_label(params, art, cfg)


# ---------------------------------------------------------------------------
# MixMatch


def mixmatch_guess(params, unlabeled_img, k: int, temperature: float, seed: int, *,
                   stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    """Sharpened mean prediction over k weak augmentations of one image."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    from .augment import k_augment

    views = np.stack(k_augment(np.asarray(unlabeled_img), k, seed))
    with ad.no_grad():
        probs = ad.softmax(forward(params, stats.standardize(views))).data
    return average_and_sharpen(probs, temperature)


def _prepare_mixmatch(params, labeled, unlabeled, cfg, seed, stats, policies, alpha_override=None):
    num_classes = params.config.num_classes
    x_l, y_l = labeled
    if len(x_l) == 0:
        raise ValidationError("labeled batch is empty")
    xa_l = _augment_batch(x_l, policies.weak, seed, _LABELED)
    y_onehot = _onehot(y_l, num_classes)

    unlabeled = np.asarray(unlabeled)
    n_u = len(unlabeled)
    view_seeds = derive_seeds(_branch_seed(seed, _U1), cfg.k * n_u)
    views = np.stack(
        [
            policies.weak.apply(unlabeled[j], view_seeds[i * n_u + j])
            for i in range(cfg.k)
            for j in range(n_u)
        ]
    )
    with ad.no_grad():
        probs = ad.softmax(forward(params, stats.standardize(views))).data
    guesses = sharpen(probs.reshape(cfg.k, n_u, num_classes).mean(axis=0), cfg.temperature)
    guesses = guesses.astype(np.float32)

    pool_x = np.concatenate([xa_l, views])
    pool_y = np.concatenate([y_onehot, np.tile(guesses, (cfg.k, 1))])
    perm = np.random.default_rng(_branch_seed(seed, _POOL_PERM)).permutation(len(pool_x))
    from .augment import mixup

    alpha_seeds = derive_seeds(_branch_seed(seed, _MIX_ALPHA), len(pool_x))
    mixed_x, mixed_y = [], []
    for i in range(len(pool_x)):
        mx, my = mixup(
            pool_x[i], pool_y[i], pool_x[perm[i]], pool_y[perm[i]],
            cfg.mixup_alpha, alpha_seeds[i], alpha=alpha_override,
        )
        mixed_x.append(mx)
        mixed_y.append(my)
    mixed_x = np.stack(mixed_x)
    mixed_y = np.stack(mixed_y)
    n_l = len(xa_l)
    return {
        "labeled_x": stats.standardize(mixed_x[:n_l]),
        "labeled_y": mixed_y[:n_l],
        "u_mixed_x": stats.standardize(mixed_x[n_l:]),
        "u_mixed_y": mixed_y[n_l:],
    }


def _finish_mixmatch(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    q = ad.softmax(forward(params, Tensor(art["u_mixed_x"].astype(dt))))
    unsup = ad.l2_prob_distance(Tensor(art["u_mixed_y"].astype(dt)), q)
    return _breakdown(sup, unsup, cfg, mask_rate=1.0)


def mixmatch_loss(params, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS,
                  policies=DEFAULT_POLICIES, alpha_override=None):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_mixmatch(params, labeled, unlabeled, cfg, seed, stats, policies, alpha_override)
    return _finish_mixmatch(params, art, cfg)


# ---------------------------------------------------------------------------
# ReMixMatch


def _prepare_remixmatch(params, labeled, unlabeled, cfg, seed, stats, policies, running):
    num_classes = params.config.num_classes
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, num_classes)
    unlabeled = np.asarray(unlabeled)
    n_u = len(unlabeled)
    if running is None:
        running = RunningClassDistribution.uniform(num_classes)

    weak = _augment_batch(unlabeled, policies.weak, seed, _U1)
    with ad.no_grad():
        p_weak = ad.softmax(forward(params, stats.standardize(weak))).data
    anchors = sharpen(distribution_align(p_weak, running), cfg.temperature).astype(np.float32)

    strong_seeds = derive_seeds(_branch_seed(seed, _USTRONG), cfg.n_strong * n_u)
    strong = np.stack(
        [
            policies.strong.apply(unlabeled[j], strong_seeds[i * n_u + j])
            for i in range(cfg.n_strong)
            for j in range(n_u)
        ]
    )
    art["u_strong"] = stats.standardize(strong)
    art["u_anchors"] = np.tile(anchors, (cfg.n_strong, 1))
    art["u_pred_mean"] = p_weak.mean(axis=0)
    return art


def _finish_remixmatch(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    logits = forward(params, Tensor(art["u_strong"].astype(dt)))
    unsup = ad.cross_entropy(logits, art["u_anchors"])
    return _breakdown(sup, unsup, cfg, mask_rate=1.0, pred_mean=art["u_pred_mean"])


def remixmatch_loss(params, labeled, unlabeled, cfg, *, seed, running=None,
                    stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_remixmatch(params, labeled, unlabeled, cfg, seed, stats, policies, running)
    return _finish_remixmatch(params, art, cfg)


# ---------------------------------------------------------------------------
# FixMatch


def _prepare_fixmatch(params, labeled, unlabeled, cfg, seed, stats, policies):
    art = _prepare_supervised(labeled, cfg, seed, stats, policies, params.config.num_classes)
    weak = _augment_batch(unlabeled, policies.weak, seed, _U1)
    with ad.no_grad():
        p_weak = ad.softmax(forward(params, stats.standardize(weak))).data
    art["u_pseudo"] = _onehot(p_weak.argmax(axis=1), params.config.num_classes)
    art["u_mask"] = confidence_mask(p_weak, cfg.p_cutoff).astype(np.float32)
    art["u_strong"] = stats.standardize(_augment_batch(unlabeled, policies.strong, seed, _USTRONG))
    return art


def _finish_fixmatch(params, art, cfg):
    sup = _supervised_term(params, art)
    dt = _model_dtype(params)
    logits = forward(params, Tensor(art["u_strong"].astype(dt)))
    unsup = ad.cross_entropy(logits, art["u_pseudo"], row_weights=art["u_mask"])
    return _breakdown(sup, unsup, cfg, mask_rate=float(art["u_mask"].mean()))


def fixmatch_loss(params, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS, policies=DEFAULT_POLICIES):
    if cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, seed=seed, stats=stats, policies=policies)
    art = _prepare_fixmatch(params, labeled, unlabeled, cfg, seed, stats, policies)
    return _finish_fixmatch(params, art, cfg)


# ---------------------------------------------------------------------------
# dispatch


def compute_method_loss(params, ema, labeled, unlabeled, cfg, *, seed, stats=_RAW_STATS,
                        policies=DEFAULT_POLICIES, running=None) -> LossBreakdown:
    """Route one training step's batches to the configured method."""
    kw = dict(seed=seed, stats=stats, policies=policies)
    if cfg.method == "supervised-only" or cfg.lambda_u == 0:
        return supervised_loss(params, labeled, cfg, **kw)
    if cfg.method == "pi-model":
        return pi_model_loss(params, labeled, unlabeled, cfg, **kw)
    if cfg.method == "mean-teacher":
        return mean_teacher_loss(params, ema, labeled, unlabeled, cfg, **kw)
    if cfg.method == "vat":
        return vat_loss(params, labeled, unlabeled, cfg, **kw)
    if cfg.method == "uda":
        return uda_loss(params, labeled, unlabeled, cfg, **kw)
    if cfg.method == "pseudo-label":
        return pseudo_label_loss(params, labeled, unlabeled, cfg, **kw)
    if cfg.method == "mixmatch":
        return mixmatch_loss(params, labeled, unlabeled, cfg, **kw)
    if cfg.method == "remixmatch":
        return remixmatch_loss(params, labeled, unlabeled, cfg, running=running, **kw)
    if cfg.method == "fixmatch":
        return fixmatch_loss(params, labeled, unlabeled, cfg, **kw)
    raise ValidationError(f"unknown method {cfg.method!r}")


# prepare/finish registries used by the gradient-check suite
PREPARERS = {
    "supervised-only": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_supervised(
        lab, cfg, seed, stats, policies, params.config.num_classes
    ),
    "pi-model": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_pi_model(
        params, lab, unl, cfg, seed, stats, policies
    ),
    "mean-teacher": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_mean_teacher(
        params, ema, lab, unl, cfg, seed, stats, policies
    ),
    "vat": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_vat(
        params, lab, unl, cfg, seed, stats, policies
    ),
    "uda": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_uda(
        params, lab, unl, cfg, seed, stats, policies
    ),
    "pseudo-label": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_pseudo_label(
        params, lab, unl, cfg, seed, stats, policies
    ),
    "mixmatch": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_mixmatch(
        params, lab, unl, cfg, seed, stats, policies
    ),
    "remixmatch": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_remixmatch(
        params, lab, unl, cfg, seed, stats, policies, running
    ),
    "fixmatch": lambda params, ema, lab, unl, cfg, seed, stats, policies, running: _prepare_fixmatch(
        params, lab, unl, cfg, seed, stats, policies
    ),
}

FINISHERS = {
    "supervised-only": _finish_supervised,
    "pi-model": _finish_pi_model,
    "mean-teacher": _finish_mean_teacher,
    "vat": _finish_vat,
    "uda": _finish_uda,
    "pseudo-label": _finish_pseudo_label,
    "mixmatch": _finish_mixmatch,
    "remixmatch": _finish_remixmatch,
    "fixmatch": _finish_fixmatch,
}
