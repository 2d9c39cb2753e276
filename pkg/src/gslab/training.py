"""Losses, optimizer, EMA, the alternating update loop and the intervention protocol."""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MixtureSpec, make_mixture, sample_real
from .latent import Stream, make_rng, sample as sample_latent
from .network import Discriminator, Generator
from .spectral import (SpectralState, clamp_top_singular, ortho_penalty,
                       sigma_regularization_loss, top_k_singular)


class InterventionError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_g: float = 5e-5
    lr_d: float = 2e-4
    d_steps_per_g: int = 2
    batch: int = 256
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    ema_start: int = 0
    loss_kind: str = "hinge"
    hinge_margin: float = 1.0
    r1_gamma: float = 0.0
    ortho_beta: float = 1e-4
    ortho_variant: str = "offdiag"
    sigma_reg_mode: str = "none"  # none | fixed | ratio
    sigma_reg_target: float = 1.0
    sigma_reg_strength: float = 0.0
    clamp_mode: str = "none"  # none | fixed | ratio
    clamp_target: float = 1.0
    total_steps: int = 1000
    seed: int = 0
    train_set_size: int = 0  # 0: fresh samples every step

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.loss_kind not in ("hinge", "vanilla"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.hinge_margin <= 0:
            raise ValueError("hinge_margin must be positive")
        if self.r1_gamma < 0:
            raise ValueError("r1_gamma must be >= 0")
        if self.sigma_reg_mode not in ("none", "fixed", "ratio"):
            raise ValueError(f"unknown sigma_reg_mode {self.sigma_reg_mode!r}")
        if self.clamp_mode not in ("none", "fixed", "ratio"):
            raise ValueError(f"unknown clamp_mode {self.clamp_mode!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def vanilla_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple:
    """Logistic GAN losses in logit space.

    ``loss_d = -E log s(real) - E log(1 - s(fake))`` and the non-saturating
    ``loss_g = -E log s(fake)``; with ``-log s(x) = softplus(-x)``.
    Returns ``(loss_d_real, loss_d_fake, loss_g)``.
    """
    loss_real = ad.softplus(-real_logits).mean()
    loss_fake = ad.softplus(fake_logits).mean()
    loss_g = ad.softplus(-fake_logits).mean()
    return loss_real, loss_fake, loss_g


def hinge_losses(real_scores: Tensor, fake_scores: Tensor, margin: float = 1.0) -> tuple:
    """``E max(0, m - real)``, ``E max(0, m + fake)`` and ``loss_g = -E fake``."""
    if margin <= 0:
        raise ValueError("hinge margin must be positive")
    loss_real = ad.relu(margin - real_scores).mean()
    loss_fake = ad.relu(fake_scores + margin).mean()
    loss_g = -fake_scores.mean()
    return loss_real, loss_fake, loss_g


def r1_penalty(D, real_x, y, gamma: float) -> Tensor:
    """``gamma / 2 * mean_i ||d D(x_i) / d x_i||^2`` over a real batch.

    ``D`` is called as ``D(x, y)`` and must return one score per row.  The
    input gradient is built with ``create_graph=True`` so the penalty
    back-propagates into D's parameters.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = Tensor(real_x.data if isinstance(real_x, Tensor) else np.asarray(real_x, dtype=np.float64),
               requires_grad=True)
    scores = D(x, y)
    total = scores.sum()
    n = x.shape[0]
    if total.node is None:
        return Tensor(0.0)
    (gx,) = ad.grad(total, [x], create_graph=True)
    if gx.node is None and not gx.requires_grad:
        # gradient does not depend on parameters: penalty is a constant
        return Tensor(0.5 * gamma * float((gx.data ** 2).sum()) / n)
    return ad.square(gx).sum() * (0.5 * gamma / n)


# ---------------------------------------------------------------------------
# optimizer and EMA
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)

    def reset_moments(self) -> None:
        for k in self.m:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.0, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One bias-corrected Adam update in place.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ad.DimensionError(f"gradient for {k} has shape {g.shape}, param {params[k].shape}")
        if not np.all(np.isfinite(g)):
            return False
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


@dataclass
class EMAState:
    shadow: Dict[str, np.ndarray]
    decay: float = 0.9999
    start: int = 0

    @classmethod
    def from_params(cls, params: Dict[str, Tensor], decay: float, start: int = 0) -> "EMAState":
        return cls({k: p.data.copy() for k, p in params.items()}, decay, start)


def ema_update(ema: EMAState, params: Dict[str, Tensor], step: Optional[int] = None) -> None:
    """``ema <- decay * ema + (1 - decay) * params``; a plain copy before ``ema.start``."""
    if set(ema.shadow) != set(params):
        raise ValueError("EMA shadow does not mirror the parameter set")
    copy_only = step is not None and step < ema.start
    d = ema.decay
    for k, p in params.items():
        s = ema.shadow[k]
        if s.shape != p.data.shape:
            raise ad.DimensionError(f"EMA shape mismatch for {k}: {s.shape} vs {p.data.shape}")
        if copy_only:
            s[...] = p.data
        else:
            s *= d
            s += (1.0 - d) * p.data


# ---------------------------------------------------------------------------
# training state and loop
# ---------------------------------------------------------------------------

@dataclass
class StepReport:
    step: int
    d_loss_real: float
    d_loss_fake: float
    g_loss: float
    grad_norm_variance: float
    skipped: bool = False
    d_updates: int = 0
    g_updates: int = 0


@dataclass
class InterventionSpec:
    scale_lr_g: float = 1.0
    scale_lr_d: float = 1.0
    freeze: str = "none"  # none | g | d
    reset_momentum: bool = False
    set_d_steps: Optional[int] = None
    set_hinge_margin: Optional[float] = None

    def __post_init__(self):
        if self.scale_lr_g <= 0 or self.scale_lr_d <= 0:
            raise InterventionError("learning-rate scales must be positive")
        if self.freeze not in ("none", "g", "d"):
            raise InterventionError(f"freeze must be none, g or d (not {self.freeze!r}); "
                                    "freezing both networks would leave nothing to train")
        if self.set_d_steps is not None and self.set_d_steps < 1:
            raise InterventionError("set_d_steps must be >= 1")
        if self.set_hinge_margin is not None and self.set_hinge_margin <= 0:
            raise InterventionError("set_hinge_margin must be positive")


class TrainState:
    """Everything a run needs to continue bit-identically."""

    def __init__(self, run_config, mixture: Optional[MixtureSpec] = None):
        self.config = run_config
        cfg: TrainConfig = run_config.train
        init_rng = make_rng(cfg.seed, Stream.INIT)
        self.G = Generator(run_config.generator, init_rng)
        self.D = Discriminator(run_config.discriminator, init_rng)
        self.mixture = mixture if mixture is not None else make_mixture(run_config.data)
        self.opt_g = AdamState.zeros_like(self.G.params)
        self.opt_d = AdamState.zeros_like(self.D.params)
        self.ema = EMAState.from_params(self.G.params, cfg.ema_decay, cfg.ema_start)
        self.rngs = {s.name: make_rng(cfg.seed, s) for s in
                     (Stream.DATA, Stream.LATENT, Stream.CLASS, Stream.DROPOUT)}
        self.cond_states: Dict[str, SpectralState] = {}
        if cfg.sigma_reg_mode != "none" or cfg.clamp_mode != "none":
            k = 2 if "ratio" in (cfg.sigma_reg_mode, cfg.clamp_mode) else 1
            spec_rng = make_rng(cfg.seed, Stream.SPECTRAL)
            for name in self.G.weight_names():
                W = self.G.params[name].data
                if min(W.shape) >= k:
                    st = SpectralState.create(W.shape, k, spec_rng)
                    top_k_singular(W, st, n_iters=50)
                    self.cond_states[name] = st
        self.train_set = None
        if cfg.train_set_size > 0:
            self.train_set = sample_real(self.mixture, cfg.train_set_size, self.rngs["DATA"])
        self.step = 0
        self.d_updates = 0
        self.g_updates = 0
        self.freeze = "none"
        self.lr_g = cfg.lr_g
        self.lr_d = cfg.lr_d
        self.d_steps = cfg.d_steps_per_g
        self.hinge_margin = cfg.hinge_margin
        self.provenance: dict = {}
        # telemetry-owned; kept here so checkpoints carry them
        self.monitor_states: Dict[str, SpectralState] = {}
        self.monitor_rng = make_rng(cfg.seed, Stream.TELEMETRY)
        self.ema_standing: Optional[list] = None

    def monitored_weights(self) -> Dict[str, np.ndarray]:
        """Raw (unnormalized) 2-D weights of G and D, excluding BN projections."""
        out = {}
        for net in (self.G, self.D):
            for name, p in net.params.items():
                if name.endswith(".weight") and p.ndim == 2:
                    out[name] = p.data
        return out

    # sampling helpers ---------------------------------------------------
    def real_batch(self, n: int) -> tuple:
        if self.train_set is None:
            return sample_real(self.mixture, n, self.rngs["DATA"])
        idx = self.rngs["DATA"].integers(0, len(self.train_set[0]), size=n)
        return self.train_set[0][idx], self.train_set[1][idx]

    def fake_inputs(self, n: int) -> tuple:
        z = sample_latent(self.config.latent, n, self.rngs["LATENT"], step=self.step)
        y = self.rngs["CLASS"].integers(0, self.config.generator.num_classes, size=n)
        return z, y

    def set_freeze(self, which: str) -> None:
        self.freeze = which
        self.G.set_track_running(which != "g")
        self.G.sn_update = which != "g"


def _losses(state: TrainState, real_scores: Tensor, fake_scores: Tensor) -> tuple:
    if state.config.train.loss_kind == "hinge":
        return hinge_losses(real_scores, fake_scores, state.hinge_margin)
    return vanilla_losses(real_scores, fake_scores)


def _clear(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _grads(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def _finite(*xs) -> bool:
    return all(np.isfinite(x) for x in xs)


def d_step(state: TrainState) -> tuple:
    """One discriminator update; returns (loss_real, loss_fake, grad norms, skipped)."""
    cfg = state.config.train
    D, G = state.D, state.G
    n = cfg.batch
    real_x, real_y = state.real_batch(n)
    z, fy = state.fake_inputs(n)
    with ad.no_grad():
        fake = G(z, fy, mode="train").data
    frozen = state.freeze == "d"
    drop = state.rngs["DROPOUT"]
    if frozen:
        with ad.no_grad():
            rs = D(Tensor(real_x), real_y, "train", False, drop)
            fs = D(Tensor(fake), fy, "train", False, drop)
            lr_, lf_, _ = _losses(state, rs, fs)
        return lr_.item(), lf_.item(), [], False
    rs = D(Tensor(real_x), real_y, "train", True, drop)
    fs = D(Tensor(fake), fy, "train", False, drop)
    loss_real, loss_fake, _ = _losses(state, rs, fs)
    total = loss_real + loss_fake
    if cfg.r1_gamma > 0:
        total = total + r1_penalty(lambda x, y: D(x, y, "train", False, drop), real_x, real_y, cfg.r1_gamma)
    lr_, lf_ = loss_real.item(), loss_fake.item()
    if not _finite(total.item()):
        return lr_, lf_, [], True
    _clear(D.params)
    total.backward()
    grads = _grads(D.params)
    ok = adam_step(D.params, grads, state.opt_d, state.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps)
    _clear(D.params)
    if ok:
        state.d_updates += 1
    return lr_, lf_, [float(np.linalg.norm(g)) for g in grads.values()], not ok


def g_step(state: TrainState) -> tuple:
    cfg = state.config.train
    D, G = state.D, state.G
    z, fy = state.fake_inputs(cfg.batch)
    drop = state.rngs["DROPOUT"]
    if state.freeze == "g":
        with ad.no_grad():
            fs = D(G(z, fy, mode="train"), fy, "train", False, drop)
            loss_g = -fs.mean() if cfg.loss_kind == "hinge" else ad.softplus(-fs).mean()
            return loss_g.item(), [], False
    # D is a fixed critic here: no gradients are formed for its parameters
    with ad.frozen(D.params.values()):
        fake = G(z, fy, mode="train")
        fs = D(fake, fy, "train", False, drop)
        if cfg.loss_kind == "hinge":
            loss_g = -fs.mean()
        else:
            loss_g = ad.softplus(-fs).mean()
        total = loss_g
        if cfg.ortho_beta > 0:
            for name in G.weight_names():
                total = total + ortho_penalty(G.params[name], cfg.ortho_variant, cfg.ortho_beta)
        if cfg.sigma_reg_mode != "none" and cfg.sigma_reg_strength > 0:
            for name, st in state.cond_states.items():
                top_k_singular(G.params[name].data, st, n_iters=1)
                total = total + sigma_regularization_loss(G.params[name], cfg.sigma_reg_mode,
                                                          cfg.sigma_reg_target, st) * cfg.sigma_reg_strength
        g_val = loss_g.item()
        if not _finite(total.item()):
            return g_val, [], True
        _clear(G.params)
        total.backward()
    grads = _grads(G.params)
    ok = adam_step(G.params, grads, state.opt_g, state.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps)
    _clear(G.params)
    if not ok:
        return g_val, [], True
    if cfg.clamp_mode != "none":
        for name, st in state.cond_states.items():
            W = G.params[name].data
            top_k_singular(W, st, n_iters=1)
            target = cfg.clamp_target if cfg.clamp_mode == "fixed" else cfg.clamp_target * float(st.sigma[1])
            G.params[name].data[...] = clamp_top_singular(W, target, st)
    state.g_updates += 1
    ema_update(state.ema, G.params, step=state.step)
    return g_val, [float(np.linalg.norm(g)) for g in grads.values()], False


def train_step(state: TrainState) -> StepReport:
    """``d_steps`` discriminator updates followed by one generator update."""
    reals, fakes, norms = [], [], []
    skipped = False
    for _ in range(state.d_steps):
        lr_, lf_, ns, sk = d_step(state)
        reals.append(lr_)
        fakes.append(lf_)
        norms.extend(ns)
        skipped |= sk
    g_loss, ns, sk = g_step(state)
    norms.extend(ns)
    skipped |= sk
    rep = StepReport(
        step=state.step,
        d_loss_real=float(np.mean(reals)),
        d_loss_fake=float(np.mean(fakes)),
        g_loss=float(g_loss),
        grad_norm_variance=float(np.var(norms)) if norms else 0.0,
        skipped=bool(skipped),
        d_updates=state.d_updates,
        g_updates=state.g_updates,
    )
    state.step += 1
    return rep


def apply_intervention(state: TrainState, spec: InterventionSpec, parent: Optional[dict] = None) -> TrainState:
    """Modify a loaded state in place per ``spec`` and record provenance."""
    state.lr_g *= spec.scale_lr_g
    state.lr_d *= spec.scale_lr_d
    if spec.reset_momentum:
        state.opt_g.reset_moments()
        state.opt_d.reset_moments()
    state.set_freeze(spec.freeze)
    if spec.set_d_steps is not None:
        state.d_steps = spec.set_d_steps
    if spec.set_hinge_margin is not None:
        state.hinge_margin = spec.set_hinge_margin
    prov = dict(parent or {})
    prov.update({"intervention": asdict(spec), "intervened_at_step": state.step})
    state.provenance = prov
    return state


def ema_generator(state: TrainState) -> Generator:
    """A copy of the live generator carrying the EMA weights (statistics cleared)."""
    G = copy.deepcopy(state.G)
    for k, s in state.ema.shadow.items():
        G.params[k] = Tensor(s.copy(), requires_grad=False, name=k)
    for bn in G.bns:
        bn.clear_standing()
    G.sn_update = True
    return G
