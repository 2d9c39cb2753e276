"""Class-conditional MLP generator and projection discriminator.

The generator mirrors the skip-z / shared-embedding design at MLP scale:
``z`` is split into one chunk per hidden layer plus one for the input
layer, and each hidden layer's conditional BatchNorm is driven by
``concat(chunk_i, embed(y))``.

Parameter names follow a dotted scheme used by the checkpoint format::

    g.embed.weight              shared class embedding (num_classes, embed_dim)
    g.layer0.weight/.bias       input linear (chunk or z -> width 0)
    g.bn{i}.gain_proj/.bias_proj
    g.bn{i}.embed.weight        per-layer tables when the embedding is not shared
    g.layer{i}.weight/.bias     hidden linear, i >= 1
    g.out.weight/.bias
    d.layer{i}.weight/.bias
    d.out.weight/.bias          unconditional head (width -> 1)
    d.embed.weight              projection embedding (num_classes, width)

All linear weights have shape (in, out) and act as ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .spectral import SN_EPS, SpectralState, power_iterate, spectral_normalize

BN_EPS = 1e-4


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    z_dim: int = 32
    chunk_size: int = 8
    hidden_widths: tuple = (64, 64, 64)
    out_dim: int = 2
    num_classes: int = 8
    embed_dim: int = 16
    use_skip_z: bool = True
    use_shared_embedding: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = BN_EPS
    use_spectral_norm: bool = False

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if not self.hidden_widths:
            raise ConfigError("generator needs at least one hidden layer")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.use_skip_z and self.z_dim != self.chunk_size * (len(self.hidden_widths) + 1):
            raise ConfigError(
                f"skip-z needs z_dim == chunk_size * (hidden layers + 1); got z_dim={self.z_dim}, "
                f"chunk_size={self.chunk_size}, {len(self.hidden_widths)} hidden layers")

    @property
    def cond_dim(self) -> int:
        return self.embed_dim + (self.chunk_size if self.use_skip_z else 0)


@dataclass
class DiscriminatorConfig:
    hidden_widths: tuple = (64, 64)
    in_dim: int = 2
    num_classes: int = 8
    dropout_keep_prob: float = 1.0
    use_spectral_norm: bool = True
    sn_iters: int = 1

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if not self.hidden_widths:
            raise ConfigError("discriminator needs at least one hidden layer")
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ConfigError("dropout_keep_prob must lie in (0, 1]")

    @property
    def embed_dim(self) -> int:
        return self.hidden_widths[-1]


def orthogonal_init(shape: tuple, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols].copy()


def _param(params: dict, name: str, data: np.ndarray) -> None:
    params[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def embed_class(y, table: Tensor) -> Tensor:
    """Row lookup into an embedding table; ``y`` may be an int or an int array."""
    y = np.asarray(y, dtype=np.int64)
    n = table.shape[0]
    if y.size and (y.min() < 0 or y.max() >= n):
        raise ConfigError(f"class id out of range [0, {n})")
    if y.ndim == 0:
        return ad.take_rows(table, y.reshape(1)).reshape(table.shape[1])
    return ad.take_rows(table, y)


def split_z(z: Tensor, chunk_size: int) -> list:
    dim = z.shape[1]
    if chunk_size < 1 or dim % chunk_size:
        raise ConfigError(f"z_dim {dim} is not divisible by chunk size {chunk_size}")
    return [ad.slice_cols(z, i, i + chunk_size) for i in range(0, dim, chunk_size)]


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if b is None:
        return x @ W
    return ad.affine(x, W, b)


def _cbn_apply(h: Tensor, cond: Tensor, gain_proj: Tensor, bias_proj: Tensor, centered: np.ndarray,
               inv: np.ndarray, batch_stats: bool) -> Tensor:
    """``hn * (1 + cond @ gain_proj) + cond @ bias_proj`` as one graph node.

    With batch statistics the backward includes the dependence of the mean
    and variance on ``h``; with fixed statistics it is a plain rescale.
    """
    hn = centered * inv
    C, Pg, Pb = cond.data, gain_proj.data, bias_proj.data
    gain = 1.0 + C @ Pg
    out = hn * gain + C @ Pb

    def backward(g):
        dgain = g * hn
        dhn = g * gain
        if batch_stats:
            dh = inv * (dhn - dhn.mean(axis=0) - hn * (dhn * hn).mean(axis=0))
        else:
            dh = dhn * inv
        dcond = dgain @ Pg.T + g @ Pb.T if cond.requires_grad else None
        return (dh, dcond,
                C.T @ dgain if gain_proj.requires_grad else None,
                C.T @ g if bias_proj.requires_grad else None)

    return ad.primitive("cond_batch_norm", (h, cond, gain_proj, bias_proj), out, backward)


class ConditionalBatchNorm:
    """BatchNorm whose per-sample gain and bias are linear in a conditioning vector.

    Gains are ``1 + cond @ gain_proj`` and biases ``cond @ bias_proj``.  The
    projections are parameters living in the owning network's dict; this
    object holds only the statistics.
    """

    def __init__(self, width: int, eps: float = BN_EPS, momentum: float = 0.1):
        self.width = width
        self.eps = eps
        self.momentum = momentum
        self.running_mean: Optional[np.ndarray] = None
        self.running_var: Optional[np.ndarray] = None
        self.standing_mean: Optional[np.ndarray] = None
        self.standing_var: Optional[np.ndarray] = None
        self.track_running = True
        self._collect: Optional[list] = None

    def clear_standing(self) -> None:
        self.standing_mean = self.standing_var = None

    def forward(self, h: Tensor, cond: Tensor, gain_proj: Tensor, bias_proj: Tensor,
                mode: str = "train") -> Tensor:
        n, w = h.shape
        if w != self.width or gain_proj.shape != (cond.shape[1], w):
            raise ConfigError(f"CBN width mismatch: h {h.shape}, cond {cond.shape}, proj {gain_proj.shape}")
        if mode == "train":
            mu = h.data.mean(axis=0)
            centered = h.data - mu
            var = (centered * centered).mean(axis=0)
            if self._collect is not None:
                self._collect.append((mu.copy(), (h.data * h.data).mean(axis=0)))
            elif self.track_running:
                m = self.momentum
                if self.running_mean is None:
                    self.running_mean = mu.copy()
                    self.running_var = var.copy()
                else:
                    self.running_mean = (1 - m) * self.running_mean + m * mu
                    self.running_var = (1 - m) * self.running_var + m * var
        elif mode == "eval":
            if self.standing_mean is not None:
                mu, var = self.standing_mean, self.standing_var
            elif self.running_mean is not None:
                mu, var = self.running_mean, self.running_var
            else:
                raise RuntimeError("eval-mode BatchNorm before any statistics were computed")
            centered = h.data - mu
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return _cbn_apply(h, cond, gain_proj, bias_proj, centered, 1.0 / np.sqrt(var + self.eps),
                          batch_stats=mode == "train")

    # standing statistics -------------------------------------------------
    def begin_collect(self) -> None:
        self._collect = []

    def end_collect(self) -> None:
        passes = self._collect
        self._collect = None
        if not passes:
            raise RuntimeError("no forward passes were collected")
        means = np.stack([p[0] for p in passes])
        sq = np.stack([p[1] for p in passes])
        mu = means.mean(axis=0)
        self.standing_mean = mu
        self.standing_var = np.maximum(sq.mean(axis=0) - mu * mu, 0.0)


class Generator:
    def __init__(self, config: GeneratorConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        p: Dict[str, Tensor] = {}
        widths = c.hidden_widths
        in0 = c.chunk_size if c.use_skip_z else c.z_dim
        if c.use_shared_embedding:
            _param(p, "g.embed.weight", rng.standard_normal((c.num_classes, c.embed_dim)))
        _param(p, "g.layer0.weight", orthogonal_init((in0, widths[0]), rng))
        _param(p, "g.layer0.bias", np.zeros(widths[0]))
        for i, w in enumerate(widths):
            if not c.use_shared_embedding:
                _param(p, f"g.bn{i}.embed.weight", rng.standard_normal((c.num_classes, c.embed_dim)))
            _param(p, f"g.bn{i}.gain_proj", orthogonal_init((c.cond_dim, w), rng, gain=0.1))
            _param(p, f"g.bn{i}.bias_proj", orthogonal_init((c.cond_dim, w), rng, gain=0.1))
            if i >= 1:
                _param(p, f"g.layer{i}.weight", orthogonal_init((widths[i - 1], w), rng))
                _param(p, f"g.layer{i}.bias", np.zeros(w))
        _param(p, "g.out.weight", orthogonal_init((widths[-1], c.out_dim), rng))
        _param(p, "g.out.bias", np.zeros(c.out_dim))
        self.params = p
        self.bns = [ConditionalBatchNorm(w, c.bn_eps, c.bn_momentum) for w in widths]
        self.sn_states: Dict[str, SpectralState] = {}
        if c.use_spectral_norm:
            for name in self.linear_weight_names():
                self.sn_states[name] = SpectralState.create(p[name].shape, 1, rng)
        self.sn_update = True

    def linear_weight_names(self) -> list:
        names = [f"g.layer{i}.weight" for i in range(len(self.config.hidden_widths))]
        return names + ["g.out.weight"]

    def weight_names(self) -> list:
        """2-D parameters targeted by orthogonal / sigma regularization."""
        return [n for n, t in self.params.items() if t.ndim == 2 and "embed" not in n]

    def _w(self, name: str) -> Tensor:
        W = self.params[name]
        st = self.sn_states.get(name)
        if st is None:
            return W
        if self.sn_update:
            power_iterate(W.data, st, 1)
        return spectral_normalize(W, st, SN_EPS)

    def _embedding(self, y, i: int) -> Tensor:
        if self.config.use_shared_embedding:
            return embed_class(y, self.params["g.embed.weight"])
        return embed_class(y, self.params[f"g.bn{i}.embed.weight"])

    def forward(self, z: Tensor, y, mode: str = "train") -> Tensor:
        c = self.config
        z = z if isinstance(z, Tensor) else Tensor(z)
        y = np.asarray(y, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != c.z_dim or y.shape != (z.shape[0],):
            raise ConfigError(f"generator expects z (batch, {c.z_dim}) and y (batch,); got {z.shape}, {y.shape}")
        p = self.params
        chunks = split_z(z, c.chunk_size) if c.use_skip_z else None
        h = linear(chunks[0] if chunks else z, self._w("g.layer0.weight"), p["g.layer0.bias"])
        for i, bn in enumerate(self.bns):
            if i >= 1:
                h = linear(h, self._w(f"g.layer{i}.weight"), p[f"g.layer{i}.bias"])
            e = self._embedding(y, i)
            cond = ad.concat([chunks[i + 1], e], axis=1) if chunks else e
            h = bn.forward(h, cond, p[f"g.bn{i}.gain_proj"], p[f"g.bn{i}.bias_proj"], mode)
            h = ad.relu(h)
        return linear(h, self._w("g.out.weight"), p["g.out.bias"])

    __call__ = forward

    def set_track_running(self, flag: bool) -> None:
        for bn in self.bns:
            bn.track_running = flag


def generator_forward(z, y, G: Generator, mode: str = "train") -> Tensor:
    return G.forward(z, y, mode)


def compute_standing_stats(G: Generator, passes: int, batch: int, sample_z: Callable[[int], Tensor],
                           sample_y: Callable[[int], np.ndarray]) -> None:
    """Replace eval-mode statistics with moments pooled over ``passes`` fresh batches.

    Each pass runs the generator with batch statistics; the stored mean is
    the average of per-pass means and the variance is the average of
    per-pass ``E[x^2]`` minus the squared pooled mean.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    for bn in G.bns:
        bn.begin_collect()
    prev = G.sn_update
    G.sn_update = False
    try:
        with ad.no_grad():
            for _ in range(passes):
                G.forward(sample_z(batch), sample_y(batch), mode="train")
    finally:
        G.sn_update = prev
        # end_collect is safe to call once the passes are done
    for bn in G.bns:
        bn.end_collect()


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        p: Dict[str, Tensor] = {}
        prev = c.in_dim
        for i, w in enumerate(c.hidden_widths):
            _param(p, f"d.layer{i}.weight", orthogonal_init((prev, w), rng))
            _param(p, f"d.layer{i}.bias", np.zeros(w))
            prev = w
        _param(p, "d.out.weight", orthogonal_init((prev, 1), rng))
        _param(p, "d.out.bias", np.zeros(1))
        _param(p, "d.embed.weight", orthogonal_init((c.num_classes, prev), rng))
        self.params = p
        self.sn_states: Dict[str, SpectralState] = {}
        if c.use_spectral_norm:
            for name in self.weight_names():
                st = SpectralState.create(p[name].shape, 1, rng)
                power_iterate(p[name].data, st, 50)
                self.sn_states[name] = st

    def weight_names(self) -> list:
        names = [f"d.layer{i}.weight" for i in range(len(self.config.hidden_widths))]
        return names + ["d.out.weight", "d.embed.weight"]

    def effective_weight(self, name: str, update: bool = False) -> Tensor:
        W = self.params[name]
        st = self.sn_states.get(name)
        if st is None:
            return W
        if update:
            power_iterate(W.data, st, self.config.sn_iters)
        return spectral_normalize(W, st, SN_EPS)

    def features(self, x: Tensor, update_sn: bool = False) -> Tensor:
        p = self.params
        h = x
        for i in range(len(self.config.hidden_widths)):
            h = ad.relu(linear(h, self.effective_weight(f"d.layer{i}.weight", update_sn), p[f"d.layer{i}.bias"]))
        return h

    def forward(self, x, y, mode: str = "train", update_sn: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Projection score ``h @ w_out + b + <embed(y), h>``, shape (batch,)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != self.config.in_dim or y.shape != (x.shape[0],):
            raise ConfigError(f"discriminator expects x (batch, {self.config.in_dim}) and y (batch,)")
        n = x.shape[0]
        h = self.features(x, update_sn)
        keep = self.config.dropout_keep_prob
        if mode == "train" and keep < 1.0:
            if rng is None:
                raise ValueError("dropout needs an rng in train mode")
            mask = (rng.random(h.shape) < keep) / keep
            h = h * Tensor(mask)
        p = self.params
        lin = linear(h, self.effective_weight("d.out.weight", update_sn), p["d.out.bias"]).reshape(n)
        e = embed_class(y, self.effective_weight("d.embed.weight", update_sn))
        return lin + (e * h).sum(axis=1)

    __call__ = forward


def discriminator_forward(x, y, D: Discriminator, mode: str = "train", update_sn: bool = False,
                          rng=None) -> Tensor:
    return D.forward(x, y, mode, update_sn, rng)
