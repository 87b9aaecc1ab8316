"""Map-conditioned variational autoencoder with a box-detector decoder.

The encoder turns the agent raster into a Gaussian over a
``C' x H/2^f x W/2^f`` latent grid; the decoder reads a latent sample plus
a pooled copy of the map raster and emits a :class:`BoxGrid`.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from ._validation import check_fitted, check_hyperparams, check_latents, check_scenes
from .detection import BoxGrid, MatchWeights, detection_loss, threshold_boxes
from .geometry import RasterSpec
from .raster import Scene, rasterize_agents, rasterize_map

logger = logging.getLogger(__name__)

LOG_STD_CLAMP = 10.0
#: Initial decoder output per channel: logit, cos, sin, then four log side distances.
DECODER_OUTPUT_INIT = np.array([0.0, 1.0, 0.0, 0.4, 0.0, 0.4, 0.0])


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


class LatentGrid:
    """Latent values with optional encoder mean/std, shaped ``(C', H', W')``."""

    def __init__(self, values, mean=None, std=None, input_size=None, downsample=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"latent grid must be (C', H', W'), got {self.values.shape}")
        for arr in (self.mean, self.std):
            if arr is not None and arr.shape != self.values.shape:
                raise ValueError("mean/std grids must match the latent shape")
        if self.std is not None and not (self.std > 0).all():
            raise ValueError("latent std must be strictly positive")
        if input_size is not None and downsample is not None:
            side = input_size // 2 ** downsample
            if input_size % 2 ** downsample or self.values.shape[1:] != (side, side):
                raise ValueError(f"latent side must be {input_size}/2^{downsample}")


def reparameterize(mean, std, eps):
    mean, std, eps = (np.asarray(a, dtype=np.float64) for a in (mean, std, eps))
    if not (mean.shape == std.shape == eps.shape):
        raise ValueError(f"shape mismatch: {mean.shape}, {std.shape}, {eps.shape}")
    if not (std > 0).all():
        raise ValueError("std must be strictly positive")
    return mean + std * eps


def kl_loss(mean, std) -> float:
    """KL divergence of ``N(mean, std^2)`` from ``N(0, I)``, summed over elements."""
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    if not (std > 0).all():
        raise ValueError("std must be strictly positive")
    return float(0.5 * np.sum(mean ** 2 + std ** 2 - 1.0 - 2.0 * np.log(std)))


def kl_grad(mean, std):
    """Gradient of :func:`kl_loss` with respect to ``(mean, std)``."""
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    return mean.copy(), std - 1.0 / std


def vae_loss(grid: BoxGrid, gt_boxes, mean, std, beta_kl: float, weights=None, assignment=None):
    """Detection reconstruction loss plus ``beta_kl`` times the KL term.

    Returns:
        ``(loss, grads, parts)`` where ``grads`` maps ``"grid"``, ``"mean"``
        and ``"std"`` to arrays and ``parts`` carries ``rec``, ``kl`` and the
        matching used.
    """
    rec, d_grid, det_parts, asg = detection_loss(grid, gt_boxes, weights, assignment)
    kl = kl_loss(mean, std)
    d_mean, d_std = kl_grad(mean, std)
    grads = {"grid": d_grid, "mean": beta_kl * d_mean, "std": beta_kl * d_std}
    return rec + beta_kl * kl, grads, {"rec": rec, "kl": kl, "assignment": asg, **det_parts}


def pool_map(channels, factor: int) -> np.ndarray:
    """Average-pool ``(..., C, H, W)`` map channels by ``factor`` and flatten."""
    c = np.asarray(channels, dtype=np.float64)
    *lead, ch, h, w = c.shape
    if h % factor or w % factor:
        raise ValueError(f"map of size {h}x{w} is not divisible by {factor}")
    pooled = c.reshape(*lead, ch, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))
    return pooled.reshape(*lead, -1)


def cosine_lr(base: float, step: int, total) -> float:
    if not total:
        return base
    frac = min(step / total, 1.0)
    return base * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * frac)))


class SceneAutoencoder(BaseEstimator):
    """Encode agent rasters to latents and decode latents (given a map) to boxes.

    Args:
        raster_size: side of the agent/map rasters in pixels.
        extent_m: meters covered by each raster side.
        downsample: number of factor-2 reductions from raster to latent grid.
        latent_channels: latent channels per cell.
        grid_size: side of the detection grid.
        beta_kl: KL weight.
        match_weights: :class:`MatchWeights` for matching and loss; the default
            only matches cells that lie inside their ground-truth box.
        encoder_hidden, decoder_hidden: hidden layer widths of the dense nets.
        learning_rate, weight_decay: optimizer settings (Adam with L2 decay).
        lr_decay_steps: if set, cosine-decay the learning rate to 1% of its
            initial value over this many total steps.
        n_steps: optimizer steps per call to :meth:`fit`.
        batch_size: scenes per step; the whole set when it is smaller.
        random_state: seed for initialization, batching and latent noise.
        warm_start: continue training the existing parameters on refit.
    """

    def __init__(self, raster_size=64, extent_m=64.0, downsample=3, latent_channels=4,
                 grid_size=40, beta_kl=1e-4, match_weights=None, encoder_hidden=(64,),
                 decoder_hidden=(256, 128), activation="silu", learning_rate=1e-4,
                 weight_decay=1e-5, lr_decay_steps=None, n_steps=1000, batch_size=16,
                 random_state=0, warm_start=False, log_every=0):
        self.raster_size = raster_size
        self.extent_m = extent_m
        self.downsample = downsample
        self.latent_channels = latent_channels
        self.grid_size = grid_size
        self.beta_kl = beta_kl
        self.match_weights = match_weights
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_decay_steps = lr_decay_steps
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state
        self.warm_start = warm_start
        self.log_every = log_every

    # -- shapes ---------------------------------------------------------
    @property
    def raster_spec(self) -> RasterSpec:
        return RasterSpec(self.raster_size, self.raster_size, float(self.extent_m))

    @property
    def grid_spec(self) -> RasterSpec:
        return RasterSpec(self.grid_size, self.grid_size, float(self.extent_m))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.raster_size // 2 ** self.downsample
        return (self.latent_channels, side, side)

    @property
    def latent_dim(self) -> int:
        c, h, w = self.latent_shape
        return c * h * w

    @property
    def map_feature_dim(self) -> int:
        return 3 * self.latent_shape[1] * self.latent_shape[2]

    def _weights(self) -> MatchWeights:
        return self.match_weights if self.match_weights is not None else MatchWeights(inside_only=True)

    def _check_params(self):
        check_hyperparams(self, positive=("extent_m", "learning_rate"),
                          non_negative=("beta_kl", "weight_decay"),
                          counts=("raster_size", "downsample", "latent_channels", "grid_size",
                                  "n_steps", "batch_size"))
        if self.batch_size < 1 or self.grid_size < 1 or self.latent_channels < 1:
            raise ValueError("batch_size, grid_size and latent_channels must be at least 1")
        if self.raster_size % 2 ** self.downsample:
            raise ValueError("raster_size must be divisible by 2**downsample")

    def _build(self):
        self._check_params()
        n_in = 3 * self.raster_size ** 2
        self.encoder_spec_ = nn.NetSpec((n_in, *self.encoder_hidden, 2 * self.latent_dim),
                                        self.activation)
        self.decoder_spec_ = nn.NetSpec((self.latent_dim + self.map_feature_dim,
                                         *self.decoder_hidden, 7 * self.grid_size ** 2),
                                        self.activation)
        rng = np.random.default_rng(self.random_state)
        self.encoder_params_ = nn.init_params(self.encoder_spec_, rng)
        self.decoder_params_ = nn.init_params(self.decoder_spec_, rng)
        self.decoder_params_[-1][:] = np.repeat(DECODER_OUTPUT_INIT, self.grid_size ** 2)
        self.optimizer_ = nn.Adam(self.params_, self.learning_rate, self.weight_decay,
                                  decoupled=False)
        self.rng_ = rng
        self.n_steps_done_ = 0
        self.loss_log_ = []

    @property
    def params_(self) -> list[np.ndarray]:
        return self.encoder_params_ + self.decoder_params_

    # -- inference ------------------------------------------------------
    def agent_rasters(self, scenes) -> np.ndarray:
        spec = self.raster_spec
        return np.stack([rasterize_agents(s, spec).channels for s in scenes])

    def map_features(self, maps) -> np.ndarray:
        """Pooled map features for scenes, map rasters or raw ``(B, 3, H, W)`` arrays."""
        if isinstance(maps, np.ndarray):
            chans = maps
        else:
            spec = self.raster_spec
            chans = np.stack([rasterize_map(m, spec).channels if not hasattr(m, "channels")
                              else m.channels for m in maps])
        return pool_map(chans, 2 ** self.downsample)

    def encode(self, rasters):
        """Latent mean and std, each ``(B, C', H', W')``, for ``(B, 3, H, W)`` rasters."""
        check_fitted(self, "encoder_params_")
        x = np.asarray(rasters, dtype=np.float64)
        expected = (3, self.raster_size, self.raster_size)
        if x.shape[1:] != expected:
            raise nn.ShapeError(f"agent rasters must be (B, {expected}), got {x.shape}")
        out, _ = nn.forward(self.encoder_spec_, self.encoder_params_, x.reshape(len(x), -1))
        mean, raw = out[:, :self.latent_dim], out[:, self.latent_dim:]
        std = np.exp(np.clip(raw, -LOG_STD_CLAMP, LOG_STD_CLAMP))
        shape = (len(x), *self.latent_shape)
        return mean.reshape(shape), std.reshape(shape)

    def decode(self, z, maps) -> np.ndarray:
        """Box-grid channels ``(B, 7, G, G)`` for latents ``z`` and their maps."""
        check_fitted(self, "decoder_params_")
        z = check_latents(z, self.latent_shape)
        feats = self.map_features(maps)
        if len(feats) != len(z):
            raise nn.ShapeError(f"{len(z)} latents but {len(feats)} maps")
        out, _ = nn.forward(self.decoder_spec_, self.decoder_params_,
                            np.concatenate([z.reshape(len(z), -1), feats], axis=1))
        return out.reshape(len(z), 7, self.grid_size, self.grid_size)

    def box_grids(self, channels) -> list[BoxGrid]:
        return [BoxGrid(c, self.grid_spec) for c in channels]

    def transform(self, scenes) -> np.ndarray:
        """Encoder means for ``scenes``."""
        scenes = check_scenes(scenes)
        return self.encode(self.agent_rasters(scenes))[0]

    def predict(self, scenes, p_min: float = 0.9):
        """Reconstructed box lists (decoding the latent mean)."""
        scenes = check_scenes(scenes)
        grids = self.decode(self.transform(scenes), scenes)
        return [threshold_boxes(g, p_min, warn=logger.warning) for g in self.box_grids(grids)]

    # -- training -------------------------------------------------------
    def batch_loss(self, rasters, map_feats, gt_lists, eps, assignments=None):
        """Mean VAE loss over a batch and gradients for all parameters.

        Args:
            rasters: ``(B, 3, H, W)`` agent rasters.
            map_feats: ``(B, F)`` pooled map features.
            gt_lists: ground-truth boxes per example.
            eps: ``(B, latent_dim)`` reparameterization noise.
            assignments: optional fixed matchings, one per example.

        Returns:
            ``(loss, grads, parts)``; ``grads`` aligns with :attr:`params_`.
        """
        b = len(rasters)
        L = self.latent_dim
        enc_out, enc_tape = nn.forward(self.encoder_spec_, self.encoder_params_,
                                       np.asarray(rasters).reshape(b, -1))
        mean, raw = enc_out[:, :L], enc_out[:, L:]
        std = np.exp(np.clip(raw, -LOG_STD_CLAMP, LOG_STD_CLAMP))
        z = reparameterize(mean, std, eps)
        dec_out, dec_tape = nn.forward(self.decoder_spec_, self.decoder_params_,
                                       np.concatenate([z, map_feats], axis=1))
        if not np.isfinite(dec_out).all():
            raise DivergenceError("decoder produced non-finite outputs")
        d_out = np.empty_like(dec_out)
        d_mean = np.empty_like(mean)
        d_std = np.empty_like(std)
        gspec = self.grid_spec
        w = self._weights()
        rec = kl = 0.0
        used = []
        for k in range(b):
            grid = BoxGrid(dec_out[k].reshape(7, self.grid_size, self.grid_size), gspec)
            asg = None if assignments is None else assignments[k]
            loss_k, grads_k, parts_k = vae_loss(grid, gt_lists[k], mean[k], std[k],
                                                self.beta_kl, w, asg)
            rec += parts_k["rec"] / b
            kl += parts_k["kl"] / b
            d_out[k] = grads_k["grid"].reshape(-1) / b
            d_mean[k] = grads_k["mean"] / b
            d_std[k] = grads_k["std"] / b
            used.append(parts_k["assignment"])
        dec_grads, d_in = nn.backward(self.decoder_spec_, self.decoder_params_, dec_tape, d_out)
        dz = d_in[:, :L]
        d_mean += dz
        d_std += dz * eps
        inside = np.abs(raw) < LOG_STD_CLAMP
        d_raw = d_std * std * inside
        enc_grads, _ = nn.backward(self.encoder_spec_, self.encoder_params_, enc_tape,
                                   np.concatenate([d_mean, d_raw], axis=1), need_input_grad=False)
        total = rec + self.beta_kl * kl
        return total, enc_grads + dec_grads, {"rec": rec, "kl": kl, "assignments": used}

    def fit(self, scenes, y=None):
        scenes = check_scenes(scenes)
        if not (self.warm_start and hasattr(self, "encoder_params_")):
            self._build()
        self.optimizer_.weight_decay = self.weight_decay
        rasters = self.agent_rasters(scenes)
        feats = self.map_features(scenes)
        gts = [list(s.agents) for s in scenes]
        n = len(scenes)
        bs = min(self.batch_size, n)
        for _ in range(self.n_steps):
            idx = np.arange(n) if bs == n else np.sort(self.rng_.choice(n, bs, replace=False))
            eps = self.rng_.standard_normal((bs, self.latent_dim))
            self.optimizer_.lr = cosine_lr(self.learning_rate, self.n_steps_done_, self.lr_decay_steps)
            loss, grads, parts = self.batch_loss(rasters[idx], feats[idx], [gts[i] for i in idx], eps)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {self.n_steps_done_}")
            self.optimizer_.step(self.params_, grads)
            self.loss_log_.append((self.n_steps_done_, parts["rec"], parts["kl"], loss))
            if self.log_every and self.n_steps_done_ % self.log_every == 0:
                logger.info("ae step %d rec %.5f kl %.3f", self.n_steps_done_, parts["rec"], parts["kl"])
            self.n_steps_done_ += 1
        return self
