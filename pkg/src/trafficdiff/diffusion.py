"""Noise-conditioned latent diffusion with preconditioned denoising.

Training draws ``log sigma ~ N(p_mean, p_std^2)``, noises a clean latent
and regresses the raw network onto the preconditioned target. Sampling
integrates the probability-flow ODE ``dz/dsigma = (z - D(z; sigma)) / sigma``
with Heun steps over a rho-warped schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state

from . import nn
from ._validation import check_fitted, check_hyperparams, check_scenes
from .autoencoder import DivergenceError, cosine_lr
from .detection import BoxGrid, detection_loss, threshold_boxes
from .raster import Scene

logger = logging.getLogger(__name__)

SIGMA_FREQS = (1.0, 2.0, 4.0, 8.0)


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EDMConfig:
    p_mean: float = -0.5
    p_std: float = 1.0
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    num_steps: int = 100
    beta_y: float = 0.2

    def __post_init__(self):
        if not self.p_std > 0:
            raise ValueError("p_std must be positive")
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if int(self.num_steps) != self.num_steps or self.num_steps < 2:
            raise ValueError("num_steps must be an integer >= 2")
        if self.beta_y < 0:
            raise ValueError("beta_y must be non-negative")


def edm_coeffs(sigma, sigma_data: float = 0.5):
    """Preconditioning ``(c_in, c_skip, c_out, loss_weight)`` for noise level ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (sigma > 0).all() or not sigma_data > 0:
        raise ValueError("sigma and sigma_data must be positive")
    s2, d2 = sigma ** 2, sigma_data ** 2
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    weight = (s2 + d2) / (sigma * sigma_data) ** 2
    if sigma.ndim == 0:
        return float(c_in), float(c_skip), float(c_out), float(weight)
    return c_in, c_skip, c_out, weight


def sample_sigma(rng, p_mean: float = -0.5, p_std: float = 1.0, size=None):
    if not p_std > 0:
        raise ValueError("p_std must be positive")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return np.exp(p_mean + p_std * rng.standard_normal(size))


def noise_schedule(cfg: EDMConfig) -> np.ndarray:
    """``num_steps`` decreasing noise levels from sigma_max to sigma_min, then 0."""
    n = cfg.num_steps
    i = np.arange(n)
    inv = 1.0 / cfg.rho
    sig = (cfg.sigma_max ** inv + i / (n - 1) * (cfg.sigma_min ** inv - cfg.sigma_max ** inv)) ** cfg.rho
    sig[0], sig[-1] = cfg.sigma_max, cfg.sigma_min
    return np.append(sig, 0.0)


def denoise_estimate(raw_net, z, sigma, sigma_data: float = 0.5):
    """``c_skip * z + c_out * raw_net(c_in * z, sigma)``."""
    c_in, c_skip, c_out, _ = edm_coeffs(sigma, sigma_data)
    z = np.asarray(z, dtype=np.float64)
    out = np.asarray(raw_net(c_in * z, sigma), dtype=np.float64)
    if out.shape != z.shape:
        raise nn.ShapeError(f"raw network returned {out.shape} for input {z.shape}")
    return c_skip * z + c_out * out


def latent_loss(raw_out, z_clean, z_noisy, sigma, sigma_data: float = 0.5):
    """Weighted residual of the raw network against its preconditioned target.

    Works per example: ``raw_out``, ``z_clean`` and ``z_noisy`` are
    ``(B, D)`` and ``sigma`` is ``(B,)``. Returns the per-example losses and
    the gradient of their sum w.r.t. ``raw_out``.
    """
    c_in, c_skip, c_out, weight = edm_coeffs(np.asarray(sigma, dtype=np.float64), sigma_data)
    c_skip, c_out, weight = (np.asarray(a)[..., None] for a in (c_skip, c_out, weight))
    resid = raw_out - (z_clean - c_skip * z_noisy) / c_out
    scale = weight * c_out ** 2
    losses = (scale * resid ** 2).sum(axis=-1)
    return losses, 2.0 * scale * resid


def diffusion_loss(raw_out, z_clean, z_noisy, sigma, sigma_data=0.5, beta_y=0.0,
                   decode=None, gt_lists=None, weights=None):
    """Batch-mean ``L_z + beta_y * L_y`` and its gradient w.r.t. ``raw_out``.

    Args:
        raw_out: ``(B, D)`` raw network output at ``c_in * z_noisy``.
        z_clean, z_noisy: ``(B, D)`` clean and noised latents.
        sigma: ``(B,)`` noise levels.
        decode: callable mapping denoised latents ``(B, D)`` to
            ``(grids, backprop)``, where ``grids`` is a list of
            :class:`BoxGrid` and ``backprop(grid_grads)`` returns the gradient
            w.r.t. its latent input. Required when ``beta_y > 0``.
        gt_lists: ground-truth boxes per example for the decoded term.

    Returns:
        ``(loss, grad, parts)`` with ``parts`` holding ``l_z`` and ``l_y``.
    """
    raw_out = np.atleast_2d(np.asarray(raw_out, dtype=np.float64))
    b = len(raw_out)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,))
    losses, grad = latent_loss(raw_out, z_clean, z_noisy, sigma, sigma_data)
    l_z = float(losses.mean())
    grad = grad / b
    l_y = 0.0
    if beta_y > 0:
        if decode is None or gt_lists is None:
            raise ValueError("beta_y > 0 needs a decoder and ground-truth boxes")
        _, c_skip, c_out, _ = edm_coeffs(sigma, sigma_data)
        denoised = c_skip[:, None] * z_noisy + c_out[:, None] * raw_out
        grids, backprop = decode(denoised)
        grid_grads = []
        for grid, gts in zip(grids, gt_lists):
            loss_k, g_k, _, _ = detection_loss(grid, gts, weights)
            l_y += loss_k / b
            grid_grads.append(g_k * (beta_y / b))
        d_denoised = backprop(grid_grads)
        grad = grad + c_out[:, None] * d_denoised
    return l_z + beta_y * l_y, grad, {"l_z": l_z, "l_y": l_y}


def ode_sample(denoiser, cfg: EDMConfig, shape=None, rng=None, z_init=None):
    """Integrate the probability-flow ODE from ``sigma_max`` down to 0.

    Args:
        denoiser: ``D(z, sigma)`` returning the denoised estimate.
        cfg: schedule settings.
        shape: latent shape when drawing the initial state.
        rng: generator or seed for the initial ``N(0, sigma_max^2 I)`` draw.
        z_init: explicit initial state at ``sigma_max`` (overrides the draw).

    Returns:
        Final latent at sigma = 0.
    """
    sigmas = noise_schedule(cfg)
    if z_init is None:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        z = cfg.sigma_max * rng.standard_normal(shape)
    else:
        z = np.array(z_init, dtype=np.float64)
    for s_cur, s_next in zip(sigmas[:-1], sigmas[1:]):
        d_cur = (z - denoiser(z, s_cur)) / s_cur
        z_next = z + (s_next - s_cur) * d_cur
        if s_next > 0:
            d_next = (z_next - denoiser(z_next, s_next)) / s_next
            z_next = z + (s_next - s_cur) * 0.5 * (d_cur + d_next)
        if not np.all(np.isfinite(z_next)):
            raise NonFiniteStateError(f"non-finite latent while stepping sigma {s_cur:.4g} -> {s_next:.4g}")
        z = z_next
    return z


@dataclass(frozen=True)
class GaussianMixture:
    """Diagonal-covariance mixture; ``means`` and ``variances`` are ``(K, d)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if w.ndim != 1 or len(w) != len(mu) or mu.shape != var.shape:
            raise ValueError("weights (K,), means (K, d) and variances (K, d) must agree")
        if (w < 0).any() or not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if not (var > 0).all():
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng=None) -> np.ndarray:
        rng = check_random_state(rng) if not isinstance(rng, np.random.Generator) else rng
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal((n, self.dim))


def gm_denoiser(mix: GaussianMixture, z, sigma: float) -> np.ndarray:
    """Exact posterior mean ``E[x | x + sigma * n = z]`` for mixture data."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    z = np.asarray(z, dtype=np.float64)
    flat = z.reshape(-1, mix.dim)
    var = mix.variances[None] + sigma ** 2  # (1, K, d)
    diff = flat[:, None, :] - mix.means[None]  # (n, K, d)
    log_p = (np.log(mix.weights)[None]
             - 0.5 * np.sum(diff ** 2 / var + np.log(2 * np.pi * var), axis=-1))
    resp = np.exp(log_p - logsumexp(log_p, axis=1, keepdims=True))
    post = mix.means[None] + mix.variances[None] / var * diff
    return np.einsum("nk,nkd->nd", resp, post).reshape(z.shape)


def sigma_features(sigma) -> np.ndarray:
    """Noise-level embedding: ``log(sigma)/4`` plus its sin/cos at a few frequencies."""
    c = np.log(np.asarray(sigma, dtype=np.float64)).reshape(-1, 1) / 4.0
    f = np.asarray(SIGMA_FREQS)[None, :]
    return np.concatenate([c, np.sin(f * c), np.cos(f * c)], axis=1)


class LatentDiffusion(BaseEstimator):
    """Map-conditioned diffusion over a frozen :class:`SceneAutoencoder`'s latents.

    ``fit`` trains only the denoiser; the autoencoder is never modified.
    ``sample`` draws new scenes for the maps of the given scenes.
    """

    def __init__(self, autoencoder=None, p_mean=-0.5, p_std=1.0, sigma_data=0.5,
                 sigma_min=0.002, sigma_max=80.0, rho=7.0, num_steps=100, beta_y=0.2,
                 hidden=(512, 512), activation="silu", learning_rate=3e-4, weight_decay=1e-5,
                 lr_decay_steps=None, n_steps=1000, batch_size=32, decoded_batch=8,
                 p_min=0.9, random_state=0, warm_start=False, log_every=0):
        self.autoencoder = autoencoder
        self.p_mean = p_mean
        self.p_std = p_std
        self.sigma_data = sigma_data
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.rho = rho
        self.num_steps = num_steps
        self.beta_y = beta_y
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_decay_steps = lr_decay_steps
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.decoded_batch = decoded_batch
        self.p_min = p_min
        self.random_state = random_state
        self.warm_start = warm_start
        self.log_every = log_every

    @property
    def config(self) -> EDMConfig:
        return EDMConfig(self.p_mean, self.p_std, self.sigma_data, self.sigma_min,
                         self.sigma_max, self.rho, self.num_steps, self.beta_y)

    def _check_params(self):
        self.config
        check_hyperparams(self, positive=("learning_rate",), non_negative=("weight_decay",),
                          counts=("n_steps", "batch_size", "decoded_batch"))
        if not 0.0 < self.p_min < 1.0:
            raise ValueError("p_min must lie in (0, 1)")

    def _ae(self):
        if self.autoencoder is None:
            raise ValueError("LatentDiffusion needs a fitted autoencoder")
        check_fitted(self.autoencoder, "decoder_params_")
        return self.autoencoder

    def _build(self, latent_means, latent_stds=None):
        ae = self._ae()
        self._check_params()
        d = ae.latent_dim
        n_in = d + ae.map_feature_dim + 1 + 2 * len(SIGMA_FREQS)
        self.net_spec_ = nn.NetSpec((n_in, *self.hidden, d), self.activation)
        rng = np.random.default_rng(self.random_state)
        self.params_ = nn.init_params(self.net_spec_, rng)
        self.params_[-2] *= 0.1
        self.optimizer_ = nn.Adam(self.params_, self.learning_rate, self.weight_decay, decoupled=True)
        # rescale posterior samples so their spread matches sigma_data
        var = float(np.var(latent_means))
        if latent_stds is not None:
            var += float(np.mean(np.square(latent_stds)))
        spread = math.sqrt(var)
        self.latent_scale_ = self.sigma_data / spread if spread > 0 else 1.0
        self.rng_ = rng
        self.n_steps_done_ = 0
        self.loss_log_ = []

    def raw_forward(self, z_in, map_feats, sigma):
        """Raw network on already ``c_in``-scaled latents; returns ``(out, tape)``."""
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(z_in),))
        x = np.concatenate([z_in, map_feats, sigma_features(sigma)], axis=1)
        return nn.forward(self.net_spec_, self.params_, x)

    def denoise(self, z, map_feats, sigma):
        """Denoised estimate for scaled latents ``(B, D)``."""
        check_fitted(self, "params_")
        return denoise_estimate(lambda zi, s: self.raw_forward(zi, map_feats, s)[0], z, sigma,
                                self.sigma_data)

    def _decoder_closure(self, map_feats_batch):
        ae = self._ae()
        scale = self.latent_scale_

        def decode(denoised):
            inp = np.concatenate([denoised / scale, map_feats_batch], axis=1)
            out, tape = nn.forward(ae.decoder_spec_, ae.decoder_params_, inp)
            grids = [BoxGrid(o.reshape(7, ae.grid_size, ae.grid_size), ae.grid_spec) for o in out]

            def backprop(grid_grads):
                up = np.stack([g.reshape(-1) for g in grid_grads])
                _, d_in = nn.backward(ae.decoder_spec_, ae.decoder_params_, tape, up)
                return d_in[:, :ae.latent_dim] / scale

            return grids, backprop

        return decode

    def batch_loss(self, z_clean, map_feats, sigma, noise, gt_lists=None):
        """Loss and parameter gradients for scaled clean latents ``(B, D)``."""
        c_in, _, _, _ = edm_coeffs(sigma, self.sigma_data)
        z_noisy = z_clean + sigma[:, None] * noise
        raw, tape = self.raw_forward(c_in[:, None] * z_noisy, map_feats, sigma)
        if not np.isfinite(raw).all():
            raise DivergenceError("denoiser produced non-finite outputs")
        decode = self._decoder_closure(map_feats) if self.beta_y > 0 else None
        loss, d_raw, parts = diffusion_loss(raw, z_clean, z_noisy, sigma, self.sigma_data,
                                            self.beta_y, decode, gt_lists,
                                            self._ae()._weights())
        grads, _ = nn.backward(self.net_spec_, self.params_, tape, d_raw, need_input_grad=False)
        return loss, grads, parts

    def fit(self, scenes, y=None):
        scenes = check_scenes(scenes)
        ae = self._ae()
        mean, std = ae.encode(ae.agent_rasters(scenes))
        mean, std = mean.reshape(len(scenes), -1), std.reshape(len(scenes), -1)
        if not (self.warm_start and hasattr(self, "params_")):
            self._build(mean, std)
        self.optimizer_.weight_decay = self.weight_decay
        self.model_tag_ = "+".join(sorted({s.region_tag for s in scenes}))
        feats = ae.map_features(scenes)
        gts = [list(s.agents) for s in scenes]
        n = len(scenes)
        for _ in range(self.n_steps):
            idx = self.rng_.integers(0, n, size=self.batch_size)
            post = self.rng_.standard_normal((len(idx), mean.shape[1]))
            z_clean = self.latent_scale_ * (mean[idx] + std[idx] * post)
            sigma = sample_sigma(self.rng_, self.p_mean, self.p_std, size=len(idx))
            noise = self.rng_.standard_normal(z_clean.shape)
            self.optimizer_.lr = cosine_lr(self.learning_rate, self.n_steps_done_, self.lr_decay_steps)
            loss, grads, parts = self._step_loss(z_clean, feats[idx], sigma, noise,
                                                 [gts[i] for i in idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite diffusion loss at step {self.n_steps_done_}")
            self.optimizer_.step(self.params_, grads)
            self.loss_log_.append((self.n_steps_done_, parts["l_z"], parts["l_y"], loss))
            if self.log_every and self.n_steps_done_ % self.log_every == 0:
                logger.info("diff step %d l_z %.4f l_y %.4f", self.n_steps_done_, parts["l_z"], parts["l_y"])
            self.n_steps_done_ += 1
        return self

    def _step_loss(self, z_clean, feats, sigma, noise, gt_lists):
        """Full-batch latent loss; decoded loss on the first ``decoded_batch`` examples."""
        if self.beta_y == 0 or self.decoded_batch >= len(z_clean):
            return self.batch_loss(z_clean, feats, sigma, noise, gt_lists)
        k = self.decoded_batch
        c_in, _, _, _ = edm_coeffs(sigma, self.sigma_data)
        z_noisy = z_clean + sigma[:, None] * noise
        raw, tape = self.raw_forward(c_in[:, None] * z_noisy, feats, sigma)
        _, d_raw, parts = diffusion_loss(raw, z_clean, z_noisy, sigma, self.sigma_data)
        _, d_dec, parts_y = diffusion_loss(raw[:k], z_clean[:k], z_noisy[:k], sigma[:k],
                                           self.sigma_data, self.beta_y,
                                           self._decoder_closure(feats[:k]), gt_lists[:k],
                                           self._ae()._weights())
        # the second call repeats L_z on the decoded subset; keep only its L_y part
        _, d_lz_sub = latent_loss(raw[:k], z_clean[:k], z_noisy[:k], sigma[:k], self.sigma_data)
        d_raw[:k] += d_dec - d_lz_sub / k
        grads, _ = nn.backward(self.net_spec_, self.params_, tape, d_raw, need_input_grad=False)
        l_y = parts_y["l_y"]
        return parts["l_z"] + self.beta_y * l_y, grads, {"l_z": parts["l_z"], "l_y": l_y}

    def sample_latents(self, maps, random_state=None, z_init=None) -> np.ndarray:
        """Draw scaled-back latents ``(B, C', H', W')`` for the given maps."""
        check_fitted(self, "params_")
        ae = self._ae()
        feats = ae.map_features(maps)
        d = ae.latent_dim
        if z_init is None:
            rng = check_random_state(random_state) if not isinstance(random_state, np.random.Generator) \
                else random_state
            z_init = self.sigma_max * rng.standard_normal((len(feats), d))
        z = ode_sample(lambda zz, s: self.denoise(zz, feats, s), self.config, z_init=z_init)
        return (z / self.latent_scale_).reshape(len(feats), *ae.latent_shape)

    def sample(self, scenes, seeds=None):
        """Generate one scene per input scene, reusing its map.

        Args:
            scenes: scenes whose maps condition the generation.
            seeds: one integer seed per scene for its initial noise draw.

        Returns:
            New :class:`Scene` objects with generated agents.
        """
        scenes = check_scenes(scenes)
        ae = self._ae()
        seeds = list(range(len(scenes))) if seeds is None else list(seeds)
        if len(seeds) != len(scenes):
            raise ValueError("need one seed per scene")
        z_init = np.stack([self.sigma_max * np.random.default_rng(s).standard_normal(ae.latent_dim)
                           for s in seeds])
        latents = self.sample_latents(scenes, z_init=z_init)
        grids = ae.decode(latents, scenes)
        out = []
        for scene, grid, seed in zip(scenes, ae.box_grids(grids), seeds):
            boxes = threshold_boxes(grid, self.p_min, warn=logger.warning)
            out.append(Scene(scene.road_map, tuple(boxes), scene.region_tag, int(seed),
                             scene.template, scene.density, scene.scene_id,
                             getattr(self, "model_tag_", "")))
        return out
