"""Tabular-conditioned image synthesis.

A condition encoder maps a travel-behavior vector plus a Gaussian latent to
a style vector w.  A style-modulated convolutional generator grows a learned
4x4 seed map through upsample/conv/noise/AdaIN blocks to the target
resolution.  A fused discriminator scores image/condition pairs: a strided
conv stack (with a minibatch-σ channel) and a tabular MLP are projected to a
shared fusion space and added before the sigmoid head.

Training alternates non-saturating adversarial steps.  Gradient-norm
regularizers (R1, interpolation gradient penalty, path-length) need
second-order derivatives the tensor engine does not record, so their nodes
carry the exact analytic penalty value forward while the backward pass uses
a detached-direction central-difference surrogate: for a penalty P(g) of an
input-gradient g = dS/dI, the parameter gradient dP/dθ equals the θ-gradient
of the directional derivative of S along d = ∂P/∂g, which two perturbed
forward passes approximate without a second backward sweep.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import CompatibilityError, load_checkpoint, save_checkpoint
from .forecaster import AdamState
from .seeds import stream
from .tensor import ShapeMismatch, Tensor

EPS = 1e-8
REGULARIZER_KINDS = ("r1", "wgan_gp")
LATENT_CHOICES = (128, 256, 512)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 128          # style/latent width; sweep set is 128/256/512
    image_size: int = 32           # output resolution, must be 4 * 2**k
    channels: int = 3
    condition_dim: int = 5
    base_channels: int = 64        # seed-map width; halves per block, floor 16
    fusion_dim: int = 256          # shared image/tabular feature width
    tab_hidden: int = 128
    lr_g: float = 8e-5
    lr_d: float = 3e-5
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 16
    iterations: int = 2000
    regularizer_kind: str = "r1"   # "r1" or "wgan_gp"
    gp_lambda: float = 10.0
    r1_gamma: float = 10.0
    r1_interval: int = 16
    path_length_weight: float = 2.0
    path_length_interval: int = 8
    path_length_decay: float = 0.99
    fd_eps: float = 1e-3           # step for the second-order surrogates
    snapshot_interval: int = 500

    def __post_init__(self):
        for name in ("latent_dim", "image_size", "channels", "condition_dim",
                     "base_channels", "fusion_dim", "tab_hidden", "batch_size",
                     "r1_interval", "path_length_interval", "snapshot_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"GanConfig.{name} must be positive")
        if self.iterations < 0:
            raise ValueError("GanConfig.iterations must be >= 0")
        k = math.log2(self.image_size / 4)
        if self.image_size < 8 or k != int(k):
            raise ValueError("GanConfig.image_size must be 4 * 2**k with k >= 1")
        if self.regularizer_kind not in REGULARIZER_KINDS:
            raise ValueError(
                f"GanConfig.regularizer_kind must be one of {REGULARIZER_KINDS}")
        if not 0.0 <= self.path_length_decay < 1.0:
            raise ValueError("GanConfig.path_length_decay must be in [0, 1)")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.image_size / 4))

    def generator_channels(self) -> list:
        """Output width of each generator block: halve per block, floor 16."""
        return [max(self.base_channels // (2 ** i), 16)
                for i in range(self.n_blocks)]

    def discriminator_channels(self) -> list:
        """Width of each stride-2 stage (one per halving down to 4x4)."""
        return [min(16 * (2 ** i), 64) for i in range(self.n_blocks)]


# ---------------------------------------------------------------------------
# model container


@dataclass
class GanModel:
    cfg: GanConfig
    params: dict  # name -> Tensor

    @classmethod
    def initialise(cls, cfg: GanConfig, rng: np.random.Generator) -> "GanModel":
        p = {}
        lat, cond = cfg.latent_dim, cfg.condition_dim

        # condition encoder: [x, z] -> latent -> latent
        p["enc.w1"] = T.parameter((cond + lat, lat), rng, fan_in=cond + lat)
        p["enc.b1"] = T.parameter(np.zeros(lat))
        p["enc.w2"] = T.parameter((lat, lat), rng, fan_in=lat)
        p["enc.b2"] = T.parameter(np.zeros(lat))

        # generator: learned 4x4 seed map, then per-block conv/noise/AdaIN
        c_prev = cfg.base_channels
        p["gen.const"] = T.parameter(rng.standard_normal((1, c_prev, 4, 4)))
        for i, c_out in enumerate(cfg.generator_channels()):
            p[f"gen.block{i}.conv.w"] = T.parameter(
                (c_out, c_prev, 3, 3), rng, fan_in=c_prev * 9)
            p[f"gen.block{i}.conv.b"] = T.parameter(np.zeros(c_out))
            p[f"gen.block{i}.alpha"] = T.parameter(np.zeros((1, c_out, 1, 1)))
            p[f"gen.block{i}.adain.w"] = T.parameter(
                (lat, 2 * c_out), rng, fan_in=lat)
            # affine bias starts at gamma = 1, beta = 0 (identity restyle)
            p[f"gen.block{i}.adain.b"] = T.parameter(
                np.concatenate([np.ones(c_out), np.zeros(c_out)]))
            c_prev = c_out
        p["gen.rgb.w"] = T.parameter(
            (cfg.channels, c_prev, 1, 1), rng, fan_in=c_prev)
        p["gen.rgb.b"] = T.parameter(np.zeros(cfg.channels))

        # discriminator: strided conv stack + tabular MLP -> fused head
        c_prev = cfg.channels
        for i, c_out in enumerate(cfg.discriminator_channels()):
            p[f"disc.conv{i}.w"] = T.parameter(
                (c_out, c_prev, 3, 3), rng, fan_in=c_prev * 9)
            p[f"disc.conv{i}.b"] = T.parameter(np.zeros(c_out))
            c_prev = c_out
        p["disc.conv_last.w"] = T.parameter(
            (c_prev, c_prev, 3, 3), rng, fan_in=c_prev * 9)
        p["disc.conv_last.b"] = T.parameter(np.zeros(c_prev))
        flat = (c_prev + 1) * 4 * 4  # +1 for the minibatch-σ channel
        p["disc.img.w"] = T.parameter((flat, cfg.fusion_dim), rng, fan_in=flat)
        p["disc.img.b"] = T.parameter(np.zeros(cfg.fusion_dim))
        p["disc.tab.w1"] = T.parameter((cond, cfg.tab_hidden), rng, fan_in=cond)
        p["disc.tab.b1"] = T.parameter(np.zeros(cfg.tab_hidden))
        p["disc.tab.w2"] = T.parameter(
            (cfg.tab_hidden, cfg.fusion_dim), rng, fan_in=cfg.tab_hidden)
        p["disc.tab.b2"] = T.parameter(np.zeros(cfg.fusion_dim))
        p["disc.out.w"] = T.parameter((cfg.fusion_dim, 1), rng, fan_in=cfg.fusion_dim)
        p["disc.out.b"] = T.parameter(np.zeros(1))
        return cls(cfg, p)

    def generator_params(self) -> dict:
        return {k: v for k, v in self.params.items()
                if k.startswith(("enc.", "gen."))}

    def discriminator_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("disc.")}

    def parameters(self) -> list:
        return list(self.params.values())


# ---------------------------------------------------------------------------
# condition encoder and generator


def encode_condition(model: GanModel, x, z) -> Tensor:
    """w = 2-layer relu MLP over [condition, latent]."""
    x = x if isinstance(x, Tensor) else T.constant(np.asarray(x, dtype=float))
    z = z if isinstance(z, Tensor) else T.constant(np.asarray(z, dtype=float))
    cfg = model.cfg
    if x.ndim != 2 or x.shape[1] != cfg.condition_dim:
        raise ShapeMismatch(
            f"encode_condition: expected (B, {cfg.condition_dim}) conditions, "
            f"got {x.shape}")
    if z.ndim != 2 or z.shape[1] != cfg.latent_dim or z.shape[0] != x.shape[0]:
        raise ShapeMismatch(
            f"encode_condition: expected (B, {cfg.latent_dim}) latents aligned "
            f"with conditions, got {z.shape}")
    p = model.params
    h = T.relu(T.matmul(T.concat([x, z], axis=1), p["enc.w1"]) + p["enc.b1"])
    return T.matmul(h, p["enc.w2"]) + p["enc.b2"]


def adain(h: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS) -> Tensor:
    """Per-sample per-channel standardization rescaled by gamma, beta.

    gamma/beta are (B, C); statistics are over the spatial dims of each
    channel, with sigma guarded by eps for constant inputs.
    """
    b, c = gamma.shape
    mu = T.mean(h, axis=(2, 3), keepdims=True)
    sd = T.stddev(h, axis=(2, 3), keepdims=True)
    norm = T.div(T.sub(h, mu), T.add(sd, eps))
    g4 = T.reshape(gamma, (b, c, 1, 1))
    b4 = T.reshape(beta, (b, c, 1, 1))
    return T.add(T.mul(g4, norm), b4)


def noise_inject(h: Tensor, alpha: Tensor, noise: np.ndarray) -> Tensor:
    """h + alpha * N with a per-channel learnable gain alpha (1, C, 1, 1)."""
    if noise.shape != h.shape:
        raise ShapeMismatch(
            f"noise_inject: noise shape {noise.shape} != activation {h.shape}")
    return T.add(h, T.mul(alpha, T.constant(noise)))


def draw_block_noises(cfg: GanConfig, batch: int, rng: np.random.Generator) -> list:
    """One Gaussian field per generator block, in block order."""
    noises = []
    size = 8
    for c_out in cfg.generator_channels():
        noises.append(rng.standard_normal((batch, c_out, size, size)))
        size *= 2
    return noises


def _block_style(model: GanModel, i: int, w: Tensor) -> tuple:
    """AdaIN gamma/beta for block i from the style vector (B, latent)."""
    p = model.params
    gb = T.matmul(w, p[f"gen.block{i}.adain.w"]) + p[f"gen.block{i}.adain.b"]
    c = gb.shape[1] // 2
    return gb[:, :c], gb[:, c:]


def generate_from_w(model: GanModel, w: Tensor, noises: list) -> Tensor:
    """Run the synthesis stack from a style batch with fixed noise fields."""
    cfg = model.cfg
    p = model.params
    batch = w.shape[0]
    if len(noises) != cfg.n_blocks:
        raise ShapeMismatch(
            f"generate_from_w: expected {cfg.n_blocks} noise fields, "
            f"got {len(noises)}")
    # broadcast the learned seed map across the batch inside the graph
    h = T.add(p["gen.const"], T.constant(np.zeros((batch, 1, 1, 1))))
    for i in range(cfg.n_blocks):
        h = T.upsample2x(h)
        h = T.conv2d(h, p[f"gen.block{i}.conv.w"], p[f"gen.block{i}.conv.b"],
                     stride=1, padding=1)
        h = noise_inject(h, p[f"gen.block{i}.alpha"], noises[i])
        h = T.leaky_relu(h, 0.2)
        gamma, beta = _block_style(model, i, w)
        h = adain(h, gamma, beta)
    h = T.conv2d(h, p["gen.rgb.w"], p["gen.rgb.b"], stride=1, padding=0)
    return T.tanh(h)


def generate(model: GanModel, x, z, noise_rng: np.random.Generator) -> Tensor:
    """Images (B, C, S, S) in [-1, 1] for condition batch x and latents z."""
    w = encode_condition(model, x, z)
    noises = draw_block_noises(model.cfg, w.shape[0], noise_rng)
    return generate_from_w(model, w, noises)


# ---------------------------------------------------------------------------
# discriminator


def minibatch_std(h: Tensor) -> Tensor:
    """Append one channel: mean over (C, H, W) of per-position batch std.

    A batch of identical images appends exact zeros (the std primitive's
    forward is exact), as does a single-sample batch.
    """
    b = h.shape[0]
    sd = T.stddev(h, axis=0)            # (C, H, W), population std
    s = T.mean(sd)                      # scalar
    ones = T.constant(np.ones((b, 1) + tuple(h.shape[2:])))
    return T.concat([h, T.mul(ones, s)], axis=1)


def score(model: GanModel, images, x) -> Tensor:
    """Pre-sigmoid realism score (B, 1) for image/condition pairs."""
    images = images if isinstance(images, Tensor) else \
        T.constant(np.asarray(images, dtype=float))
    x = x if isinstance(x, Tensor) else T.constant(np.asarray(x, dtype=float))
    cfg = model.cfg
    if images.ndim != 4 or images.shape[1] != cfg.channels \
            or images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
        raise ShapeMismatch(
            f"score: expected (B, {cfg.channels}, {cfg.image_size}, "
            f"{cfg.image_size}) images, got {images.shape}")
    if x.ndim != 2 or x.shape[1] != cfg.condition_dim or x.shape[0] != images.shape[0]:
        raise ShapeMismatch(
            f"score: expected (B, {cfg.condition_dim}) conditions aligned with "
            f"images, got {x.shape}")
    p = model.params
    h = images
    for i in range(len(cfg.discriminator_channels())):
        h = T.conv2d(h, p[f"disc.conv{i}.w"], p[f"disc.conv{i}.b"],
                     stride=2, padding=1)
        h = T.leaky_relu(h, 0.2)
    h = T.conv2d(h, p["disc.conv_last.w"], p["disc.conv_last.b"],
                 stride=1, padding=1)
    h = T.leaky_relu(h, 0.2)
    h = minibatch_std(h)
    flat = T.reshape(h, (h.shape[0], -1))
    f_img = T.matmul(flat, p["disc.img.w"]) + p["disc.img.b"]
    t = T.leaky_relu(T.matmul(x, p["disc.tab.w1"]) + p["disc.tab.b1"], 0.2)
    f_tab = T.matmul(t, p["disc.tab.w2"]) + p["disc.tab.b2"]
    fused = T.leaky_relu(T.add(f_img, f_tab), 0.2)
    return T.matmul(fused, p["disc.out.w"]) + p["disc.out.b"]


def discriminate(model: GanModel, images, x) -> Tensor:
    """Probability in (0, 1) that each image is real given its condition."""
    return T.sigmoid(score(model, images, x))


# ---------------------------------------------------------------------------
# adversarial losses


def _log_floor(t: Tensor) -> Tensor:
    """log(max(t, EPS)): clamps below so the value never crosses log 1 = 0."""
    return T.log(T.add(T.relu(T.sub(t, EPS)), EPS))


def loss_discriminator(model: GanModel, real, fake, x) -> Tensor:
    """Value of E[log D(real, x)] + E[log(1 - D(fake, x))].

    This is the objective the discriminator maximizes; a training step
    minimizes its negation.  Fake images are treated as constants, so no
    gradient reaches the generator.  At D = 0.5 everywhere the value is
    2 log 0.5 per pair; a perfectly confident correct D approaches 0 from
    below.
    """
    fake = fake.data if isinstance(fake, Tensor) else np.asarray(fake, dtype=float)
    d_real = discriminate(model, real, x)
    d_fake = discriminate(model, T.constant(fake), x)
    term_real = T.mean(_log_floor(d_real))
    term_fake = T.mean(_log_floor(T.sub(1.0, d_fake)))
    return T.add(term_real, term_fake)


def loss_generator(model: GanModel, x, z, noises: list) -> Tensor:
    """Non-saturating generator loss -E[log D(G(w), x)], in-graph fakes."""
    w = encode_condition(model, x, z)
    fake = generate_from_w(model, w, noises)
    d_fake = discriminate(model, fake, x)
    return T.mul(T.mean(_log_floor(d_fake)), -1.0)


# ---------------------------------------------------------------------------
# gradient-norm regularizers (second-order surrogates)


class _flagged_off:
    """Temporarily clear requires_grad on a set of parameters."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.saved):
            p.requires_grad = flag


def score_input_gradient(model: GanModel, images: np.ndarray, x,
                         score_fn=None) -> np.ndarray:
    """d(sum of scores)/d(images), leaving parameter grad buffers untouched."""
    score_fn = score_fn or score
    img = Tensor(np.asarray(images, dtype=float), requires_grad=True)
    with _flagged_off(model.parameters()):
        total = T.sum_(score_fn(model, img, x))
        T.backward(total)
    return img.grad


def _surrogate_penalty(value: float, direction: np.ndarray,
                       eval_score, base: np.ndarray, fd_eps: float) -> Tensor:
    """Graph node: forward = value, backward = FD directional surrogate.

    direction = dP/dg for penalty P of input-gradient g.  dP/dθ is the
    θ-gradient of the directional derivative of the score sum along
    direction, approximated by two perturbed in-graph forward passes.
    """
    d_norm = float(np.sqrt((direction * direction).sum()))
    if d_norm < 1e-12:
        return T.constant(np.asarray(value))
    unit = direction / d_norm
    s_plus = eval_score(base + fd_eps * unit)
    s_minus = eval_score(base - fd_eps * unit)
    surr = T.mul(T.sub(s_plus, s_minus), d_norm / (2.0 * fd_eps))
    # forward: exact analytic value; backward: d(surr)/dθ
    return T.add(T.constant(np.asarray(value - float(surr.data))), surr)


def gradient_penalty(model: GanModel, real, fake, x, lam: float,
                     u_rng: np.random.Generator, fd_eps: float = 1e-3,
                     score_fn=None) -> Tensor:
    """λ E[(‖∇_Î S(Î, x)‖₂ − 1)²] on per-sample real/fake interpolates.

    S is the pre-sigmoid score (the sigmoid saturates the unit-norm target
    away).  The forward value is computed from exact analytic input
    gradients; parameter gradients come from the FD surrogate.  score_fn
    overrides the model's score, mainly for hand-built oracles in tests.
    """
    score_fn = score_fn or score
    real = np.asarray(real, dtype=float)
    fake = fake.data if isinstance(fake, Tensor) else np.asarray(fake, dtype=float)
    b = real.shape[0]
    u = u_rng.uniform(size=(b, 1, 1, 1))
    inter = u * real + (1.0 - u) * fake

    g = score_input_gradient(model, inter, x, score_fn)
    norms = np.sqrt((g * g).sum(axis=(1, 2, 3)))
    value = lam * float(np.mean((norms - 1.0) ** 2))
    # dP/dg_i = 2λ (n_i − 1) / B * g_i / n_i
    coef = 2.0 * lam * (norms - 1.0) / (b * np.maximum(norms, 1e-12))
    direction = coef[:, None, None, None] * g

    def eval_score(imgs):
        return T.sum_(score_fn(model, T.constant(imgs), x))

    return _surrogate_penalty(value, direction, eval_score, inter, fd_eps)


def r1_penalty(model: GanModel, real, x, gamma: float = 10.0,
               fd_eps: float = 1e-3, score_fn=None) -> Tensor:
    """(γ/2) E[‖∇_I S(I_real, x)‖²], same surrogate scheme as the GP."""
    score_fn = score_fn or score
    real = np.asarray(real, dtype=float)
    b = real.shape[0]
    g = score_input_gradient(model, real, x, score_fn)
    sq_norms = (g * g).sum(axis=(1, 2, 3))
    value = 0.5 * gamma * float(np.mean(sq_norms))
    direction = (gamma / b) * g

    def eval_score(imgs):
        return T.sum_(score_fn(model, T.constant(imgs), x))

    return _surrogate_penalty(value, direction, eval_score, real, fd_eps)


@dataclass
class PathLengthState:
    """Exponential running mean of observed path lengths."""
    ema: float = 0.0
    decay: float = 0.99

    def update(self, batch_mean: float) -> float:
        self.ema = self.decay * self.ema + (1.0 - self.decay) * batch_mean
        return self.ema


def path_length_reg(model: GanModel, w: Tensor, noises: list,
                    state: PathLengthState, weight: float = 2.0,
                    dir_rng: np.random.Generator | None = None,
                    fd_eps: float = 1e-3) -> Tensor:
    """weight · E[(‖J_wᵀ y‖ − ema)²] for unit image-space directions y.

    The running mean is updated with the batch mean first, then the batch is
    penalized against the updated mean.  Gradients flow into the generator
    parameters and, through w, into the condition encoder.
    """
    dir_rng = dir_rng or np.random.default_rng(0)
    b = w.shape[0]
    cfg = model.cfg

    y = dir_rng.standard_normal((b, cfg.channels, cfg.image_size, cfg.image_size))
    y /= np.maximum(np.sqrt((y * y).sum(axis=(1, 2, 3), keepdims=True)), 1e-12)

    # g_i = ∇_{w_i} Σ_j <y_j, G(w)_j>  (rows of Jᵀ y)
    w_leaf = Tensor(w.data.copy(), requires_grad=True)
    with _flagged_off(model.parameters()):
        dot = T.sum_(T.mul(generate_from_w(model, w_leaf, noises), T.constant(y)))
        T.backward(dot)
    g = w_leaf.grad
    lengths = np.sqrt((g * g).sum(axis=1))
    ema = state.update(float(np.mean(lengths)))
    value = weight * float(np.mean((lengths - ema) ** 2))
    coef = 2.0 * weight * (lengths - ema) / (b * np.maximum(lengths, 1e-12))
    direction = coef[:, None] * g

    def eval_dot(w_shifted):
        # keep w in the graph so the encoder also receives gradient
        delta = T.constant(w_shifted - w.data)
        fake = generate_from_w(model, T.add(w, delta), noises)
        return T.sum_(T.mul(fake, T.constant(y)))

    return _surrogate_penalty(value, direction, eval_dot, w.data, fd_eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class GanTrainLog:
    entries: list = field(default_factory=list)
    diverged_at: int = -1  # iteration of the abort, -1 if training completed
    pl_ema: float = 0.0


def _snapshot(model: GanModel) -> dict:
    return {k: p.data.copy() for k, p in model.params.items()}


def _restore(model: GanModel, snap: dict) -> None:
    for k, p in model.params.items():
        p.data = snap[k].copy()


def train_gan(images: np.ndarray, conditions: np.ndarray, cfg: GanConfig,
              seed: int, snapshot_dir=None, condition_stats=None) -> tuple:
    """Alternate D/G Adam steps over an image/condition corpus.

    images: (N, C, S, S) in [-1, 1]; conditions: (N, condition_dim),
    standardized.  condition_stats ({"mu", "sigma"}) is embedded in snapshot
    checkpoints; identity stats are assumed when omitted.  Returns
    (model, GanTrainLog).  A non-finite loss aborts the run and restores the
    last finite parameter snapshot.
    """
    images = np.asarray(images, dtype=float)
    conditions = np.asarray(conditions, dtype=float)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeMismatch(f"train_gan: expected (N, C, S, S) images, "
                            f"got {images.shape}")
    if conditions.shape != (images.shape[0], cfg.condition_dim):
        raise ShapeMismatch(
            f"train_gan: conditions {conditions.shape} do not pair with "
            f"{images.shape[0]} images of dim {cfg.condition_dim}")
    if images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeMismatch(
            f"train_gan: images {images.shape[1:]} do not match configured "
            f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")

    init_rng = stream(seed, "init")
    shuffle_rng = stream(seed, "shuffle")
    noise_rng = stream(seed, "noise")
    preview_rng = stream(seed, "preview")

    model = GanModel.initialise(cfg, init_rng)
    adam_d = AdamState(model.discriminator_params(),
                       cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam_g = AdamState(model.generator_params(),
                       cfg.beta1, cfg.beta2, cfg.adam_eps)
    pl_state = PathLengthState(decay=cfg.path_length_decay)
    log = GanTrainLog()
    n = images.shape[0]

    n_preview = min(16, n)
    preview_z = preview_rng.standard_normal((n_preview, cfg.latent_dim))
    preview_x = conditions[:n_preview]
    preview_noises = draw_block_noises(cfg, n_preview, preview_rng)

    last_good = _snapshot(model)
    gen_params = model.generator_params()
    disc_params = model.discriminator_params()

    for it in range(cfg.iterations):
        tic = time.perf_counter()
        idx = shuffle_rng.integers(0, n, size=cfg.batch_size)
        real = images[idx]
        x = conditions[idx]
        z = noise_rng.standard_normal((cfg.batch_size, cfg.latent_dim))
        d_noises = draw_block_noises(cfg, cfg.batch_size, noise_rng)

        # ---- discriminator step (fakes detached: G never sees gradient)
        with T.no_grad():
            w_d = encode_condition(model, x, z)
            fake = generate_from_w(model, w_d, d_noises).data
        T.zero_grads(model.parameters())
        objective = loss_discriminator(model, real, fake, x)
        loss_d = T.mul(objective, -1.0)
        reg_d_val = 0.0
        if cfg.regularizer_kind == "wgan_gp":
            reg = gradient_penalty(model, real, fake, x, cfg.gp_lambda,
                                   noise_rng, cfg.fd_eps)
            loss_d = T.add(loss_d, reg)
            reg_d_val = float(reg.data)
        elif it % cfg.r1_interval == 0:
            reg = r1_penalty(model, real, x, cfg.r1_gamma, cfg.fd_eps)
            loss_d = T.add(loss_d, reg)
            reg_d_val = float(reg.data)
        if not np.isfinite(loss_d.data):
            _restore(model, last_good)
            log.diverged_at = it
            break
        T.backward(loss_d)
        adam_d.step(disc_params, cfg.lr_d)

        # ---- generator step (D parameters frozen: no gradient enters D)
        z_g = noise_rng.standard_normal((cfg.batch_size, cfg.latent_dim))
        g_noises = draw_block_noises(cfg, cfg.batch_size, noise_rng)
        T.zero_grads(model.parameters())
        reg_g_val = 0.0
        with _flagged_off(disc_params.values()):
            loss_g = loss_generator(model, x, z_g, g_noises)
            if it % cfg.path_length_interval == 0:
                w_g = encode_condition(model, x, z_g)
                reg = path_length_reg(model, w_g, g_noises, pl_state,
                                      cfg.path_length_weight, noise_rng,
                                      cfg.fd_eps)
                loss_g = T.add(loss_g, reg)
                reg_g_val = float(reg.data)
            if not np.isfinite(loss_g.data):
                g_diverged = True
            else:
                g_diverged = False
                T.backward(loss_g)
                adam_g.step(gen_params, cfg.lr_g)
        if g_diverged:
            _restore(model, last_good)
            log.diverged_at = it
            break
        last_good = _snapshot(model)

        with T.no_grad():
            d_real_mean = float(discriminate(model, real, x).data.mean())
            d_fake_mean = float(discriminate(model, fake, x).data.mean())
        log.entries.append({
            "iteration": it,
            "loss_d": float(loss_d.data),
            "loss_g": float(loss_g.data),
            "reg_d": reg_d_val,
            "reg_g": reg_g_val,
            "d_real": d_real_mean,
            "d_fake": d_fake_mean,
            "wall_time": time.perf_counter() - tic,
        })

        if snapshot_dir is not None and (it + 1) % cfg.snapshot_interval == 0:
            _write_snapshot(snapshot_dir, model, preview_x, preview_z,
                            preview_noises, it + 1, condition_stats)

    log.pl_ema = pl_state.ema
    return model, log


def _write_snapshot(snapshot_dir, model, x, z, noises, iteration,
                    condition_stats) -> None:
    from pathlib import Path

    from .imagedir import save_image_grid
    out = Path(snapshot_dir)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        w = encode_condition(model, x, z)
        fake = generate_from_w(model, w, noises).data
    save_image_grid(out / f"samples_{iteration:06d}.png", fake)
    if condition_stats is None:
        dim = model.cfg.condition_dim
        condition_stats = {"mu": np.zeros(dim), "sigma": np.ones(dim)}
    save_gan(out / f"ckpt_{iteration:06d}.umck", model, condition_stats)


# ---------------------------------------------------------------------------
# persistence


def save_gan(path, model: GanModel, condition_stats: dict) -> None:
    """Checkpoint parameters plus the condition standardization stats.

    condition_stats: {"mu", "sigma"} arrays and optionally "features", the
    ordered condition column names generation inputs must match.
    """
    meta = {
        "kind": "spatialgen",
        "config": asdict(model.cfg),
        "param_names": list(model.params),
        "condition_features": list(condition_stats.get("features") or []),
    }
    tensors = dict((f"param.{k}", p.data) for k, p in model.params.items())
    tensors["scaler.condition_mu"] = np.asarray(condition_stats["mu"], dtype=float)
    tensors["scaler.condition_sigma"] = np.asarray(
        condition_stats["sigma"], dtype=float)
    save_checkpoint(path, tensors, meta)


def load_gan(path):
    """Returns (model, metadata incl. condition scaler arrays)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "spatialgen":
        raise CompatibilityError(f"{path}: not a spatial-generator checkpoint")
    cfg = GanConfig(**meta["config"])
    params = {}
    for name in meta["param_names"]:
        key = f"param.{name}"
        if key not in tensors:
            raise CompatibilityError(f"{path}: missing tensor {key}")
        params[name] = Tensor(tensors[key], requires_grad=True)
    model = GanModel(cfg, params)
    meta = dict(meta)
    meta["scaler"] = {
        "mu": tensors["scaler.condition_mu"],
        "sigma": tensors["scaler.condition_sigma"],
        "features": meta.get("condition_features") or [],
    }
    return model, meta
